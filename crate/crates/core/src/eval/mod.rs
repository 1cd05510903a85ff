//! Dice scoring, patient-wise folds, pathology significance tests and summary tables.

pub mod plots;
pub mod stats;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use stats::{benjamini_hochberg, welch_t_test};

pub use crate::data::ModalityFilter;
use crate::data::{Modality, Pathology, PatientRecord, Structure};
use crate::error::{Error, Result};
use crate::networks::ModelKind;

/// `2|A∩B| / (|A| + |B|)` for one class; 1 when the class is absent from both.
pub fn dice_score(pred: &[u8], truth: &[u8], class_id: u8) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::shape(&[truth.len()], &[pred.len()]));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (pp, tt) = (p == class_id, t == class_id);
        a += pp as usize;
        b += tt as usize;
        inter += (pp && tt) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Dice per foreground structure.
pub fn structure_dice(pred: &[u8], truth: &[u8]) -> Result<BTreeMap<Structure, f64>> {
    Structure::ALL
        .iter()
        .map(|&s| Ok((s, dice_score(pred, truth, s.class_id())?)))
        .collect()
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Patient-wise k-fold split. Oblique patients never validate and train in every split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub seed: u64,
    /// Validation membership of each fold.
    pub folds: Vec<Vec<String>>,
    /// Patients kept on the training side of every split.
    pub train_only: Vec<String>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.iter().any(|p| p == patient_id))
    }

    pub fn validation(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    pub fn training(&self, fold: usize) -> Vec<String> {
        let mut ids: Vec<String> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .chain(self.train_only.iter().cloned())
            .collect();
        ids.sort();
        ids
    }

    /// Patient id to fold index, for [`crate::data::Dataset::assign_folds`].
    pub fn assignment(&self) -> BTreeMap<String, usize> {
        self.folds
            .iter()
            .enumerate()
            .flat_map(|(i, f)| f.iter().map(move |p| (p.clone(), i)))
            .collect()
    }
}

/// Seeded shuffle of the non-oblique patients dealt round-robin into `k` folds.
pub fn make_folds(patients: &[PatientRecord], k: usize, seed: u64) -> Result<FoldSplit> {
    let mut eligible: Vec<String> = patients.iter().filter(|p| !p.oblique).map(|p| p.patient_id.clone()).collect();
    eligible.sort();
    eligible.dedup();
    if k < 2 || eligible.len() < k {
        return Err(Error::Config(format!(
            "{k}-fold split needs k >= 2 and at least k eligible patients, got {}",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); k];
    for (i, id) in eligible.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    for f in &mut folds {
        f.sort();
    }
    let mut train_only: Vec<String> = patients.iter().filter(|p| p.oblique).map(|p| p.patient_id.clone()).collect();
    train_only.sort();
    train_only.dedup();
    Ok(FoldSplit { seed, folds, train_only })
}

/// One Dice value for one scan and structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientScore {
    pub patient: String,
    pub modality: Modality,
    pub structure: Structure,
    pub dice: f64,
}

pub fn write_metrics_csv(path: &Path, scores: &[PatientScore]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    w.write_record(["patient", "modality", "structure", "dice"])?;
    for s in scores {
        w.write_record([s.patient.as_str(), s.modality.as_str(), s.structure.as_str(), &format!("{:.6}", s.dice)])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<PatientScore>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for row in r.records() {
        let row = row.map_err(|e| Error::file(path, e))?;
        let field = |i: usize| row.get(i).unwrap_or("").trim();
        let structure = match field(2) {
            "SC" => Structure::Sc,
            "VB" => Structure::Vb,
            "IVD" => Structure::Ivd,
            other => return Err(Error::file(path, format!("unknown structure {other:?}"))),
        };
        out.push(PatientScore {
            patient: field(0).to_string(),
            modality: field(1).parse().map_err(|e| Error::file(path, e))?,
            structure,
            dice: field(3).parse().map_err(|_| Error::file(path, format!("bad dice value {:?}", field(3))))?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatTestResult {
    pub pathology: Pathology,
    pub structure: Structure,
    pub n_with: usize,
    pub n_without: usize,
    pub t: f64,
    pub p_raw: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsConfig {
    pub alpha: f64,
    /// Minimum Pfirrmann grade counted as disc degeneration.
    pub degeneration_grade: u8,
    pub pathologies: Vec<Pathology>,
}

impl Default for StatsConfig {
    fn default() -> Self {
        let mut pathologies = Pathology::FLAGGED.to_vec();
        pathologies.push(Pathology::DiscDegeneration);
        StatsConfig {
            alpha: 0.05,
            degeneration_grade: 4,
            pathologies,
        }
    }
}

/// Per-pair Dice groups kept for plotting.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PathologyReport {
    pub results: Vec<StatTestResult>,
    /// `(pathology, structure, reason)` for pairs that could not be tested.
    pub skipped: Vec<(Pathology, Structure, String)>,
    pub groups: BTreeMap<(Pathology, Structure), (Vec<f64>, Vec<f64>)>,
}

/// Averages each patient's Dice over its scans, per structure.
pub fn patient_means(scores: &[PatientScore]) -> BTreeMap<(String, Structure), f64> {
    let mut acc: BTreeMap<(String, Structure), (f64, usize)> = BTreeMap::new();
    for s in scores {
        let e = acc.entry((s.patient.clone(), s.structure)).or_insert((0.0, 0));
        e.0 += s.dice;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (sum, n))| (k, sum / n as f64)).collect()
}

/// Welch tests of Dice between patients with and without each finding, BH-corrected
/// across the whole (pathology × structure) family.
pub fn pathology_analysis(scores: &[PatientScore], records: &[PatientRecord], cfg: &StatsConfig) -> Result<PathologyReport> {
    let means = patient_means(scores);
    let by_id: BTreeMap<&str, &PatientRecord> = records.iter().map(|r| (r.patient_id.as_str(), r)).collect();
    if let Some(((p, _), _)) = means.iter().find(|((p, _), _)| !by_id.contains_key(p.as_str())) {
        return Err(Error::Missing(format!("scored patient {p} has no metadata record")));
    }
    let mut report = PathologyReport::default();
    for &pathology in &cfg.pathologies {
        for structure in Structure::ALL {
            let (mut with, mut without) = (Vec::new(), Vec::new());
            for ((pid, s), &d) in &means {
                if *s != structure {
                    continue;
                }
                if by_id[pid.as_str()].has(pathology, cfg.degeneration_grade) {
                    with.push(d);
                } else {
                    without.push(d);
                }
            }
            let outcome = if with.len() < 2 || without.len() < 2 {
                Err(format!("group sizes {} and {} (need >= 2 each)", with.len(), without.len()))
            } else {
                welch_t_test(&with, &without).map_err(|e| e.to_string())
            };
            match outcome {
                Ok((t, p)) => report.results.push(StatTestResult {
                    pathology,
                    structure,
                    n_with: with.len(),
                    n_without: without.len(),
                    t,
                    p_raw: p,
                    significant: false,
                }),
                Err(reason) => {
                    log::info!("skipping {pathology}/{structure}: {reason}");
                    report.skipped.push((pathology, structure, reason));
                }
            }
            report.groups.insert((pathology, structure), (with, without));
        }
    }
    let p: Vec<f64> = report.results.iter().map(|r| r.p_raw).collect();
    for (r, flag) in report.results.iter_mut().zip(benjamini_hochberg(&p, cfg.alpha)?) {
        r.significant = flag;
    }
    Ok(report)
}

pub fn write_stats_csv(path: &Path, results: &[StatTestResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    w.write_record(["pathology", "structure", "t", "p_raw", "significant"])?;
    for r in results {
        w.write_record([
            r.pathology.column(),
            r.structure.as_str(),
            &format!("{:.6}", r.t),
            &format!("{:.6e}", r.p_raw),
            if r.significant { "true" } else { "false" },
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One SVG per pathology with a with/without box pair for every structure.
pub fn write_box_plots(dir: &Path, report: &PathologyReport) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut by_pathology: BTreeMap<Pathology, Vec<(Structure, &Vec<f64>, &Vec<f64>)>> = BTreeMap::new();
    for ((p, s), (with, without)) in &report.groups {
        by_pathology.entry(*p).or_default().push((*s, with, without));
    }
    let mut written = Vec::new();
    for (p, entries) in by_pathology {
        if entries.iter().all(|(_, w, _)| w.is_empty()) {
            continue;
        }
        let groups: Vec<plots::BoxGroup> = entries
            .iter()
            .flat_map(|(s, with, without)| {
                [
                    plots::BoxGroup { label: format!("{s} without"), values: without.as_slice() },
                    plots::BoxGroup { label: format!("{s} with"), values: with.as_slice() },
                ]
            })
            .collect();
        let path = dir.join(format!("boxplot_{}.svg", p.column()));
        std::fs::write(&path, plots::box_plot_svg(&format!("Dice by {}", p.column().replace('_', " ")), &groups))?;
        written.push(path);
    }
    Ok(written)
}

/// Dice list of one (model, modality setting, structure) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub model: ModelKind,
    pub modality: ModalityFilter,
    pub structure: Structure,
    pub dice: Vec<f64>,
}

impl MetricsRecord {
    pub fn mean(&self) -> f64 {
        mean_std(&self.dice).0
    }

    pub fn std(&self) -> f64 {
        mean_std(&self.dice).1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableOneRow {
    pub model: ModelKind,
    pub modality: ModalityFilter,
    /// `(mean, std)` per structure present in the cells.
    pub structures: BTreeMap<Structure, (f64, f64)>,
    /// Mean of the structure means.
    pub mdice: f64,
}

/// Mean of per-structure means.
pub fn mdice(structure_means: &[f64]) -> f64 {
    structure_means.iter().sum::<f64>() / structure_means.len() as f64
}

/// Table-1-shaped summary over every requested (model, modality) row; missing cells are errors.
pub fn modality_comparison(
    cells: &[MetricsRecord],
    models: &[ModelKind],
    modalities: &[ModalityFilter],
    structures: &[Structure],
) -> Result<Vec<TableOneRow>> {
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for &model in models {
        for &modality in modalities {
            let mut stats = BTreeMap::new();
            for &s in structures {
                match cells.iter().find(|c| c.model == model && c.modality == modality && c.structure == s) {
                    Some(c) if !c.dice.is_empty() => {
                        stats.insert(s, (c.mean(), c.std()));
                    }
                    _ => missing.push(format!("{}/{}/{}", model.as_str(), modality.as_str(), s)),
                }
            }
            if stats.len() == structures.len() {
                let means: Vec<f64> = stats.values().map(|v| v.0).collect();
                rows.push(TableOneRow { model, modality, mdice: mdice(&means), structures: stats });
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Missing(format!("missing cells: {}", missing.join(", "))));
    }
    Ok(rows)
}

pub fn write_table_one(path: &Path, rows: &[TableOneRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    let structures: Vec<Structure> = rows.first().map(|r| r.structures.keys().copied().collect()).unwrap_or_default();
    let mut header = vec!["model".to_string(), "modality".to_string()];
    for s in &structures {
        header.push(format!("{s}_mean"));
        header.push(format!("{s}_std"));
    }
    header.push("mDICE".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.model.as_str().to_string(), r.modality.as_str().to_string()];
        for s in &structures {
            let (m, sd) = r.structures[s];
            rec.push(format!("{m:.4}"));
            rec.push(format!("{sd:.4}"));
        }
        rec.push(format!("{:.4}", r.mdice));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        assert_eq!(dice_score(&[1, 1, 0], &[1, 1, 0], 1).unwrap(), 1.0);
        assert_eq!(dice_score(&[1, 1, 0, 0], &[0, 0, 1, 1], 1).unwrap(), 0.0);
        assert_eq!(dice_score(&[1, 1, 0, 0], &[0, 1, 1, 0], 1).unwrap(), 0.5);
        assert_eq!(dice_score(&[0, 0], &[0, 0], 2).unwrap(), 1.0);
        assert!(dice_score(&[0], &[0, 0], 1).is_err());
    }

    fn roster(n: usize) -> Vec<PatientRecord> {
        (0..n).map(|i| PatientRecord::new(format!("p{i}"))).collect()
    }

    #[test]
    fn even_folds() {
        let f = make_folds(&roster(10), 5, 1).unwrap();
        assert!(f.folds.iter().all(|g| g.len() == 2));
        assert_eq!(f, make_folds(&roster(10), 5, 1).unwrap());
        assert!(make_folds(&roster(4), 5, 1).is_err());
    }

    #[test]
    fn oblique_patients_only_train() {
        let mut r = roster(6);
        r[2].oblique = true;
        let f = make_folds(&r, 5, 9).unwrap();
        assert_eq!(f.fold_of("p2"), None);
        for k in 0..5 {
            assert!(f.training(k).contains(&"p2".to_string()));
            assert!(!f.validation(k).contains(&"p2".to_string()));
        }
    }

    #[test]
    fn mdice_of_table_row() {
        assert!((mdice(&[0.93, 0.92, 0.90]) - 0.9167).abs() < 1e-4);
        assert_eq!(mdice(&[0.7]), 0.7);
    }

    #[test]
    fn all_negative_cohort_runs_no_tests() {
        let recs = roster(4);
        let scores: Vec<PatientScore> = recs
            .iter()
            .map(|r| PatientScore { patient: r.patient_id.clone(), modality: Modality::T2w, structure: Structure::Sc, dice: 0.9 })
            .collect();
        let cfg = StatsConfig { pathologies: vec![Pathology::Spondylolisthesis], ..Default::default() };
        let rep = pathology_analysis(&scores, &recs, &cfg).unwrap();
        assert!(rep.results.is_empty());
        assert_eq!(rep.skipped.len(), 3);
    }

    #[test]
    fn missing_table_cell_is_reported() {
        let cells = vec![MetricsRecord { model: ModelKind::SpineSegDiff, modality: ModalityFilter::T2w, structure: Structure::Sc, dice: vec![0.9] }];
        let err = modality_comparison(&cells, &[ModelKind::SpineSegDiff], &[ModalityFilter::T2w], &Structure::ALL).unwrap_err();
        assert!(err.to_string().contains("VB"));
        let ok = modality_comparison(&cells, &[ModelKind::SpineSegDiff], &[ModalityFilter::T2w], &[Structure::Sc]).unwrap();
        assert_eq!(ok[0].mdice, 0.9);
    }
}
