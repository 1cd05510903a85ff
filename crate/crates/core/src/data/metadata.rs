//! Patient metadata: sex, oblique flag, degenerative findings and Pfirrmann grades.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathology {
    Spondylolisthesis,
    DiscHerniation,
    ModicChanges,
    UpperEndplateChanges,
    LowerEndplateChanges,
    DiscNarrowing,
    DiscBulging,
    /// Derived from Pfirrmann grades rather than read from a column.
    DiscDegeneration,
}

impl Pathology {
    /// Findings stored as boolean metadata columns.
    pub const FLAGGED: [Pathology; 7] = [
        Pathology::Spondylolisthesis,
        Pathology::DiscHerniation,
        Pathology::ModicChanges,
        Pathology::UpperEndplateChanges,
        Pathology::LowerEndplateChanges,
        Pathology::DiscNarrowing,
        Pathology::DiscBulging,
    ];

    pub fn column(self) -> &'static str {
        match self {
            Pathology::Spondylolisthesis => "spondylolisthesis",
            Pathology::DiscHerniation => "disc_herniation",
            Pathology::ModicChanges => "modic_changes",
            Pathology::UpperEndplateChanges => "upper_endplate_changes",
            Pathology::LowerEndplateChanges => "lower_endplate_changes",
            Pathology::DiscNarrowing => "disc_narrowing",
            Pathology::DiscBulging => "disc_bulging",
            Pathology::DiscDegeneration => "disc_degeneration",
        }
    }
}

impl std::fmt::Display for Pathology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.column())
    }
}

/// Disc levels carrying a Pfirrmann grade, cranial to caudal.
pub const DISC_LEVELS: [&str; 5] = ["l1_l2", "l2_l3", "l3_l4", "l4_l5", "l5_s1"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub sex: String,
    pub oblique: bool,
    pub findings: BTreeMap<Pathology, bool>,
    /// One entry per [`DISC_LEVELS`]; `None` when the level was not graded.
    pub pfirrmann: Vec<Option<u8>>,
}

impl PatientRecord {
    pub fn new(patient_id: impl Into<String>) -> Self {
        PatientRecord {
            patient_id: patient_id.into(),
            sex: String::new(),
            oblique: false,
            findings: Pathology::FLAGGED.iter().map(|&p| (p, false)).collect(),
            pfirrmann: vec![None; DISC_LEVELS.len()],
        }
    }

    /// Presence of a finding; disc degeneration means any graded disc at or above `grade_cut`.
    pub fn has(&self, p: Pathology, grade_cut: u8) -> bool {
        match p {
            Pathology::DiscDegeneration => self.pfirrmann.iter().flatten().any(|&g| g >= grade_cut),
            other => self.findings.get(&other).copied().unwrap_or(false),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patient_id.is_empty() {
            return Err(Error::Config("patient record without an id".into()));
        }
        if let Some(g) = self.pfirrmann.iter().flatten().find(|g| !(1..=5).contains(*g)) {
            return Err(Error::InvalidRange(format!(
                "patient {}: Pfirrmann grade {g} outside 1..5",
                self.patient_id
            )));
        }
        Ok(())
    }
}

fn parse_flag(path: &Path, row: usize, col: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "y" => Ok(true),
        "0" | "false" | "no" | "n" | "" => Ok(false),
        other => Err(Error::file(path, format!("row {row}, column {col}: not a flag: {other:?}"))),
    }
}

fn pfirrmann_column(level: &str) -> String {
    format!("pfirrmann_{level}")
}

/// Column names of the metadata CSV, in file order.
pub fn metadata_columns() -> Vec<String> {
    let mut cols = vec!["patient_id".to_string(), "sex".into(), "oblique".into()];
    cols.extend(Pathology::FLAGGED.iter().map(|p| p.column().to_string()));
    cols.extend(DISC_LEVELS.iter().map(|l| pfirrmann_column(l)));
    cols
}

/// Reads the metadata CSV. Missing pathology or grade columns are treated as absent data.
pub fn read_metadata(path: &Path) -> Result<Vec<PatientRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::file(path, e))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::file(path, e))?
        .iter()
        .map(|h| h.trim().to_ascii_lowercase())
        .collect();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col("patient_id").ok_or_else(|| Error::file(path, "missing patient_id column"))?;
    let mut records = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::file(path, e))?;
        let line = i + 2;
        let get = |c: Option<usize>| c.and_then(|c| row.get(c)).unwrap_or("").trim();
        let mut rec = PatientRecord::new(get(Some(id_col)));
        if rec.patient_id.is_empty() {
            return Err(Error::file(path, format!("row {line}: empty patient_id")));
        }
        if !seen.insert(rec.patient_id.clone()) {
            return Err(Error::file(path, format!("row {line}: duplicate patient {}", rec.patient_id)));
        }
        rec.sex = get(col("sex")).to_string();
        rec.oblique = parse_flag(path, line, "oblique", get(col("oblique")))?;
        for p in Pathology::FLAGGED {
            let v = parse_flag(path, line, p.column(), get(col(p.column())))?;
            rec.findings.insert(p, v);
        }
        for (k, level) in DISC_LEVELS.iter().enumerate() {
            let name = pfirrmann_column(level);
            let v = get(col(&name));
            rec.pfirrmann[k] = if v.is_empty() {
                None
            } else {
                Some(v.parse::<u8>().map_err(|_| {
                    Error::file(path, format!("row {line}, column {name}: not a grade: {v:?}"))
                })?)
            };
        }
        rec.validate().map_err(|e| Error::file(path, e))?;
        records.push(rec);
    }
    Ok(records)
}

pub fn write_metadata(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::file(path, e))?;
    w.write_record(metadata_columns())?;
    for r in records {
        let mut row = vec![r.patient_id.clone(), r.sex.clone(), (r.oblique as u8).to_string()];
        row.extend(Pathology::FLAGGED.iter().map(|p| (r.findings.get(p).copied().unwrap_or(false) as u8).to_string()));
        row.extend(r.pfirrmann.iter().map(|g| g.map(|g| g.to_string()).unwrap_or_default()));
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("meta.csv");
        let mut a = PatientRecord::new("7");
        a.sex = "F".into();
        a.oblique = true;
        a.findings.insert(Pathology::Spondylolisthesis, true);
        a.pfirrmann = vec![Some(2), Some(3), Some(4), None, Some(5)];
        let b = PatientRecord::new("8");
        write_metadata(&p, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(read_metadata(&p).unwrap(), vec![a, b]);
    }

    #[test]
    fn degeneration_cut() {
        let mut r = PatientRecord::new("1");
        r.pfirrmann = vec![Some(3), Some(3), None, None, None];
        assert!(!r.has(Pathology::DiscDegeneration, 4));
        r.pfirrmann[2] = Some(4);
        assert!(r.has(Pathology::DiscDegeneration, 4));
    }

    #[test]
    fn bad_grade_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("meta.csv");
        std::fs::write(&p, "patient_id,pfirrmann_l1_l2\n1,7\n").unwrap();
        assert!(read_metadata(&p).is_err());
        std::fs::write(&p, "patient_id,oblique\n1,maybe\n").unwrap();
        assert!(read_metadata(&p).is_err());
    }
}
