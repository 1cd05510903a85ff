use std::path::PathBuf;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spineseg::data::cache::write_cache;
use spineseg::data::volume::{Orientation, Volume};
use spineseg::data::{build_dataset, preprocess, preprocess_volumes, ImageVolume, LabelVolume, Modality, PipelineConfig, Structure, CLASS_COUNT};
use spineseg::diffusion::{ddim_step, forward_noise, x0_from_eps, NoiseSchedule, ScheduleConfig, ScheduleKind};
use spineseg::ensemble::{entropy_uncertainty, fuse_predictions, fuse_steps, mean_probability, step_weight, EnsembleConfig};
use spineseg::eval::{benjamini_hochberg, dice_score, welch_t_test};
use spineseg::losses::{composite_loss, composite_loss_with_grad, dice_loss_on_logits, mse_grad, mse_loss};
use spineseg::networks::ModelKind;
use spineseg::preseg::{corrupt_labels, read_preseg, refine_from_preseg, write_preseg_labels, PresegInput};
use spineseg::tensor::{argmax_channels, Tensor};
use spineseg::training::{noise_mse, split_samples, train, TrainConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, what: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy")
}

fn fixture_dataset() -> spineseg::data::Dataset {
    let d = fixture_dir();
    build_dataset(&d.join("images"), &d.join("labels"), &d.join("metadata.csv"), &PipelineConfig::toy()).expect("shipped fixture loads")
}

fn rel_err(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum();
    let den: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum();
    (num / den.max(1e-300)).sqrt()
}

fn diffusion_math() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let schedules = [
        NoiseSchedule::default_linear(),
        NoiseSchedule::new(ScheduleKind::Cosine, 1000, 1e-4, 0.02).map_err(|e| e.to_string())?,
        NoiseSchedule::new(ScheduleKind::Linear, 50, 1e-4, 0.02).map_err(|e| e.to_string())?,
        NoiseSchedule::new(ScheduleKind::Cosine, 7, 1e-4, 0.02).map_err(|e| e.to_string())?,
    ];
    for s in &schedules {
        let ab = s.alpha_bars();
        check(ab.windows(2).all(|w| w[1] < w[0]), format!("{:?} alpha_bar not strictly decreasing", s.kind()))?;
        check(ab.iter().all(|&a| a > 0.0 && a < 1.0), "alpha_bar outside (0, 1)")?;
        check(s.betas().iter().all(|&b| b > 0.0 && b < 1.0), "beta outside (0, 1)")?;
        if s.kind() == ScheduleKind::Linear {
            check(s.betas().windows(2).all(|w| w[1] > w[0]), "linear betas not increasing")?;
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..400 {
        let s = &schedules[rng.random_range(0..schedules.len())];
        let t = rng.random_range(1..s.steps());
        let t_prev = rng.random_range(0..t);
        let x0 = Tensor::randn(&[4, 8, 8], &mut rng).map(|v| v.clamp(-1.0, 1.0));
        let eps = Tensor::randn(&[4, 8, 8], &mut rng);
        let xt = forward_noise(&x0, t, &eps, s).map_err(|e| e.to_string())?;
        let stepped = ddim_step(&xt, &x0, t, t_prev as i64, s).map_err(|e| e.to_string())?;
        let direct = forward_noise(&x0, t_prev, &eps, s).map_err(|e| e.to_string())?;
        worst = worst.max(rel_err(stepped.data(), direct.data()));
        let back = x0_from_eps(&xt, &eps, t, s).map_err(|e| e.to_string())?;
        if s.alpha_bar(t) > 1e-3 {
            worst = worst.max(rel_err(back.data(), x0.data()));
        }
    }
    check(worst < 1e-5, format!("DDIM/forward relative error {worst:.3e}"))?;
    let s = &schedules[0];
    let n = 100_000;
    let mut worst_var: f64 = 0.0;
    for t in [0, 10, 250, 500, 999] {
        let x0 = Tensor::full(&[n], 0.5);
        let eps = Tensor::randn(&[n], &mut rng);
        let xt = forward_noise(&x0, t, &eps, s).map_err(|e| e.to_string())?;
        let m = xt.mean();
        let var = xt.data().iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let rel = (var / (1.0 - s.alpha_bar(t)) - 1.0).abs();
        worst_var = worst_var.max(rel);
    }
    check(worst_var < 0.02, format!("forward-noise variance off by {:.2}%", 100.0 * worst_var))?;
    Ok(format!("DDIM/forward rel err {worst:.1e}, variance within {:.2}% over 1e5 draws", 100.0 * worst_var))
}

fn random_simplex(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let (c, hw) = (shape[shape.len() - 3], shape[shape.len() - 2] * shape[shape.len() - 1]);
    let lead: usize = shape[..shape.len() - 3].iter().product();
    let mut data = vec![0f32; lead * c * hw];
    for l in 0..lead {
        for p in 0..hw {
            let raw: Vec<f64> = (0..c).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
            let sum: f64 = raw.iter().sum();
            for k in 0..c {
                data[(l * c + k) * hw + p] = (raw[k] / sum) as f32;
            }
        }
    }
    Tensor::new(shape, data).expect("consistent shape")
}

fn ensemble_math() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sig = 1.0 / (1.0 + (-1.0f64).exp());
    check((step_weight(4, 4) - sig.exp()).abs() < 1e-4, "e^sigmoid(1) constant")?;
    check((step_weight(1, 1).ln() - sig).abs() < 1e-4, "sigmoid(1) constant")?;
    check((sig - 0.731_058_6).abs() < 1e-4, "sigmoid(1) differs from 0.7311")?;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (ts, s, c, h, w) = (rng.random_range(1..=10), rng.random_range(1..=5), 4, 3, 5);
        let hw = h * w;
        let steps: Vec<Tensor> = (0..ts).map(|_| random_simplex(&mut rng, &[s, c, h, w])).collect();
        let mut oracle_fused = vec![0f64; c * hw];
        let mut means = Vec::new();
        let mut uncs = Vec::new();
        for (k, st) in steps.iter().enumerate() {
            let d = st.data();
            let mean: Vec<f64> = (0..c * hw).map(|i| (0..s).map(|j| d[j * c * hw + i] as f64).sum::<f64>() / s as f64).collect();
            let unc: Vec<f64> = mean.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).collect();
            let x = (k + 1) as f64 / ts as f64;
            let weight = (1.0 / (1.0 + (-x).exp())).exp();
            for i in 0..c * hw {
                oracle_fused[i] += weight * (1.0 - unc[i]) * mean[i];
            }
            let m = mean_probability(st).map_err(|e| e.to_string())?;
            let u = entropy_uncertainty(&m);
            for i in 0..c * hw {
                worst = worst.max((m.data()[i] as f64 - mean[i]).abs());
                worst = worst.max((u.data()[i] as f64 - unc[i]).abs());
            }
            means.push(m);
            uncs.push(u);
        }
        let fused = fuse_predictions(&Tensor::stack(&means).unwrap(), &Tensor::stack(&uncs).unwrap()).map_err(|e| e.to_string())?;
        for i in 0..c * hw {
            worst = worst.max((fused.data()[i] as f64 - oracle_fused[i]).abs());
        }
        let constant = fuse_steps(&vec![steps[0].clone(); ts], ts).map_err(|e| e.to_string())?;
        let single = argmax_channels(&mean_probability(&steps[0]).unwrap()).unwrap();
        check(constant.label_map == single, "argmax changed under timestep-constant inputs")?;
    }
    check(worst < 1e-6, format!("ensemble oracle abs error {worst:.3e}"))?;
    Ok(format!("mean/entropy/fusion abs err {worst:.1e}, sigmoid(1) = {sig:.6}, e^sigmoid(1) = {:.6}", sig.exp()))
}

fn oracle_composite(logits: &Tensor, target: &Tensor) -> f64 {
    let (n, c, h, w) = logits.dims4().unwrap();
    let hw = h * w;
    let (l, y) = (logits.data(), target.data());
    let mut p = vec![0f64; l.len()];
    for s in 0..n {
        for i in 0..hw {
            let mx = (0..c).map(|k| l[(s * c + k) * hw + i] as f64).fold(f64::MIN, f64::max);
            let z: f64 = (0..c).map(|k| (l[(s * c + k) * hw + i] as f64 - mx).exp()).sum();
            for k in 0..c {
                p[(s * c + k) * hw + i] = (l[(s * c + k) * hw + i] as f64 - mx).exp() / z;
            }
        }
    }
    let total = p.len() as f64;
    let mse = p.iter().zip(y).map(|(&pi, &yi)| ((2.0 * pi - 1.0) - (2.0 * yi as f64 - 1.0)).powi(2)).sum::<f64>() / total;
    let bce = -p
        .iter()
        .zip(y)
        .map(|(&pi, &yi)| {
            let q = pi.clamp(1e-7, 1.0 - 1e-7);
            let yi = yi as f64;
            yi * q.ln() + (1.0 - yi) * (1.0 - q).ln()
        })
        .sum::<f64>()
        / total;
    let mut dice = 0.0;
    for s in 0..n {
        for k in 1..c {
            let r = (s * c + k) * hw..(s * c + k + 1) * hw;
            let inter: f64 = r.clone().map(|i| p[i] * y[i] as f64).sum();
            let sp: f64 = r.clone().map(|i| p[i]).sum();
            let sy: f64 = r.map(|i| y[i] as f64).sum();
            dice += 1.0 - (2.0 * inter + 1e-5) / (sp + sy + 1e-5);
        }
    }
    dice /= (n * (c - 1)) as f64;
    mse + dice + bce
}

fn random_onehot(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let items: Vec<Tensor> = (0..n)
        .map(|_| {
            let labels: Vec<u8> = (0..64).map(|_| rng.random_range(0..4)).collect();
            spineseg::tensor::one_hot(&labels, 4, 8, 8).unwrap()
        })
        .collect();
    Tensor::stack(&items).unwrap()
}

fn fd_rel_err(f: impl Fn(&Tensor) -> f64, x: &Tensor, analytic: &Tensor) -> f64 {
    let h = 1e-2f32;
    let mut fd = vec![0f32; x.len()];
    for i in 0..x.len() {
        let mut up = x.clone();
        up.data_mut()[i] += h;
        let mut down = x.clone();
        down.data_mut()[i] -= h;
        fd[i] = ((f(&up) - f(&down)) / (2.0 * h as f64)) as f32;
    }
    rel_err(analytic.data(), &fd)
}

fn loss_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_val: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for case in 0..20 {
        let n = 1 + case % 2;
        let logits = Tensor::randn(&[n, 4, 8, 8], &mut rng).scale(2.0);
        let target = random_onehot(&mut rng, n);
        let ours = composite_loss(&logits, &target).map_err(|e| e.to_string())?;
        let oracle = oracle_composite(&logits, &target);
        worst_val = worst_val.max(((ours.total - oracle) / oracle).abs());
        check((ours.total - (ours.mse + ours.dice + ours.bce)).abs() == 0.0, "total is not the component sum")?;
        if case < 6 {
            let (_, g) = composite_loss_with_grad(&logits, &target).map_err(|e| e.to_string())?;
            worst_grad = worst_grad.max(fd_rel_err(|x| composite_loss(x, &target).unwrap().total, &logits, &g));
            let (_, gd) = dice_loss_on_logits(&logits, &target).map_err(|e| e.to_string())?;
            worst_grad = worst_grad.max(fd_rel_err(|x| dice_loss_on_logits(x, &target).unwrap().0, &logits, &gd));
            let gm = mse_grad(&logits, &target).map_err(|e| e.to_string())?;
            worst_grad = worst_grad.max(fd_rel_err(|x| mse_loss(x, &target).unwrap(), &logits, &gm));
        }
    }
    check(worst_val < 1e-6, format!("composite loss rel error {worst_val:.3e}"))?;
    check(worst_grad < 1e-3, format!("gradient rel error {worst_grad:.3e}"))?;
    Ok(format!("loss rel err {worst_val:.1e}, gradient vs central differences rel err {worst_grad:.1e}"))
}

fn brute_force_bh(p: &[f64], alpha: f64) -> Vec<bool> {
    let m = p.len();
    let mut k_star = 0;
    for k in 1..=m {
        let threshold = k as f64 * alpha / m as f64;
        if p.iter().filter(|&&q| q <= threshold).count() >= k {
            k_star = k;
        }
    }
    let cut = k_star as f64 * alpha / m as f64;
    p.iter().map(|&q| k_star > 0 && q <= cut).collect()
}

fn statistics_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let m = rng.random_range(1..=12);
        let p: Vec<f64> = (0..m)
            .map(|_| match rng.random_range(0..3) {
                0 => rng.random::<f64>(),
                1 => rng.random::<f64>() * 0.06,
                _ => rng.random_range(1..=m) as f64 * 0.05 / m as f64,
            })
            .collect();
        let ours = benjamini_hochberg(&p, 0.05).map_err(|e| e.to_string())?;
        check(ours == brute_force_bh(&p, 0.05), format!("BH mismatch on {p:?}"))?;
    }
    let bh = |p: &[f64]| benjamini_hochberg(p, 0.05).unwrap();
    check(bh(&[0.01]) == vec![true], "BH single p")?;
    check(bh(&[0.01, 0.02, 0.04]) == vec![true; 3], "BH all rejected")?;
    check(bh(&[0.04, 0.5, 0.9]) == vec![false; 3], "BH none rejected")?;
    let frozen: [(&[f64], &[f64], f64, f64); 4] = [
        (&[1.0, 2.0, 3.0, 4.0], &[2.0, 3.0, 4.0, 5.0], -1.095_445_115_010_332_2, 0.315_333_596_201_229_73),
        (&[0.91, 0.88, 0.93, 0.90, 0.87], &[0.71, 0.69, 0.75], 8.794_809_094_867_229_7, 0.001_657_311_082_243_399_96),
        (&[5.1, 4.9, 6.2, 5.8, 6.0, 5.5], &[3.2, 7.9, 4.4, 6.1], 0.175_445_067_650_561_66, 0.871_094_997_992_302_74),
        (&[0.1, 0.4, 0.2], &[0.15, 0.35, 0.3, 0.22, 0.28], -0.281_595_890_982_737_78, 0.798_939_902_954_557_03),
    ];
    let mut worst: f64 = 0.0;
    for (a, b, t, p) in frozen {
        let (ot, op) = welch_t_test(a, b).map_err(|e| e.to_string())?;
        worst = worst.max((ot - t).abs()).max((op - p).abs());
    }
    check(worst < 1e-8, format!("Welch deviates from the high-precision values by {worst:.3e}"))?;
    Ok(format!("1000 BH vectors match brute force, Welch max deviation {worst:.1e}"))
}

fn toy_trainability() -> Outcome {
    let ds = fixture_dataset();
    check(ds.samples.len() == 4 && ds.samples.iter().all(|s| s.size() == 64), "fixture is not four 64x64 samples")?;
    let cfg = TrainConfig::toy(ModelKind::SpineSegDiff);
    let r = train(&ds, &cfg).map_err(|e| e.to_string())?;
    let hit = r.curve.iter().find(|c| c.val_metric.is_some_and(|v| v > 0.95));
    let hit = hit.ok_or_else(|| format!("direct-mask model never exceeded Dice 0.95 in {} steps", r.steps))?;
    check(hit.step <= 2000 && r.elapsed_secs < 900.0, format!("Dice 0.95 at step {} after {:.0}s", hit.step, r.elapsed_secs))?;
    let ssd = format!("direct-mask Dice {:.3} at step {} ({:.0}s)", hit.val_metric.unwrap(), hit.step, r.elapsed_secs);

    let cfg = TrainConfig::toy(ModelKind::Iisdm);
    let r = train(&ds, &cfg).map_err(|e| e.to_string())?;
    let schedule = cfg.schedule.build().map_err(|e| e.to_string())?;
    let (_, val) = split_samples(&ds, &cfg).map_err(|e| e.to_string())?;
    let mse = noise_mse(&r.final_params, &val, &schedule, 32, 0xacce_5500).map_err(|e| e.to_string())?;
    check(r.steps <= 2000 && mse < 0.05, format!("noise model held-out MSE {mse:.4} after {} steps", r.steps))?;
    Ok(format!("{ssd}; noise model held-out MSE {mse:.4} after {} steps ({:.0}s)", r.steps, r.elapsed_secs))
}

fn mean_dice(a: &[u8], b: &[u8]) -> f64 {
    Structure::ALL.iter().map(|s| dice_score(a, b, s.class_id()).unwrap()).sum::<f64>() / 3.0
}

fn preseg_behavior() -> Outcome {
    let ds = fixture_dataset();
    let mut cfg = TrainConfig::toy(ModelKind::SpineSegDiff);
    cfg.schedule = ScheduleConfig::cosine(1000);
    let r = train(&ds, &cfg).map_err(|e| e.to_string())?;
    let schedule = cfg.schedule.build().map_err(|e| e.to_string())?;
    let ens = EnsembleConfig::default();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut gains = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let bad = corrupt_labels(&s.labels, CLASS_COUNT as u8, 0.1, 100 + i as u64);
        let path = dir.path().join(format!("{}.nii.gz", s.key()));
        write_preseg_labels(&path, &bad, s.size()).map_err(|e| e.to_string())?;
        let pre = read_preseg(&path, CLASS_COUNT, s.size(), &s.key()).map_err(|e| e.to_string())?;
        let same = refine_from_preseg(&r.final_params, &s.image, &pre, 0, &schedule, &ens).map_err(|e| e.to_string())?;
        let again = dir.path().join("passthrough.nii.gz");
        write_preseg_labels(&again, &same.label_map, s.size()).map_err(|e| e.to_string())?;
        let bytes = |p: &std::path::Path| std::fs::read(p).unwrap();
        check(same.label_map == bad && bytes(&path) == bytes(&again), format!("{}: t = 0 is not a byte-identical pass-through", s.key()))?;
        let refined = refine_from_preseg(&r.final_params, &s.image, &pre, 30, &schedule, &ens).map_err(|e| e.to_string())?;
        let (before, after) = (mean_dice(&bad, &s.labels), mean_dice(&refined.label_map, &s.labels));
        check(after > before, format!("{}: refinement at t = 30 gave Dice {after:.4} vs corrupted {before:.4}", s.key()))?;
        gains.push((before, after));
    }
    let counted = EnsembleConfig { samples: 1, ddim_steps: 100, fuse_last: 10, seed: 42 };
    let s = &ds.samples[0];
    let pre = PresegInput::from_labels(&s.labels, CLASS_COUNT, s.size(), "truth", &s.key()).map_err(|e| e.to_string())?;
    let shallow = refine_from_preseg(&r.final_params, &s.image, &pre, 30, &schedule, &counted).map_err(|e| e.to_string())?;
    let deep = refine_from_preseg(&r.final_params, &s.image, &pre, 1000, &schedule, &counted).map_err(|e| e.to_string())?;
    check(shallow.reverse_steps < deep.reverse_steps, format!("t = 30 took {} steps, t = 1000 took {}", shallow.reverse_steps, deep.reverse_steps))?;
    let n = gains.len() as f64;
    let (b, a) = gains.iter().fold((0.0, 0.0), |(x, y), (p, q)| (x + p / n, y + q / n));
    Ok(format!(
        "t = 0 byte-identical; corrupted Dice {b:.3} -> {a:.3} at t = 30; reverse steps {} at t = 30 vs {} at t = 1000",
        shallow.reverse_steps, deep.reverse_steps
    ))
}

fn orientation_strategy() -> impl Strategy<Value = Orientation> {
    (Just(()).prop_perturb(|_, mut rng| {
        let mut axes = [0usize, 1, 2];
        for i in (1..3).rev() {
            axes.swap(i, rng.random_range(0..=i));
        }
        let letters = [["R", "L"], ["A", "P"], ["S", "I"]];
        let code: String = axes.iter().map(|&a| letters[a][rng.random_range(0..2)]).collect();
        code.parse::<Orientation>().expect("valid code")
    }))
    .boxed()
}

#[derive(Debug, Clone)]
struct RandomScan {
    shape: (usize, usize, usize),
    spacing: [f64; 3],
    orientation: Orientation,
    size: usize,
    seed: u64,
    scale: f32,
}

fn scan_strategy() -> impl Strategy<Value = RandomScan> {
    (
        (1usize..6, 4usize..28, 4usize..28),
        prop::array::uniform3(0.4f64..3.5),
        orientation_strategy(),
        4usize..40,
        any::<u64>(),
        prop_oneof![Just(0.0f32), 0.01f32..5000.0],
    )
        .prop_map(|(shape, spacing, orientation, size, seed, scale)| RandomScan { shape, spacing, orientation, size, seed, scale })
}

fn volumes(scan: &RandomScan) -> (ImageVolume, LabelVolume) {
    let mut rng = ChaCha8Rng::seed_from_u64(scan.seed);
    let codes = [0, 0, 0, 3, 17, 100, 204, 225, 1];
    let image = ndarray::Array3::from_shape_fn(scan.shape, |_| rng.random::<f32>() * scan.scale);
    let labels = ndarray::Array3::from_shape_fn(scan.shape, |_| codes[rng.random_range(0..codes.len())]);
    (
        ImageVolume {
            volume: Volume::new(image, scan.spacing, scan.orientation).unwrap(),
            modality: Modality::T2w,
            patient_id: "prop".into(),
        },
        LabelVolume {
            volume: Volume::new(labels, scan.spacing, scan.orientation).unwrap(),
            patient_id: "prop".into(),
        },
    )
}

fn pipeline_schema() -> Outcome {
    let mut runner = TestRunner::new(Config { cases: 500, failure_persistence: None, ..Config::default() });
    let result = runner.run(&scan_strategy(), |scan| {
        let (img, lab) = volumes(&scan);
        let cfg = PipelineConfig { image_size: scan.size, ..PipelineConfig::default() };
        if scan.scale == 0.0 {
            prop_assert!(matches!(preprocess(&img, &lab, &cfg), Err(spineseg::Error::Degenerate(_))));
            return Ok(());
        }
        let s = preprocess(&img, &lab, &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(s.validate(scan.size).is_ok());
        prop_assert_eq!(s.image.shape(), &[1, scan.size, scan.size]);
        prop_assert!(s.image.data().iter().all(|v| (0.0..=255.0).contains(v)));
        let mask = s.mask();
        let hw = scan.size * scan.size;
        for p in 0..hw {
            let ones: f32 = (0..CLASS_COUNT).map(|k| mask.data()[k * hw + p]).sum();
            prop_assert_eq!(ones, 1.0);
        }
        let (vi, vl) = preprocess_volumes(&img.volume, &lab.volume, &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let (vi2, vl2) = preprocess_volumes(&vi, &vl, &cfg).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(vi, vi2);
        prop_assert_eq!(vl, vl2);
        Ok(())
    });
    result.map_err(|e| e.to_string())?;
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    write_cache(a.path(), &fixture_dataset()).map_err(|e| e.to_string())?;
    write_cache(b.path(), &fixture_dataset()).map_err(|e| e.to_string())?;
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    for n in &names {
        let (x, y) = (std::fs::read(a.path().join(n)).unwrap(), std::fs::read(b.path().join(n)).map_err(|e| e.to_string())?);
        check(x == y, format!("cache file {n:?} differs between runs"))?;
    }
    Ok(format!("500 random volumes satisfy every sample invariant; volume stages and {} cache files are idempotent", names.len()))
}

fn main() {
    let suites: [(&str, fn() -> Outcome); 7] = [
        ("diffusion math", diffusion_math),
        ("ensemble math", ensemble_math),
        ("losses", loss_suite),
        ("statistics", statistics_suite),
        ("toy trainability", toy_trainability),
        ("pre-segmentation", preseg_behavior),
        ("pipeline schema", pipeline_schema),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in suites.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
