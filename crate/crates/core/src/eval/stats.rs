//! Two-sample Welch test and Benjamini-Hochberg step-up.

use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sided Welch t-test; returns `(t, p)`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Degenerate(format!(
            "each group needs at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidRange("non-finite value in t-test input".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if se2 <= 0.0 {
        return Err(Error::Degenerate("both groups have zero variance".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let p = if t == 0.0 {
        1.0
    } else {
        beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
    };
    Ok((t, p))
}

/// Flags the hypotheses rejected by the BH procedure at level `alpha`, in input order.
pub fn benjamini_hochberg(p_values: &[f64], alpha: f64) -> Result<Vec<bool>> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidRange(format!("p-value {p} outside [0, 1]")));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidRange(format!("alpha {alpha} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]));
    let k = (1..=m)
        .rev()
        .find(|&k| p_values[order[k - 1]] <= k as f64 * alpha / m as f64)
        .unwrap_or(0);
    let mut flags = vec![false; m];
    for &i in &order[..k] {
        flags[i] = true;
    }
    Ok(flags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_groups() {
        let a = [1.0, 2.0, 3.5];
        let (t, p) = welch_t_test(&a, &a).unwrap();
        assert_eq!(t, 0.0);
        assert_eq!(p, 1.0);
    }

    #[test]
    fn antisymmetric() {
        let (a, b) = ([1.0, 2.0, 3.0, 4.0], [2.0, 3.0, 4.0, 5.0, 7.0]);
        let (t1, p1) = welch_t_test(&a, &b).unwrap();
        let (t2, p2) = welch_t_test(&b, &a).unwrap();
        assert_eq!(t1, -t2);
        assert!((p1 - p2).abs() < 1e-15);
    }

    #[test]
    fn degenerate_groups() {
        assert!(welch_t_test(&[1.0], &[1.0, 2.0]).is_err());
        assert!(welch_t_test(&[1.0, 1.0], &[2.0, 2.0]).is_err());
    }

    #[test]
    fn bh_examples() {
        assert_eq!(benjamini_hochberg(&[0.01], 0.05).unwrap(), vec![true]);
        assert_eq!(benjamini_hochberg(&[0.01, 0.02, 0.04], 0.05).unwrap(), vec![true; 3]);
        assert_eq!(benjamini_hochberg(&[0.04, 0.5, 0.9], 0.05).unwrap(), vec![false; 3]);
        assert_eq!(benjamini_hochberg(&[], 0.05).unwrap(), Vec::<bool>::new());
        assert!(benjamini_hochberg(&[1.5], 0.05).is_err());
    }

    #[test]
    fn bh_step_up_rescues_earlier_hypotheses() {
        // 0.03 fails its own threshold (0.025) but the larger 0.04 passes 0.05.
        assert_eq!(benjamini_hochberg(&[0.04, 0.03], 0.05).unwrap(), vec![true, true]);
    }
}
