//! Rank and linear correlation, plus the optional logistic remapping.

use crate::error::{Error, Result};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::InvalidInput("correlation needs at least two values".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("correlation inputs must be finite".into()));
    }
    Ok(())
}

/// 1-based fractional ranks; tied values share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("correlation of a constant sequence".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson_unchecked(&average_ranks(x), &average_ranks(y))
}

/// Pearson linear correlation.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson_unchecked(x, y)
}

/// `f(x) = b2 + (b1 - b2) / (1 + exp(-(x - b3) / |b4|))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Logistic4 {
    pub b: [f64; 4],
}

impl Logistic4 {
    pub fn eval(&self, x: f64) -> f64 {
        let [b1, b2, b3, b4] = self.b;
        b2 + (b1 - b2) / (1.0 + (-(x - b3) / b4.abs()).exp())
    }

    fn jacobian_row(&self, x: f64) -> [f64; 4] {
        let [b1, b2, b3, b4] = self.b;
        let s = b4.abs();
        let e = (-(x - b3) / s).exp();
        let sig = 1.0 / (1.0 + e);
        let dsig = sig * (1.0 - sig);
        [
            sig,
            1.0 - sig,
            -(b1 - b2) * dsig / s,
            -(b1 - b2) * dsig * (x - b3) / (s * s) * b4.signum(),
        ]
    }

    /// Least-squares fit by Levenberg-Marquardt.
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        check_pair(x, y)?;
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sd == 0.0 {
            return Err(Error::Degenerate("logistic fit of constant predictions".into()));
        }
        let (ymin, ymax) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
        let mut model = Logistic4 {
            b: [ymax, ymin, mean, sd],
        };
        let sse = |m: &Logistic4| x.iter().zip(y).map(|(a, b)| (m.eval(*a) - b).powi(2)).sum::<f64>();
        let mut err = sse(&model);
        let mut lambda = 1e-3;
        for _ in 0..500 {
            let mut jtj = [[0.0f64; 4]; 4];
            let mut jtr = [0.0f64; 4];
            for (&a, &b) in x.iter().zip(y) {
                let j = model.jacobian_row(a);
                let r = b - model.eval(a);
                for p in 0..4 {
                    jtr[p] += j[p] * r;
                    for q in 0..4 {
                        jtj[p][q] += j[p] * j[q];
                    }
                }
            }
            let mut improved = false;
            while lambda < 1e12 {
                let mut m = jtj;
                for (p, row) in m.iter_mut().enumerate() {
                    row[p] += lambda * (jtj[p][p] + 1e-12);
                }
                let Some(step) = solve4(m, jtr) else {
                    lambda *= 10.0;
                    continue;
                };
                let mut cand = model;
                for p in 0..4 {
                    cand.b[p] += step[p];
                }
                let cand_err = sse(&cand);
                if cand_err.is_finite() && cand_err < err {
                    let rel = (err - cand_err) / err.max(1e-300);
                    model = cand;
                    err = cand_err;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = rel > 1e-12;
                    break;
                }
                lambda *= 10.0;
            }
            if !improved {
                break;
            }
        }
        Ok(model)
    }
}

/// Gaussian elimination with partial pivoting.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for row in (0..4).rev() {
        let s: f64 = (row + 1..4).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// PLCC after mapping predictions through a fitted [`Logistic4`].
pub fn plcc_logistic(pred: &[f64], mos: &[f64]) -> Result<f64> {
    let map = Logistic4::fit(pred, mos)?;
    let mapped: Vec<f64> = pred.iter().map(|&p| map.eval(p)).collect();
    plcc(&mapped, mos)
}

/// Exact median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    })
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(average_ranks(&[5.0, 5.0, 5.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn tie_example() {
        // ranks (1, 2.5, 2.5, 4) vs (1, 2, 3, 4): cov 4.5 / sqrt(4.5 * 5)
        let r = srcc(&[1.0, 2.0, 2.0, 3.0], &[10.0, 20.0, 30.0, 40.0]).unwrap();
        assert!((r - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_reversed() {
        let x = [0.1, 0.5, 0.7, 2.0, 9.0];
        let rev: Vec<f64> = x.iter().rev().copied().collect();
        assert_eq!(srcc(&x, &x).unwrap(), 1.0);
        assert_eq!(srcc(&x, &rev).unwrap(), -1.0);
        let affine: Vec<f64> = x.iter().map(|v| 2.0 * v + 3.0).collect();
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((plcc(&x, &affine).unwrap() - 1.0).abs() < 1e-15);
        assert!((plcc(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(srcc(&[1.0, 1.0], &[1.0, 2.0]), Err(Error::Degenerate(_))));
        assert!(plcc(&[1.0], &[1.0]).is_err());
        assert!(plcc(&[1.0, 2.0], &[1.0]).is_err());
        assert!(plcc(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn logistic_recovers_a_sigmoid() {
        let truth = Logistic4 {
            b: [90.0, 10.0, 0.5, 0.1],
        };
        let x: Vec<f64> = (0..60).map(|i| i as f64 / 59.0).collect();
        let y: Vec<f64> = x.iter().map(|&v| truth.eval(v)).collect();
        let fit = Logistic4::fit(&x, &y).unwrap();
        for &v in &x {
            assert!((fit.eval(v) - truth.eval(v)).abs() < 1e-3);
        }
        assert!(plcc_logistic(&x, &y).unwrap() > 0.999999);
    }

    #[test]
    fn median_and_std() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(std_dev(&[1.0, 3.0]), Some(1.0));
    }
}
