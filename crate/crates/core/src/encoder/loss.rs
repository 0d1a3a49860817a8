//! Euclidean triplet distance and the hinge triplet margin loss.

use crate::error::{Error, Result};

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::DimensionMismatch(format!("embedding dimensions {dims:?}")));
    }
    Ok(())
}

/// `||x - y||_2`.
pub fn triplet_distance(x: &[f64], y: &[f64]) -> Result<f64> {
    check_dims(&[x.len(), y.len()])?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// `max(d(a, p) - d(a, n) + margin, 0)`.
pub fn triplet_margin_loss(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<f64> {
    Ok(triplet_loss_and_grad(a, p, n, margin)?.loss)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletLossGrad {
    pub loss: f64,
    pub d_ap: f64,
    pub d_an: f64,
    pub grad_a: Vec<f64>,
    pub grad_p: Vec<f64>,
    pub grad_n: Vec<f64>,
}

/// Loss value and its gradient with respect to each embedding. At the hinge
/// (argument exactly 0) and for coincident points the subgradient 0 is used.
pub fn triplet_loss_and_grad(a: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<TripletLossGrad> {
    check_dims(&[a.len(), p.len(), n.len()])?;
    if !(margin > 0.0) {
        return Err(Error::InvalidInput(format!("margin must be positive, got {margin}")));
    }
    let d_ap = triplet_distance(a, p)?;
    let d_an = triplet_distance(a, n)?;
    let raw = d_ap - d_an + margin;
    let dim = a.len();
    let mut out = TripletLossGrad {
        loss: raw.max(0.0),
        d_ap,
        d_an,
        grad_a: vec![0.0; dim],
        grad_p: vec![0.0; dim],
        grad_n: vec![0.0; dim],
    };
    if raw <= 0.0 {
        return Ok(out);
    }
    for i in 0..dim {
        let up = if d_ap > 0.0 { (a[i] - p[i]) / d_ap } else { 0.0 };
        let un = if d_an > 0.0 { (a[i] - n[i]) / d_an } else { 0.0 };
        out.grad_a[i] = up - un;
        out.grad_p[i] = -up;
        out.grad_n[i] = un;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_cases() {
        let z = [0.0; 4];
        assert_eq!(triplet_distance(&z, &z).unwrap(), 0.0);
        assert_eq!(triplet_distance(&z, &[1.0, 0.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(triplet_margin_loss(&z, &z, &z, 1.5).unwrap(), 1.5);
        assert_eq!(triplet_margin_loss(&z, &z, &[2.0, 0.0, 0.0, 0.0], 1.5).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        assert!(triplet_distance(&[0.0], &[0.0, 1.0]).is_err());
        assert!(triplet_margin_loss(&[0.0], &[0.0], &[0.0, 1.0], 1.5).is_err());
        assert!(triplet_margin_loss(&[0.0], &[0.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn inactive_hinge_has_zero_gradient() {
        let g = triplet_loss_and_grad(&[0.0, 0.0], &[0.1, 0.0], &[5.0, 0.0], 1.5).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.grad_a.iter().chain(&g.grad_p).chain(&g.grad_n).all(|&v| v == 0.0));
    }
}
