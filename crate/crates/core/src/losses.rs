//! Segmentation and routing losses, recorded on a [`Graph`].

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

pub const DICE_SMOOTH: f64 = 1e-5;

/// `1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)` on probabilities.
pub fn dice_loss(g: &mut Graph, probs: Var, target: &[f64], eps: f64) -> Result<Var> {
    check_binary(target)?;
    g.dice(probs, target, eps)
}

/// Mean stable binary cross-entropy from logits.
pub fn bce_loss(g: &mut Graph, logits: Var, target: &[f64]) -> Result<Var> {
    check_binary(target)?;
    g.bce_with_logits(logits, target)
}

/// Dice on `sigmoid(logits)` plus BCE on the logits, equally weighted.
pub fn dicece_loss(g: &mut Graph, logits: Var, target: &[f64], eps: f64) -> Result<Var> {
    let probs = g.sigmoid(logits)?;
    let dice = dice_loss(g, probs, target, eps)?;
    let bce = bce_loss(g, logits, target)?;
    g.add(dice, bce)
}

/// DiceCE on an already fused probability map (clamped BCE).
pub fn dicece_on_probs(g: &mut Graph, probs: Var, target: &[f64], eps: f64) -> Result<Var> {
    let dice = dice_loss(g, probs, target, eps)?;
    let bce = g.bce_probs(probs, target, 1e-7)?;
    g.add(dice, bce)
}

/// `-log softmax(logits)[target]`.
pub fn gate_ce_loss(g: &mut Graph, logits: Var, target: usize) -> Result<Var> {
    let m = g.value(logits).len();
    if target >= m {
        return Err(Error::Contract(format!(
            "gate target {target} out of range for {m} experts"
        )));
    }
    let mut onehot = vec![0.0; m];
    onehot[target] = 1.0;
    g.softmax_cross_entropy(logits, &onehot)
}

/// Cross-entropy against the uniform distribution over all experts; its
/// minimum is reached when every expert scores `1/m`.
pub fn gate_uniform_loss(g: &mut Graph, logits: Var) -> Result<Var> {
    let m = g.value(logits).len();
    g.softmax_cross_entropy(logits, &vec![1.0 / m as f64; m])
}

fn check_binary(target: &[f64]) -> Result<()> {
    if target.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Contract("segmentation target must be binary".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn leaf(g: &mut Graph, v: Vec<f64>) -> Var {
        g.leaf(Tensor::vector(v), true)
    }

    #[test]
    fn dice_examples() {
        let mut g = Graph::new();
        let t = vec![1.0, 0.0, 1.0, 0.0];
        let p = leaf(&mut g, t.clone());
        let l = dice_loss(&mut g, p, &t, DICE_SMOOTH).unwrap();
        assert!(g.value(l).item().abs() < 1e-15);

        let inv: Vec<f64> = t.iter().map(|v| 1.0 - v).collect();
        let p = leaf(&mut g, inv);
        let l = dice_loss(&mut g, p, &t, 1e-12).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-9);

        let v = 1000;
        let t: Vec<f64> = (0..v).map(|i| f64::from(u8::from(i < v / 2))).collect();
        let p = leaf(&mut g, vec![0.5; v]);
        let eps = DICE_SMOOTH;
        let l = dice_loss(&mut g, p, &t, eps).unwrap();
        let expected = 1.0 - (v as f64 / 2.0 + eps) / (v as f64 + eps);
        assert!((g.value(l).item() - expected).abs() < 1e-15);
        assert!((g.value(l).item() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::new();
        let z = leaf(&mut g, vec![0.0; 6]);
        let l = bce_loss(&mut g, z, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);

        let t = [1.0, 0.0, 0.0, 1.0];
        let z = leaf(&mut g, vec![20.0, -20.0, -20.0, 20.0]);
        let l = bce_loss(&mut g, z, &t).unwrap();
        assert!(g.value(l).item() < 1e-6);
        assert!(bce_loss(&mut g, z, &[1.0; 3]).is_err());
    }

    #[test]
    fn dicece_examples() {
        let mut g = Graph::new();
        let t = [1.0, 0.0, 0.0, 1.0];
        let z = leaf(&mut g, vec![40.0, -40.0, -40.0, 40.0]);
        let l = dicece_loss(&mut g, z, &t, DICE_SMOOTH).unwrap();
        assert!(g.value(l).item() < 1e-6);

        let z = leaf(&mut g, vec![0.0; 4]);
        let l = dicece_loss(&mut g, z, &t, DICE_SMOOTH).unwrap();
        assert!((g.value(l).item() - (0.5 + std::f64::consts::LN_2)).abs() < 1e-5);
    }

    #[test]
    fn gate_ce_examples() {
        let mut g = Graph::new();
        let z = leaf(&mut g, vec![0.0; 3]);
        for target in 0..3 {
            let l = gate_ce_loss(&mut g, z, target).unwrap();
            assert!((g.value(l).item() - 3f64.ln()).abs() < 1e-15);
        }
        let z = leaf(&mut g, vec![10.0, -10.0, -10.0]);
        let l = gate_ce_loss(&mut g, z, 0).unwrap();
        assert!(g.value(l).item() < 1e-4);
        assert!(matches!(gate_ce_loss(&mut g, z, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn non_binary_target_rejected() {
        let mut g = Graph::new();
        let z = leaf(&mut g, vec![0.0; 2]);
        assert!(bce_loss(&mut g, z, &[0.5, 1.0]).is_err());
    }
}
