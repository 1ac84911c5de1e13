//! Attention gating network scoring each expert from image and prompt
//! embeddings.
//!
//! Pipeline: prompt self-attention, prompt-to-image cross-attention, prompt
//! MLP, image-to-prompt cross-attention (each followed by residual + layer
//! norm), mean pooling over tokens, then `FC -> GELU -> FC -> softmax`.

use rand::Rng;

use crate::autodiff::{softmax_in_place, Graph, Var};
use crate::decoder::{check_permutation, validate_label};
use crate::encoders::{ImageEmbedding, PromptEmbedding};
use crate::error::{Error, Result};
use crate::nn::{residual_norm, Attention, LayerNorm, Linear, Mlp};
use crate::tensor::{Param, Tensor};

pub const GATE_PREFIX: &str = "gate.";

/// Softmax scores over experts with the Top-1 choice (ties go to the lowest
/// index).
#[derive(Clone, Debug, PartialEq)]
pub struct GateScores {
    pub scores: Vec<f64>,
    pub top_index: usize,
    pub s_top: f64,
}

impl GateScores {
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::Contract("gate scores need at least one expert".into()));
        }
        let mut scores = logits.to_vec();
        softmax_in_place(&mut scores);
        let mut top_index = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[top_index] {
                top_index = i;
            }
        }
        Ok(GateScores {
            s_top: scores[top_index],
            top_index,
            scores,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatingNetwork {
    labels: Vec<String>,
    self_attn: Attention,
    norm_self: LayerNorm,
    cross_prompt: Attention,
    norm_cross_prompt: LayerNorm,
    mlp: Mlp,
    norm_mlp: LayerNorm,
    cross_image: Attention,
    norm_cross_image: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl GatingNetwork {
    /// A gate over the given expert labels (canonical order).
    pub fn new<R: Rng>(channels: usize, labels: &[String], rng: &mut R) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Contract("a gate needs at least one expert".into()));
        }
        for l in labels {
            validate_label(l)?;
        }
        let c = channels;
        Ok(GatingNetwork {
            labels: labels.to_vec(),
            self_attn: Attention::new("gate.self_attn", c, rng),
            norm_self: LayerNorm::new("gate.norm_self", c),
            cross_prompt: Attention::new("gate.cross_prompt", c, rng),
            norm_cross_prompt: LayerNorm::new("gate.norm_cross_prompt", c),
            mlp: Mlp::new("gate.mlp", c, 4 * c, rng),
            norm_mlp: LayerNorm::new("gate.norm_mlp", c),
            cross_image: Attention::new("gate.cross_image", c, rng),
            norm_cross_image: LayerNorm::new("gate.norm_cross_image", c),
            fc1: Linear::new("gate.fc1", c, c, rng),
            fc2: Linear::new("gate.fc2", c, labels.len(), rng),
        })
    }

    pub fn experts(&self) -> usize {
        self.labels.len()
    }

    /// Expert labels this gate's output dimension is bound to.
    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn channels(&self) -> usize {
        self.fc1.fan_out()
    }

    /// Returns the `[m]` logit vector.
    pub fn forward(&self, g: &mut Graph, tokens: Var, prompt: Var) -> Result<Var> {
        let c = self.channels();
        if g.shape(tokens).len() != 2 || g.shape(tokens)[1] != c || g.value(prompt).len() != c {
            return Err(Error::Config(format!(
                "gate expects tokens [N, {c}] and prompt [{c}], got {:?} and {:?}",
                g.shape(tokens),
                g.shape(prompt)
            )));
        }
        let p = g.reshape(prompt, &[1, c])?;
        let s = self.self_attn.forward(g, p, p)?;
        let p = residual_norm(g, p, s, &self.norm_self)?;
        let a = self.cross_prompt.forward(g, p, tokens)?;
        let p = residual_norm(g, p, a, &self.norm_cross_prompt)?;
        let m = self.mlp.forward(g, p)?;
        let p = residual_norm(g, p, m, &self.norm_mlp)?;
        let b = self.cross_image.forward(g, tokens, p)?;
        let t = residual_norm(g, tokens, b, &self.norm_cross_image)?;
        let pooled = g.mean_rows(t)?;
        let pooled = g.reshape(pooled, &[1, c])?;
        let h = self.fc1.forward(g, pooled)?;
        let h = g.gelu(h)?;
        let logits = self.fc2.forward(g, h)?;
        g.reshape(logits, &[self.experts()])
    }

    pub fn logits(&self, image: &ImageEmbedding, prompt: &PromptEmbedding) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let t = g.constant(image.tokens.clone());
        let p = g.constant(prompt.vector.clone());
        let out = self.forward(&mut g, t, p)?;
        Ok(g.value(out).data().to_vec())
    }

    pub fn scores(&self, image: &ImageEmbedding, prompt: &PromptEmbedding) -> Result<GateScores> {
        GateScores::from_logits(&self.logits(image, prompt)?)
    }

    /// Adds an output for a new expert: existing FC2 outputs are kept, the new
    /// one starts at zero weight and bias.
    pub fn add_expert(&mut self, label: &str) -> Result<()> {
        validate_label(label)?;
        if self.labels.iter().any(|l| l == label) {
            return Err(Error::Registry(format!("gate already scores `{label}`")));
        }
        let (c, m) = (self.channels(), self.experts());
        let w = self.fc2.w.tensor.data();
        let mut grown = Vec::with_capacity(c * (m + 1));
        for row in w.chunks(m) {
            grown.extend_from_slice(row);
            grown.push(0.0);
        }
        let mut bias = self.fc2.b.tensor.data().to_vec();
        bias.push(0.0);
        self.fc2.w = Param::new("gate.fc2.w", Tensor::matrix(c, m + 1, grown)?);
        self.fc2.b = Param::new("gate.fc2.b", Tensor::vector(bias));
        self.labels.push(label.to_string());
        Ok(())
    }

    /// Reorders the expert outputs: new output `i` is old output `perm[i]`.
    pub fn permute(&mut self, perm: &[usize]) -> Result<()> {
        let m = self.experts();
        check_permutation(perm, m)?;
        let w = self.fc2.w.tensor.data().to_vec();
        let wd = self.fc2.w.tensor.data_mut();
        for (r, row) in w.chunks(m).enumerate() {
            for (i, &src) in perm.iter().enumerate() {
                wd[r * m + i] = row[src];
            }
        }
        let b = self.fc2.b.tensor.data().to_vec();
        let bd = self.fc2.b.tensor.data_mut();
        for (i, &src) in perm.iter().enumerate() {
            bd[i] = b[src];
        }
        self.labels = perm.iter().map(|&i| self.labels[i].clone()).collect();
        Ok(())
    }

    /// Zeroes FC2 so every expert gets the same score.
    pub fn zero_output(&mut self) {
        for p in self.fc2.params_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.self_attn.params();
        v.extend(self.norm_self.params());
        v.extend(self.cross_prompt.params());
        v.extend(self.norm_cross_prompt.params());
        v.extend(self.mlp.params());
        v.extend(self.norm_mlp.params());
        v.extend(self.cross_image.params());
        v.extend(self.norm_cross_image.params());
        v.extend(self.fc1.params());
        v.extend(self.fc2.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.self_attn.params_mut();
        v.extend(self.norm_self.params_mut());
        v.extend(self.cross_prompt.params_mut());
        v.extend(self.norm_cross_prompt.params_mut());
        v.extend(self.mlp.params_mut());
        v.extend(self.norm_mlp.params_mut());
        v.extend(self.cross_image.params_mut());
        v.extend(self.norm_cross_image.params_mut());
        v.extend(self.fc1.params_mut());
        v.extend(self.fc2.params_mut());
        v
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params_mut().into_iter().for_each(|p| p.set_frozen(frozen));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("e{i}")).collect()
    }

    fn inputs(rng: &mut ChaCha8Rng, c: usize) -> (ImageEmbedding, PromptEmbedding) {
        (
            ImageEmbedding {
                tokens: Tensor::randn(&[8, c], 1.0, rng),
                grid_side: 2,
            },
            PromptEmbedding {
                vector: Tensor::randn(&[c], 1.0, rng),
            },
        )
    }

    #[test]
    fn zero_output_gives_uniform_scores_and_lowest_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut gate = GatingNetwork::new(12, &labels(4), &mut rng).unwrap();
        gate.zero_output();
        let (img, pr) = inputs(&mut rng, 12);
        let s = gate.scores(&img, &pr).unwrap();
        assert!(s.scores.iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert_eq!(s.top_index, 0);
        assert!((s.s_top - 0.25).abs() < 1e-15);
    }

    #[test]
    fn permuting_outputs_permutes_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut gate = GatingNetwork::new(12, &labels(4), &mut rng).unwrap();
        for v in gate.fc2.b.tensor.data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let (img, pr) = inputs(&mut rng, 12);
        let before = gate.scores(&img, &pr).unwrap();
        let perm = [2, 0, 3, 1];
        gate.permute(&perm).unwrap();
        let after = gate.scores(&img, &pr).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert!((after.scores[i] - before.scores[src]).abs() < 1e-15);
        }
        assert_eq!(perm[after.top_index], before.top_index);
        assert_eq!(gate.labels(), ["e2", "e0", "e3", "e1"]);
    }

    #[test]
    fn adding_an_expert_keeps_old_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut gate = GatingNetwork::new(12, &labels(2), &mut rng).unwrap();
        let (img, pr) = inputs(&mut rng, 12);
        let before = gate.logits(&img, &pr).unwrap();
        gate.add_expert("new").unwrap();
        let after = gate.logits(&img, &pr).unwrap();
        assert_eq!(&after[..2], &before[..]);
        assert_eq!(after[2], 0.0);
        assert!(gate.add_expert("new").is_err());
    }

    #[test]
    fn scores_are_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let gate = GatingNetwork::new(12, &labels(5), &mut rng).unwrap();
        for _ in 0..20 {
            let (img, pr) = inputs(&mut rng, 12);
            let s = gate.scores(&img, &pr).unwrap();
            assert!(s.scores.iter().all(|v| *v >= 0.0));
            assert!((s.scores.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            assert_eq!(s.s_top, s.scores.iter().copied().fold(0.0, f64::max));
        }
    }

    #[test]
    fn empty_gate_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(GatingNetwork::new(12, &[], &mut rng), Err(Error::Contract(_))));
        assert!(GateScores::from_logits(&[]).is_err());
    }
}
