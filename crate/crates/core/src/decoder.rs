//! Mask decoders and the expert bank.
//!
//! A decoder lets the prompt vector attend over the image tokens, mixes the
//! attended prompt into every token, refines tokens with an MLP, and maps each
//! token to one logit that is repeated over its patch.

use rand::Rng;

use crate::autodiff::{sigmoid, Graph, Var};
use crate::encoders::{EncoderConfig, ImageEmbedding, PromptEmbedding};
use crate::error::{Error, Result};
use crate::nn::{residual_norm, Attention, LayerNorm, Linear, Mlp};
use crate::tensor::{Param, Tensor};

pub const GENERAL_PREFIX: &str = "decoder.general.";

pub fn expert_prefix(label: &str) -> String {
    format!("decoder.expert.{label}.")
}

/// Full-resolution logits with a sigmoid probability view.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskLogits {
    pub logits: Tensor,
}

impl MaskLogits {
    pub fn dims(&self) -> [usize; 3] {
        let s = self.logits.shape();
        [s[0], s[1], s[2]]
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logits.data().iter().map(|&z| sigmoid(z)).collect()
    }

    /// Mean logit over all voxels.
    pub fn global_average(&self) -> f64 {
        self.logits.data().iter().sum::<f64>() / self.logits.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskDecoder {
    prefix: String,
    config: EncoderConfig,
    cross_attn: Attention,
    norm_query: LayerNorm,
    norm_fuse: LayerNorm,
    mlp: Mlp,
    norm_mlp: LayerNorm,
    head: Linear,
}

impl MaskDecoder {
    pub fn new<R: Rng>(prefix: &str, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let name = |s: &str| format!("{prefix}{s}");
        Ok(MaskDecoder {
            prefix: prefix.to_string(),
            config,
            cross_attn: Attention::new(&name("cross_attn"), c, rng),
            norm_query: LayerNorm::new(&name("norm_query"), c),
            norm_fuse: LayerNorm::new(&name("norm_fuse"), c),
            mlp: Mlp::new(&name("mlp"), c, 4 * c, rng),
            norm_mlp: LayerNorm::new(&name("norm_mlp"), c),
            head: Linear::new(&name("head"), c, 1, rng),
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Zeroes the output head so every logit is exactly 0.
    pub fn zero_head(&mut self) {
        for p in self.head.params_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// `tokens: [N, C]`, `prompt: [C]`; returns logits shaped like the volume.
    pub fn forward(&self, g: &mut Graph, tokens: Var, prompt: Var) -> Result<Var> {
        let cfg = &self.config;
        let c = cfg.channels;
        if g.shape(tokens) != [cfg.tokens(), c] || g.value(prompt).len() != c {
            return Err(Error::Config(format!(
                "decoder expects tokens [{}, {c}] and prompt [{c}], got {:?} and {:?}",
                cfg.tokens(),
                g.shape(tokens),
                g.shape(prompt)
            )));
        }
        let q = g.reshape(prompt, &[1, c])?;
        let attended = self.cross_attn.forward(g, q, tokens)?;
        let q = residual_norm(g, q, attended, &self.norm_query)?;
        let mixed = g.mul_row(tokens, q)?;
        let t = residual_norm(g, tokens, mixed, &self.norm_fuse)?;
        let m = self.mlp.forward(g, t)?;
        let t = residual_norm(g, t, m, &self.norm_mlp)?;
        let per_token = self.head.forward(g, t)?;
        let gs = cfg.grid_side();
        g.upsample3d(per_token, [gs; 3], cfg.patch_size)
    }

    pub fn decode(&self, image: &ImageEmbedding, prompt: &PromptEmbedding) -> Result<MaskLogits> {
        let mut g = Graph::new();
        let t = g.constant(image.tokens.clone());
        let p = g.constant(prompt.vector.clone());
        let out = self.forward(&mut g, t, p)?;
        Ok(MaskLogits {
            logits: g.value(out).clone().with_requires_grad(false),
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.cross_attn.params();
        v.extend(self.norm_query.params());
        v.extend(self.norm_fuse.params());
        v.extend(self.mlp.params());
        v.extend(self.norm_mlp.params());
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.cross_attn.params_mut();
        v.extend(self.norm_query.params_mut());
        v.extend(self.norm_fuse.params_mut());
        v.extend(self.mlp.params_mut());
        v.extend(self.norm_mlp.params_mut());
        v.extend(self.head.params_mut());
        v
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params_mut().into_iter().for_each(|p| p.set_frozen(frozen));
    }

    fn renamed(&self, prefix: &str) -> MaskDecoder {
        let mut copy = self.clone();
        for p in copy.params_mut() {
            p.reprefix(&self.prefix, prefix);
        }
        copy.prefix = prefix.to_string();
        copy
    }
}

/// The general decoder plus finetuned experts in canonical (insertion) order.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBank {
    pub general: MaskDecoder,
    experts: Vec<(String, MaskDecoder)>,
}

impl ExpertBank {
    pub fn new(general: MaskDecoder) -> Self {
        ExpertBank {
            general,
            experts: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn labels(&self) -> Vec<String> {
        self.experts.iter().map(|(l, _)| l.clone()).collect()
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.experts.iter().position(|(l, _)| l == label)
    }

    /// Adds an expert initialized as a copy of the general decoder.
    pub fn clone_expert(&mut self, label: &str) -> Result<usize> {
        validate_label(label)?;
        if self.index_of(label).is_some() {
            return Err(Error::Registry(format!("expert `{label}` already exists")));
        }
        let expert = self.general.renamed(&expert_prefix(label));
        self.experts.push((label.to_string(), expert));
        Ok(self.experts.len() - 1)
    }

    pub fn expert_by_index(&self, k: usize) -> Result<(&str, &MaskDecoder)> {
        self.experts
            .get(k)
            .map(|(l, d)| (l.as_str(), d))
            .ok_or_else(|| Error::Registry(format!("expert index {k} out of range (m = {})", self.len())))
    }

    pub fn expert(&self, label: &str) -> Result<&MaskDecoder> {
        let k = self
            .index_of(label)
            .ok_or_else(|| Error::Registry(format!("no expert `{label}`")))?;
        Ok(&self.experts[k].1)
    }

    pub fn expert_mut(&mut self, label: &str) -> Result<&mut MaskDecoder> {
        let k = self
            .index_of(label)
            .ok_or_else(|| Error::Registry(format!("no expert `{label}`")))?;
        Ok(&mut self.experts[k].1)
    }

    pub fn experts(&self) -> impl Iterator<Item = (&str, &MaskDecoder)> {
        self.experts.iter().map(|(l, d)| (l.as_str(), d))
    }

    pub fn experts_mut(&mut self) -> impl Iterator<Item = (&str, &mut MaskDecoder)> {
        self.experts.iter_mut().map(|(l, d)| (l.as_str(), d))
    }

    /// Reorders experts so that new position `i` holds old expert `perm[i]`.
    pub fn permute(&mut self, perm: &[usize]) -> Result<()> {
        check_permutation(perm, self.len())?;
        let old = std::mem::take(&mut self.experts);
        self.experts = perm.iter().map(|&i| old[i].clone()).collect();
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.general.params();
        v.extend(self.experts.iter().flat_map(|(_, d)| d.params()));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.general.params_mut();
        v.extend(self.experts.iter_mut().flat_map(|(_, d)| d.params_mut()));
        v
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n {
        return Err(Error::Contract(format!("permutation of length {} for {n} items", perm.len())));
    }
    for &i in perm {
        if i >= n || seen[i] {
            return Err(Error::Contract(format!("{perm:?} is not a permutation")));
        }
        seen[i] = true;
    }
    Ok(())
}

/// Labels end up in parameter names and in comma-separated manifests.
pub fn validate_label(label: &str) -> Result<()> {
    let ok = !label.is_empty()
        && label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(Error::Registry(format!(
            "invalid expert label `{label}`: use ASCII letters, digits, `_` or `-`"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{ImageEncoder, PromptEncoder, PromptPoint, PromptSpec};
    use crate::volume::Volume;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture(cfg: EncoderConfig) -> (ImageEmbedding, PromptEmbedding, ExpertBank) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = ImageEncoder::new(cfg, &mut rng).unwrap();
        let penc = PromptEncoder::new(cfg, &mut rng).unwrap();
        let dec = MaskDecoder::new(GENERAL_PREFIX, cfg, &mut rng).unwrap();
        let mut vol = Volume::zeros(cfg.dims());
        vol.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = ((i % 7) as f32) * 0.1);
        let img = enc.encode(&vol).unwrap();
        let pr = penc
            .encode(&PromptSpec::Points {
                points: vec![PromptPoint::foreground([1, 2, 3])],
            })
            .unwrap();
        (img, pr, ExpertBank::new(dec))
    }

    #[test]
    fn output_shape_matches_volume_for_several_configs() {
        for (side, patch) in [(32, 8), (16, 4), (12, 6), (8, 8)] {
            let cfg = EncoderConfig {
                volume_side: side,
                patch_size: patch,
                channels: 12,
                depth: 1,
                heads: 1,
            };
            let (img, pr, bank) = fixture(cfg);
            let out = bank.general.decode(&img, &pr).unwrap();
            assert_eq!(out.dims(), [side; 3]);
        }
    }

    #[test]
    fn zero_head_gives_half_probabilities() {
        let (img, pr, mut bank) = fixture(EncoderConfig::default());
        bank.general.zero_head();
        let out = bank.general.decode(&img, &pr).unwrap();
        assert!(out.logits.data().iter().all(|v| *v == 0.0));
        assert!(out.probs().iter().all(|p| *p == 0.5));
    }

    #[test]
    fn clone_copies_and_registry_rules() {
        let (img, pr, mut bank) = fixture(EncoderConfig::default());
        let before = crate::tensor::params_checksum(bank.general.params());
        assert_eq!(bank.clone_expert("cyst").unwrap(), 0);
        assert_eq!(bank.len(), 1);
        assert_eq!(before, crate::tensor::params_checksum(bank.general.params()));
        let (label, expert) = bank.expert_by_index(0).unwrap();
        assert_eq!(label, "cyst");
        assert!(expert.params().iter().all(|p| p.name.starts_with("decoder.expert.cyst.")));
        assert_eq!(
            expert.decode(&img, &pr).unwrap(),
            bank.general.decode(&img, &pr).unwrap()
        );
        assert!(matches!(bank.clone_expert("cyst"), Err(Error::Registry(_))));
        assert!(matches!(bank.expert_by_index(1), Err(Error::Registry(_))));
        assert!(matches!(bank.clone_expert("a.b"), Err(Error::Registry(_))));
    }

    #[test]
    fn index_round_trip() {
        let (_, _, mut bank) = fixture(EncoderConfig::default());
        for l in ["a", "b", "c"] {
            bank.clone_expert(l).unwrap();
        }
        for k in 0..3 {
            let (label, _) = bank.expert_by_index(k).unwrap();
            assert_eq!(bank.index_of(label), Some(k));
        }
        bank.permute(&[2, 0, 1]).unwrap();
        assert_eq!(bank.labels(), ["c", "a", "b"]);
        assert!(bank.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let (img, _, bank) = fixture(EncoderConfig::default());
        let short = PromptEmbedding {
            vector: Tensor::zeros(&[12]),
        };
        assert!(matches!(bank.general.decode(&img, &short), Err(Error::Config(_))));
    }
}
