//! The assembled model: shared encoders, expert bank and gate, plus MoE
//! inference.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::decoder::{ExpertBank, MaskDecoder, MaskLogits, GENERAL_PREFIX};
use crate::encoders::{EncoderConfig, ImageEmbedding, ImageEncoder, PromptEmbedding, PromptEncoder, PromptSpec};
use crate::error::{Error, Result};
use crate::gating::GatingNetwork;
use crate::selector::{fuse, fusion_weights, SelectorConfig};
use crate::tensor::{params_checksum, Param};
use crate::volume::Volume;

#[derive(Clone, Debug, PartialEq)]
pub struct MoeModel {
    pub config: EncoderConfig,
    pub image_encoder: ImageEncoder,
    pub prompt_encoder: PromptEncoder,
    pub bank: ExpertBank,
    pub gate: Option<GatingNetwork>,
}

/// What the router decided for one input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub top_index: Option<usize>,
    pub top_label: Option<String>,
    pub s_top: f64,
    pub fired: bool,
    pub scores: Vec<f64>,
    /// Decoder invocations made while answering, by kind.
    pub general_decodes: usize,
    pub expert_decodes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoeOutput {
    pub probs: Vec<f64>,
    pub general: MaskLogits,
    pub report: RoutingReport,
}

impl MoeModel {
    /// Randomly initialized encoders and general decoder, no experts, no gate.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image_encoder = ImageEncoder::new(config, &mut rng)?;
        let prompt_encoder = PromptEncoder::new(config, &mut rng)?;
        let general = MaskDecoder::new(GENERAL_PREFIX, config, &mut rng)?;
        Ok(MoeModel {
            config,
            image_encoder,
            prompt_encoder,
            bank: ExpertBank::new(general),
            gate: None,
        })
    }

    /// Fresh gate bound to the current expert order.
    pub fn init_gate(&mut self, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.gate = Some(GatingNetwork::new(self.config.channels, &self.bank.labels(), &mut rng)?);
        Ok(())
    }

    pub fn embed(&self, volume: &Volume, prompt: &PromptSpec) -> Result<(ImageEmbedding, PromptEmbedding)> {
        Ok((self.image_encoder.encode(volume)?, self.prompt_encoder.encode(prompt)?))
    }

    fn check_gate(&self) -> Result<Option<&GatingNetwork>> {
        if self.bank.is_empty() {
            return Ok(None);
        }
        match &self.gate {
            None => Err(Error::Contract(format!(
                "bank has {} experts but no gate",
                self.bank.len()
            ))),
            Some(gate) if gate.labels() != self.bank.labels().as_slice() => Err(Error::Contract(format!(
                "gate was trained for {:?}, bank holds {:?}",
                gate.labels(),
                self.bank.labels()
            ))),
            Some(gate) => Ok(Some(gate)),
        }
    }

    pub fn infer(&self, volume: &Volume, prompt: &PromptSpec, selector: &SelectorConfig) -> Result<MoeOutput> {
        let (image, prompt) = self.embed(volume, prompt)?;
        self.infer_embedded(&image, &prompt, selector)
    }

    /// MoE inference from precomputed embeddings. The general decoder always
    /// runs; the Top-1 expert runs only when the switch fires.
    pub fn infer_embedded(
        &self,
        image: &ImageEmbedding,
        prompt: &PromptEmbedding,
        selector: &SelectorConfig,
    ) -> Result<MoeOutput> {
        selector.validate()?;
        let general = self.bank.general.decode(image, prompt)?;
        let mut report = RoutingReport {
            top_index: None,
            top_label: None,
            s_top: 0.0,
            fired: false,
            scores: vec![],
            general_decodes: 1,
            expert_decodes: 0,
        };
        let Some(gate) = self.check_gate()? else {
            return Ok(MoeOutput {
                probs: general.probs(),
                general,
                report,
            });
        };
        let scores = gate.scores(image, prompt)?;
        let (label, expert) = self.bank.expert_by_index(scores.top_index)?;
        report.top_index = Some(scores.top_index);
        report.top_label = Some(label.to_string());
        report.s_top = scores.s_top;
        report.scores = scores.scores.clone();
        let probs = if selector.fires(scores.s_top) {
            report.fired = true;
            report.expert_decodes = 1;
            let top = expert.decode(image, prompt)?;
            let (wg, wt) = fusion_weights(selector.fusion, scores.s_top, &general, &top);
            fuse(&general.probs(), &top.probs(), wg, wt)
        } else {
            general.probs()
        };
        Ok(MoeOutput { probs, general, report })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.image_encoder.params();
        v.extend(self.prompt_encoder.params());
        v.extend(self.bank.params());
        if let Some(g) = &self.gate {
            v.extend(g.params());
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.image_encoder.params_mut();
        v.extend(self.prompt_encoder.params_mut());
        v.extend(self.bank.params_mut());
        if let Some(g) = &mut self.gate {
            v.extend(g.params_mut());
        }
        v
    }

    /// Checksums per parameter group: `encoder`, `prompt_encoder`,
    /// `decoder.general`, `decoder.expert.<label>` and `gate`.
    pub fn group_checksums(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("encoder".to_string(), params_checksum(self.image_encoder.params())),
            ("prompt_encoder".to_string(), params_checksum(self.prompt_encoder.params())),
            ("decoder.general".to_string(), params_checksum(self.bank.general.params())),
        ];
        for (label, d) in self.bank.experts() {
            out.push((format!("decoder.expert.{label}"), params_checksum(d.params())));
        }
        if let Some(g) = &self.gate {
            out.push(("gate".to_string(), params_checksum(g.params())));
        }
        out
    }

    pub fn checksum(&self) -> String {
        params_checksum(self.params())
    }

    pub fn set_all_frozen(&mut self, frozen: bool) {
        self.params_mut().into_iter().for_each(|p| p.set_frozen(frozen));
    }
}

impl MoeModel {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.set_meta("encoder_config", serde_json::to_string(&self.config)?);
        ck.set_meta("experts", self.bank.labels().join(","));
        if let Some(g) = &self.gate {
            ck.set_meta("gate_experts", g.labels().join(","));
        }
        for p in self.params() {
            ck.push(p.name.clone(), p.tensor.clone().with_requires_grad(false));
        }
        Ok(ck)
    }

    /// Rebuilds a model, checking the expert manifests and every tensor shape
    /// before accepting any values.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: EncoderConfig = serde_json::from_str(
            ck.meta("encoder_config")
                .ok_or_else(|| Error::Load("checkpoint lacks encoder_config".into()))?,
        )
        .map_err(|e| Error::Load(format!("encoder_config: {e}")))?;
        let labels = split_labels(ck.meta("experts").unwrap_or(""));
        let mut model = MoeModel::new(config, 0).map_err(|e| Error::Load(e.to_string()))?;
        for l in &labels {
            model.bank.clone_expert(l).map_err(|e| Error::Load(e.to_string()))?;
        }
        if let Some(gate_labels) = ck.meta("gate_experts") {
            let gate_labels = split_labels(gate_labels);
            if gate_labels != labels {
                return Err(Error::Load(format!(
                    "gate was trained against experts {gate_labels:?} but the bank holds {labels:?}"
                )));
            }
            model.init_gate(0).map_err(|e| Error::Load(e.to_string()))?;
        }

        let mut stored: BTreeMap<&str, &crate::tensor::Tensor> =
            ck.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in model.params() {
            let t = stored
                .get(p.name.as_str())
                .ok_or_else(|| Error::Load(format!("checkpoint lacks tensor {}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Load(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
        }
        for p in model.params_mut() {
            let t = stored.remove(p.name.as_str()).expect("checked above");
            p.tensor.data_mut().copy_from_slice(t.data());
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::Load(format!("unexpected tensor {extra} in checkpoint")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        MoeModel::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn split_labels(s: &str) -> Vec<String> {
    s.split(',').filter(|l| !l.is_empty()).map(str::to_string).collect()
}
