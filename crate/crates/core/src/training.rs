//! Foundation pretraining, expert finetuning and gate training, with freeze
//! policies checked by parameter-group checksums.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::write_atomic;
use crate::encoders::{ImageEmbedding, PromptKind, PromptSpec};
use crate::error::{Error, Result};
use crate::gating::GateScores;
use crate::losses::{dicece_loss, dicece_on_probs, gate_ce_loss, gate_uniform_loss, DICE_SMOOTH};
use crate::model::MoeModel;
use crate::optim::{AdamW, AdamWConfig};
use crate::selector::SelectorConfig;
use crate::synthdata::{bbox_prompt, derive_seed, sample_point_prompts, Sample};
use crate::tensor::Param;

pub const POINTS_PER_PROMPT: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    ExpertFinetune,
    GateOnly,
    GatePlusTop1,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert_finetune" => Ok(TrainMode::ExpertFinetune),
            "gate_only" => Ok(TrainMode::GateOnly),
            "gate_plus_top1" => Ok(TrainMode::GatePlusTop1),
            other => Err(Error::Config(format!(
                "unknown training mode `{other}` (expected expert_finetune, gate_only or gate_plus_top1)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_expert: f64,
    pub lr_gate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub dice_smooth: f64,
    pub mode: TrainMode,
    /// Gate training only: samples whose category has no expert are kept and
    /// pushed toward uniform scores instead of being rejected.
    pub unmapped_uniform: bool,
    /// Switch threshold used for the fused mask in `gate_plus_top1`.
    pub tau: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_expert: 1e-4,
            lr_gate: 1e-6,
            batch_size: 4,
            steps: 300,
            seed: 0,
            dice_smooth: DICE_SMOOTH,
            mode: TrainMode::GateOnly,
            unmapped_uniform: false,
            tau: SelectorConfig::default().tau,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr_expert", self.lr_expert), ("lr_gate", self.lr_gate)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(Error::Config("dice_smooth must be positive".into()));
        }
        SelectorConfig {
            tau: self.tau,
            ..Default::default()
        }
        .validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub dice_smooth: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            lr: 1e-3,
            batch_size: 4,
            steps: 1500,
            seed: 0,
            dice_smooth: DICE_SMOOTH,
        }
    }
}

/// Parameter groups (as named by [`MoeModel::group_checksums`]) that must not
/// change during a run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub groups: BTreeSet<String>,
}

impl FreezePolicy {
    /// Everything in `model` except the listed groups.
    pub fn all_except(model: &MoeModel, trainable: &[&str]) -> Self {
        FreezePolicy {
            groups: model
                .group_checksums()
                .into_iter()
                .map(|(g, _)| g)
                .filter(|g| !trainable.contains(&g.as_str()))
                .collect(),
        }
    }

    pub fn snapshot(&self, model: &MoeModel) -> BTreeMap<String, String> {
        model
            .group_checksums()
            .into_iter()
            .filter(|(g, _)| self.groups.contains(g))
            .collect()
    }

    pub fn verify(&self, model: &MoeModel, before: &BTreeMap<String, String>) -> Result<()> {
        let after = self.snapshot(model);
        for (group, sum) in before {
            if after.get(group) != Some(sum) {
                return Err(Error::Contract(format!("frozen group {group} changed during training")));
            }
        }
        Ok(())
    }
}

fn group_of(name: &str) -> &str {
    if let Some(rest) = name.strip_prefix("decoder.expert.") {
        let end = rest.find('.').map_or(name.len(), |i| "decoder.expert.".len() + i);
        &name[..end]
    } else if name.starts_with("decoder.general.") {
        "decoder.general"
    } else {
        name.split('.').next().unwrap_or(name)
    }
}

fn apply_freeze(model: &mut MoeModel, policy: &FreezePolicy) {
    for p in model.params_mut() {
        let frozen = policy.groups.contains(group_of(&p.name));
        p.set_frozen(frozen);
    }
}

/// Per-step losses; the first column is always `loss`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl LossCurve {
    fn new(columns: &[&str]) -> Self {
        LossCurve {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: vec![],
        }
    }

    pub fn loss(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r[0]).collect()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("step,{}\n", self.columns.join(","));
        for (step, row) in self.rows.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            let _ = writeln!(out, "{step},{}", cells.join(","));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// The evaluation/training prompt for a sample: six foreground points seeded
/// from the sample seed, or the tight bounding box.
pub fn prompt_for(sample: &Sample, kind: PromptKind) -> Result<PromptSpec> {
    match kind {
        PromptKind::Points => sample_point_prompts(&sample.mask, POINTS_PER_PROMPT, sample.seed),
        PromptKind::Box => bbox_prompt(&sample.mask, 0),
    }
}

/// Random prompt kind and, for points, a fresh point draw.
fn random_prompt<R: Rng>(sample: &Sample, rng: &mut R) -> Result<PromptSpec> {
    if rng.random::<bool>() {
        let seed = derive_seed(rng.random(), &sample.sample_id);
        sample_point_prompts(&sample.mask, POINTS_PER_PROMPT, seed)
    } else {
        bbox_prompt(&sample.mask, 0)
    }
}

/// Image embeddings of frozen-encoder training sets, computed once.
pub fn embed_all(model: &MoeModel, samples: &[&Sample]) -> Result<Vec<ImageEmbedding>> {
    samples.iter().map(|s| model.image_encoder.encode(&s.volume)).collect()
}

fn optimizer_step(opt: &mut AdamW, model: &mut MoeModel) -> Result<()> {
    let params: Vec<&mut Param> = model.params_mut();
    opt.step(params)?;
    model.params_mut().into_iter().for_each(|p| p.tensor.zero_grad());
    Ok(())
}

/// Joint training of image encoder, prompt encoder and general decoder on
/// general-category samples with DiceCE.
pub fn pretrain(model: &mut MoeModel, samples: &[&Sample], config: &PretrainConfig) -> Result<LossCurve> {
    if samples.is_empty() && config.steps > 0 {
        return Err(Error::Validation("pretraining needs at least one sample".into()));
    }
    let policy = FreezePolicy::all_except(model, &["encoder", "prompt_encoder", "decoder.general"]);
    let before = policy.snapshot(model);
    apply_freeze(model, &policy);
    let mut opt = AdamW::new(AdamWConfig::with_lr(config.lr));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut curve = LossCurve::new(&["loss"]);
    let scale = 1.0 / config.batch_size as f64;
    for _ in 0..config.steps {
        let mut total = 0.0;
        for _ in 0..config.batch_size {
            let sample = samples[rng.random_range(0..samples.len())];
            let prompt = random_prompt(sample, &mut rng)?;
            let mut g = Graph::new();
            let tokens = model.image_encoder.forward(&mut g, &sample.volume)?;
            let p = model.prompt_encoder.forward(&mut g, &prompt)?;
            let logits = model.bank.general.forward(&mut g, tokens, p)?;
            let loss = dicece_loss(&mut g, logits, &sample.mask.as_f64(), config.dice_smooth)?;
            total += g.value(loss).item() * scale;
            let scaled = g.scale(loss, scale)?;
            g.backward(scaled)?;
            g.accumulate_into(model.params_mut())?;
        }
        optimizer_step(&mut opt, model)?;
        curve.rows.push(vec![total]);
    }
    model.set_all_frozen(false);
    policy.verify(model, &before)?;
    Ok(curve)
}

/// Finetunes the expert `label` on samples of its own category. Encoders, the
/// general decoder, the gate and all other experts stay frozen.
pub fn finetune_expert(
    model: &mut MoeModel,
    label: &str,
    samples: &[&Sample],
    config: &TrainConfig,
) -> Result<LossCurve> {
    config.validate()?;
    model.bank.expert(label)?;
    if let Some(s) = samples.iter().find(|s| s.category != label) {
        return Err(Error::Validation(format!(
            "sample {} has category {}, expected {label}",
            s.sample_id, s.category
        )));
    }
    if samples.is_empty() && config.steps > 0 {
        return Err(Error::Validation(format!("no training samples for {label}")));
    }
    let group = format!("decoder.expert.{label}");
    let policy = FreezePolicy::all_except(model, &[group.as_str()]);
    let before = policy.snapshot(model);
    apply_freeze(model, &policy);
    let embeddings = if config.steps > 0 { embed_all(model, samples)? } else { vec![] };
    let mut opt = AdamW::new(AdamWConfig::with_lr(config.lr_expert));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut curve = LossCurve::new(&["loss"]);
    let scale = 1.0 / config.batch_size as f64;
    for _ in 0..config.steps {
        let mut total = 0.0;
        for _ in 0..config.batch_size {
            let i = rng.random_range(0..samples.len());
            let prompt = model.prompt_encoder.encode(&random_prompt(samples[i], &mut rng)?)?;
            let expert = model.bank.expert(label)?;
            let mut g = Graph::new();
            let t = g.constant(embeddings[i].tokens.clone());
            let p = g.constant(prompt.vector);
            let logits = expert.forward(&mut g, t, p)?;
            let loss = dicece_loss(&mut g, logits, &samples[i].mask.as_f64(), config.dice_smooth)?;
            total += g.value(loss).item() * scale;
            let scaled = g.scale(loss, scale)?;
            g.backward(scaled)?;
            g.accumulate_into(model.bank.expert_mut(label)?.params_mut())?;
        }
        optimizer_step(&mut opt, model)?;
        curve.rows.push(vec![total]);
    }
    model.set_all_frozen(false);
    policy.verify(model, &before)?;
    Ok(curve)
}

/// Trains the gate to route each sample to the expert named after its
/// category. In `gate_plus_top1` mode the current Top-1 expert additionally
/// learns from DiceCE on the fused mask (gate score held constant there).
pub fn train_gating(model: &mut MoeModel, samples: &[&Sample], config: &TrainConfig) -> Result<LossCurve> {
    config.validate()?;
    if config.mode == TrainMode::ExpertFinetune {
        return Err(Error::Config("train_gating needs mode gate_only or gate_plus_top1".into()));
    }
    let gate_labels = match &model.gate {
        Some(gate) => gate.labels().to_vec(),
        None => return Err(Error::Contract("model has no gate to train".into())),
    };
    if gate_labels != model.bank.labels() {
        return Err(Error::Contract("gate labels do not match the expert bank".into()));
    }
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        match model.bank.index_of(&s.category) {
            Some(k) => targets.push(Some(k)),
            None if config.unmapped_uniform => targets.push(None),
            None => {
                return Err(Error::Validation(format!(
                    "sample {} has category {} with no expert",
                    s.sample_id, s.category
                )))
            }
        }
    }
    if samples.is_empty() && config.steps > 0 {
        return Err(Error::Validation("no gate training samples".into()));
    }
    let mut trainable = vec!["gate".to_string()];
    if config.mode == TrainMode::GatePlusTop1 {
        trainable.extend(model.bank.labels().iter().map(|l| format!("decoder.expert.{l}")));
    }
    let trainable_refs: Vec<&str> = trainable.iter().map(String::as_str).collect();
    let policy = FreezePolicy::all_except(model, &trainable_refs);
    let before = policy.snapshot(model);
    apply_freeze(model, &policy);
    let embeddings = if config.steps > 0 { embed_all(model, samples)? } else { vec![] };
    let mut gate_opt = AdamW::new(AdamWConfig::with_lr(config.lr_gate));
    let mut expert_opt = AdamW::new(AdamWConfig::with_lr(config.lr_expert));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut curve = LossCurve::new(&["loss", "gate_ce"]);
    let scale = 1.0 / config.batch_size as f64;
    for _ in 0..config.steps {
        let (mut total, mut ce_total) = (0.0, 0.0);
        for _ in 0..config.batch_size {
            let i = rng.random_range(0..samples.len());
            let prompt = model.prompt_encoder.encode(&random_prompt(samples[i], &mut rng)?)?;
            let gate = model.gate.as_ref().expect("checked above");
            let mut g = Graph::new();
            let t = g.constant(embeddings[i].tokens.clone());
            let p = g.constant(prompt.vector.clone());
            let logits = gate.forward(&mut g, t, p)?;
            let ce = match targets[i] {
                Some(k) => gate_ce_loss(&mut g, logits, k)?,
                None => gate_uniform_loss(&mut g, logits)?,
            };
            let ce_value = g.value(ce).item();
            let mut loss = ce;
            let mut top_label = None;
            if config.mode == TrainMode::GatePlusTop1 {
                let scores = GateScores::from_logits(g.value(logits).data())?;
                if scores.s_top > config.tau {
                    let label = model.bank.labels()[scores.top_index].clone();
                    let general = model.bank.general.decode(&embeddings[i], &prompt)?.probs();
                    let expert = model.bank.expert(&label)?;
                    let top = expert.forward(&mut g, t, p)?;
                    let top = g.sigmoid(top)?;
                    let s = scores.s_top;
                    let weighted = g.scale(top, s)?;
                    let dims = g.shape(top).to_vec();
                    let base: Vec<f64> = general.iter().map(|v| (1.0 - s) * v).collect();
                    let base = g.constant(crate::tensor::Tensor::new(dims, base)?);
                    let fused = g.add(base, weighted)?;
                    let seg = dicece_on_probs(&mut g, fused, &samples[i].mask.as_f64(), config.dice_smooth)?;
                    loss = g.add(loss, seg)?;
                    top_label = Some(label);
                }
            }
            total += g.value(loss).item() * scale;
            ce_total += ce_value * scale;
            let scaled = g.scale(loss, scale)?;
            g.backward(scaled)?;
            g.accumulate_into(model.gate.as_mut().expect("checked above").params_mut())?;
            if let Some(label) = top_label {
                g.accumulate_into(model.bank.expert_mut(&label)?.params_mut())?;
            }
        }
        if let Some(gate) = model.gate.as_mut() {
            gate_opt.step(gate.params_mut())?;
        }
        if config.mode == TrainMode::GatePlusTop1 {
            expert_opt.step(model.bank.experts_mut().flat_map(|(_, d)| d.params_mut()))?;
        }
        model.params_mut().into_iter().for_each(|p| p.tensor.zero_grad());
        curve.rows.push(vec![total, ce_total]);
    }
    model.set_all_frozen(false);
    policy.verify(model, &before)?;
    Ok(curve)
}
