//! End-to-end pipeline: corpus, foundation pretraining, expert finetuning,
//! gate training, evaluation and ablation, all derived from one master seed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{default_grid, evaluate, EvalOptions, EvalReport};
use crate::model::MoeModel;
use crate::selector::SelectorConfig;
use crate::synthdata::{build_corpora, derive_seed, CategoryGroup, Corpus, CorpusConfig, Sample, Split};
use crate::training::{finetune_expert, pretrain, train_gating, LossCurve, PretrainConfig, TrainConfig, TrainMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: TrainConfig,
    pub gate: TrainConfig,
    pub selector: SelectorConfig,
}

impl Default for PipelineConfig {
    /// Desk-scale settings; see the README for how they relate to the
    /// reference learning rates kept in [`TrainConfig::default`].
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            corpus: CorpusConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig {
                steps: 1000,
                ..Default::default()
            },
            finetune: TrainConfig {
                lr_expert: 1e-3,
                steps: 300,
                mode: TrainMode::ExpertFinetune,
                ..Default::default()
            },
            gate: TrainConfig {
                lr_gate: 3e-4,
                steps: 2000,
                mode: TrainMode::GateOnly,
                unmapped_uniform: true,
                ..Default::default()
            },
            selector: SelectorConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.encoder.validate()?;
        if self.corpus.volume_side != self.encoder.volume_side {
            return Err(Error::Config(format!(
                "corpus volume side {} differs from encoder volume side {}",
                self.corpus.volume_side, self.encoder.volume_side
            )));
        }
        self.finetune.validate()?;
        self.gate.validate()?;
        self.selector.validate()
    }

    /// Reads a JSON file whose objects are merged key by key over the
    /// defaults, so `{"gate": {"steps": 20}}` keeps every other gate setting.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        PipelineConfig::from_json_str(&text)
            .map_err(|e| Error::Config(format!("config file {}: {e}", path.display())))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let overlay: serde_json::Value = serde_json::from_str(text)?;
        let mut base = serde_json::to_value(PipelineConfig::default())?;
        merge_json(&mut base, overlay);
        Ok(serde_json::from_value(base)?)
    }

    /// Per-stage seed derived from the master seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }
}

fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn general_train(corpus: &Corpus) -> Vec<&Sample> {
    corpus.iter(Split::Train, CategoryGroup::General).collect()
}

pub fn general_held_out(corpus: &Corpus) -> Vec<&Sample> {
    corpus.iter(Split::HeldOut, CategoryGroup::General).collect()
}

pub fn make_corpus(config: &PipelineConfig) -> Result<Corpus> {
    build_corpora(&config.corpus, config.stage_seed("corpus"))
}

/// Fresh model pretrained on the general categories.
pub fn foundation(config: &PipelineConfig, corpus: &Corpus) -> Result<(MoeModel, LossCurve)> {
    let mut model = MoeModel::new(config.encoder, config.stage_seed("init"))?;
    let mut pc = config.pretrain.clone();
    pc.seed = config.stage_seed("pretrain");
    let curve = pretrain(&mut model, &general_train(corpus), &pc)?;
    Ok((model, curve))
}

/// Clones the general decoder into an expert named `category` (unless it
/// exists) and finetunes it. A present gate gains a neutral output for a new
/// expert and needs retraining.
pub fn add_expert(
    config: &PipelineConfig,
    model: &mut MoeModel,
    corpus: &Corpus,
    category: &str,
) -> Result<LossCurve> {
    if corpus.config.group_of(category) != Some(CategoryGroup::Expert) {
        return Err(Error::Validation(format!("{category} is not an expert category of this corpus")));
    }
    if model.bank.index_of(category).is_none() {
        model.bank.clone_expert(category)?;
        if let Some(gate) = model.gate.as_mut() {
            gate.add_expert(category)?;
        }
    }
    let mut tc = config.finetune.clone();
    tc.seed = config.stage_seed(&format!("finetune:{category}"));
    finetune_expert(model, category, &corpus.category(Split::Train, category), &tc)
}

/// Gate training data: training samples of categories with an expert in
/// `labels`, plus all others when they are to be pushed toward uniform scores.
pub fn gate_samples<'a>(config: &TrainConfig, labels: &[String], corpus: &'a Corpus) -> Vec<&'a Sample> {
    let mapped = |s: &&Sample| labels.contains(&s.category);
    let mut samples: Vec<&Sample> = corpus
        .iter(Split::Train, CategoryGroup::Expert)
        .filter(mapped)
        .collect();
    if config.unmapped_uniform {
        samples.extend(corpus.iter(Split::Train, CategoryGroup::Expert).filter(|s| !mapped(s)));
        samples.extend(corpus.iter(Split::Train, CategoryGroup::General));
    }
    samples
}

/// Trains the gate, initializing a fresh one when there is none or when it
/// was built for a different expert list.
pub fn train_gate(
    config: &PipelineConfig,
    gate_config: &TrainConfig,
    model: &mut MoeModel,
    corpus: &Corpus,
) -> Result<LossCurve> {
    let stale = match &model.gate {
        Some(g) => g.labels() != model.bank.labels(),
        None => true,
    };
    if stale {
        model.init_gate(config.stage_seed("gate-init"))?;
    }
    let mut tc = gate_config.clone();
    tc.seed = config.stage_seed("gate");
    let samples = gate_samples(&tc, &model.bank.labels(), corpus);
    train_gating(model, &samples, &tc)
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub corpus_checksum: String,
    pub foundation: MoeModel,
    pub experts: MoeModel,
    pub model: MoeModel,
    pub curves: BTreeMap<String, LossCurve>,
    pub report: EvalReport,
    pub ablation: EvalReport,
}

impl PipelineRun {
    /// Checkpoint and CSV files keyed by relative path.
    pub fn artifacts(&self) -> Result<BTreeMap<String, Vec<u8>>> {
        let mut out = BTreeMap::new();
        out.insert("foundation.ckpt".into(), self.foundation.to_checkpoint()?.to_bytes()?);
        out.insert("experts.ckpt".into(), self.experts.to_checkpoint()?.to_bytes()?);
        out.insert("moe.ckpt".into(), self.model.to_checkpoint()?.to_bytes()?);
        for (name, curve) in &self.curves {
            out.insert(format!("curves/{name}.csv"), curve.to_csv().into_bytes());
        }
        out.insert("matrix.csv".into(), self.report.matrix_csv().into_bytes());
        out.insert("routing.csv".into(), self.report.routing_csv().into_bytes());
        out.insert("ablation.csv".into(), self.ablation.ablation_csv().into_bytes());
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (name, bytes) in self.artifacts()? {
            write_atomic(&dir.join(name), &bytes)?;
        }
        Ok(())
    }
}

/// Every stage in order on an in-memory corpus.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineRun> {
    config.validate()?;
    let corpus = make_corpus(config)?;
    let mut curves = BTreeMap::new();
    let (foundation, curve) = foundation(config, &corpus)?;
    curves.insert("pretrain".to_string(), curve);
    let mut model = foundation.clone();
    for category in corpus.config.expert_names() {
        let curve = add_expert(config, &mut model, &corpus, &category)?;
        curves.insert(format!("finetune_{category}"), curve);
    }
    let experts = model.clone();
    curves.insert("gate".to_string(), train_gate(config, &config.gate, &mut model, &corpus)?);
    let report = evaluate(&model, &corpus, &EvalOptions::matrix(config.selector))?;
    let ablation = evaluate(
        &model,
        &corpus,
        &EvalOptions {
            selector: config.selector,
            matrix: false,
            grid: default_grid(),
        },
    )?;
    Ok(PipelineRun {
        corpus_checksum: corpus.checksum(),
        foundation,
        experts,
        model,
        curves,
        report,
        ablation,
    })
}

/// Record of one command invocation, written next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub duration_secs: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub results: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            inputs: vec![],
            outputs: vec![],
            version: version_string(),
            duration_secs: 0.0,
            results: BTreeMap::new(),
        }
    }

    pub fn finish(&mut self, elapsed: Duration) {
        self.duration_secs = elapsed.as_secs_f64();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }
}

/// `v<crate version>`, with `-<describe>` appended when the build
/// environment provides `VOLMOE_GIT_DESCRIBE`.
pub fn version_string() -> String {
    match option_env!("VOLMOE_GIT_DESCRIBE") {
        Some(d) if !d.is_empty() => format!("v{}-{d}", env!("CARGO_PKG_VERSION")),
        _ => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}
