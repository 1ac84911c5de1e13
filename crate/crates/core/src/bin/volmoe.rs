//! `volmoe` command-line interface.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use volmoe::checkpoint::write_atomic;
use volmoe::encoders::PromptKind;
use volmoe::eval::{baseline_dice, default_grid, evaluate, prompt_kind_name, EvalOptions};
use volmoe::model::MoeModel;
use volmoe::pipeline::{add_expert, foundation, general_held_out, train_gate, PipelineConfig, RunManifest};
use volmoe::selector::{Fusion, SelectorConfig};
use volmoe::synthdata::{build_corpora, load_sample, Corpus, CorpusConfig};
use volmoe::training::{pretrain, prompt_for, PretrainConfig, TrainMode};
use volmoe::{Error, Result};

#[derive(Parser)]
#[command(name = "volmoe", version, about = "Promptable 3D segmentation with a gated mixture of expert decoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic general and expert corpora.
    GenData(GenData),
    /// Train encoders and the general decoder on the general categories. This
    /// builds the foundation model that the mixture extends; it stands in for
    /// inheriting pretrained weights.
    Pretrain(Pretrain),
    /// Add (or continue) a finetuned expert decoder for one expert category.
    FinetuneExpert(FinetuneExpert),
    /// Train the gating network over the current experts.
    TrainGate(TrainGate),
    /// Segment one stored sample and write the mask and routing report.
    Infer(Infer),
    /// Evaluate baseline, finetuned experts and the mixture on held-out data.
    Eval(Eval),
    /// Evaluate the selector grid (tau x fusion rule) on expert categories.
    Ablate(Ablate),
}

#[derive(Args)]
struct Common {
    /// JSON pipeline configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenData {
    /// JSON corpus configuration (defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Pretrain {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Continue from an existing checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneExpert {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    category: String,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainGate {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// gate_only or gate_plus_top1.
    #[arg(long)]
    mode: Option<TrainMode>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Infer {
    #[arg(long)]
    ckpt: PathBuf,
    /// Path of the sample's JSON sidecar inside a corpus directory.
    #[arg(long)]
    sample: PathBuf,
    /// points6 or bbox.
    #[arg(long, default_value = "points6")]
    prompt: String,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value = "weighted")]
    fusion: Fusion,
    /// Output prefix: writes `<out>.mask` and `<out>.report.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    fusion: Option<Fusion>,
    /// Reference checkpoint: every parameter group except the trainable ones
    /// must have identical checksums in both checkpoints.
    #[arg(long)]
    verify_freeze: Option<PathBuf>,
    /// Groups allowed to differ from the reference (comma separated).
    #[arg(long, default_value = "gate", value_delimiter = ',')]
    trainable: Vec<String>,
}

#[derive(Args)]
struct Ablate {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config file {}: {e}", path.display()))
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("invalid config file {}: {e}", path.display())))
}

fn pipeline_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = match &common.config {
        Some(p) => PipelineConfig::from_json_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn manifest_path_for(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir)
}

fn gen_data(a: &GenData) -> Result<()> {
    let t = Instant::now();
    let config: CorpusConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => CorpusConfig::default(),
    };
    let corpus = build_corpora(&config, a.seed)?;
    corpus.save(&a.out)?;
    let mut m = RunManifest::new("gen-data", to_value(&config)?, a.seed);
    m.inputs.extend(a.config.clone());
    m.outputs.push(a.out.clone());
    m.results.insert("samples".into(), json!(corpus.entries.len()));
    m.results.insert("corpus_checksum".into(), json!(corpus.checksum()));
    m.finish(t.elapsed());
    m.save(&a.out.join("run_manifest.json"))?;
    println!("wrote {} samples to {} (checksum {})", corpus.entries.len(), a.out.display(), corpus.checksum());
    Ok(())
}

fn cmd_pretrain(a: &Pretrain) -> Result<()> {
    let t = Instant::now();
    let mut cfg = pipeline_config(&a.common)?;
    if let Some(s) = a.steps {
        cfg.pretrain.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.pretrain.lr = lr;
    }
    let corpus = load_corpus(&a.data)?;
    cfg.corpus = corpus.config.clone();
    cfg.validate()?;
    let (model, curve) = match &a.init {
        None => foundation(&cfg, &corpus)?,
        Some(p) => {
            let mut model = MoeModel::load(p)?;
            let pc = PretrainConfig {
                seed: cfg.stage_seed("pretrain"),
                ..cfg.pretrain.clone()
            };
            let curve = pretrain(&mut model, &volmoe::pipeline::general_train(&corpus), &pc)?;
            (model, curve)
        }
    };
    model.save(&a.out)?;
    let curve_path = a.out.with_extension("loss.csv");
    curve.save(&curve_path)?;
    let dice = baseline_dice(&model, &general_held_out(&corpus))?;
    let mut m = RunManifest::new("pretrain", to_value(&cfg)?, cfg.seed);
    m.inputs.push(a.data.clone());
    m.inputs.extend(a.init.clone());
    m.outputs.extend([a.out.clone(), curve_path]);
    m.results.insert("general_held_out_dice".into(), json!(dice));
    m.finish(t.elapsed());
    m.save(&manifest_path_for(&a.out))?;
    println!("general held-out dice {dice:.4}");
    Ok(())
}

fn cmd_finetune(a: &FinetuneExpert) -> Result<()> {
    let t = Instant::now();
    let mut cfg = pipeline_config(&a.common)?;
    if let Some(s) = a.steps {
        cfg.finetune.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.finetune.lr_expert = lr;
    }
    let corpus = load_corpus(&a.data)?;
    cfg.corpus = corpus.config.clone();
    cfg.validate()?;
    let mut model = MoeModel::load(&a.ckpt)?;
    let curve = add_expert(&cfg, &mut model, &corpus, &a.category)?;
    model.save(&a.out)?;
    let curve_path = a.out.with_extension("loss.csv");
    curve.save(&curve_path)?;
    let mut m = RunManifest::new("finetune-expert", to_value(&cfg)?, cfg.seed);
    m.inputs.extend([a.ckpt.clone(), a.data.clone()]);
    m.outputs.extend([a.out.clone(), curve_path]);
    m.results.insert("category".into(), json!(a.category));
    m.results.insert("experts".into(), json!(model.bank.labels()));
    m.finish(t.elapsed());
    m.save(&manifest_path_for(&a.out))?;
    println!("experts: {}", model.bank.labels().join(","));
    Ok(())
}

fn cmd_train_gate(a: &TrainGate) -> Result<()> {
    let t = Instant::now();
    let mut cfg = pipeline_config(&a.common)?;
    if let Some(mode) = a.mode {
        cfg.gate.mode = mode;
    }
    if let Some(s) = a.steps {
        cfg.gate.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.gate.lr_gate = lr;
    }
    let corpus = load_corpus(&a.data)?;
    cfg.corpus = corpus.config.clone();
    cfg.validate()?;
    let mut model = MoeModel::load(&a.ckpt)?;
    let before = model.group_checksums();
    let gate_cfg = cfg.gate.clone();
    let curve = train_gate(&cfg, &gate_cfg, &mut model, &corpus)?;
    model.save(&a.out)?;
    let curve_path = a.out.with_extension("loss.csv");
    curve.save(&curve_path)?;
    let mut m = RunManifest::new("train-gate", to_value(&cfg)?, cfg.seed);
    m.inputs.extend([a.ckpt.clone(), a.data.clone()]);
    m.outputs.extend([a.out.clone(), curve_path]);
    m.results.insert("checksums_before".into(), json!(before.into_iter().collect::<BTreeMap<_, _>>()));
    m.results.insert(
        "checksums_after".into(),
        json!(model.group_checksums().into_iter().collect::<BTreeMap<_, _>>()),
    );
    m.finish(t.elapsed());
    m.save(&manifest_path_for(&a.out))?;
    let ce = curve.column("gate_ce").unwrap_or_default();
    if let Some(last) = ce.last() {
        println!("final gate cross-entropy {last:.4}");
    }
    Ok(())
}

fn parse_prompt_kind(s: &str) -> Result<PromptKind> {
    match s {
        "points6" => Ok(PromptKind::Points),
        "bbox" => Ok(PromptKind::Box),
        other => Err(Error::Config(format!("unknown prompt kind `{other}` (expected points6 or bbox)"))),
    }
}

fn cmd_infer(a: &Infer) -> Result<()> {
    let t = Instant::now();
    let selector = SelectorConfig::new(a.tau, a.fusion)?;
    let kind = parse_prompt_kind(&a.prompt)?;
    let model = MoeModel::load(&a.ckpt)?;
    let (sample, _) = load_sample(&a.sample)?;
    let prompt = prompt_for(&sample, kind)?;
    let out = model.infer(&sample.volume, &prompt, &selector)?;
    let mask = volmoe::volume::Mask::from_probs(sample.volume.dims(), &out.probs, volmoe::eval::BINARIZE_THRESHOLD)?;
    let dice = volmoe::eval::dice_score(&mask, &sample.mask)?;
    let mut mask_path = a.out.as_os_str().to_owned();
    mask_path.push(".mask");
    let mask_path = PathBuf::from(mask_path);
    write_atomic(&mask_path, mask.data())?;
    let mut report_path = a.out.as_os_str().to_owned();
    report_path.push(".report.json");
    let report_path = PathBuf::from(report_path);
    let report = json!({
        "sample_id": sample.sample_id,
        "category": sample.category,
        "prompt_kind": prompt_kind_name(kind),
        "prompt": prompt,
        "routing": out.report,
        "dice": dice,
    });
    write_atomic(&report_path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    let mut m = RunManifest::new("infer", to_value(&selector)?, 0);
    m.inputs.extend([a.ckpt.clone(), a.sample.clone()]);
    m.outputs.extend([mask_path, report_path]);
    m.finish(t.elapsed());
    m.save(&manifest_path_for(&a.out))?;
    println!(
        "top {} s_top {:.4} fired {} dice {dice:.4}",
        out.report.top_label.as_deref().unwrap_or("-"),
        out.report.s_top,
        out.report.fired
    );
    Ok(())
}

fn verify_freeze(model: &MoeModel, reference: &Path, trainable: &[String]) -> Result<usize> {
    let reference = MoeModel::load(reference)?;
    let now: BTreeMap<String, String> = model.group_checksums().into_iter().collect();
    let mut checked = 0;
    for (group, sum) in reference.group_checksums() {
        if trainable.contains(&group) {
            continue;
        }
        match now.get(&group) {
            Some(s) if *s == sum => checked += 1,
            Some(_) => return Err(Error::Contract(format!("frozen group {group} differs from the reference"))),
            None => return Err(Error::Contract(format!("group {group} missing from the checkpoint"))),
        }
    }
    Ok(checked)
}

fn cmd_eval(a: &Eval) -> Result<()> {
    let t = Instant::now();
    let mut cfg = pipeline_config(&a.common)?;
    if let Some(tau) = a.tau {
        cfg.selector.tau = tau;
    }
    if let Some(f) = a.fusion {
        cfg.selector.fusion = f;
    }
    cfg.selector.validate()?;
    let model = MoeModel::load(&a.ckpt)?;
    let mut m = RunManifest::new("eval", to_value(&cfg.selector)?, cfg.seed);
    if let Some(reference) = &a.verify_freeze {
        let n = verify_freeze(&model, reference, &a.trainable)?;
        m.inputs.push(reference.clone());
        m.results.insert("frozen_groups_verified".into(), json!(n));
        println!("freeze verified for {n} groups");
    }
    let corpus = load_corpus(&a.data)?;
    let report = evaluate(&model, &corpus, &EvalOptions::matrix(cfg.selector))?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    report.save(&a.out)?;
    let experts = corpus.config.expert_names();
    let summary = report.routing_summary(&experts);
    m.inputs.extend([a.ckpt.clone(), a.data.clone()]);
    m.outputs.extend([a.out.join("matrix.csv"), a.out.join("routing.csv")]);
    m.results.insert("routing_accuracy".into(), json!(summary.accuracy()));
    m.results.insert("mean_s_top_correct".into(), json!(summary.mean_s_top_correct));
    m.results.insert("confusion".into(), json!(summary.confusion));
    m.finish(t.elapsed());
    m.save(&a.out.join("run_manifest.json"))?;
    for group in ["group:general", "group:expert"] {
        let base = report.mean("baseline", group).unwrap_or(0.0);
        let moe = report.mean("moe", group).unwrap_or(0.0);
        println!("{group}: baseline {base:.4} moe {moe:.4}");
    }
    println!("routing accuracy {:.4}", summary.accuracy());
    Ok(())
}

fn cmd_ablate(a: &Ablate) -> Result<()> {
    let t = Instant::now();
    let cfg = pipeline_config(&a.common)?;
    let model = MoeModel::load(&a.ckpt)?;
    let corpus = load_corpus(&a.data)?;
    let grid = default_grid();
    let report = evaluate(
        &model,
        &corpus,
        &EvalOptions {
            selector: cfg.selector,
            matrix: false,
            grid: grid.clone(),
        },
    )?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    report.save(&a.out)?;
    let mut m = RunManifest::new("ablate", to_value(&grid)?, cfg.seed);
    m.inputs.extend([a.ckpt.clone(), a.data.clone()]);
    m.outputs.extend([a.out.join("matrix.csv"), a.out.join("ablation.csv")]);
    m.finish(t.elapsed());
    m.save(&a.out.join("run_manifest.json"))?;
    print!("{}", report.ablation_csv());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::FinetuneExpert(a) => cmd_finetune(a),
        Command::TrainGate(a) => cmd_train_gate(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
