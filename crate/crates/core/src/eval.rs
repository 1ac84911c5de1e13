//! Dice scoring, the variant-by-category evaluation matrix, routing statistics
//! and the selector ablation grid.
//!
//! CSV layouts (header row first, rows in the order listed):
//!
//! - `matrix.csv`: `variant,category,prompt_kind,mean_dice,n`. Variants are
//!   `baseline`, `ft_expert:<label>` per expert in bank order, then `moe`.
//!   Categories follow corpus order, then the aggregates `group:general` and
//!   `group:expert`. Prompt kinds are `points6` then `bbox`.
//! - `routing.csv`: `sample_id,category,prompt_kind,top_label,s_top,fired,dice`,
//!   one row per held-out sample and prompt kind in corpus order.
//! - `ablation.csv`: `tau,fusion,category_group,mean_dice,fired_rate`, one row
//!   per grid cell on the expert categories, taus ascending, fusions in
//!   `weighted, avg, aft_weight` order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::decoder::MaskLogits;
use crate::encoders::PromptKind;
use crate::error::{Error, Result};
use crate::model::MoeModel;
use crate::selector::{fuse, fusion_weights, Fusion, SelectorConfig};
use crate::synthdata::{CategoryGroup, Corpus, Sample, Split};
use crate::training::prompt_for;
use crate::volume::Mask;

pub const BINARIZE_THRESHOLD: f64 = 0.5;
pub const PROMPT_KINDS: [PromptKind; 2] = [PromptKind::Points, PromptKind::Box];
pub const ABLATION_TAUS: [f64; 4] = [0.3, 0.5, 0.7, 1.0];

pub fn prompt_kind_name(kind: PromptKind) -> &'static str {
    match kind {
        PromptKind::Points => "points6",
        PromptKind::Box => "bbox",
    }
}

pub fn group_name(group: CategoryGroup) -> &'static str {
    match group {
        CategoryGroup::General => "general",
        CategoryGroup::Expert => "expert",
    }
}

/// `2|A n B| / (|A| + |B|)`, and 1 when both masks are empty.
pub fn dice_score(pred: &Mask, target: &Mask) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(Error::Contract(format!(
            "dice on masks of shape {:?} and {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let (p, t) = (p != 0, t != 0);
        inter += usize::from(p && t);
        a += usize::from(p);
        b += usize::from(t);
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

fn dice_of_probs(probs: &[f64], target: &Mask) -> Result<f64> {
    dice_score(&Mask::from_probs(target.dims(), probs, BINARIZE_THRESHOLD)?, target)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub variant: String,
    pub category: String,
    pub prompt_kind: String,
    pub mean_dice: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    pub sample_id: String,
    pub category: String,
    pub prompt_kind: String,
    pub top_label: Option<String>,
    pub s_top: f64,
    pub fired: bool,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub tau: f64,
    pub fusion: Fusion,
    pub category_group: String,
    pub mean_dice: f64,
    pub fired_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub matrix: Vec<MatrixRow>,
    pub routing: Vec<RoutingRow>,
    pub ablation: Vec<AblationRow>,
}

#[derive(Default)]
struct Acc {
    sum: f64,
    n: usize,
}

impl Acc {
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
    }

    fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }
}

/// Routing outcome per category: how often each expert label won.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingSummary {
    pub confusion: BTreeMap<String, BTreeMap<String, usize>>,
    pub correct: usize,
    pub total: usize,
    pub mean_s_top_correct: f64,
    pub fired_rate: f64,
}

impl RoutingSummary {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

impl EvalReport {
    pub fn cell(&self, variant: &str, category: &str, prompt_kind: &str) -> Option<f64> {
        self.matrix
            .iter()
            .find(|r| r.variant == variant && r.category == category && r.prompt_kind == prompt_kind)
            .map(|r| r.mean_dice)
    }

    /// Mean Dice of a variant over a category or aggregate, averaged over
    /// both prompt kinds.
    pub fn mean(&self, variant: &str, category: &str) -> Option<f64> {
        let a = self.cell(variant, category, prompt_kind_name(PromptKind::Points))?;
        let b = self.cell(variant, category, prompt_kind_name(PromptKind::Box))?;
        Some((a + b) / 2.0)
    }

    pub fn ablation_cell(&self, tau: f64, fusion: Fusion) -> Option<&AblationRow> {
        self.ablation.iter().find(|r| r.tau == tau && r.fusion == fusion)
    }

    /// Routing rows restricted to `categories`.
    pub fn routing_summary(&self, categories: &[String]) -> RoutingSummary {
        let mut s = RoutingSummary::default();
        let mut s_top = Acc::default();
        let mut fired = 0;
        for r in self.routing.iter().filter(|r| categories.contains(&r.category)) {
            let label = r.top_label.clone().unwrap_or_else(|| "-".into());
            *s.confusion.entry(r.category.clone()).or_default().entry(label).or_default() += 1;
            s.total += 1;
            fired += usize::from(r.fired);
            if r.top_label.as_deref() == Some(r.category.as_str()) {
                s.correct += 1;
                s_top.add(r.s_top);
            }
        }
        s.mean_s_top_correct = s_top.mean();
        s.fired_rate = if s.total == 0 { 0.0 } else { fired as f64 / s.total as f64 };
        s
    }

    pub fn matrix_csv(&self) -> String {
        let mut out = String::from("variant,category,prompt_kind,mean_dice,n\n");
        for r in &self.matrix {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{}",
                r.variant, r.category, r.prompt_kind, r.mean_dice, r.n
            );
        }
        out
    }

    pub fn routing_csv(&self) -> String {
        let mut out = String::from("sample_id,category,prompt_kind,top_label,s_top,fired,dice\n");
        for r in &self.routing {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{},{:.6}",
                r.sample_id,
                r.category,
                r.prompt_kind,
                r.top_label.as_deref().unwrap_or(""),
                r.s_top,
                r.fired,
                r.dice
            );
        }
        out
    }

    pub fn ablation_csv(&self) -> String {
        let mut out = String::from("tau,fusion,category_group,mean_dice,fired_rate\n");
        for r in &self.ablation {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6}",
                r.tau, r.fusion, r.category_group, r.mean_dice, r.fired_rate
            );
        }
        out
    }

    /// Writes whichever of the three tables are non-empty into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if !self.matrix.is_empty() {
            write_atomic(&dir.join("matrix.csv"), self.matrix_csv().as_bytes())?;
        }
        if !self.routing.is_empty() {
            write_atomic(&dir.join("routing.csv"), self.routing_csv().as_bytes())?;
        }
        if !self.ablation.is_empty() {
            write_atomic(&dir.join("ablation.csv"), self.ablation_csv().as_bytes())?;
        }
        Ok(())
    }
}

/// What [`evaluate`] should compute besides the baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub selector: SelectorConfig,
    /// Emit `ft_expert:<label>` and `moe` matrix rows and routing rows.
    pub matrix: bool,
    /// Selector settings for the ablation grid; empty skips it.
    pub grid: Vec<SelectorConfig>,
}

impl EvalOptions {
    pub fn matrix(selector: SelectorConfig) -> Self {
        EvalOptions {
            selector,
            matrix: true,
            grid: vec![],
        }
    }

    pub fn ablation() -> Self {
        EvalOptions {
            selector: SelectorConfig::default(),
            matrix: false,
            grid: default_grid(),
        }
    }
}

/// `tau` in [`ABLATION_TAUS`] crossed with every fusion rule.
pub fn default_grid() -> Vec<SelectorConfig> {
    ABLATION_TAUS
        .iter()
        .flat_map(|&tau| Fusion::ALL.iter().map(move |&fusion| SelectorConfig { tau, fusion }))
        .collect()
}

pub fn run_matrix(model: &MoeModel, corpus: &Corpus, selector: &SelectorConfig) -> Result<EvalReport> {
    evaluate(model, corpus, &EvalOptions::matrix(*selector))
}

pub fn run_ablation(model: &MoeModel, corpus: &Corpus, grid: &[SelectorConfig]) -> Result<EvalReport> {
    let mut opts = EvalOptions::ablation();
    opts.grid = grid.to_vec();
    evaluate(model, corpus, &opts)
}

/// One pass over the held-out split. Every decoder runs once per sample and
/// prompt kind; all variants and grid cells reuse those outputs.
pub fn evaluate(model: &MoeModel, corpus: &Corpus, opts: &EvalOptions) -> Result<EvalReport> {
    opts.selector.validate()?;
    for c in &opts.grid {
        c.validate()?;
    }
    let labels = model.bank.labels();
    let mut variants = vec!["baseline".to_string()];
    if opts.matrix {
        variants.extend(labels.iter().map(|l| format!("ft_expert:{l}")));
        variants.push("moe".to_string());
    }
    let categories: Vec<(String, CategoryGroup)> = corpus
        .config
        .categories()
        .map(|(c, g)| (c.name.clone(), g))
        .collect();
    // (variant, category, kind) and (variant, group, kind)
    let mut cells: BTreeMap<(usize, String, PromptKind), Acc> = BTreeMap::new();
    let mut groups: BTreeMap<(usize, CategoryGroup, PromptKind), Acc> = BTreeMap::new();
    let mut grid_dice: Vec<Acc> = opts.grid.iter().map(|_| Acc::default()).collect();
    let mut grid_fired: Vec<usize> = vec![0; opts.grid.len()];
    let mut report = EvalReport::default();

    for entry in corpus.entries.iter().filter(|e| e.split == Split::HeldOut) {
        let sample = &entry.sample;
        let image = model.image_encoder.encode(&sample.volume)?;
        for kind in PROMPT_KINDS {
            let prompt = model.prompt_encoder.encode(&prompt_for(sample, kind)?)?;
            let general = model.bank.general.decode(&image, &prompt)?;
            let pg = general.probs();
            let base = dice_of_probs(&pg, &sample.mask)?;
            let mut record = |v: usize, d: f64| {
                cells.entry((v, sample.category.clone(), kind)).or_default().add(d);
                groups.entry((v, entry.group, kind)).or_default().add(d);
            };
            record(0, base);
            let needs_experts = opts.matrix || !opts.grid.is_empty();
            let expert_logits: Vec<MaskLogits> = if needs_experts {
                model
                    .bank
                    .experts()
                    .map(|(_, d)| d.decode(&image, &prompt))
                    .collect::<Result<_>>()?
            } else {
                vec![]
            };
            if opts.matrix {
                for (k, logits) in expert_logits.iter().enumerate() {
                    record(1 + k, dice_of_probs(&logits.probs(), &sample.mask)?);
                }
                let out = model.infer_embedded(&image, &prompt, &opts.selector)?;
                let d = dice_of_probs(&out.probs, &sample.mask)?;
                record(variants.len() - 1, d);
                report.routing.push(RoutingRow {
                    sample_id: sample.sample_id.clone(),
                    category: sample.category.clone(),
                    prompt_kind: prompt_kind_name(kind).into(),
                    top_label: out.report.top_label,
                    s_top: out.report.s_top,
                    fired: out.report.fired,
                    dice: d,
                });
            }
            if !opts.grid.is_empty() && entry.group == CategoryGroup::Expert {
                let scores = match &model.gate {
                    Some(gate) if !model.bank.is_empty() => Some(gate.scores(&image, &prompt)?),
                    _ => None,
                };
                for (i, cfg) in opts.grid.iter().enumerate() {
                    let probs = match &scores {
                        Some(s) if cfg.fires(s.s_top) => {
                            grid_fired[i] += 1;
                            let top = &expert_logits[s.top_index];
                            let (wg, wt) = fusion_weights(cfg.fusion, s.s_top, &general, top);
                            fuse(&pg, &top.probs(), wg, wt)
                        }
                        _ => pg.clone(),
                    };
                    grid_dice[i].add(dice_of_probs(&probs, &sample.mask)?);
                }
            }
        }
    }

    for (v, variant) in variants.iter().enumerate() {
        let rows = categories
            .iter()
            .map(|(c, _)| (c.clone(), cells.get(&(v, c.clone(), PromptKind::Points)), cells.get(&(v, c.clone(), PromptKind::Box))))
            .chain([CategoryGroup::General, CategoryGroup::Expert].into_iter().map(|g| {
                (
                    format!("group:{}", group_name(g)),
                    groups.get(&(v, g, PromptKind::Points)),
                    groups.get(&(v, g, PromptKind::Box)),
                )
            }));
        for (category, points, bbox) in rows {
            for (kind, acc) in [(PromptKind::Points, points), (PromptKind::Box, bbox)] {
                let Some(acc) = acc else { continue };
                report.matrix.push(MatrixRow {
                    variant: variant.clone(),
                    category: category.clone(),
                    prompt_kind: prompt_kind_name(kind).into(),
                    mean_dice: acc.mean(),
                    n: acc.n,
                });
            }
        }
    }
    for (i, cfg) in opts.grid.iter().enumerate() {
        let n = grid_dice[i].n;
        report.ablation.push(AblationRow {
            tau: cfg.tau,
            fusion: cfg.fusion,
            category_group: group_name(CategoryGroup::Expert).into(),
            mean_dice: grid_dice[i].mean(),
            fired_rate: if n == 0 { 0.0 } else { grid_fired[i] as f64 / n as f64 },
        });
    }
    Ok(report)
}

/// Mean Dice of the general decoder alone over the given samples and both
/// prompt kinds.
pub fn baseline_dice(model: &MoeModel, samples: &[&Sample]) -> Result<f64> {
    let mut acc = Acc::default();
    for s in samples {
        let image = model.image_encoder.encode(&s.volume)?;
        for kind in PROMPT_KINDS {
            let prompt = model.prompt_encoder.encode(&prompt_for(s, kind)?)?;
            let logits = model.bank.general.decode(&image, &prompt)?;
            acc.add(dice_of_probs(&logits.probs(), &s.mask)?);
        }
    }
    Ok(acc.mean())
}

/// Baseline mean Dice over the expert categories, accumulated in the same
/// order as the ablation grid so the two compare exactly.
pub fn baseline_expert_dice(model: &MoeModel, corpus: &Corpus) -> Result<f64> {
    let samples: Vec<&Sample> = corpus.iter(Split::HeldOut, CategoryGroup::Expert).collect();
    baseline_dice(model, &samples)
}
