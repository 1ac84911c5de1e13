mod support;

use std::collections::BTreeMap;

use volmoe::autodiff::Graph;
use volmoe::encoders::PromptKind;
use volmoe::losses::{dice_loss, dicece_loss, DICE_SMOOTH};
use volmoe::model::MoeModel;
use volmoe::optim::{zero_grads, AdamW, AdamWConfig};
use volmoe::synthdata::{CategoryGroup, Sample, Split};
use volmoe::training::{
    finetune_expert, pretrain, prompt_for, train_gating, PretrainConfig, TrainConfig, TrainMode,
};

use support::small;

fn longest_decreasing_run(xs: &[f64]) -> usize {
    let mut best = 0;
    let mut run = 0;
    for w in xs.windows(2) {
        run = if w[1] < w[0] { run + 1 } else { 0 };
        best = best.max(run);
    }
    best
}

/// Trains the general decoder alone on one fixed (sample, prompt) pair and
/// returns the loss before each step.
fn overfit_decoder(use_dicece: bool) -> Vec<f64> {
    let mut model = MoeModel::new(small::encoder(), 21).unwrap();
    let corpus = small::corpus(4);
    let sample = corpus.category(Split::Train, "g_ball")[0];
    let prompt = prompt_for(sample, PromptKind::Box).unwrap();
    let (image, p) = model.embed(&sample.volume, &prompt).unwrap();
    let target: Vec<f64> = sample.mask.data().iter().map(|&b| b as f64).collect();
    let mut opt = AdamW::new(AdamWConfig::with_lr(3e-4));
    let decoder = &mut model.bank.general;
    let mut losses = vec![];
    for _ in 0..15 {
        let mut g = Graph::new();
        let t = g.constant(image.tokens.clone());
        let q = g.constant(p.vector.clone());
        let logits = decoder.forward(&mut g, t, q).unwrap();
        let loss = if use_dicece {
            dicece_loss(&mut g, logits, &target, DICE_SMOOTH).unwrap()
        } else {
            let probs = g.sigmoid(logits).unwrap();
            dice_loss(&mut g, probs, &target, DICE_SMOOTH).unwrap()
        };
        let l = g.value(loss).item();
        if use_dicece {
            assert!(l >= 0.0);
        } else {
            assert!((0.0..=1.0).contains(&l));
        }
        losses.push(l);
        g.backward(loss).unwrap();
        g.accumulate_into(decoder.params_mut()).unwrap();
        opt.step(decoder.params_mut()).unwrap();
        zero_grads(decoder.params_mut());
    }
    losses
}

#[test]
fn dice_loss_overfits_a_fixed_batch() {
    let l = overfit_decoder(false);
    assert!(longest_decreasing_run(&l) >= 10, "{l:?}");
}

#[test]
fn dicece_loss_overfits_a_fixed_batch() {
    let l = overfit_decoder(true);
    assert!(longest_decreasing_run(&l) >= 10, "{l:?}");
}

fn changed_groups(before: &[(String, String)], after: &[(String, String)]) -> Vec<String> {
    let b: BTreeMap<_, _> = before.iter().cloned().collect();
    after
        .iter()
        .filter(|(k, v)| b.get(k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect()
}

fn gate_config(mode: TrainMode, steps: usize) -> TrainConfig {
    TrainConfig {
        lr_gate: 3e-3,
        lr_expert: 1e-3,
        steps,
        batch_size: 2,
        mode,
        unmapped_uniform: true,
        ..Default::default()
    }
}

#[test]
fn each_mode_changes_only_its_trainable_groups() {
    let corpus = small::corpus(8);
    let base = small::model_with_experts(30);

    let mut m = base.clone();
    let cfg = TrainConfig {
        lr_expert: 1e-3,
        steps: 5,
        mode: TrainMode::ExpertFinetune,
        ..Default::default()
    };
    finetune_expert(&mut m, "e_box", &corpus.category(Split::Train, "e_box"), &cfg).unwrap();
    assert_eq!(changed_groups(&base.group_checksums(), &m.group_checksums()), ["decoder.expert.e_box"]);

    let samples: Vec<&Sample> = corpus.iter(Split::Train, CategoryGroup::Expert).collect();
    let mut m = base.clone();
    train_gating(&mut m, &samples, &gate_config(TrainMode::GateOnly, 5)).unwrap();
    assert_eq!(changed_groups(&base.group_checksums(), &m.group_checksums()), ["gate"]);

    let mut m = base.clone();
    m.gate.as_mut().unwrap().zero_output();
    let start = m.group_checksums();
    // tau 0 makes the Top-1 expert fire on every sample.
    let cfg = TrainConfig {
        tau: 0.0,
        ..gate_config(TrainMode::GatePlusTop1, 6)
    };
    train_gating(&mut m, &samples, &cfg).unwrap();
    let changed = changed_groups(&start, &m.group_checksums());
    assert!(changed.contains(&"gate".to_string()), "{changed:?}");
    assert!(changed.iter().any(|g| g.starts_with("decoder.expert.")), "{changed:?}");
    for frozen in ["encoder", "prompt_encoder", "decoder.general"] {
        assert!(!changed.iter().any(|g| g == frozen), "{frozen} changed");
    }
}

#[test]
fn gate_loss_trailing_window_beats_initial_window() {
    let corpus = small::corpus(9);
    let mut m = small::model_with_experts(40);
    let samples: Vec<&Sample> = corpus.iter(Split::Train, CategoryGroup::Expert).collect();
    let curve = train_gating(&mut m, &samples, &gate_config(TrainMode::GateOnly, 150)).unwrap();
    let ce = curve.column("gate_ce").unwrap();
    let mean = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let (head, tail) = (mean(&ce[..50]), mean(&ce[ce.len() - 50..]));
    assert!(tail < head, "initial {head:.4}, trailing {tail:.4}");
}

#[test]
fn training_is_deterministic() {
    let corpus = small::corpus(3);
    let run = || {
        let mut m = small::model_with_experts(50);
        let cfg = TrainConfig {
            lr_expert: 1e-3,
            steps: 4,
            mode: TrainMode::ExpertFinetune,
            ..Default::default()
        };
        finetune_expert(&mut m, "e_ball", &corpus.category(Split::Train, "e_ball"), &cfg).unwrap();
        let samples: Vec<&Sample> = corpus.iter(Split::Train, CategoryGroup::Expert).collect();
        train_gating(&mut m, &samples, &gate_config(TrainMode::GateOnly, 4)).unwrap();
        m.to_checkpoint().unwrap().to_bytes().unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_step_pretrain_leaves_the_model_untouched() {
    let corpus = small::corpus(2);
    let mut m = MoeModel::new(small::encoder(), 8).unwrap();
    let before = m.checksum();
    let samples: Vec<&Sample> = corpus.iter(Split::Train, CategoryGroup::General).collect();
    let cfg = PretrainConfig {
        steps: 0,
        ..Default::default()
    };
    let curve = pretrain(&mut m, &samples, &cfg).unwrap();
    assert!(curve.rows.is_empty());
    assert_eq!(m.checksum(), before);
}

#[test]
fn gate_training_rejects_unmapped_categories_unless_asked() {
    let corpus = small::corpus(5);
    let mut m = small::model_with_experts(60);
    let samples: Vec<&Sample> = corpus.iter(Split::Train, CategoryGroup::General).take(2).collect();
    let strict = TrainConfig {
        unmapped_uniform: false,
        ..gate_config(TrainMode::GateOnly, 1)
    };
    let err = train_gating(&mut m, &samples, &strict).unwrap_err();
    assert!(matches!(err, volmoe::Error::Validation(_)), "{err}");
    train_gating(&mut m, &samples, &gate_config(TrainMode::GateOnly, 1)).unwrap();
}
