use volmoe::synthdata::{
    build_corpora, generate, CategoryGroup, Corpus, CorpusConfig, CategorySpec, Sample, ShapeFamily, Split,
};
use volmoe::volume::Mask;

fn small_config() -> CorpusConfig {
    CorpusConfig {
        train_per_category: 3,
        heldout_per_category: 2,
        ..Default::default()
    }
}

/// Foreground voxel count and longest / shortest bounding-box extent.
fn radiomics(mask: &Mask) -> (usize, f64) {
    let d = mask.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut count = 0;
    for x in 0..d[0] {
        for y in 0..d[1] {
            for z in 0..d[2] {
                if mask.get([x, y, z]) {
                    count += 1;
                    for (a, v) in [x, y, z].into_iter().enumerate() {
                        lo[a] = lo[a].min(v);
                        hi[a] = hi[a].max(v);
                    }
                }
            }
        }
    }
    let ext: Vec<f64> = (0..3).map(|a| (hi[a] - lo[a] + 1) as f64).collect();
    let aspect = ext.iter().copied().fold(0.0, f64::max) / ext.iter().copied().fold(f64::INFINITY, f64::min);
    (count, aspect)
}

fn spec(config: &CorpusConfig, name: &str) -> CategorySpec {
    config.categories().find(|(s, _)| s.name == name).unwrap().0.clone()
}

#[test]
fn ball_and_tube_are_separable_by_bbox_aspect() {
    let config = CorpusConfig::default();
    let mut correct = 0;
    for (i, name) in ["organ_ball", "organ_tube"].iter().cycle().take(100).enumerate() {
        let s = generate(&spec(&config, name), config.volume_side, 1000 + i as u64).unwrap();
        let (count, aspect) = radiomics(&s.mask);
        assert!(count > 0);
        let predicted = if aspect > 1.75 { "organ_tube" } else { "organ_ball" };
        correct += usize::from(predicted == *name);
    }
    assert_eq!(correct, 100);
}

/// Dice of `volume > t` (or `< t`) with the best threshold for this sample.
fn best_threshold_dice(s: &Sample) -> f64 {
    let v = s.volume.data();
    let m = s.mask.data();
    let fg: usize = m.iter().map(|&b| b as usize).sum();
    let mut sorted: Vec<(f32, u8)> = v.iter().copied().zip(m.iter().copied()).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    let mut best: f64 = 0.0;
    // Sweeping the cut through the sorted values: the lower part is one class,
    // the upper part the other.
    let mut fg_below = 0usize;
    for k in 0..=n {
        let below = k;
        let above = n - k;
        let fg_above = fg - fg_below;
        best = best.max(2.0 * fg_above as f64 / (above + fg) as f64);
        best = best.max(2.0 * fg_below as f64 / (below + fg) as f64);
        if k < n {
            fg_below += sorted[k].1 as usize;
        }
    }
    best
}

#[test]
fn pure_thresholding_stays_below_point_nine() {
    let config = CorpusConfig::default();
    for (spec, _) in config.categories() {
        let mean: f64 = (0..10)
            .map(|i| best_threshold_dice(&generate(spec, config.volume_side, 77 + i).unwrap()))
            .sum::<f64>()
            / 10.0;
        eprintln!("{}: best-threshold dice {mean:.3}", spec.name);
        assert!(mean < 0.9, "{} is solved by thresholding (dice {mean:.3})", spec.name);
    }
}

#[test]
fn default_config_shape() {
    let c = CorpusConfig::default();
    assert_eq!(c.general_names().len(), 4);
    assert_eq!(c.expert_names().len(), 4);
    assert_eq!((c.train_per_category, c.heldout_per_category), (100, 50));
}

#[test]
fn splits_are_disjoint_and_sized() {
    let c = small_config();
    let corpus = build_corpora(&c, 11).unwrap();
    let mut ids: Vec<&str> = corpus.entries.iter().map(|e| e.sample.sample_id.as_str()).collect();
    let n = ids.len();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), n);
    for name in c.expert_names().iter().chain(&c.general_names()) {
        assert_eq!(corpus.category(Split::Train, name).len(), 3);
        assert_eq!(corpus.category(Split::HeldOut, name).len(), 2);
    }
    assert_eq!(corpus.iter(Split::HeldOut, CategoryGroup::Expert).count(), 8);
}

#[test]
fn save_load_round_trip_and_regeneration() {
    let c = small_config();
    let corpus = build_corpora(&c, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.save(dir.path()).unwrap();
    let loaded = Corpus::load(dir.path()).unwrap();
    assert_eq!(loaded.checksum(), corpus.checksum());
    assert_eq!(loaded.entries.len(), corpus.entries.len());
    for (a, b) in loaded.entries.iter().zip(&corpus.entries) {
        assert_eq!(a.sample.volume, b.sample.volume);
        assert_eq!(a.sample.mask, b.sample.mask);
        assert_eq!(a.sample.sample_id, b.sample.sample_id);
    }
    let manifest = loaded.manifest();
    let again = build_corpora(&manifest.config, manifest.seed).unwrap();
    assert_eq!(again.checksum(), corpus.checksum());
    assert_ne!(build_corpora(&c, 6).unwrap().checksum(), corpus.checksum());
}

#[test]
fn tampered_sample_fails_checksum() {
    let corpus = build_corpora(&small_config(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    corpus.save(dir.path()).unwrap();
    let victim = std::fs::read_dir(dir.path().join("samples"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "vol"))
        .unwrap();
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&victim, bytes).unwrap();
    let err = Corpus::load(dir.path()).unwrap_err();
    assert!(matches!(err, volmoe::Error::Checksum(_)), "{err}");
}

#[test]
fn every_family_fits_the_default_volume() {
    let c = CorpusConfig::default();
    for family in [ShapeFamily::Ball, ShapeFamily::Box, ShapeFamily::Ellipsoid, ShapeFamily::Tube] {
        let s = c.categories().find(|(s, _)| s.family == family).unwrap().0;
        for seed in 0..20 {
            let sample = generate(s, c.volume_side, seed).unwrap();
            assert!(sample.mask.count() >= volmoe::synthdata::MIN_FOREGROUND);
        }
    }
}
