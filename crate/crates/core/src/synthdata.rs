//! Deterministic synthetic volumes with one labelled shape each, prompt
//! simulation and corpus assembly.
//!
//! Every sample derives its own RNG stream from `(master seed, sample id)`, so
//! samples can be regenerated independently and in any order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::write_atomic;
use crate::encoders::{PromptPoint, PromptSpec};
use crate::error::{Error, Result};
use crate::volume::{Coord, Mask, Volume};

/// Half-length over radius for tubes.
pub const TUBE_ASPECT: f64 = 2.5;
pub const MIN_FOREGROUND: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ball,
    Box,
    Ellipsoid,
    Tube,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityProfile {
    pub fg_mean: f64,
    pub fg_std: f64,
    pub bg_mean: f64,
    pub bg_std: f64,
}

impl IntensityProfile {
    pub fn new(fg_mean: f64, bg_mean: f64, std: f64) -> Self {
        IntensityProfile {
            fg_mean,
            fg_std: std,
            bg_mean,
            bg_std: std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub family: ShapeFamily,
    /// Range of the characteristic size in voxels: radius for balls and
    /// tubes, half-extent for boxes, semi-axis for ellipsoids.
    pub size_min: f64,
    pub size_max: f64,
    pub intensity: IntensityProfile,
    /// Optional inclusive region the shape centre must fall in.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<(Coord, Coord)>,
}

impl CategorySpec {
    pub fn new(name: &str, family: ShapeFamily, size: (f64, f64), intensity: IntensityProfile) -> Self {
        CategorySpec {
            name: name.to_string(),
            family,
            size_min: size.0,
            size_max: size.1,
            intensity,
            placement: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        crate::decoder::validate_label(&self.name).map_err(|e| Error::Validation(e.to_string()))?;
        if !(self.size_min > 0.0 && self.size_min <= self.size_max) {
            return Err(Error::Validation(format!(
                "category {}: bad size range [{}, {}]",
                self.name, self.size_min, self.size_max
            )));
        }
        let i = &self.intensity;
        if [i.fg_mean, i.fg_std, i.bg_mean, i.bg_std].iter().any(|v| !v.is_finite())
            || i.fg_std < 0.0
            || i.bg_std < 0.0
        {
            return Err(Error::Validation(format!("category {}: bad intensity profile", self.name)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryGroup {
    General,
    Expert,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub volume: Volume,
    pub mask: Mask,
    pub category: String,
    pub sample_id: String,
    pub seed: u64,
}

impl Sample {
    /// SHA-256 over the little-endian volume bytes followed by the mask bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.volume.data() {
            h.update(v.to_le_bytes());
        }
        h.update(self.mask.data());
        hex::encode(h.finalize())
    }
}

/// A solid shape with real-valued centre.
#[derive(Clone, Copy, Debug)]
enum Shape {
    Ball { c: [f64; 3], r: f64 },
    Box { c: [f64; 3], h: [f64; 3] },
    Ellipsoid { c: [f64; 3], a: [f64; 3] },
    Tube { c: [f64; 3], r: f64, axis: usize, half: f64 },
}

impl Shape {
    fn contains(&self, p: Coord) -> bool {
        let p = p.map(|v| v as f64);
        match *self {
            Shape::Ball { c, r } => (0..3).map(|a| (p[a] - c[a]).powi(2)).sum::<f64>() <= r * r,
            Shape::Box { c, h } => (0..3).all(|a| (p[a] - c[a]).abs() <= h[a]),
            Shape::Ellipsoid { c, a } => (0..3).map(|i| ((p[i] - c[i]) / a[i]).powi(2)).sum::<f64>() <= 1.0,
            Shape::Tube { c, r, axis, half } => {
                let radial: f64 = (0..3).filter(|&i| i != axis).map(|i| (p[i] - c[i]).powi(2)).sum();
                radial <= r * r && (p[axis] - c[axis]).abs() <= half
            }
        }
    }
}

fn sample_shape<R: Rng>(spec: &CategorySpec, side: usize, rng: &mut R) -> Result<Shape> {
    let mut size = || {
        if spec.size_max > spec.size_min {
            rng.random_range(spec.size_min..=spec.size_max)
        } else {
            spec.size_min
        }
    };
    // (extents, partial shape without centre)
    let (ext, make): ([f64; 3], Box<dyn Fn([f64; 3]) -> Shape>) = match spec.family {
        ShapeFamily::Ball => {
            let r = size();
            ([r; 3], Box::new(move |c| Shape::Ball { c, r }))
        }
        ShapeFamily::Box => {
            let h = [size(), size(), size()];
            (h, Box::new(move |c| Shape::Box { c, h }))
        }
        ShapeFamily::Ellipsoid => {
            let a = [size(), size(), size()];
            (a, Box::new(move |c| Shape::Ellipsoid { c, a }))
        }
        ShapeFamily::Tube => {
            let r = size();
            let axis = rng.random_range(0..3);
            let half = TUBE_ASPECT * r;
            let mut e = [r; 3];
            e[axis] = half;
            (e, Box::new(move |c| Shape::Tube { c, r, axis, half }))
        }
    };
    let mut c = [0.0; 3];
    for a in 0..3 {
        let mut lo = ext[a];
        let mut hi = side as f64 - 1.0 - ext[a];
        if let Some((pmin, pmax)) = spec.placement {
            lo = lo.max(pmin[a] as f64);
            hi = hi.min(pmax[a] as f64);
        }
        if lo > hi {
            return Err(Error::Generation(format!(
                "category {}: shape with extent {:.1} does not fit along axis {a}",
                spec.name, ext[a]
            )));
        }
        c[a] = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    }
    Ok(make(c))
}

/// One sample of `spec` in a `side^3` volume, fully determined by `seed`.
pub fn generate(spec: &CategorySpec, side: usize, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = sample_shape(spec, side, &mut rng)?;
    let dims = [side; 3];
    let mask = Mask::from_fn(dims, |p| shape.contains(p));
    if mask.count() < MIN_FOREGROUND {
        return Err(Error::Generation(format!(
            "category {}: only {} foreground voxels",
            spec.name,
            mask.count()
        )));
    }
    let i = spec.intensity;
    let fg = Normal::new(i.fg_mean, i.fg_std).map_err(|e| Error::Generation(e.to_string()))?;
    let bg = Normal::new(i.bg_mean, i.bg_std).map_err(|e| Error::Generation(e.to_string()))?;
    let data = mask
        .data()
        .iter()
        .map(|&m| if m != 0 { fg.sample(&mut rng) } else { bg.sample(&mut rng) } as f32)
        .collect();
    Ok(Sample {
        volume: Volume::new(dims, data)?,
        mask,
        category: spec.name.clone(),
        sample_id: format!("{}-{seed:016x}", spec.name),
        seed,
    })
}

/// Centroid-nearest foreground voxel first, then `n - 1` further foreground
/// voxels drawn uniformly without replacement. Masks with fewer than `n`
/// foreground voxels are sampled with replacement instead.
pub fn sample_point_prompts(mask: &Mask, n: usize, seed: u64) -> Result<PromptSpec> {
    if n == 0 {
        return Err(Error::Validation("need at least one prompt point".into()));
    }
    let fg = mask.foreground();
    if fg.is_empty() {
        return Err(Error::Validation("cannot prompt an empty mask".into()));
    }
    let mut centroid = [0.0; 3];
    for c in &fg {
        for a in 0..3 {
            centroid[a] += c[a] as f64 / fg.len() as f64;
        }
    }
    let dist = |c: &Coord| (0..3).map(|a| (c[a] as f64 - centroid[a]).powi(2)).sum::<f64>();
    let first = (0..fg.len())
        .min_by(|&i, &j| dist(&fg[i]).total_cmp(&dist(&fg[j])).then(i.cmp(&j)))
        .expect("non-empty");
    let mut points = vec![PromptPoint::foreground(fg[first])];
    let rest: Vec<Coord> = fg.iter().enumerate().filter(|&(i, _)| i != first).map(|(_, c)| *c).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rest.len() >= n - 1 {
        for i in index::sample(&mut rng, rest.len(), n - 1) {
            points.push(PromptPoint::foreground(rest[i]));
        }
    } else {
        for _ in 1..n {
            points.push(PromptPoint::foreground(fg[rng.random_range(0..fg.len())]));
        }
    }
    Ok(PromptSpec::Points { points })
}

/// Tight bounding box of the foreground, grown by `jitter` voxels per face and
/// clamped to the volume.
pub fn bbox_prompt(mask: &Mask, jitter: usize) -> Result<PromptSpec> {
    let (lo, hi) = mask
        .bounding_box()
        .ok_or_else(|| Error::Validation("cannot prompt an empty mask".into()))?;
    let dims = mask.dims();
    Ok(PromptSpec::Box {
        min: [0, 1, 2].map(|a| lo[a].saturating_sub(jitter)),
        max: [0, 1, 2].map(|a| (hi[a] + jitter).min(dims[a] - 1)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub volume_side: usize,
    pub train_per_category: usize,
    pub heldout_per_category: usize,
    pub general: Vec<CategorySpec>,
    pub expert: Vec<CategorySpec>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        // Noise is scaled to contrast so the best global threshold stays near
        // Dice 0.8 on every category.
        let std = 0.35;
        let wide = 1.0;
        let bright = IntensityProfile::new(1.0, 0.0, std);
        CorpusConfig {
            volume_side: 32,
            train_per_category: 100,
            heldout_per_category: 50,
            general: vec![
                CategorySpec::new("organ_ball", ShapeFamily::Ball, (7.0, 10.0), bright),
                CategorySpec::new("organ_box", ShapeFamily::Box, (6.0, 9.0), bright),
                CategorySpec::new("organ_ellipsoid", ShapeFamily::Ellipsoid, (6.0, 11.0), bright),
                CategorySpec::new("organ_tube", ShapeFamily::Tube, (5.0, 6.0), bright),
            ],
            expert: vec![
                CategorySpec::new("cyst", ShapeFamily::Ball, (7.0, 10.0), IntensityProfile::new(-1.0, 2.0, wide)),
                CategorySpec::new("lesion", ShapeFamily::Ellipsoid, (6.0, 11.0), IntensityProfile::new(0.0, 1.0, std)),
                CategorySpec::new("vessel", ShapeFamily::Tube, (5.0, 6.0), IntensityProfile::new(0.0, 3.0, wide)),
                CategorySpec::new("node", ShapeFamily::Box, (6.0, 9.0), IntensityProfile::new(-2.0, 1.0, wide)),
            ],
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.general.len() < 2 || self.expert.len() < 2 {
            return Err(Error::Validation(
                "need at least 2 general and 2 expert categories".into(),
            ));
        }
        if self.train_per_category == 0 || self.heldout_per_category == 0 {
            return Err(Error::Validation("split sizes must be positive".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for c in self.general.iter().chain(&self.expert) {
            c.validate()?;
            if !names.insert(c.name.as_str()) {
                return Err(Error::Validation(format!("duplicate category {}", c.name)));
            }
        }
        Ok(())
    }

    pub fn categories(&self) -> impl Iterator<Item = (&CategorySpec, CategoryGroup)> {
        self.general
            .iter()
            .map(|c| (c, CategoryGroup::General))
            .chain(self.expert.iter().map(|c| (c, CategoryGroup::Expert)))
    }

    pub fn group_of(&self, category: &str) -> Option<CategoryGroup> {
        self.categories().find(|(c, _)| c.name == category).map(|(_, g)| g)
    }

    pub fn expert_names(&self) -> Vec<String> {
        self.expert.iter().map(|c| c.name.clone()).collect()
    }

    pub fn general_names(&self) -> Vec<String> {
        self.general.iter().map(|c| c.name.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusEntry {
    pub sample: Sample,
    pub group: CategoryGroup,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub seed: u64,
    pub entries: Vec<CorpusEntry>,
}

/// Stable per-sample seed from the master seed and the sample id.
pub fn derive_seed(master: u64, sample_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(sample_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn build_corpora(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut entries = Vec::new();
    for (spec, group) in config.categories() {
        for (split, count, tag) in [
            (Split::Train, config.train_per_category, "train"),
            (Split::HeldOut, config.heldout_per_category, "heldout"),
        ] {
            for i in 0..count {
                let sample_id = format!("{}-{tag}-{i:04}", spec.name);
                let s = derive_seed(seed, &sample_id);
                let mut sample = generate(spec, config.volume_side, s)?;
                sample.sample_id = sample_id;
                entries.push(CorpusEntry { sample, group, split });
            }
        }
    }
    Ok(Corpus {
        config: config.clone(),
        seed,
        entries,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub shape: [usize; 3],
    pub category: String,
    pub group: CategoryGroup,
    pub split: Split,
    pub seed: u64,
    pub sample_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub config: CorpusConfig,
    pub splits: BTreeMap<String, Vec<String>>,
    pub checksums: BTreeMap<String, String>,
    pub corpus_checksum: String,
}

impl Corpus {
    pub fn iter(&self, split: Split, group: CategoryGroup) -> impl Iterator<Item = &Sample> {
        self.entries
            .iter()
            .filter(move |e| e.split == split && e.group == group)
            .map(|e| &e.sample)
    }

    pub fn category(&self, split: Split, category: &str) -> Vec<&Sample> {
        self.entries
            .iter()
            .filter(|e| e.split == split && e.sample.category == category)
            .map(|e| &e.sample)
            .collect()
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.sample.sample_id.as_bytes());
            h.update(e.sample.checksum().as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn manifest(&self) -> CorpusManifest {
        let mut splits: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut checksums = BTreeMap::new();
        for e in &self.entries {
            let key = match e.split {
                Split::Train => "train",
                Split::HeldOut => "held_out",
            };
            splits.entry(key.to_string()).or_default().push(e.sample.sample_id.clone());
            checksums.insert(e.sample.sample_id.clone(), e.sample.checksum());
        }
        CorpusManifest {
            seed: self.seed,
            config: self.config.clone(),
            splits,
            checksums,
            corpus_checksum: self.checksum(),
        }
    }

    /// Writes `samples/<id>.{vol,mask,json}` and `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let samples = dir.join("samples");
        fs::create_dir_all(&samples).map_err(|e| Error::io(&samples, e))?;
        for e in &self.entries {
            let s = &e.sample;
            let vol: Vec<u8> = s.volume.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            write_atomic(&samples.join(format!("{}.vol", s.sample_id)), &vol)?;
            write_atomic(&samples.join(format!("{}.mask", s.sample_id)), s.mask.data())?;
            let side = SampleSidecar {
                shape: s.volume.dims(),
                category: s.category.clone(),
                group: e.group,
                split: e.split,
                seed: s.seed,
                sample_id: s.sample_id.clone(),
            };
            write_atomic(
                &samples.join(format!("{}.json", s.sample_id)),
                serde_json::to_string_pretty(&side)?.as_bytes(),
            )?;
        }
        write_atomic(
            &dir.join("manifest.json"),
            serde_json::to_string_pretty(&self.manifest())?.as_bytes(),
        )
    }

    /// Reads a corpus written by [`Corpus::save`], verifying every checksum.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: CorpusManifest = serde_json::from_str(&text)?;
        let mut entries = Vec::new();
        let ids = ["train", "held_out"]
            .iter()
            .flat_map(|k| manifest.splits.get(*k).into_iter().flatten());
        for id in ids {
            let (sample, side) = load_sample(&dir.join("samples").join(format!("{id}.json")))?;
            if manifest.checksums.get(id) != Some(&sample.checksum()) {
                return Err(Error::Checksum(format!("sample {id} does not match the manifest")));
            }
            entries.push((sample, side.group, side.split));
        }
        // restore generation order: categories in config order, train before held-out
        let order: Vec<String> = manifest.config.categories().map(|(c, _)| c.name.clone()).collect();
        entries.sort_by_key(|(s, _, split)| {
            (
                order.iter().position(|n| *n == s.category).unwrap_or(usize::MAX),
                *split,
                s.sample_id.clone(),
            )
        });
        let corpus = Corpus {
            config: manifest.config,
            seed: manifest.seed,
            entries: entries
                .into_iter()
                .map(|(sample, group, split)| CorpusEntry { sample, group, split })
                .collect(),
        };
        if corpus.checksum() != manifest.corpus_checksum {
            return Err(Error::Checksum("corpus checksum does not match the manifest".into()));
        }
        Ok(corpus)
    }
}

/// Reads one sample given the path of its JSON sidecar; the volume and mask
/// blobs are its `.vol` and `.mask` siblings.
pub fn load_sample(sidecar: &Path) -> Result<(Sample, SampleSidecar)> {
    let text = fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let side: SampleSidecar = serde_json::from_str(&text)?;
    let id = &side.sample_id;
    let vp = sidecar.with_extension("vol");
    let raw = fs::read(&vp).map_err(|e| Error::io(&vp, e))?;
    if raw.len() % 4 != 0 {
        return Err(Error::Checksum(format!("{id}: volume blob is not a whole number of f32 values")));
    }
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let volume = Volume::new(side.shape, data).map_err(|e| Error::Checksum(format!("{id}: {e}")))?;
    let mp = sidecar.with_extension("mask");
    let mask = Mask::new(side.shape, fs::read(&mp).map_err(|e| Error::io(&mp, e))?)
        .map_err(|e| Error::Checksum(format!("{id}: {e}")))?;
    let sample = Sample {
        volume,
        mask,
        category: side.category.clone(),
        sample_id: side.sample_id.clone(),
        seed: side.seed,
    };
    Ok((sample, side))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ball(r: f64) -> CategorySpec {
        CategorySpec::new("b", ShapeFamily::Ball, (r, r), IntensityProfile::new(1.0, 0.0, 0.1))
    }

    #[test]
    fn ball_volume_close_to_continuous() {
        for seed in 0..5 {
            let s = generate(&ball(6.0), 32, seed).unwrap();
            let expected = 4.0 / 3.0 * std::f64::consts::PI * 216.0;
            let n = s.mask.count() as f64;
            assert!((n - expected).abs() <= 0.1 * expected, "{n} vs {expected}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = &CorpusConfig::default().expert[2];
        assert_eq!(generate(spec, 32, 42).unwrap(), generate(spec, 32, 42).unwrap());
        assert_ne!(generate(spec, 32, 42).unwrap(), generate(spec, 32, 43).unwrap());
    }

    #[test]
    fn oversized_shape_fails() {
        assert!(matches!(generate(&ball(20.0), 32, 0), Err(Error::Generation(_))));
        let tiny = ball(0.5);
        assert!(matches!(generate(&tiny, 32, 0), Err(Error::Generation(_))));
    }

    #[test]
    fn point_prompts() {
        let mut m = Mask::empty([8, 8, 8]);
        m.set([2, 3, 4], true);
        let p = sample_point_prompts(&m, 1, 0).unwrap();
        assert_eq!(
            p,
            PromptSpec::Points {
                points: vec![PromptPoint::foreground([2, 3, 4])]
            }
        );
        // fallback: more points than voxels
        let PromptSpec::Points { points } = sample_point_prompts(&m, 6, 0).unwrap() else { panic!() };
        assert_eq!(points.len(), 6);
        assert!(points.iter().all(|p| p.coord == [2, 3, 4]));
        assert!(sample_point_prompts(&Mask::empty([4, 4, 4]), 1, 0).is_err());
    }

    #[test]
    fn centred_ball_prompt_starts_at_centre() {
        let m = Mask::from_fn([32; 3], |p| {
            (0..3).map(|a| (p[a] as f64 - 15.0).powi(2)).sum::<f64>() <= 25.0
        });
        let PromptSpec::Points { points } = sample_point_prompts(&m, 6, 7).unwrap() else { panic!() };
        assert_eq!(points[0].coord, [15, 15, 15]);
    }

    #[test]
    fn six_distinct_reproducible_points() {
        let m = Mask::from_fn([32; 3], |p| p[0] < 5 && p[1] < 10 && p[2] < 10);
        assert_eq!(m.count(), 500);
        let a = sample_point_prompts(&m, 6, 99).unwrap();
        assert_eq!(a, sample_point_prompts(&m, 6, 99).unwrap());
        let PromptSpec::Points { points } = a else { panic!() };
        let mut coords: Vec<Coord> = points.iter().map(|p| p.coord).collect();
        assert!(coords.iter().all(|&c| m.get(c)));
        coords.sort();
        coords.dedup();
        assert_eq!(coords.len(), 6);
    }

    #[test]
    fn bbox_prompts() {
        let mut m = Mask::empty([32; 3]);
        m.set([4, 5, 6], true);
        assert_eq!(bbox_prompt(&m, 0).unwrap(), PromptSpec::Box { min: [4, 5, 6], max: [4, 5, 6] });

        let m = Mask::from_fn([32; 3], |p| {
            (0..3).map(|a| (p[a] as f64 - 12.0).powi(2)).sum::<f64>() <= 25.0
        });
        assert_eq!(bbox_prompt(&m, 0).unwrap(), PromptSpec::Box { min: [7; 3], max: [17; 3] });
        assert_eq!(bbox_prompt(&m, 2).unwrap(), PromptSpec::Box { min: [5; 3], max: [19; 3] });

        let mut edge = Mask::empty([32; 3]);
        edge.set([0, 31, 1], true);
        assert_eq!(
            bbox_prompt(&edge, 3).unwrap(),
            PromptSpec::Box { min: [0, 28, 0], max: [3, 31, 4] }
        );
    }

    #[test]
    fn config_validation() {
        let mut c = CorpusConfig::default();
        assert!(c.validate().is_ok());
        c.expert.truncate(1);
        assert!(matches!(c.validate(), Err(Error::Validation(_))));
        let mut c = CorpusConfig::default();
        c.expert[0].name = c.general[0].name.clone();
        assert!(c.validate().is_err());
    }
}
