//! Threshold switch and fusion rules that turn the general mask and the Top-1
//! expert mask into the final mask.
//!
//! The expert path fires only when `s_top > tau` (strict). Fusion works on
//! probabilities; when the switch is off the general probabilities are
//! returned unchanged.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::softmax_in_place;
use crate::decoder::MaskLogits;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// `(1 - s_top) * M_g + s_top * M_top`
    Weighted,
    /// `(M_g + M_top) / 2`
    Avg,
    /// Weights from a softmax over the two masks' mean logits.
    AftWeight,
}

impl Fusion {
    pub const ALL: [Fusion; 3] = [Fusion::Weighted, Fusion::Avg, Fusion::AftWeight];

    pub fn as_str(&self) -> &'static str {
        match self {
            Fusion::Weighted => "weighted",
            Fusion::Avg => "avg",
            Fusion::AftWeight => "aft_weight",
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(Fusion::Weighted),
            "avg" => Ok(Fusion::Avg),
            "aft_weight" => Ok(Fusion::AftWeight),
            other => Err(Error::Config(format!(
                "unknown fusion `{other}` (expected weighted, avg or aft_weight)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectorConfig {
    pub tau: f64,
    pub fusion: Fusion,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        SelectorConfig {
            tau: 0.5,
            fusion: Fusion::Weighted,
        }
    }
}

impl SelectorConfig {
    pub fn new(tau: f64, fusion: Fusion) -> Result<Self> {
        let c = SelectorConfig { tau, fusion };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau {} outside [0, 1]", self.tau)));
        }
        Ok(())
    }

    pub fn fires(&self, s_top: f64) -> bool {
        s_top > self.tau
    }
}

/// Final probability map from the general and Top-1 expert outputs.
pub fn select_mask(
    general: &MaskLogits,
    top: &MaskLogits,
    s_top: f64,
    config: &SelectorConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if general.logits.shape() != top.logits.shape() {
        return Err(Error::Contract(format!(
            "mask shapes differ: {:?} vs {:?}",
            general.logits.shape(),
            top.logits.shape()
        )));
    }
    if !(0.0..=1.0).contains(&s_top) {
        return Err(Error::Contract(format!("s_top {s_top} outside [0, 1]")));
    }
    let pg = general.probs();
    if !config.fires(s_top) {
        return Ok(pg);
    }
    let pt = top.probs();
    let (wg, wt) = fusion_weights(config.fusion, s_top, general, top);
    Ok(fuse(&pg, &pt, wg, wt))
}

/// `(w_general, w_top)` for a firing switch.
pub fn fusion_weights(fusion: Fusion, s_top: f64, general: &MaskLogits, top: &MaskLogits) -> (f64, f64) {
    match fusion {
        Fusion::Weighted => (1.0 - s_top, s_top),
        Fusion::Avg => (0.5, 0.5),
        Fusion::AftWeight => {
            let mut w = [general.global_average(), top.global_average()];
            softmax_in_place(&mut w);
            (w[0], w[1])
        }
    }
}

pub(crate) fn fuse(pg: &[f64], pt: &[f64], wg: f64, wt: f64) -> Vec<f64> {
    pg.iter().zip(pt).map(|(g, t)| wg * g + wt * t).collect()
}
