//! List utility and its signed exponential shaping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::ListScores;

/// How the list-total conversion term is aggregated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvrTotal {
    /// `Σ_j pcvr_j`.
    #[default]
    Sum,
    /// `Σ_j pctr_j · pcvr_j` (expected conversions).
    Expected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub k1: f64,
    pub k2: f64,
    /// Divides the raw utility; `None` means "fit on the training set".
    pub scale: Option<f64>,
    pub cvr_total: CvrTotal,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            k1: 1.0,
            k2: 1.0,
            scale: None,
            cvr_total: CvrTotal::Sum,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 >= 0.0 && self.k2 >= 0.0) || (self.k1 == 0.0 && self.k2 == 0.0) {
            return Err(Error::config("reward.k1", "k1 and k2 must be non-negative and not both zero"));
        }
        if let Some(s) = self.scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::config("reward.scale", "must be positive and finite"));
            }
        }
        Ok(())
    }

    pub fn scale_or_one(&self) -> f64 {
        self.scale.unwrap_or(1.0)
    }

    /// Unscaled utility `k1·L_ctr + k2·L_ctr·L_cvr`.
    pub fn raw_utility(&self, scores: &ListScores) -> f64 {
        let l_ctr: f64 = scores.pctr.iter().sum();
        let l_cvr: f64 = match self.cvr_total {
            CvrTotal::Sum => scores.pcvr.iter().sum(),
            CvrTotal::Expected => scores.pctr.iter().zip(&scores.pcvr).map(|(a, b)| a * b).sum(),
        };
        self.k1 * l_ctr + self.k2 * l_ctr * l_cvr
    }

    /// Scaled utility `w`.
    pub fn utility(&self, scores: &ListScores) -> f64 {
        self.raw_utility(scores) / self.scale_or_one()
    }
}

/// `e^{w-1} - 1` above one, `0` at one, `1 - e^{1-w}` below.
pub fn shape_reward(w: f64) -> f64 {
    if w > 1.0 {
        (w - 1.0).exp() - 1.0
    } else if w == 1.0 {
        0.0
    } else {
        1.0 - (1.0 - w).exp()
    }
}

/// Shaped list reward r̄ of an evaluated list.
pub fn list_reward(scores: &ListScores, cfg: &RewardConfig) -> Result<f64> {
    let w = cfg.utility(scores);
    if !w.is_finite() {
        return Err(Error::NonFiniteReward(w));
    }
    Ok(shape_reward(w))
}

/// `r_j = r̄_j − r̄_o`.
pub fn relative_rewards(neighbors: &[f64], origin: f64) -> Vec<f64> {
    neighbors.iter().map(|r| r - origin).collect()
}
