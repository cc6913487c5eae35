//! Epoch-dependent task weights and the teacher-forcing alternation policy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Fixed,
    Linear,
    Exponential,
}

/// Weights `(alpha, beta)` of the reconstruction and segmentation losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSchedule {
    pub kind: ScheduleKind,
    /// Used by the fixed kind.
    #[serde(default = "default_fixed_alpha")]
    pub fixed_alpha: f64,
    /// Multiplies the epoch index before evaluation.
    #[serde(default = "default_t_scale")]
    pub t_scale: f64,
    #[serde(default = "default_floor")]
    pub floor: f64,
    #[serde(default = "default_offset")]
    pub offset: f64,
    /// Scaled epoch at which the linear kind reaches `floor`.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
}

fn default_fixed_alpha() -> f64 {
    0.5
}
fn default_t_scale() -> f64 {
    1.0
}
fn default_floor() -> f64 {
    0.05
}
fn default_offset() -> f64 {
    0.2
}
fn default_horizon() -> f64 {
    30.0
}

impl Default for WeightSchedule {
    fn default() -> Self {
        Self::exponential()
    }
}

impl WeightSchedule {
    /// `alpha = max(exp(-t) - 0.2, 0.05)`.
    pub fn exponential() -> Self {
        Self {
            kind: ScheduleKind::Exponential,
            fixed_alpha: default_fixed_alpha(),
            t_scale: default_t_scale(),
            floor: default_floor(),
            offset: default_offset(),
            horizon: default_horizon(),
        }
    }

    pub fn fixed(alpha: f64) -> Self {
        Self {
            kind: ScheduleKind::Fixed,
            fixed_alpha: alpha,
            ..Self::exponential()
        }
    }

    /// Straight line from `1 - offset` at epoch 0 down to `floor` at `horizon`.
    pub fn linear(horizon: f64) -> Self {
        Self {
            kind: ScheduleKind::Linear,
            horizon,
            ..Self::exponential()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.fixed_alpha) {
            return bad(format!("fixed_alpha must lie in [0, 1], got {}", self.fixed_alpha));
        }
        if !(self.t_scale >= 0.0) || !self.t_scale.is_finite() {
            return bad(format!("t_scale must be finite and >= 0, got {}", self.t_scale));
        }
        if !(0.0..=1.0).contains(&self.floor) {
            return bad(format!("floor must lie in [0, 1], got {}", self.floor));
        }
        if !(0.0..1.0).contains(&self.offset) {
            return bad(format!("offset must lie in [0, 1), got {}", self.offset));
        }
        if self.kind == ScheduleKind::Linear && !(self.horizon > 0.0) {
            return bad(format!("linear horizon must be positive, got {}", self.horizon));
        }
        Ok(())
    }

    /// Short label used in reports (`fixed-0.5`, `linear`, `exponential`).
    pub fn label(&self) -> String {
        match self.kind {
            ScheduleKind::Fixed => format!("fixed-{}", self.fixed_alpha),
            ScheduleKind::Linear => "linear".into(),
            ScheduleKind::Exponential => "exponential".into(),
        }
    }
}

/// Reconstruction and segmentation weights for a given epoch. `beta` is
/// always `1 - alpha`.
pub fn alpha_beta(schedule: &WeightSchedule, epoch: i64) -> Result<(f64, f64)> {
    if epoch < 0 {
        return Err(Error::NegativeEpoch(epoch as f64));
    }
    let t = epoch as f64 * schedule.t_scale;
    let alpha = match schedule.kind {
        ScheduleKind::Fixed => schedule.fixed_alpha,
        ScheduleKind::Exponential => {
            let e = (-t).exp();
            let alpha = e - schedule.offset;
            if alpha > schedule.floor {
                // Equal to 1 - alpha, but exact at t = 0.
                return Ok((alpha, (1.0 - e) + schedule.offset));
            }
            schedule.floor
        }
        ScheduleKind::Linear => {
            let start = 1.0 - schedule.offset;
            let slope = (start - schedule.floor) / schedule.horizon;
            (start - slope * t).clamp(schedule.floor, 1.0)
        }
    };
    Ok((alpha, 1.0 - alpha))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ItfsSchedule {
    /// Deterministic interleaving; with ratio 0.5 the even steps are teacher steps.
    AlternateSteps,
    /// Independent draw per step.
    Bernoulli,
}

/// Chooses, per training step, whether segmentation sees the fully sampled
/// image (teacher step) or the current reconstruction (free-running step).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ItfsPolicy {
    pub enabled: bool,
    #[serde(default = "default_ratio")]
    pub teacher_ratio: f64,
    #[serde(default = "default_itfs_schedule")]
    pub schedule: ItfsSchedule,
    #[serde(default)]
    pub seed: u64,
}

fn default_ratio() -> f64 {
    0.5
}
fn default_itfs_schedule() -> ItfsSchedule {
    ItfsSchedule::AlternateSteps
}

impl Default for ItfsPolicy {
    fn default() -> Self {
        Self {
            enabled: true,
            teacher_ratio: 0.5,
            schedule: ItfsSchedule::AlternateSteps,
            seed: 0,
        }
    }
}

impl ItfsPolicy {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.teacher_ratio) {
            return Err(Error::InvalidConfig(format!(
                "teacher_ratio must lie in [0, 1], got {}",
                self.teacher_ratio
            )));
        }
        Ok(())
    }

    pub fn is_teacher(&self, global_step: u64) -> bool {
        if !self.enabled {
            return false;
        }
        let r = self.teacher_ratio;
        match self.schedule {
            // Step s is a teacher step when ceil((s+1)r) > ceil(sr), which
            // spreads round(n·r) teacher steps evenly over any n steps.
            ItfsSchedule::AlternateSteps => {
                let s = global_step as f64;
                ((s + 1.0) * r).ceil() > (s * r).ceil()
            }
            ItfsSchedule::Bernoulli => unit_hash(self.seed, global_step) < r,
        }
    }
}

/// SplitMix64 finalizer.
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent seed for stream `stream` of a base seed.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix64(seed ^ mix64(stream))
}

fn unit_hash(seed: u64, step: u64) -> f64 {
    (derive_seed(seed, step) >> 11) as f64 / (1u64 << 53) as f64
}
