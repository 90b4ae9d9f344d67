//! Per-ground-class optimality score.
//!
//! The score rewards advance rate and penalises working pressure, with a
//! steeper penalty once the pressure exceeds the class margin bound:
//!
//! ```text
//! f = AR/MAR - w1*WP/UB                          if WP <= MB
//! f = AR/MAR - w1*MB/UB - w2*(WP - MB)/UB        otherwise
//! ```
//!
//! The network is trained on this raw value. [`OptimalityConfig::normalize`]
//! maps it onto 0..100 for display only.

use serde::{Deserialize, Serialize};

use crate::domain::{GroundClass, SensorRecord, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::stats::percentile_nearest_rank;

/// Paper defaults for the slope parameters.
pub const DEFAULT_W1: f64 = 0.8;
pub const DEFAULT_W2: f64 = 3.0;
/// Shutdown threshold used when a deployment does not supply one.
pub const DEFAULT_UB: f64 = 150.0;
/// Margin bound is this percentile of observed working pressure.
pub const MARGIN_PERCENTILE: f64 = 90.0;
pub const MIN_FIT_RECORDS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConfigRepr")]
pub struct OptimalityConfig {
    pub schema_version: u32,
    pub ground_class: GroundClass,
    pub w1: f64,
    pub w2: f64,
    /// Margin bound, bar.
    pub mb: f64,
    /// Maximum observed advance rate, mm/min.
    pub mar: f64,
    /// Working pressure shutdown threshold, bar.
    pub ub: f64,
    pub norm_min: f64,
    pub norm_max: f64,
}

#[derive(Deserialize)]
struct ConfigRepr {
    schema_version: u32,
    ground_class: GroundClass,
    w1: f64,
    w2: f64,
    mb: f64,
    mar: f64,
    ub: f64,
    norm_min: f64,
    norm_max: f64,
}

impl TryFrom<ConfigRepr> for OptimalityConfig {
    type Error = Error;

    fn try_from(r: ConfigRepr) -> Result<Self> {
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {}",
                r.schema_version
            )));
        }
        OptimalityConfig::new(r.ground_class, r.w1, r.w2, r.mb, r.mar, r.ub, r.norm_min, r.norm_max)
    }
}

impl OptimalityConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ground_class: GroundClass,
        w1: f64,
        w2: f64,
        mb: f64,
        mar: f64,
        ub: f64,
        norm_min: f64,
        norm_max: f64,
    ) -> Result<Self> {
        let cfg = OptimalityConfig {
            schema_version: SCHEMA_VERSION,
            ground_class,
            w1,
            w2,
            mb,
            mar,
            ub,
            norm_min,
            norm_max,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.w1, self.w2, self.mb, self.mar, self.ub, self.norm_min, self.norm_max];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite parameter".into()));
        }
        if self.w1 < 0.0 {
            return Err(Error::InvalidConfig(format!("w1 = {} must be >= 0", self.w1)));
        }
        if self.w2 < self.w1 {
            return Err(Error::InvalidConfig(format!(
                "w2 = {} must be >= w1 = {}",
                self.w2, self.w1
            )));
        }
        if !(self.mb > 0.0 && self.mb <= self.ub) {
            return Err(Error::InvalidConfig(format!(
                "margin bound {} must lie in (0, UB = {}]",
                self.mb, self.ub
            )));
        }
        if self.mar <= 0.0 {
            return Err(Error::InvalidConfig(format!("MAR = {} must be > 0", self.mar)));
        }
        if self.norm_min >= self.norm_max {
            return Err(Error::InvalidConfig(format!(
                "norm_min {} must be < norm_max {}",
                self.norm_min, self.norm_max
            )));
        }
        Ok(())
    }

    /// Raw (unnormalized) optimality for one sample.
    pub fn raw_score(&self, ar: f64, wp: f64) -> f64 {
        let reward = ar / self.mar;
        if wp <= self.mb {
            reward - self.w1 * wp / self.ub
        } else {
            reward - self.w1 * self.mb / self.ub - self.w2 * (wp - self.mb) / self.ub
        }
    }

    pub fn score_record(&self, record: &SensorRecord) -> f64 {
        self.raw_score(record.advance_rate, record.working_pressure)
    }

    /// Display mapping onto `[0, 100]`; values outside the corpus range clip.
    pub fn normalize(&self, raw: f64) -> f64 {
        (100.0 * (raw - self.norm_min) / (self.norm_max - self.norm_min)).clamp(0.0, 100.0)
    }
}

/// Free-function form that also checks the configuration targets `gc`.
pub fn raw_score(ar: f64, wp: f64, cfg: &OptimalityConfig, gc: GroundClass) -> Result<f64> {
    if cfg.ground_class != gc {
        return Err(Error::InvalidConfig(format!(
            "config is for {}, requested {}",
            cfg.ground_class, gc
        )));
    }
    cfg.validate()?;
    Ok(cfg.raw_score(ar, wp))
}

pub fn normalize(raw: f64, cfg: &OptimalityConfig) -> f64 {
    cfg.normalize(raw)
}

/// Fits MB (90th percentile WP), MAR (max AR) and the display bounds for one
/// ground class. Records of other classes are ignored.
pub fn fit_config(
    records: &[SensorRecord],
    gc: GroundClass,
    w1: f64,
    w2: f64,
    ub: f64,
) -> Result<OptimalityConfig> {
    let own: Vec<&SensorRecord> = records.iter().filter(|r| r.ground_class == gc).collect();
    if own.len() < MIN_FIT_RECORDS {
        return Err(Error::InsufficientData(format!(
            "{gc}: {} records, need at least {MIN_FIT_RECORDS}",
            own.len()
        )));
    }
    let wp: Vec<f64> = own.iter().map(|r| r.working_pressure).collect();
    let mb = percentile_nearest_rank(&wp, MARGIN_PERCENTILE).expect("non-empty");
    let mar = own.iter().map(|r| r.advance_rate).fold(f64::NEG_INFINITY, f64::max);

    // Display bounds need a provisional config; any valid pair works here.
    let mut cfg = OptimalityConfig::new(gc, w1, w2, mb, mar, ub, 0.0, 1.0)?;
    let (lo, hi) = own
        .iter()
        .map(|r| cfg.score_record(r))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s), hi.max(s)));
    if lo >= hi {
        return Err(Error::InsufficientData(format!(
            "{gc}: optimality is constant ({lo}) over the corpus"
        )));
    }
    cfg.norm_min = lo;
    cfg.norm_max = hi;
    Ok(cfg)
}
