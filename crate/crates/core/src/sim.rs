//! Synthetic micro-tunnelling drives with a known ground truth.
//!
//! Control parameters live in a fixed box. Context channels are driven by
//! three slowly wandering latent factors (plus a small per-channel component)
//! and do not depend on the controls. Advance rate and working pressure are
//! smooth functions of the controls, three "driver" context channels and the
//! ground class:
//!
//! ```text
//! z_j  = 2 u_j - 1,   u_j = (cop_j - min_j) / (max_j - min_j)
//! AR   = MAR_gc * sigmoid(s0_gc + Σ_j a_j z_j + v · ξ)
//! WP   = k_gc * (b0 + b1 u_4 + b2 u_1) + w · ξ
//! ```
//!
//! where `ξ` are the standardized driver channels and `k_gc` grows with
//! ground hardness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{GroundClass, SensorRecord, N_COP, N_CXP, SAMPLE_PERIOD_S, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::optimality::OptimalityConfig;

/// Bumped whenever a generating coefficient changes.
pub const COEFFICIENTS_VERSION: u32 = 1;

pub const COP_MIN: [f64; N_COP] = [5.0, 20.0, 0.5, 200.0, 400.0];
pub const COP_MAX: [f64; N_COP] = [25.0, 120.0, 3.0, 1200.0, 1400.0];

const A: [f64; N_COP] = [1.2, 0.4, 0.3, 0.9, 0.5];
const S0: [f64; 3] = [0.5, 0.0, -0.5];
const MAR_TRUE: [f64; 3] = [30.0, 25.0, 20.0];
const HARDNESS: [f64; 3] = [1.0, 1.15, 1.3];
const B0: f64 = 50.0;
const B1: f64 = 35.0;
const B2: f64 = 12.0;
const V: [f64; 3] = [0.3, -0.2, 0.15];
const W: [f64; 3] = [4.0, 2.0, -3.0];

/// Context channels that enter the generating functions, one per latent.
pub const DRIVER_CHANNELS: [usize; 3] = [0, 8, 17];

const CXP_BASE: [f64; N_CXP] = [
    80.0, 80.0, 80.0, 80.0, 3.0, 3.5, 1.0, 6.0, // pressures, bar
    180.0, 170.0, 20.0, 8.0, // flow rates, m³/h
    1500.0, 900.0, 150.0, 150.0, 150.0, 45.0, 0.0, // speeds, extensions, temperature, rotation
];
const CXP_SCALE: [f64; N_CXP] = [
    10.0, 10.0, 10.0, 10.0, 0.3, 0.3, 0.15, 0.8, //
    15.0, 15.0, 3.0, 1.0, //
    100.0, 80.0, 20.0, 20.0, 20.0, 4.0, 0.3,
];
/// Weight of the per-channel component on non-driver channels.
const IDIO_WEIGHT: f64 = 0.3;
/// One-step autocorrelation of the latent processes.
const LATENT_RHO: f64 = 0.995;
/// Seconds per minute times millimetres per metre.
const MM_PER_MIN_TO_M_PER_S: f64 = 1.0 / 60_000.0;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn unit(cop: &[f64; N_COP]) -> [f64; N_COP] {
    std::array::from_fn(|j| (cop[j] - COP_MIN[j]) / (COP_MAX[j] - COP_MIN[j]))
}

/// Clamps a CoP vector into the simulator's box.
pub fn clamp_cop(cop: &[f64; N_COP]) -> [f64; N_COP] {
    std::array::from_fn(|j| cop[j].clamp(COP_MIN[j], COP_MAX[j]))
}

/// The generating functions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Truth;

impl Truth {
    /// Standardized driver channels of a context vector.
    pub fn drivers(cxp: &[f64; N_CXP]) -> [f64; 3] {
        std::array::from_fn(|m| {
            let k = DRIVER_CHANNELS[m];
            (cxp[k] - CXP_BASE[k]) / CXP_SCALE[k]
        })
    }

    pub fn advance_rate(&self, gc: GroundClass, cop: &[f64; N_COP], cxp: &[f64; N_CXP]) -> f64 {
        let u = unit(cop);
        let xi = Self::drivers(cxp);
        let mut s = S0[gc.index()];
        for j in 0..N_COP {
            s += A[j] * (2.0 * u[j] - 1.0);
        }
        s += (0..3).map(|m| V[m] * xi[m]).sum::<f64>();
        MAR_TRUE[gc.index()] * sigmoid(s)
    }

    pub fn working_pressure(&self, gc: GroundClass, cop: &[f64; N_COP], cxp: &[f64; N_CXP]) -> f64 {
        let u = unit(cop);
        let xi = Self::drivers(cxp);
        let wp = HARDNESS[gc.index()] * (B0 + B1 * u[3] + B2 * u[0]) + (0..3).map(|m| W[m] * xi[m]).sum::<f64>();
        wp.max(0.0)
    }

    pub fn score(&self, gc: GroundClass, cop: &[f64; N_COP], cxp: &[f64; N_CXP], cfg: &OptimalityConfig) -> f64 {
        cfg.raw_score(self.advance_rate(gc, cop, cxp), self.working_pressure(gc, cop, cxp))
    }

    /// Noise-free context vector for latent factors and per-channel components.
    pub fn context(latent: &[f64; 3], idio: &[f64; N_CXP]) -> [f64; N_CXP] {
        std::array::from_fn(|k| {
            let mix = match DRIVER_CHANNELS.iter().position(|&d| d == k) {
                Some(m) => latent[m],
                None => {
                    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                    0.8 * latent[k % 3] + 0.4 * sign * latent[(k + 1) % 3] + IDIO_WEIGHT * idio[k]
                }
            };
            CXP_BASE[k] + CXP_SCALE[k] * mix
        })
    }

    /// Best CoP vector on an `n`-point-per-axis grid over the box, with its score.
    pub fn best_on_grid(
        &self,
        gc: GroundClass,
        cxp: &[f64; N_CXP],
        cfg: &OptimalityConfig,
        n: usize,
    ) -> ([f64; N_COP], f64) {
        let n = n.max(2);
        let axis = |j: usize, i: usize| COP_MIN[j] + (COP_MAX[j] - COP_MIN[j]) * i as f64 / (n - 1) as f64;
        let mut best = ([0.0; N_COP], f64::NEG_INFINITY);
        let total = n.pow(N_COP as u32);
        for code in 0..total {
            let mut c = code;
            let cop: [f64; N_COP] = std::array::from_fn(|j| {
                let i = c % n;
                c /= n;
                axis(j, i)
            });
            let s = self.score(gc, &cop, cxp, cfg);
            if s > best.1 {
                best = (cop, s);
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcSegment {
    pub ground_class: GroundClass,
    pub samples: usize,
}

/// Operators hold settings and occasionally move one CoP by a fixed step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorPolicy {
    /// Chance per tick of changing one CoP.
    pub change_probability: f64,
    /// Step size as a fraction of the CoP's range.
    pub step_fraction: f64,
    /// Starting setpoints; drawn from the middle of the box when absent.
    #[serde(default)]
    pub initial_cop: Option<[f64; N_COP]>,
}

impl Default for OperatorPolicy {
    fn default() -> Self {
        OperatorPolicy {
            change_probability: 0.03,
            step_fraction: 0.08,
            initial_cop: None,
        }
    }
}

/// Optional stoppages with a short retraction, for exercising cleansing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pathologies {
    pub stop_probability: f64,
    pub stop_samples: usize,
    /// Metres the machine slides back at the start of a stoppage.
    #[serde(default)]
    pub retraction_m: f64,
}

fn default_drift() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSpec {
    pub schema_version: u32,
    pub seed: u64,
    pub segments: Vec<GcSegment>,
    /// Stops the drive early once this tunnel length is reached.
    #[serde(default)]
    pub length_m: Option<f64>,
    /// Relative measurement noise; 0 gives exact readings.
    pub noise_std: f64,
    /// Scales the latent context innovations; 0 freezes the context.
    #[serde(default = "default_drift")]
    pub context_drift: f64,
    #[serde(default)]
    pub policy: OperatorPolicy,
    #[serde(default)]
    pub pathologies: Option<Pathologies>,
}

impl SimSpec {
    /// A single-class drive with default policy.
    pub fn single(ground_class: GroundClass, samples: usize, seed: u64) -> Self {
        SimSpec {
            schema_version: SCHEMA_VERSION,
            seed,
            segments: vec![GcSegment { ground_class, samples }],
            length_m: None,
            noise_std: 0.01,
            context_drift: 1.0,
            policy: OperatorPolicy::default(),
            pathologies: None,
        }
    }

    pub fn total_samples(&self) -> usize {
        self.segments.iter().map(|s| s.samples).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {}", self.schema_version));
        }
        if self.segments.is_empty() || self.segments.iter().any(|s| s.samples == 0) {
            return bad("segments must be non-empty with positive sample counts".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.context_drift) {
            return bad("context_drift must lie in [0, 1]".into());
        }
        if let Some(l) = self.length_m {
            if !(l > 0.0 && l.is_finite()) {
                return bad("length_m must be > 0".into());
            }
        }
        let p = &self.policy;
        if !(0.0..=1.0).contains(&p.change_probability) {
            return bad("change_probability must lie in [0, 1]".into());
        }
        if !(p.step_fraction > 0.0 && p.step_fraction <= 1.0) {
            return bad("step_fraction must lie in (0, 1]".into());
        }
        if let Some(c) = &p.initial_cop {
            if (0..N_COP).any(|j| !(COP_MIN[j]..=COP_MAX[j]).contains(&c[j])) {
                return bad("initial_cop lies outside the CoP box".into());
            }
        }
        if let Some(pa) = &self.pathologies {
            if !(0.0..=1.0).contains(&pa.stop_probability) || !(pa.retraction_m >= 0.0 && pa.retraction_m.is_finite()) {
                return bad("invalid pathology settings".into());
            }
        }
        Ok(())
    }
}

/// A running drive; each [`step`](Self::step) is one 10 s tick.
#[derive(Debug, Clone)]
pub struct SimSession {
    spec: SimSpec,
    rng: ChaCha8Rng,
    tick: usize,
    cop: [f64; N_COP],
    latent: [f64; 3],
    idio: [f64; N_CXP],
    length: f64,
    stop_left: usize,
    closed: bool,
}

impl SimSession {
    pub fn new(spec: SimSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let latent = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let idio = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let drawn: [f64; N_COP] = std::array::from_fn(|j| {
            let u: f64 = rng.random_range(0.25..0.75);
            COP_MIN[j] + u * (COP_MAX[j] - COP_MIN[j])
        });
        let cop = spec.policy.initial_cop.unwrap_or(drawn);
        Ok(SimSession {
            spec,
            rng,
            tick: 0,
            cop,
            latent,
            idio,
            length: 0.0,
            stop_left: 0,
            closed: false,
        })
    }

    pub fn spec(&self) -> &SimSpec {
        &self.spec
    }

    pub fn tick(&self) -> usize {
        self.tick
    }

    /// Setpoints that the next tick starts from.
    pub fn cop(&self) -> [f64; N_COP] {
        self.cop
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    /// Ground class at the current tick; the last segment extends forever.
    pub fn ground_class(&self) -> GroundClass {
        let mut acc = 0;
        for s in &self.spec.segments {
            acc += s.samples;
            if self.tick < acc {
                return s.ground_class;
            }
        }
        self.spec.segments.last().expect("validated").ground_class
    }

    /// Advances one tick. With an override the operator policy's move is
    /// replaced by the given setpoints; random draws are identical either way.
    pub fn step(&mut self, cop_override: Option<[f64; N_COP]>) -> Result<SensorRecord> {
        if self.closed {
            return Err(Error::SessionClosed);
        }
        if let Some(c) = &cop_override {
            if let Some(j) = c.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("cop_{}", j + 1)));
            }
        }
        let gc = self.ground_class();
        let noise = self.spec.noise_std;
        let rng = &mut self.rng;

        // Operator policy.
        let u_change: f64 = rng.random();
        let j: usize = rng.random_range(0..N_COP);
        let up: bool = rng.random_bool(0.5);
        if u_change < self.spec.policy.change_probability {
            let step = self.spec.policy.step_fraction * (COP_MAX[j] - COP_MIN[j]);
            let mut v = self.cop[j] + if up { step } else { -step };
            if !(COP_MIN[j]..=COP_MAX[j]).contains(&v) {
                v = self.cop[j] - if up { step } else { -step };
            }
            self.cop[j] = v.clamp(COP_MIN[j], COP_MAX[j]);
        }
        if let Some(c) = cop_override {
            self.cop = c;
        }

        // Context.
        let drift = self.spec.context_drift;
        let innov = (1.0 - LATENT_RHO * LATENT_RHO).sqrt();
        for l in self.latent.iter_mut().chain(self.idio.iter_mut()) {
            let e: f64 = StandardNormal.sample(rng);
            *l += drift * ((LATENT_RHO - 1.0) * *l + innov * e);
        }
        let true_cxp = Truth::context(&self.latent, &self.idio);

        // Stoppages.
        let mut retract = 0.0;
        if let Some(p) = &self.spec.pathologies {
            let u_stop: f64 = rng.random();
            if self.stop_left == 0 && u_stop < p.stop_probability && p.stop_samples > 0 {
                self.stop_left = p.stop_samples;
                retract = p.retraction_m;
            }
        }
        let stopped = self.stop_left > 0;
        if stopped {
            self.stop_left -= 1;
        }

        let truth = Truth;
        let mut ar = if stopped { 0.0 } else { truth.advance_rate(gc, &self.cop, &true_cxp) };
        let mut wp = truth.working_pressure(gc, &self.cop, &true_cxp);
        let e_ar: f64 = StandardNormal.sample(rng);
        let e_wp: f64 = StandardNormal.sample(rng);
        ar *= (noise * e_ar).exp();
        wp = (wp + noise * 10.0 * e_wp).max(0.0);
        let cxp: [f64; N_CXP] = std::array::from_fn(|k| {
            let e: f64 = StandardNormal.sample(rng);
            true_cxp[k] + noise * CXP_SCALE[k] * e
        });
        let cop: [f64; N_COP] = std::array::from_fn(|k| {
            let e: f64 = StandardNormal.sample(rng);
            self.cop[k] + noise * 0.05 * (COP_MAX[k] - COP_MIN[k]) * e
        });

        self.length = (self.length + ar * SAMPLE_PERIOD_S * MM_PER_MIN_TO_M_PER_S - retract).max(0.0);
        let record = SensorRecord {
            timestamp: self.tick as f64 * SAMPLE_PERIOD_S,
            tunnel_length: self.length,
            advance_rate: ar,
            working_pressure: wp,
            cop,
            cxp,
            ground_class: gc,
        };
        self.tick += 1;
        Ok(record)
    }
}

/// Runs a whole drive under the operator policy.
pub fn generate_drive(spec: &SimSpec) -> Result<(Vec<SensorRecord>, Truth)> {
    let mut session = SimSession::new(spec.clone())?;
    let n = spec.total_samples();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let r = session.step(None)?;
        let done = spec.length_m.is_some_and(|l| r.tunnel_length >= l);
        out.push(r);
        if done {
            break;
        }
    }
    Ok((out, Truth))
}
