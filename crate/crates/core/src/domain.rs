//! Core data types shared by the whole pipeline.
//!
//! A [`SensorRecord`] is one 0.1 Hz sample of a micro-tunnelling drive: the
//! two target parameters (advance rate, working pressure) that feed the
//! optimality score, the five operator-controlled parameters (CoP) and the
//! nineteen context parameters (CxP).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version tag carried by every persisted JSON document.
pub const SCHEMA_VERSION: u32 = 1;

pub const N_COP: usize = 5;
pub const N_CXP: usize = 19;
/// Network input width: CoP slots first, then CxP.
pub const N_FEATURES: usize = N_COP + N_CXP;

/// Nominal sampling period of the machine logger, seconds.
pub const SAMPLE_PERIOD_S: f64 = 10.0;

pub const COP_NAMES: [&str; N_COP] = [
    "cutter_head_speed",
    "high_pressure_nozzle",
    "drive_line_pressure",
    "jacking_frame_thrust",
    "feed_pump_speed",
];

/// Context channels: 8 pressures, 4 flow rates, 7 others.
pub const CXP_NAMES: [&str; N_CXP] = [
    "steering_cylinder_1_pressure",
    "steering_cylinder_2_pressure",
    "steering_cylinder_3_pressure",
    "steering_cylinder_3b_pressure",
    "feed_line_pressure_tbm",
    "feed_line_pressure_pump",
    "suction_line_pressure",
    "bentonite_pump_pressure",
    "conveyor_line_flow_rate",
    "feed_line_flow_rate",
    "drive_line_flow_rate",
    "high_pressure_nozzle_flow_rate",
    "high_pressure_pump_speed",
    "bentonite_pump_speed",
    "steering_cylinder_1_extension",
    "steering_cylinder_2_extension",
    "steering_cylinder_3_extension",
    "machine_oil_temperature",
    "tbm_axial_rotation",
];

/// Name of feature `i` in the concatenated (CoP, CxP) input vector.
pub fn feature_name(i: usize) -> &'static str {
    if i < N_COP {
        COP_NAMES[i]
    } else {
        CXP_NAMES[i - N_COP]
    }
}

/// Homogeneous weathered-schist ground classes, one model each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GroundClass {
    #[serde(rename = "GC1")]
    Gc1,
    #[serde(rename = "GC2")]
    Gc2,
    #[serde(rename = "GC3")]
    Gc3,
}

impl GroundClass {
    pub const ALL: [GroundClass; 3] = [GroundClass::Gc1, GroundClass::Gc2, GroundClass::Gc3];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn code(self) -> &'static str {
        match self {
            GroundClass::Gc1 => "GC1",
            GroundClass::Gc2 => "GC2",
            GroundClass::Gc3 => "GC3",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            GroundClass::Gc1 => "Homogeneous highly weathered schist (soft)",
            GroundClass::Gc2 => "Homogeneous moderately weathered schist (firm)",
            GroundClass::Gc3 => "Homogeneous slightly weathered schist (hard)",
        }
    }
}

impl fmt::Display for GroundClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for GroundClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "GC1" | "1" => Ok(GroundClass::Gc1),
            "GC2" | "2" => Ok(GroundClass::Gc2),
            "GC3" | "3" => Ok(GroundClass::Gc3),
            _ => Err(Error::UnknownGroundClass(s.to_string())),
        }
    }
}

/// One validated, timestamped sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRecord {
    /// Seconds since drive start.
    pub timestamp: f64,
    /// Metres.
    pub tunnel_length: f64,
    /// mm/min.
    pub advance_rate: f64,
    /// bar.
    pub working_pressure: f64,
    pub cop: [f64; N_COP],
    pub cxp: [f64; N_CXP],
    pub ground_class: GroundClass,
}

impl SensorRecord {
    /// Concatenated (CoP, CxP) feature vector.
    pub fn features(&self) -> [f64; N_FEATURES] {
        let mut x = [0.0; N_FEATURES];
        x[..N_COP].copy_from_slice(&self.cop);
        x[N_COP..].copy_from_slice(&self.cxp);
        x
    }

    /// Re-checks the invariants of a record that was built directly.
    pub fn check(&self) -> Result<()> {
        let scalars = [
            ("timestamp", self.timestamp),
            ("tunnel_length", self.tunnel_length),
            ("advance_rate", self.advance_rate),
            ("working_pressure", self.working_pressure),
        ];
        for (name, v) in scalars {
            if !v.is_finite() {
                return Err(Error::NonFinite(name.to_string()));
            }
        }
        for (j, v) in self.cop.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("cop_{}", j + 1)));
            }
        }
        for (j, v) in self.cxp.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("cxp_{}", j + 1)));
            }
        }
        if self.advance_rate < 0.0 {
            return Err(Error::NegativeMeasure("advance_rate"));
        }
        if self.working_pressure < 0.0 {
            return Err(Error::NegativeMeasure("working_pressure"));
        }
        Ok(())
    }
}

/// An unchecked record as it arrives from a log file or a request body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub timestamp: f64,
    pub tunnel_length: f64,
    pub advance_rate: f64,
    pub working_pressure: f64,
    pub cop: Vec<f64>,
    pub cxp: Vec<f64>,
    pub ground_class: GroundClass,
}

impl From<SensorRecord> for RawRecord {
    fn from(r: SensorRecord) -> Self {
        RawRecord {
            timestamp: r.timestamp,
            tunnel_length: r.tunnel_length,
            advance_rate: r.advance_rate,
            working_pressure: r.working_pressure,
            cop: r.cop.to_vec(),
            cxp: r.cxp.to_vec(),
            ground_class: r.ground_class,
        }
    }
}

pub fn cop_array(v: &[f64]) -> Result<[f64; N_COP]> {
    v.try_into().map_err(|_| Error::ArityMismatch {
        field: "cop",
        expected: N_COP,
        actual: v.len(),
    })
}

pub fn cxp_array(v: &[f64]) -> Result<[f64; N_CXP]> {
    v.try_into().map_err(|_| Error::ArityMismatch {
        field: "cxp",
        expected: N_CXP,
        actual: v.len(),
    })
}

/// Checks arity, finiteness and sign constraints and produces a [`SensorRecord`].
pub fn validate_record(raw: RawRecord) -> Result<SensorRecord> {
    let record = SensorRecord {
        timestamp: raw.timestamp,
        tunnel_length: raw.tunnel_length,
        advance_rate: raw.advance_rate,
        working_pressure: raw.working_pressure,
        cop: cop_array(&raw.cop)?,
        cxp: cxp_array(&raw.cxp)?,
        ground_class: raw.ground_class,
    };
    record.check()?;
    Ok(record)
}
