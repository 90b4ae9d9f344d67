//! Drive-log ingestion: CSV loading, cleansing, Gaussian smoothing,
//! standardization and reconstruction of operator actions.
//!
//! All functions are pure over their inputs and operate on one drive at a
//! time; drives can be processed in parallel.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::{
    feature_name, validate_record, GroundClass, RawRecord, SensorRecord, COP_NAMES, N_COP, N_CXP,
    N_FEATURES, SAMPLE_PERIOD_S, SCHEMA_VERSION,
};
use crate::error::{Error, Result};
use crate::stats::{mean, percentile_nearest_rank, percentile_of_sorted, std_pop};

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Ordered list of CSV column names. The file header must match it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub columns: Vec<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        let mut columns: Vec<String> = ["timestamp", "tunnel_length", "advance_rate", "working_pressure"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        columns.extend((1..=N_COP).map(|j| format!("cop_{j}")));
        columns.extend((1..=N_CXP).map(|j| format!("cxp_{j}")));
        columns.push("ground_class".into());
        CsvSchema { columns }
    }
}

impl CsvSchema {
    fn check_header(&self, header: &csv::StringRecord) -> Result<()> {
        let got: Vec<&str> = header.iter().map(str::trim).collect();
        if got.len() == self.columns.len() && got.iter().zip(&self.columns).all(|(a, b)| a == b) {
            return Ok(());
        }
        let missing: Vec<&str> = self
            .columns
            .iter()
            .map(String::as_str)
            .filter(|c| !got.contains(c))
            .collect();
        let unexpected: Vec<&str> = got
            .iter()
            .copied()
            .filter(|c| !self.columns.iter().any(|s| s == c))
            .collect();
        Err(Error::SchemaMismatch(if missing.is_empty() && unexpected.is_empty() {
            "columns out of order".to_string()
        } else {
            format!("missing {missing:?}, unexpected {unexpected:?}")
        }))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCsv {
    /// Validated records in timestamp order.
    pub records: Vec<SensorRecord>,
    /// Rows dropped because at least one field was empty.
    pub dropped_incomplete: usize,
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<LoadedCsv> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

/// Reads a drive log. Row numbers in errors are 1-based file lines.
pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<LoadedCsv> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    schema.check_header(rdr.headers()?)?;

    let mut records = Vec::new();
    let mut dropped_incomplete = 0;
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        if row.iter().any(|f| f.trim().is_empty()) {
            dropped_incomplete += 1;
            continue;
        }
        records.push(parse_row(&row, schema, line)?);
    }
    records.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(LoadedCsv {
        records,
        dropped_incomplete,
    })
}

fn parse_row(row: &csv::StringRecord, schema: &CsvSchema, line: usize) -> Result<SensorRecord> {
    let parse_err = |col: usize, message: String| Error::Parse {
        row: line,
        column: schema.columns[col].clone(),
        message,
    };
    let num = |col: usize| -> Result<f64> {
        let s = row[col].trim();
        s.parse::<f64>()
            .map_err(|_| parse_err(col, format!("`{s}` is not a number")))
    };
    let last = schema.columns.len() - 1;
    let ground_class: GroundClass = row[last]
        .parse()
        .map_err(|_| parse_err(last, format!("unknown ground class `{}`", &row[last])))?;
    let raw = RawRecord {
        timestamp: num(0)?,
        tunnel_length: num(1)?,
        advance_rate: num(2)?,
        working_pressure: num(3)?,
        cop: (4..4 + N_COP).map(num).collect::<Result<_>>()?,
        cxp: (4 + N_COP..4 + N_COP + N_CXP).map(num).collect::<Result<_>>()?,
        ground_class,
    };
    validate_record(raw).map_err(|e| {
        let column = match &e {
            Error::NonFinite(f) => f.clone(),
            Error::NegativeMeasure(f) => f.to_string(),
            _ => String::new(),
        };
        Error::Parse {
            row: line,
            column,
            message: e.to_string(),
        }
    })
}

pub fn write_csv(path: impl AsRef<Path>, records: &[SensorRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv_to(file, records)
}

pub fn write_csv_to<W: Write>(writer: W, records: &[SensorRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(&CsvSchema::default().columns)?;
    let mut fields: Vec<String> = Vec::with_capacity(5 + N_COP + N_CXP);
    for r in records {
        fields.clear();
        fields.extend(
            [r.timestamp, r.tunnel_length, r.advance_rate, r.working_pressure]
                .iter()
                .chain(&r.cop)
                .chain(&r.cxp)
                .map(|v| v.to_string()),
        );
        fields.push(r.ground_class.code().to_string());
        wtr.write_record(&fields)?;
    }
    wtr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Cleansing
// ---------------------------------------------------------------------------

/// Closed `[min, max]` interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
}

impl Range {
    pub fn contains(&self, v: f64) -> bool {
        v >= self.min && v <= self.max
    }
}

/// Per-parameter plausibility intervals used by the "unrealistic values" rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityRanges {
    pub advance_rate: Range,
    pub working_pressure: Range,
    pub cop: [Range; N_COP],
    pub cxp: [Range; N_CXP],
}

impl PlausibilityRanges {
    /// `[p_lo, p_hi]` nearest-rank percentiles of each channel over `records`.
    pub fn from_corpus(records: &[SensorRecord], p_lo: f64, p_hi: f64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InsufficientData("empty corpus".into()));
        }
        let range_of = |f: &dyn Fn(&SensorRecord) -> f64| {
            let mut v: Vec<f64> = records.iter().map(f).collect();
            v.sort_by(f64::total_cmp);
            Range {
                min: percentile_of_sorted(&v, p_lo),
                max: percentile_of_sorted(&v, p_hi),
            }
        };
        Ok(PlausibilityRanges {
            advance_rate: range_of(&|r| r.advance_rate),
            working_pressure: range_of(&|r| r.working_pressure),
            cop: std::array::from_fn(|j| range_of(&|r| r.cop[j])),
            cxp: std::array::from_fn(|j| range_of(&|r| r.cxp[j])),
        })
    }

    pub fn contains(&self, r: &SensorRecord) -> bool {
        self.advance_rate.contains(r.advance_rate)
            && self.working_pressure.contains(r.working_pressure)
            && self.cop.iter().zip(&r.cop).all(|(rg, v)| rg.contains(*v))
            && self.cxp.iter().zip(&r.cxp).all(|(rg, v)| rg.contains(*v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanseConfig {
    /// Seconds trimmed at each side of a detected stoppage.
    pub transient_s: f64,
    pub plausibility: Option<PlausibilityRanges>,
}

impl Default for CleanseConfig {
    fn default() -> Self {
        CleanseConfig {
            transient_s: 60.0,
            plausibility: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovedByRule {
    pub retraction: usize,
    pub nonadvancing: usize,
    pub unrealistic: usize,
    pub transient: usize,
}

impl RemovedByRule {
    pub fn total(&self) -> usize {
        self.retraction + self.nonadvancing + self.unrealistic + self.transient
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleansingReport {
    pub samples_in: usize,
    pub samples_out: usize,
    pub removed_by_rule: RemovedByRule,
}

impl CleansingReport {
    pub fn merge(&mut self, other: &CleansingReport) {
        self.samples_in += other.samples_in;
        self.samples_out += other.samples_out;
        self.removed_by_rule.retraction += other.removed_by_rule.retraction;
        self.removed_by_rule.nonadvancing += other.removed_by_rule.nonadvancing;
        self.removed_by_rule.unrealistic += other.removed_by_rule.unrealistic;
        self.removed_by_rule.transient += other.removed_by_rule.transient;
    }
}

/// Why a sample was dropped. Earlier variants take precedence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemovalRule {
    Retraction,
    NonAdvancing,
    Unrealistic,
    Transient,
}

/// Classifies every sample of a timestamp-ordered drive; `None` means kept.
///
/// * retraction: length below the furthest point reached so far
/// * non-advancing: length equal to the furthest point so far, or equal to
///   the next sample's length (start of a plateau)
/// * unrealistic: outside the configured plausibility ranges
/// * transient: within `transient_s` of a stoppage (a maximal run of
///   retraction/non-advancing samples), on either side
pub fn classify_removals(records: &[SensorRecord], cfg: &CleanseConfig) -> Vec<Option<RemovalRule>> {
    let n = records.len();
    let mut rules: Vec<Option<RemovalRule>> = vec![None; n];
    let mut furthest = f64::NEG_INFINITY;
    for i in 0..n {
        let len = records[i].tunnel_length;
        if len < furthest {
            rules[i] = Some(RemovalRule::Retraction);
        } else if len == furthest || (i + 1 < n && records[i + 1].tunnel_length == len) {
            rules[i] = Some(RemovalRule::NonAdvancing);
        }
        furthest = furthest.max(len);
    }

    let is_stop = |r: &Option<RemovalRule>| {
        matches!(r, Some(RemovalRule::Retraction | RemovalRule::NonAdvancing))
    };
    let stopped: Vec<bool> = rules.iter().map(is_stop).collect();

    if let Some(ranges) = &cfg.plausibility {
        for (rule, rec) in rules.iter_mut().zip(records) {
            if rule.is_none() && !ranges.contains(rec) {
                *rule = Some(RemovalRule::Unrealistic);
            }
        }
    }

    // Excavation segments are the maximal runs between stoppages.
    let mut i = 0;
    while i < n {
        if stopped[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && !stopped[i] {
            i += 1;
        }
        let end = i - 1;
        let after_stop = start > 0;
        let before_stop = i < n;
        let t_start = records[start].timestamp;
        let t_end = records[end].timestamp;
        for k in start..=end {
            let t = records[k].timestamp;
            let startup = after_stop && t < t_start + cfg.transient_s;
            let shutdown = before_stop && t > t_end - cfg.transient_s;
            if (startup || shutdown) && rules[k].is_none() {
                rules[k] = Some(RemovalRule::Transient);
            }
        }
    }
    rules
}

/// Drops retraction, non-advancing, implausible and transient samples.
///
/// Idempotent: the surviving tunnel lengths are strictly increasing, so a
/// second pass finds no stoppage and removes nothing.
pub fn cleanse(records: &[SensorRecord], cfg: &CleanseConfig) -> Result<(Vec<SensorRecord>, CleansingReport)> {
    let rules = classify_removals(records, cfg);
    let mut removed = RemovedByRule::default();
    let mut kept = Vec::with_capacity(records.len());
    for (rec, rule) in records.iter().zip(&rules) {
        match rule {
            None => kept.push(rec.clone()),
            Some(RemovalRule::Retraction) => removed.retraction += 1,
            Some(RemovalRule::NonAdvancing) => removed.nonadvancing += 1,
            Some(RemovalRule::Unrealistic) => removed.unrealistic += 1,
            Some(RemovalRule::Transient) => removed.transient += 1,
        }
    }
    if kept.is_empty() {
        return Err(Error::EmptyAfterCleansing);
    }
    let report = CleansingReport {
        samples_in: records.len(),
        samples_out: kept.len(),
        removed_by_rule: removed,
    };
    Ok((kept, report))
}

// ---------------------------------------------------------------------------
// Segments
// ---------------------------------------------------------------------------

/// Gaps wider than this multiple of the sample period start a new segment.
pub const SEGMENT_GAP_FACTOR: f64 = 1.5;

/// `true` when `b` directly follows `a` in the same contiguous segment.
pub fn is_successor(a: &SensorRecord, b: &SensorRecord, period: f64) -> bool {
    let dt = b.timestamp - a.timestamp;
    a.ground_class == b.ground_class && dt > 0.0 && dt <= SEGMENT_GAP_FACTOR * period
}

/// Splits a timestamp-ordered drive into contiguous same-class index ranges.
pub fn segments(records: &[SensorRecord], period: f64) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        if i == records.len() || !is_successor(&records[i - 1], &records[i], period) {
            if i > start {
                out.push(start..i);
            }
            start = i;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Smoothing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothConfig {
    /// Gaussian kernel standard deviation, seconds.
    pub bandwidth_s: f64,
    pub sample_period_s: f64,
    /// Kernel support in standard deviations.
    pub truncate_sd: f64,
    /// Allowed relative deviation of the spacing within a segment.
    pub spacing_tolerance: f64,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        SmoothConfig {
            bandwidth_s: 30.0,
            sample_period_s: SAMPLE_PERIOD_S,
            truncate_sd: 3.0,
            spacing_tolerance: 0.01,
        }
    }
}

impl SmoothConfig {
    /// Kernel weights for offsets `0..=half_width` (in samples).
    pub fn kernel(&self) -> Vec<f64> {
        let sd_samples = self.bandwidth_s / self.sample_period_s;
        let half = (self.truncate_sd * sd_samples + 1e-9).floor() as usize;
        (0..=half)
            .map(|d| {
                let z = d as f64 / sd_samples;
                (-0.5 * z * z).exp()
            })
            .collect()
    }
}

/// Gaussian kernel smoothing with the default 10 s sampling period.
pub fn smooth(records: &[SensorRecord], bandwidth_s: f64) -> Result<Vec<SensorRecord>> {
    smooth_with(
        records,
        &SmoothConfig {
            bandwidth_s,
            ..SmoothConfig::default()
        },
    )
}

/// Replaces every numeric channel by its kernel-weighted moving average
/// within each contiguous segment. Weights are renormalized where the
/// window is cut by a segment edge.
pub fn smooth_with(records: &[SensorRecord], cfg: &SmoothConfig) -> Result<Vec<SensorRecord>> {
    if cfg.bandwidth_s <= 0.0 || cfg.sample_period_s <= 0.0 {
        return Err(Error::InvalidConfig("bandwidth and sample period must be positive".into()));
    }
    let period = cfg.sample_period_s;
    for w in records.windows(2) {
        let dt = w[1].timestamp - w[0].timestamp;
        let in_segment = w[0].ground_class == w[1].ground_class && dt <= SEGMENT_GAP_FACTOR * period;
        if in_segment && (dt - period).abs() > cfg.spacing_tolerance * period {
            return Err(Error::NonUniformSampling {
                timestamp: w[1].timestamp,
                spacing: dt,
                nominal: period,
            });
        }
    }

    let kernel = cfg.kernel();
    let half = kernel.len() - 1;
    let mut out = records.to_vec();
    for seg in segments(records, period) {
        let seg_recs = &records[seg.clone()];
        let n = seg_recs.len();
        for i in 0..n {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let mut wsum = 0.0;
            let mut acc = Channels::zero();
            for (j, rec) in seg_recs.iter().enumerate().take(hi + 1).skip(lo) {
                let w = kernel[i.abs_diff(j)];
                wsum += w;
                acc.add_scaled(rec, w);
            }
            acc.write_into(&mut out[seg.start + i], 1.0 / wsum);
        }
    }
    Ok(out)
}

/// Accumulator over the smoothed channels.
struct Channels {
    tunnel_length: f64,
    advance_rate: f64,
    working_pressure: f64,
    cop: [f64; N_COP],
    cxp: [f64; N_CXP],
}

impl Channels {
    fn zero() -> Self {
        Channels {
            tunnel_length: 0.0,
            advance_rate: 0.0,
            working_pressure: 0.0,
            cop: [0.0; N_COP],
            cxp: [0.0; N_CXP],
        }
    }

    fn add_scaled(&mut self, r: &SensorRecord, w: f64) {
        self.tunnel_length += w * r.tunnel_length;
        self.advance_rate += w * r.advance_rate;
        self.working_pressure += w * r.working_pressure;
        for (a, v) in self.cop.iter_mut().zip(&r.cop) {
            *a += w * v;
        }
        for (a, v) in self.cxp.iter_mut().zip(&r.cxp) {
            *a += w * v;
        }
    }

    fn write_into(&self, r: &mut SensorRecord, scale: f64) {
        r.tunnel_length = self.tunnel_length * scale;
        r.advance_rate = self.advance_rate * scale;
        r.working_pressure = self.working_pressure * scale;
        for (dst, a) in r.cop.iter_mut().zip(&self.cop) {
            *dst = a * scale;
        }
        for (dst, a) in r.cxp.iter_mut().zip(&self.cxp) {
            *dst = a * scale;
        }
    }
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

/// Per-feature mean and population standard deviation over (CoP, CxP).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FeatureStatsRepr")]
pub struct FeatureStats {
    pub schema_version: u32,
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
}

#[derive(Deserialize)]
struct FeatureStatsRepr {
    schema_version: u32,
    mean: [f64; N_FEATURES],
    std: [f64; N_FEATURES],
}

impl TryFrom<FeatureStatsRepr> for FeatureStats {
    type Error = Error;

    fn try_from(r: FeatureStatsRepr) -> Result<Self> {
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidConfig(format!(
                "unsupported schema_version {}",
                r.schema_version
            )));
        }
        if let Some(i) = r.std.iter().position(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::ZeroVariance(feature_name(i).to_string()));
        }
        Ok(FeatureStats {
            schema_version: r.schema_version,
            mean: r.mean,
            std: r.std,
        })
    }
}

impl FeatureStats {
    pub fn fit(records: &[SensorRecord]) -> Result<Self> {
        if records.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "standardization needs at least 2 records, got {}",
                records.len()
            )));
        }
        let mut mean_v = [0.0; N_FEATURES];
        let mut std_v = [0.0; N_FEATURES];
        let mut column = vec![0.0; records.len()];
        for i in 0..N_FEATURES {
            for (c, r) in column.iter_mut().zip(records) {
                *c = if i < N_COP { r.cop[i] } else { r.cxp[i - N_COP] };
            }
            let m = mean(&column);
            let s = std_pop(&column);
            if s <= 1e-12 * m.abs().max(1.0) {
                return Err(Error::ZeroVariance(feature_name(i).to_string()));
            }
            mean_v[i] = m;
            std_v[i] = s;
        }
        Ok(FeatureStats {
            schema_version: SCHEMA_VERSION,
            mean: mean_v,
            std: std_v,
        })
    }

    pub fn apply(&self, x: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        std::array::from_fn(|i| (x[i] - self.mean[i]) / self.std[i])
    }

    pub fn invert(&self, z: &[f64; N_FEATURES]) -> [f64; N_FEATURES] {
        std::array::from_fn(|i| z[i] * self.std[i] + self.mean[i])
    }

    /// Standardized CxP part only.
    pub fn apply_cxp(&self, cxp: &[f64; N_CXP]) -> [f64; N_CXP] {
        std::array::from_fn(|j| (cxp[j] - self.mean[N_COP + j]) / self.std[N_COP + j])
    }

    pub fn apply_record(&self, r: &SensorRecord) -> SensorRecord {
        let z = self.apply(&r.features());
        let mut out = r.clone();
        out.cop.copy_from_slice(&z[..N_COP]);
        out.cxp.copy_from_slice(&z[N_COP..]);
        out
    }

    pub fn invert_record(&self, r: &SensorRecord) -> SensorRecord {
        let x = self.invert(&r.features());
        let mut out = r.clone();
        out.cop.copy_from_slice(&x[..N_COP]);
        out.cxp.copy_from_slice(&x[N_COP..]);
        out
    }
}

/// Fits (or, when `stats` is given, applies) per-feature standardization of
/// the CoP and CxP channels. Target parameters are left in raw units.
pub fn standardize(
    records: &[SensorRecord],
    stats: Option<&FeatureStats>,
) -> Result<(Vec<SensorRecord>, FeatureStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => FeatureStats::fit(records)?,
    };
    let out = records.iter().map(|r| stats.apply_record(r)).collect();
    Ok((out, stats))
}

// ---------------------------------------------------------------------------
// Operator-action reconstruction
// ---------------------------------------------------------------------------

pub const MIN_ACTION_RECORDS: usize = 100;
/// Fallback threshold percentile of |diff| when no valley is found.
pub const FALLBACK_QUANTILE: f64 = 95.0;
/// Lower bound on any threshold; changes at or below it are float noise.
pub const MIN_ACTION_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMethod {
    Valley,
    QuantileFallback,
}

/// Detected operator actions per CoP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSeries {
    pub schema_version: u32,
    /// Timestamps of the sample at which each change is observed.
    pub timestamps: [Vec<f64>; N_COP],
    pub thresholds: [f64; N_COP],
    pub methods: [ThresholdMethod; N_COP],
}

impl ActionSeries {
    pub fn has_action(&self, cop: usize, timestamp: f64) -> bool {
        self.timestamps[cop]
            .binary_search_by(|t| t.total_cmp(&timestamp))
            .is_ok()
    }

    pub fn total(&self) -> usize {
        self.timestamps.iter().map(Vec::len).sum()
    }
}

/// No valley separates small and large fluctuations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("distribution of fluctuations is unimodal")]
pub struct Unimodal;

/// Threshold between the noise mode and the action mode of a set of
/// absolute successive differences.
///
/// The histogram is built over `log10 |diff|` (exact zeros excluded) with a
/// Freedman-Diaconis bin width. Local maxima count as modes when the
/// histogram dips to at most half their height before reaching a higher bin.
/// The dominant mode is the highest one; the second is the highest mode at
/// larger fluctuations (or, failing that, at smaller ones). The threshold is
/// the centre of the lowest bins between the two.
pub fn valley_threshold(abs_diffs: &[f64]) -> std::result::Result<f64, Unimodal> {
    let logs: Vec<f64> = abs_diffs
        .iter()
        .filter(|d| **d > MIN_ACTION_THRESHOLD)
        .map(|d| d.log10())
        .collect();
    if logs.len() < 4 {
        return Err(Unimodal);
    }
    let mut sorted = logs.clone();
    sorted.sort_by(f64::total_cmp);
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    let iqr = percentile_of_sorted(&sorted, 75.0) - percentile_of_sorted(&sorted, 25.0);
    let mut width = 2.0 * iqr / (sorted.len() as f64).cbrt();
    if !(width > 0.0) || hi <= lo {
        return Err(Unimodal);
    }
    const MAX_BINS: usize = 4096;
    let mut nbins = ((hi - lo) / width).ceil() as usize;
    if nbins > MAX_BINS {
        nbins = MAX_BINS;
        width = (hi - lo) / nbins as f64;
    }
    let nbins = nbins.max(1);
    let mut counts = vec![0usize; nbins];
    for v in &logs {
        let b = (((v - lo) / width) as usize).min(nbins - 1);
        counts[b] += 1;
    }

    let peaks = find_modes(&counts);
    let &(main, _) = peaks
        .iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .ok_or(Unimodal)?;
    let pick = |right: bool| {
        peaks
            .iter()
            .filter(|(p, _)| if right { *p > main } else { *p < main })
            .max_by(|a, b| a.1.cmp(&b.1).then(if right { a.0.cmp(&b.0) } else { b.0.cmp(&a.0) }))
            .copied()
    };
    let (second, _) = pick(true).or_else(|| pick(false)).ok_or(Unimodal)?;
    let (left, right) = (main.min(second), main.max(second));
    if right - left < 2 {
        return Err(Unimodal);
    }
    let between = &counts[left + 1..right];
    let min_count = *between.iter().min().expect("non-empty");
    let first = left + 1 + between.iter().position(|c| *c == min_count).unwrap();
    let last = left + 1 + between.iter().rposition(|c| *c == min_count).unwrap();
    // Centre of [left edge of `first`, right edge of `last`].
    let centre = lo + width * (first as f64 + last as f64 + 1.0) / 2.0;
    Ok(10f64.powf(centre))
}

/// Peak positions and heights that qualify as modes.
fn find_modes(counts: &[usize]) -> Vec<(usize, usize)> {
    let n = counts.len();
    let at = |i: isize| -> usize {
        if i < 0 || i as usize >= n {
            0
        } else {
            counts[i as usize]
        }
    };
    let mut modes = Vec::new();
    let mut i = 0;
    while i < n {
        let h = counts[i];
        let mut j = i;
        while j + 1 < n && counts[j + 1] == h {
            j += 1;
        }
        if h > 0 && at(i as isize - 1) < h && at(j as isize + 1) < h {
            // Lowest point on each side before a strictly higher bin (or the edge).
            let mut left_min = h;
            let mut k = i as isize - 1;
            while k >= -1 && at(k) <= h {
                left_min = left_min.min(at(k));
                if k < 0 {
                    break;
                }
                k -= 1;
            }
            let mut right_min = h;
            let mut k = j as isize + 1;
            while k <= n as isize && at(k) <= h {
                right_min = right_min.min(at(k));
                if k as usize >= n {
                    break;
                }
                k += 1;
            }
            let prominence = h - left_min.max(right_min);
            if 2 * prominence >= h {
                modes.push(((i + j) / 2, h));
            }
        }
        i = j + 1;
    }
    modes
}

/// Recovers operator actions from the bimodal distribution of successive
/// CoP changes. Only consecutive samples of one segment are differenced.
pub fn reconstruct_actions(records: &[SensorRecord]) -> Result<ActionSeries> {
    reconstruct_actions_with(records, SAMPLE_PERIOD_S)
}

pub fn reconstruct_actions_with(records: &[SensorRecord], period: f64) -> Result<ActionSeries> {
    if records.len() < MIN_ACTION_RECORDS {
        return Err(Error::InsufficientData(format!(
            "action reconstruction needs at least {MIN_ACTION_RECORDS} records, got {}",
            records.len()
        )));
    }
    let pairs: Vec<(usize, usize)> = records
        .windows(2)
        .enumerate()
        .filter(|(_, w)| is_successor(&w[0], &w[1], period))
        .map(|(i, _)| (i, i + 1))
        .collect();

    let mut timestamps: [Vec<f64>; N_COP] = Default::default();
    let mut thresholds = [0.0; N_COP];
    let mut methods = [ThresholdMethod::Valley; N_COP];
    for j in 0..N_COP {
        let diffs: Vec<f64> = pairs
            .iter()
            .map(|&(a, b)| (records[b].cop[j] - records[a].cop[j]).abs())
            .collect();
        let (threshold, method) = match valley_threshold(&diffs) {
            Ok(t) => (t, ThresholdMethod::Valley),
            Err(Unimodal) => {
                log::debug!("{}: unimodal fluctuations, using quantile fallback", COP_NAMES[j]);
                let q = percentile_nearest_rank(&diffs, FALLBACK_QUANTILE).unwrap_or(0.0);
                (q, ThresholdMethod::QuantileFallback)
            }
        };
        thresholds[j] = threshold.max(MIN_ACTION_THRESHOLD);
        methods[j] = method;
        timestamps[j] = pairs
            .iter()
            .zip(&diffs)
            .filter(|(_, d)| **d > thresholds[j])
            .map(|(&(_, b), _)| records[b].timestamp)
            .collect();
    }
    Ok(ActionSeries {
        schema_version: SCHEMA_VERSION,
        timestamps,
        thresholds,
        methods,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::tests::sample_record;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Strictly advancing drive with 10 s spacing and varied channels.
    fn drive(n: usize) -> Vec<SensorRecord> {
        (0..n)
            .map(|i| {
                let mut r = sample_record();
                r.timestamp = 10.0 * i as f64;
                r.tunnel_length = 0.25 * i as f64;
                r.advance_rate = 20.0 + (i % 7) as f64;
                r.working_pressure = 90.0 + (i % 5) as f64;
                r.cop[0] = 15.0 + (i % 3) as f64;
                r.cxp[0] = (i as f64 * 0.3).sin();
                r
            })
            .collect()
    }

    fn with_lengths(lengths: &[f64]) -> Vec<SensorRecord> {
        let mut d = drive(lengths.len());
        for (r, l) in d.iter_mut().zip(lengths) {
            r.tunnel_length = *l;
        }
        d
    }

    #[test]
    fn clean_drive_passes_unchanged() {
        let d = drive(80);
        let (out, report) = cleanse(&d, &CleanseConfig::default()).unwrap();
        assert_eq!(out, d);
        assert_eq!(report.removed_by_rule, RemovedByRule::default());
        assert_eq!(report.samples_in, 80);
        assert_eq!(report.samples_out, 80);
    }

    #[test]
    fn plateau_counts_as_nonadvancing() {
        // 30 advancing samples, a 10-sample plateau, 30 advancing samples.
        let mut lengths: Vec<f64> = (0..30).map(|i| 0.25 * i as f64).collect();
        lengths.extend(std::iter::repeat(7.5).take(10));
        lengths.extend((0..30).map(|i| 7.75 + 0.25 * i as f64));
        let d = with_lengths(&lengths);
        let (out, report) = cleanse(&d, &CleanseConfig::default()).unwrap();
        assert_eq!(report.removed_by_rule.nonadvancing, 10);
        assert_eq!(report.removed_by_rule.retraction, 0);
        assert!(out.iter().all(|r| r.tunnel_length != 7.5));
        assert_eq!(report.samples_out + report.removed_by_rule.total(), report.samples_in);
    }

    #[test]
    fn retraction_fixture_matches_hand_listed_indices() {
        // 0..=19 advance to 4.75 m, 20..=24 retract, 25..=29 re-advance to the
        // previous maximum, 30..=49 advance beyond it.
        let mut lengths: Vec<f64> = (0..20).map(|i| 0.25 * i as f64).collect();
        lengths.extend([4.5, 4.25, 4.0, 3.75, 3.5]);
        lengths.extend([3.75, 4.0, 4.25, 4.5, 4.75]);
        lengths.extend((0..20).map(|i| 5.0 + 0.25 * i as f64));
        assert_eq!(lengths.len(), 50);
        let d = with_lengths(&lengths);

        let rules = classify_removals(&d, &CleanseConfig::default());
        let idx = |rule: RemovalRule| -> Vec<usize> {
            rules
                .iter()
                .enumerate()
                .filter(|(_, r)| **r == Some(rule))
                .map(|(i, _)| i)
                .collect()
        };
        assert_eq!(idx(RemovalRule::Retraction), vec![20, 21, 22, 23, 24, 25, 26, 27, 28]);
        assert_eq!(idx(RemovalRule::NonAdvancing), vec![29]);
        // 60 s at 10 s spacing on each side of the stoppage.
        assert_eq!(
            idx(RemovalRule::Transient),
            vec![14, 15, 16, 17, 18, 19, 30, 31, 32, 33, 34, 35]
        );

        let (out, report) = cleanse(&d, &CleanseConfig::default()).unwrap();
        assert_eq!(report.removed_by_rule.retraction, 9);
        assert_eq!(report.removed_by_rule.nonadvancing, 1);
        assert_eq!(report.removed_by_rule.transient, 12);
        assert_eq!(out.len(), 28);
    }

    #[test]
    fn implausible_values_removed() {
        let mut d = drive(40);
        d[10].working_pressure = 900.0;
        let mut ranges = PlausibilityRanges::from_corpus(&d[..5], 0.0, 100.0).unwrap();
        ranges.working_pressure = Range { min: 0.0, max: 200.0 };
        ranges.advance_rate = Range { min: 0.0, max: 100.0 };
        ranges.cop = [Range { min: -1e9, max: 1e9 }; N_COP];
        ranges.cxp = [Range { min: -1e9, max: 1e9 }; N_CXP];
        let cfg = CleanseConfig {
            transient_s: 60.0,
            plausibility: Some(ranges),
        };
        let (out, report) = cleanse(&d, &cfg).unwrap();
        assert_eq!(report.removed_by_rule.unrealistic, 1);
        assert_eq!(out.len(), 39);
    }

    #[test]
    fn nothing_left_is_an_error() {
        let d = with_lengths(&[1.0; 20]);
        assert!(matches!(
            cleanse(&d, &CleanseConfig::default()),
            Err(Error::EmptyAfterCleansing)
        ));
    }

    #[test]
    fn constant_channel_survives_smoothing() {
        let d = drive(30);
        let out = smooth(&d, 30.0).unwrap();
        for (a, b) in d.iter().zip(&out) {
            assert!((a.cxp[5] - b.cxp[5]).abs() < 1e-12);
            assert_eq!(a.timestamp, b.timestamp);
            assert_eq!(a.ground_class, b.ground_class);
        }
    }

    #[test]
    fn impulse_response_matches_direct_kernel_sum() {
        let mut d = drive(7);
        for r in d.iter_mut() {
            r.cop[2] = 0.0;
        }
        d[3].cop[2] = 1.0;
        let out = smooth(&d, 30.0).unwrap();
        // Oracle: every sample lies within 3 sd (9 samples) of the centre, so
        // the renormalized weight is g(0) / sum_{k=-3..3} g(k), sd = 3 samples.
        let g = |k: f64| (-(k * 10.0) * (k * 10.0) / (2.0 * 30.0 * 30.0)).exp();
        let denom: f64 = (-3..=3).map(|k| g(k as f64)).sum();
        assert!((out[3].cop[2] - g(0.0) / denom).abs() < 1e-15);
        // Off-centre sample 1: its own window covers offsets -1..=5.
        let denom1: f64 = (-1..=5).map(|k| g(k as f64)).sum();
        assert!((out[1].cop[2] - g(2.0) / denom1).abs() < 1e-15);
    }

    #[test]
    fn ramp_interior_is_preserved() {
        let mut d = drive(60);
        for (i, r) in d.iter_mut().enumerate() {
            r.cxp[1] = 3.0 * i as f64 - 7.0;
        }
        let out = smooth(&d, 30.0).unwrap();
        for i in 9..51 {
            assert!((out[i].cxp[1] - d[i].cxp[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn jittered_spacing_rejected() {
        let mut d = drive(20);
        d[5].timestamp += 0.5;
        assert!(matches!(smooth(&d, 30.0), Err(Error::NonUniformSampling { .. })));
    }

    #[test]
    fn gaps_split_segments() {
        let mut d = drive(40);
        for r in d.iter_mut().skip(20) {
            r.timestamp += 100.0;
        }
        for (i, r) in d.iter_mut().enumerate() {
            r.cop[4] = if i < 20 { 0.0 } else { 5.0 };
        }
        let out = smooth(&d, 30.0).unwrap();
        // Windows never straddle the gap, so each side stays constant.
        assert!(out.iter().take(20).all(|r| r.cop[4].abs() < 1e-12));
        assert!(out.iter().skip(20).all(|r| (r.cop[4] - 5.0).abs() < 1e-12));
        assert_eq!(segments(&d, SAMPLE_PERIOD_S), vec![0..20, 20..40]);
    }

    #[test]
    fn two_point_standardization() {
        let mut d = drive(2);
        for (i, r) in d.iter_mut().enumerate() {
            for (j, v) in r.cop.iter_mut().enumerate() {
                *v = if i == 0 { 1.0 } else { 3.0 } + j as f64;
            }
            for (j, v) in r.cxp.iter_mut().enumerate() {
                *v = if i == 0 { 1.0 } else { 3.0 } * (j + 1) as f64;
            }
        }
        let (out, stats) = standardize(&d, None).unwrap();
        assert_eq!(stats.mean[0], 2.0);
        assert_eq!(stats.std[0], 1.0);
        assert_eq!(out[0].cop[0], -1.0);
        assert_eq!(out[1].cop[0], 1.0);
        // Stored stats applied in inference mode.
        let mut probe = d[0].clone();
        probe.cop[0] = 4.0;
        let (applied, _) = standardize(&[probe], Some(&stats)).unwrap();
        assert_eq!(applied[0].cop[0], 2.0);
    }

    #[test]
    fn constant_channel_is_zero_variance() {
        let d = drive(10);
        match standardize(&d, None) {
            Err(Error::ZeroVariance(name)) => assert_eq!(name, "high_pressure_nozzle"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn feature_stats_reject_zero_std_on_load() {
        let json = format!(
            "{{\"schema_version\":1,\"mean\":{:?},\"std\":{:?}}}",
            [0.0; N_FEATURES],
            [0.0; N_FEATURES]
        );
        assert!(serde_json::from_str::<FeatureStats>(&json).is_err());
    }

    /// Piecewise-constant CoP channel with known steps.
    fn stepped_drive(n: usize, steps: &[(usize, f64)], noise: f64, seed: u64) -> Vec<SensorRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = drive(n);
        let mut level = 50.0;
        for (i, r) in d.iter_mut().enumerate() {
            if let Some((_, s)) = steps.iter().find(|(at, _)| *at == i) {
                level += s;
            }
            r.cop[3] = level + if noise > 0.0 { rng.random_range(-noise..noise) } else { 0.0 };
        }
        d
    }

    #[test]
    fn three_noisy_steps_detected_exactly() {
        let steps = [(60, 10.0), (140, -10.0), (230, 10.0)];
        let d = stepped_drive(300, &steps, 0.1, 11);
        let actions = reconstruct_actions(&d).unwrap();
        let expected: Vec<f64> = steps.iter().map(|(i, _)| d[*i].timestamp).collect();
        assert_eq!(actions.timestamps[3], expected);
        assert_eq!(actions.methods[3], ThresholdMethod::Valley);
        assert!(actions.thresholds.iter().all(|t| *t > 0.0));
    }

    #[test]
    fn noise_free_steps_detected_exactly() {
        let steps = [(25, 4.0), (180, -2.5), (260, 7.0)];
        let d = stepped_drive(300, &steps, 0.0, 0);
        let actions = reconstruct_actions(&d).unwrap();
        let expected: Vec<f64> = steps.iter().map(|(i, _)| d[*i].timestamp).collect();
        assert_eq!(actions.timestamps[3], expected);
        // Channels that never change produce nothing.
        assert!(actions.timestamps[1].is_empty());
        assert!(actions.timestamps[2].is_empty());
    }

    #[test]
    fn bimodal_threshold_lies_between_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut diffs: Vec<f64> = (0..400).map(|_| 0.1 * rng.random_range(0.7..1.3)).collect();
        diffs.extend((0..40).map(|_| 5.0 * rng.random_range(0.8..1.2)));
        let t = valley_threshold(&diffs).unwrap();
        assert!(t > 0.1 && t < 5.0, "{t}");
        // Every small diff lies below and every large one above.
        assert!(diffs.iter().filter(|d| **d > t).count() == 40);
    }

    #[test]
    fn single_mode_is_unimodal() {
        let diffs: Vec<f64> = (1..200).map(|i| 0.1 + 1e-4 * i as f64).collect();
        assert_eq!(valley_threshold(&diffs), Err(Unimodal));
        assert_eq!(valley_threshold(&[0.0; 50]), Err(Unimodal));
    }

    #[test]
    fn too_few_records_for_actions() {
        assert!(matches!(
            reconstruct_actions(&drive(50)),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let d = drive(3);
        let mut buf = Vec::new();
        write_csv_to(&mut buf, &d).unwrap();
        let loaded = read_csv(buf.as_slice(), &CsvSchema::default()).unwrap();
        assert_eq!(loaded.records, d);
        assert_eq!(loaded.dropped_incomplete, 0);

        let text = String::from_utf8(buf).unwrap();
        let missing = text.replacen(",cxp_19", "", 1);
        assert!(matches!(
            read_csv(missing.as_bytes(), &CsvSchema::default()),
            Err(Error::SchemaMismatch(_))
        ));

        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut fields: Vec<String> = lines[2].split(',').map(String::from).collect();
        fields[2] = "fast".into();
        lines[2] = fields.join(",");
        match read_csv(lines.join("\n").as_bytes(), &CsvSchema::default()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "advance_rate");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rows_with_gaps_are_dropped_and_counted() {
        let d = drive(4);
        let mut buf = Vec::new();
        write_csv_to(&mut buf, &d).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut fields: Vec<String> = lines[3].split(',').map(String::from).collect();
        fields[9] = String::new();
        lines[3] = fields.join(",");
        let loaded = read_csv(lines.join("\n").as_bytes(), &CsvSchema::default()).unwrap();
        assert_eq!(loaded.records.len(), 3);
        assert_eq!(loaded.dropped_incomplete, 1);
    }

    #[test]
    fn nan_cell_is_a_parse_error() {
        let d = drive(2);
        let mut buf = Vec::new();
        write_csv_to(&mut buf, &d).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut fields: Vec<String> = lines[1].split(',').map(String::from).collect();
        fields[3] = "NaN".into();
        lines[1] = fields.join(",");
        match read_csv(lines.join("\n").as_bytes(), &CsvSchema::default()) {
            Err(Error::Parse { row: 2, column, .. }) => assert_eq!(column, "working_pressure"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
