//! Offline validation of recommenders against historic operator behaviour.
//!
//! Synchronized validation (SV) looks at timesteps where the operator
//! changed a control parameter and the recommender suggested the same
//! direction, and counts how often the score then improved. Contextual
//! validation (CV) compares the recommendation with the historic sample that
//! has the most similar context and control settings but a different score.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::domain::{GroundClass, N_COP};
use crate::error::Result;
use crate::neighbors::{CxpPoint, NeighborIndex, N_NEIGHBORS};
use crate::stats::sign_with_deadband;

/// Changes smaller than this count as no change.
pub const SIGN_DEADBAND: f64 = 1e-9;
/// Minimum score difference for a contextual reference sample.
pub const SCORE_TOLERANCE: f64 = 1e-9;

/// How an "improved" outcome is decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImprovementMode {
    /// The score rose: `f(t+1) - f(t) > 0`.
    #[default]
    Delta,
    /// The later score itself is positive: `f(t+1) > 0`.
    Literal,
}

impl ImprovementMode {
    fn improved(self, before: f64, after: f64) -> bool {
        match self {
            ImprovementMode::Delta => after - before > 0.0,
            ImprovementMode::Literal => after > 0.0,
        }
    }
}

/// `val` of `num` agreeing cases improved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Cell {
    pub val: usize,
    pub num: usize,
}

impl Cell {
    pub fn ratio(&self) -> Option<f64> {
        (self.num > 0).then(|| self.val as f64 / self.num as f64)
    }

    pub fn merge(&mut self, other: Cell) {
        self.val += other.val;
        self.num += other.num;
    }
}

/// One validation timestep and its successor. Scores are raw optimality.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cop: [f64; N_COP],
    pub score: f64,
    pub next_cop: [f64; N_COP],
    pub next_score: f64,
    /// Operator action on each CoP at the successor.
    pub actions: [bool; N_COP],
    /// Standardized context used to query the history.
    pub cxp: CxpPoint,
    /// Position of this very sample inside the history index, if present.
    pub exclude: Option<usize>,
}

impl Sample {
    pub fn has_action(&self) -> bool {
        self.actions.iter().any(|a| *a)
    }
}

/// Historic reference points for contextual validation.
pub struct History<'a> {
    pub index: &'a NeighborIndex,
    pub cops: &'a [[f64; N_COP]],
    pub scores: &'a [f64],
    /// CoP differences are divided by this before the nearest-CoP search.
    pub cop_scale: [f64; N_COP],
}

fn count(cells: &mut [Cell; N_COP], i: usize, recommended: f64, observed: f64, improved: bool) {
    let s = sign_with_deadband(recommended, SIGN_DEADBAND);
    if s != 0 && s == sign_with_deadband(observed, SIGN_DEADBAND) {
        cells[i].num += 1;
        if improved {
            cells[i].val += 1;
        }
    }
}

/// SV counters. `recommendations[k]` is the recommended CoP change at `samples[k]`.
pub fn synchronized(samples: &[Sample], recommendations: &[[f64; N_COP]], mode: ImprovementMode) -> [Cell; N_COP] {
    let mut cells = [Cell::default(); N_COP];
    for (s, rec) in samples.iter().zip(recommendations) {
        let improved = mode.improved(s.score, s.next_score);
        for i in 0..N_COP {
            if s.actions[i] {
                count(&mut cells, i, rec[i], s.next_cop[i] - s.cop[i], improved);
            }
        }
    }
    cells
}

/// The reference sample for CV: among the context neighbours whose score
/// differs from the current one, the one closest to the recommended CoP.
pub fn reference_point(sample: &Sample, recommendation: &[f64; N_COP], history: &History) -> Result<Option<usize>> {
    let k = N_NEIGHBORS.min(history.index.len() - usize::from(sample.exclude.is_some()));
    let extra = usize::from(sample.exclude.is_some());
    let neighbors = history.index.query(&sample.cxp, k + extra)?;
    let target: [f64; N_COP] = std::array::from_fn(|i| sample.cop[i] + recommendation[i]);
    let mut best: Option<(f64, usize)> = None;
    for nb in neighbors.iter().filter(|nb| Some(nb.index) != sample.exclude).take(k) {
        if (history.scores[nb.index] - sample.score).abs() <= SCORE_TOLERANCE {
            continue;
        }
        let c = &history.cops[nb.index];
        let d: f64 = (0..N_COP)
            .map(|i| ((target[i] - c[i]) / history.cop_scale[i]).powi(2))
            .sum();
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, nb.index));
        }
    }
    Ok(best.map(|(_, j)| j))
}

/// CV counters over samples that carry at least one operator action.
pub fn contextual(
    samples: &[Sample],
    recommendations: &[[f64; N_COP]],
    history: &History,
    mode: ImprovementMode,
) -> Result<[Cell; N_COP]> {
    let mut cells = [Cell::default(); N_COP];
    for (s, rec) in samples.iter().zip(recommendations) {
        if !s.has_action() {
            continue;
        }
        let Some(j) = reference_point(s, rec, history)? else {
            continue;
        };
        let improved = mode.improved(s.score, history.scores[j]);
        for i in 0..N_COP {
            count(&mut cells, i, rec[i], history.cops[j][i] - s.cop[i], improved);
        }
    }
    Ok(cells)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassCells {
    pub ground_class: GroundClass,
    pub sv: [Cell; N_COP],
    pub cv: [Cell; N_COP],
}

/// Averages of the defined ratios of one indicator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    /// Per ground class (same order as the cells), over CoPs.
    pub rows: Vec<Option<f64>>,
    /// Per CoP, over ground classes.
    pub columns: [Option<f64>; N_COP],
    /// Over every defined cell.
    pub grand: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommenderReport {
    pub name: String,
    pub classes: Vec<ClassCells>,
    pub sv: Averages,
    pub cv: Averages,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub schema_version: u32,
    pub mode: ImprovementMode,
    pub recommenders: Vec<RecommenderReport>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn averages(rows: &[[Cell; N_COP]]) -> Averages {
    Averages {
        rows: rows.iter().map(|r| mean_defined(r.iter().map(Cell::ratio))).collect(),
        columns: std::array::from_fn(|i| mean_defined(rows.iter().map(|r| r[i].ratio()))),
        grand: mean_defined(rows.iter().flat_map(|r| r.iter().map(Cell::ratio))),
    }
}

pub fn report(name: &str, classes: Vec<ClassCells>) -> RecommenderReport {
    let sv: Vec<[Cell; N_COP]> = classes.iter().map(|c| c.sv).collect();
    let cv: Vec<[Cell; N_COP]> = classes.iter().map(|c| c.cv).collect();
    RecommenderReport {
        name: name.to_string(),
        sv: averages(&sv),
        cv: averages(&cv),
        classes,
    }
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(r) => format!("{:.0}", 100.0 * r),
        None => "-".to_string(),
    }
}

/// Plain-text table: ground classes in rows, CoPs in columns, one
/// sub-column per recommender, SV block then CV block. Values in percent;
/// `-` marks an undefined ratio.
pub fn render_table(report: &ValidationReport) -> String {
    let recs = &report.recommenders;
    let names: Vec<&str> = recs.iter().map(|r| r.name.as_str()).collect();
    let sub = names.len().max(1);
    let w = 5;
    let group_w = sub * w;
    let mut classes: Vec<GroundClass> = recs.iter().flat_map(|r| r.classes.iter().map(|c| c.ground_class)).collect();
    classes.sort();
    classes.dedup();

    let mut out = String::new();
    let mut line = format!("{:<6}", "");
    for title in ["Synchronized Validation", "Contextual Validation"] {
        line.push_str(&format!("|{:^width$}", title, width = group_w * (N_COP + 1)));
    }
    let _ = writeln!(out, "{}", line.trim_end());
    let mut line = format!("{:<6}", "");
    for _ in 0..2 {
        line.push('|');
        for i in 0..N_COP {
            line.push_str(&format!("{:^group_w$}", format!("CoP{}", i + 1)));
        }
        line.push_str(&format!("{:^group_w$}", "Avg"));
    }
    let _ = writeln!(out, "{}", line.trim_end());
    let mut line = format!("{:<6}", "");
    for _ in 0..2 {
        line.push('|');
        for _ in 0..=N_COP {
            for n in &names {
                line.push_str(&format!("{n:>w$}"));
            }
        }
    }
    let _ = writeln!(out, "{}", line.trim_end());
    let _ = writeln!(out, "{}", "-".repeat(6 + 2 * (1 + group_w * (N_COP + 1))));

    let cell_of = |r: &RecommenderReport, gc: GroundClass, sv: bool, i: Option<usize>| -> Option<f64> {
        let pos = r.classes.iter().position(|c| c.ground_class == gc)?;
        let (cells, avg) = if sv { (&r.classes[pos].sv, &r.sv) } else { (&r.classes[pos].cv, &r.cv) };
        match i {
            Some(i) => cells[i].ratio(),
            None => avg.rows[pos],
        }
    };
    for gc in &classes {
        let mut line = format!("{:<6}", gc.code());
        for sv in [true, false] {
            line.push('|');
            for i in (0..N_COP).map(Some).chain([None]) {
                for r in recs {
                    line.push_str(&format!("{:>w$}", pct(cell_of(r, *gc, sv, i))));
                }
            }
        }
        let _ = writeln!(out, "{}", line.trim_end());
    }
    let mut line = format!("{:<6}", "Avg");
    for sv in [true, false] {
        line.push('|');
        for i in (0..N_COP).map(Some).chain([None]) {
            for r in recs {
                let avg = if sv { &r.sv } else { &r.cv };
                let v = match i {
                    Some(i) => avg.columns[i],
                    None => avg.grand,
                };
                line.push_str(&format!("{:>w$}", pct(v)));
            }
        }
    }
    let _ = writeln!(out, "{}", line.trim_end());
    out
}
