//! Per-ground-class recommendation engine.
//!
//! A [`ClassEngine`] bundles a trained model, its optimality config and the
//! neighbour corpus it was trained on. The gradient path needs only the
//! network; the neighbour index is consulted for credibility and for the
//! baseline recommender.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::credibility::{credibility, point_trusts};
use crate::dataset::Chunk;
use crate::domain::{GroundClass, SensorRecord, N_COP, N_CXP, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::mlp::MlpModel;
use crate::neighbors::{baseline_recommend, BaselineRecommendation, CxpPoint, NeighborIndex};
use crate::optimality::OptimalityConfig;
use crate::stats::fingerprint;

/// Step size in standardized units per unit of gradient.
pub const DEFAULT_STEP_SIZE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopBounds {
    pub min: [f64; N_COP],
    pub max: [f64; N_COP],
}

impl CopBounds {
    pub fn validate(&self) -> Result<()> {
        for j in 0..N_COP {
            if !(self.min[j] <= self.max[j]) {
                return Err(Error::InvalidConfig(format!("CoP {} bounds are inverted", j + 1)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvisorConfig {
    pub step_size: f64,
    /// Optional per-CoP box; unclamped when absent.
    #[serde(default)]
    pub cop_bounds: Option<CopBounds>,
}

impl Default for AdvisorConfig {
    fn default() -> Self {
        AdvisorConfig {
            step_size: DEFAULT_STEP_SIZE,
            cop_bounds: None,
        }
    }
}

impl AdvisorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidConfig("step_size must be > 0".into()));
        }
        if let Some(b) = &self.cop_bounds {
            b.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CopAction {
    Increase,
    Decrease,
    Hold,
}

impl CopAction {
    fn of(delta: f64) -> Self {
        if delta > 0.0 {
            CopAction::Increase
        } else if delta < 0.0 {
            CopAction::Decrease
        } else {
            CopAction::Hold
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub schema_version: u32,
    pub ground_class: GroundClass,
    /// d(score)/d(CoP) in standardized space.
    pub gradients: [f64; N_COP],
    /// Suggested CoP changes in raw units.
    pub deltas: [f64; N_COP],
    pub actions: [CopAction; N_COP],
    /// True where a configured bound shortened or cancelled the step.
    pub at_bound: [bool; N_COP],
    /// Display-normalized predicted score, 0 to 100.
    pub predicted_optimality: f64,
    pub predicted_raw: f64,
    pub credibility: f64,
}

/// Output of the gradient path alone.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStep {
    pub gradients: [f64; N_COP],
    pub deltas: [f64; N_COP],
    pub at_bound: [bool; N_COP],
    pub predicted_raw: f64,
}

/// Training-split records of one class as persisted next to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborCorpus {
    pub schema_version: u32,
    pub ground_class: GroundClass,
    pub fingerprint: String,
    pub chunks: Vec<Chunk>,
}

impl NeighborCorpus {
    pub fn new(ground_class: GroundClass, chunks: Vec<Chunk>) -> Self {
        NeighborCorpus {
            schema_version: SCHEMA_VERSION,
            ground_class,
            fingerprint: fingerprint(&chunks),
            chunks,
        }
    }
}

pub struct ClassEngine {
    pub model: MlpModel,
    pub optimality: OptimalityConfig,
    index: NeighborIndex,
    records: Vec<SensorRecord>,
    cops: Vec<[f64; N_COP]>,
    scores: Vec<f64>,
    trusts: Vec<Option<f64>>,
}

impl ClassEngine {
    /// Builds the neighbour index over `chunks` (the model's training data)
    /// and precomputes every point's trust value.
    pub fn build(model: MlpModel, optimality: OptimalityConfig, chunks: &[Chunk]) -> Result<Self> {
        let gc = model.ground_class;
        if optimality.ground_class != gc {
            return Err(Error::InvalidConfig(format!(
                "optimality config is for {}, model for {gc}",
                optimality.ground_class
            )));
        }
        let calibration = model
            .calibration
            .clone()
            .ok_or_else(|| Error::InvalidConfig(format!("model for {gc} has no credibility calibration")))?;
        let records: Vec<SensorRecord> = chunks.iter().flat_map(|c| c.records.iter().cloned()).collect();
        if let Some(r) = records.iter().find(|r| r.ground_class != gc) {
            return Err(Error::InvalidConfig(format!("neighbour corpus for {gc} contains a {} record", r.ground_class)));
        }
        let points: Vec<CxpPoint> = records.iter().map(|r| model.feature_scaler.apply_cxp(&r.cxp)).collect();
        let index = NeighborIndex::build(points)?;
        let trusts = point_trusts(&model, &optimality, &calibration, chunks)?;
        let cops = records.iter().map(|r| r.cop).collect();
        let scores = records.iter().map(|r| optimality.score_record(r)).collect();
        Ok(ClassEngine {
            model,
            optimality,
            index,
            records,
            cops,
            scores,
            trusts,
        })
    }

    pub fn ground_class(&self) -> GroundClass {
        self.model.ground_class
    }

    pub fn index(&self) -> &NeighborIndex {
        &self.index
    }

    pub fn records(&self) -> &[SensorRecord] {
        &self.records
    }

    /// Raw optimality of each index point.
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn trusts(&self) -> &[Option<f64>] {
        &self.trusts
    }

    /// Gradient, scaled step and prediction; touches only the network.
    pub fn gradient_step(&self, cop: &[f64; N_COP], cxp: &[f64; N_CXP], cfg: &AdvisorConfig) -> Result<GradientStep> {
        let x = self.model.standardize(cop, cxp);
        let predicted_raw = self.model.predict(&x)?;
        let grad = self.model.input_gradient(&x)?;
        let gradients: [f64; N_COP] = std::array::from_fn(|j| grad[j]);
        let mut deltas: [f64; N_COP] =
            std::array::from_fn(|j| cfg.step_size * gradients[j] * self.model.feature_scaler.std[j]);
        let mut at_bound = [false; N_COP];
        if let Some(bounds) = &cfg.cop_bounds {
            for j in 0..N_COP {
                let target = (cop[j] + deltas[j]).clamp(bounds.min[j], bounds.max[j]);
                let mut clamped = target - cop[j];
                // Never step against the gradient when already outside the box.
                if clamped * deltas[j] < 0.0 {
                    clamped = 0.0;
                }
                if clamped != deltas[j] {
                    at_bound[j] = true;
                    deltas[j] = clamped;
                }
            }
        }
        Ok(GradientStep {
            gradients,
            deltas,
            at_bound,
            predicted_raw,
        })
    }

    /// Credibility at a raw context vector.
    pub fn credibility(&self, cxp: &[f64; N_CXP]) -> Result<f64> {
        credibility(&self.index, &self.trusts, &self.model.feature_scaler.apply_cxp(cxp))
    }

    pub fn recommend(&self, cop: &[f64; N_COP], cxp: &[f64; N_CXP], cfg: &AdvisorConfig) -> Result<Recommendation> {
        let step = self.gradient_step(cop, cxp, cfg)?;
        Ok(Recommendation {
            schema_version: SCHEMA_VERSION,
            ground_class: self.ground_class(),
            gradients: step.gradients,
            deltas: step.deltas,
            actions: std::array::from_fn(|j| CopAction::of(step.deltas[j])),
            at_bound: step.at_bound,
            predicted_optimality: self.optimality.normalize(step.predicted_raw),
            predicted_raw: step.predicted_raw,
            credibility: self.credibility(cxp)?,
        })
    }

    /// Neighbour-average baseline for a sample whose current raw score is `score`.
    pub fn baseline(&self, cop: &[f64; N_COP], cxp: &[f64; N_CXP], score: f64) -> Result<BaselineRecommendation> {
        let q = self.model.feature_scaler.apply_cxp(cxp);
        baseline_recommend(&self.index, &q, cop, score, &self.cops, &self.scores)
    }
}

/// Immutable set of engines keyed by ground class.
pub struct Registry {
    engines: BTreeMap<GroundClass, ClassEngine>,
    pub config: AdvisorConfig,
}

impl Registry {
    pub fn new(config: AdvisorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Registry {
            engines: BTreeMap::new(),
            config,
        })
    }

    pub fn insert(&mut self, engine: ClassEngine) {
        self.engines.insert(engine.ground_class(), engine);
    }

    pub fn classes(&self) -> Vec<GroundClass> {
        self.engines.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.engines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.engines.is_empty()
    }

    pub fn engine(&self, gc: GroundClass) -> Result<&ClassEngine> {
        self.engines.get(&gc).ok_or(Error::ModelNotLoaded(gc))
    }

    pub fn recommend(&self, gc: GroundClass, cop: &[f64; N_COP], cxp: &[f64; N_CXP]) -> Result<Recommendation> {
        self.engine(gc)?.recommend(cop, cxp, &self.config)
    }
}

pub fn model_path(dir: &Path, gc: GroundClass) -> PathBuf {
    dir.join(format!("model_{}.json", gc.code()))
}

pub fn neighbors_path(dir: &Path, gc: GroundClass) -> PathBuf {
    dir.join(format!("neighbors_{}.json", gc.code()))
}

pub fn optimality_path(dir: &Path, gc: GroundClass) -> PathBuf {
    dir.join(format!("optimality_{}.json", gc.code()))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads and checks the engine for one class from a model directory.
pub fn load_engine(dir: &Path, gc: GroundClass) -> Result<ClassEngine> {
    let mpath = model_path(dir, gc);
    if !mpath.exists() {
        return Err(Error::MissingModel(gc));
    }
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let model = MlpModel::from_json(&text)?;
    if model.ground_class != gc {
        return Err(Error::InvalidConfig(format!("{} holds a {} model", mpath.display(), model.ground_class)));
    }
    let opath = optimality_path(dir, gc);
    if !opath.exists() {
        return Err(Error::MissingModel(gc));
    }
    let optimality: OptimalityConfig = read_json(&opath)?;
    let npath = neighbors_path(dir, gc);
    if !npath.exists() {
        return Err(Error::MissingModel(gc));
    }
    let corpus: NeighborCorpus = read_json(&npath)?;
    let actual = fingerprint(&corpus.chunks);
    if actual != model.corpus_fingerprint {
        return Err(Error::FingerprintMismatch {
            ground_class: gc,
            expected: model.corpus_fingerprint.clone(),
            actual,
        });
    }
    ClassEngine::build(model, optimality, &corpus.chunks)
}

/// Loads the given classes; every one must be present.
pub fn load_classes(dir: &Path, classes: &[GroundClass], config: AdvisorConfig) -> Result<Registry> {
    let mut registry = Registry::new(config)?;
    for &gc in classes {
        registry.insert(load_engine(dir, gc)?);
    }
    Ok(registry)
}

/// Loads all three ground classes.
pub fn load_registry(dir: &Path, config: AdvisorConfig) -> Result<Registry> {
    load_classes(dir, &GroundClass::ALL, config)
}

/// Writes the three files that make up one class in a model directory.
pub fn write_class(dir: &Path, model: &MlpModel, optimality: &OptimalityConfig, corpus: &NeighborCorpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let gc = model.ground_class;
    let write = |path: PathBuf, text: String| fs::write(&path, text).map_err(|e| Error::io(&path, e));
    write(model_path(dir, gc), model.to_json()?)?;
    write(optimality_path(dir, gc), serde_json::to_string_pretty(optimality)?)?;
    write(neighbors_path(dir, gc), serde_json::to_string(corpus)?)?;
    Ok(())
}
