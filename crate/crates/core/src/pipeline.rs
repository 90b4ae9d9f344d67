//! The offline steps shared by the CLI, the service and the tests: ingest
//! raw drives into a corpus directory, fit optimality configs, train one
//! model per ground class and validate on the held-out split.
//!
//! Corpus directory:
//!
//! ```text
//! drive_000.csv            cleansed and smoothed records
//! actions_000.json         reconstructed operator actions
//! cleansing_report.json
//! feature_stats_GC1.json   per-class standardization over the whole corpus
//! optimality_GC1.json      written by fit-optimality
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advisor::{write_class, AdvisorConfig, ClassEngine, NeighborCorpus, Registry};
use crate::credibility::{chunk_errors, CredibilityCalibration};
use crate::dataset::{class_chains, split_chains, Chunk, SplitConfig};
use crate::domain::{GroundClass, SensorRecord, N_COP, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::ingest::{
    cleanse, load_csv, reconstruct_actions, smooth_with, write_csv, ActionSeries, CleanseConfig, CleansingReport,
    CsvSchema, FeatureStats, SmoothConfig,
};
use crate::mlp::{kfold_grid_search, train, Dataset, Grid, GridSearchResult, MlpModel, TrainConfig};
use crate::neighbors::{CxpPoint, NeighborIndex};
use crate::optimality::{fit_config, OptimalityConfig};
use crate::stats::fingerprint;
use crate::validate::{contextual, report, synchronized, ClassCells, History, ImprovementMode, Sample, ValidationReport};

pub const INGEST_REPORT_FILE: &str = "cleansing_report.json";

pub fn drive_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("drive_{i:03}.csv"))
}

pub fn actions_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("actions_{i:03}.json"))
}

pub fn feature_stats_path(dir: &Path, gc: GroundClass) -> PathBuf {
    dir.join(format!("feature_stats_{}.json", gc.code()))
}

pub fn corpus_optimality_path(dir: &Path, gc: GroundClass) -> PathBuf {
    dir.join(format!("optimality_{}.json", gc.code()))
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// Ingest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IngestConfig {
    pub cleanse: CleanseConfig,
    pub smoothing: SmoothConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriveReport {
    pub source: String,
    pub dropped_incomplete: usize,
    pub cleansing: CleansingReport,
    pub actions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub schema_version: u32,
    pub drives: Vec<DriveReport>,
    pub total: CleansingReport,
}

/// Cleansed drives plus everything derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub drives: Vec<Vec<SensorRecord>>,
    /// One per drive, reconstructed before smoothing.
    pub actions: Vec<ActionSeries>,
    pub feature_stats: BTreeMap<GroundClass, FeatureStats>,
    pub optimality: BTreeMap<GroundClass, OptimalityConfig>,
}

/// Cleanse, reconstruct actions, smooth.
pub fn ingest_drive(
    records: &[SensorRecord],
    cfg: &IngestConfig,
) -> Result<(Vec<SensorRecord>, ActionSeries, CleansingReport)> {
    let (kept, report) = cleanse(records, &cfg.cleanse)?;
    let actions = reconstruct_actions(&kept)?;
    let smoothed = smooth_with(&kept, &cfg.smoothing)?;
    Ok((smoothed, actions, report))
}

/// Builds a corpus from already parsed drives. `dropped` counts incomplete
/// rows per drive, if known.
pub fn ingest_records(drives: &[(String, Vec<SensorRecord>, usize)], cfg: &IngestConfig) -> Result<(Corpus, IngestReport)> {
    let mut corpus = Corpus {
        drives: Vec::with_capacity(drives.len()),
        actions: Vec::with_capacity(drives.len()),
        feature_stats: BTreeMap::new(),
        optimality: BTreeMap::new(),
    };
    let mut reports = Vec::new();
    let mut total = CleansingReport::default();
    for (source, records, dropped) in drives {
        let (clean, actions, cleansing) = ingest_drive(records, cfg)?;
        log::info!(
            "{source}: kept {} of {} samples, {} actions",
            cleansing.samples_out,
            cleansing.samples_in,
            actions.total()
        );
        total.merge(&cleansing);
        reports.push(DriveReport {
            source: source.clone(),
            dropped_incomplete: *dropped,
            cleansing,
            actions: actions.total(),
        });
        corpus.drives.push(clean);
        corpus.actions.push(actions);
    }
    for gc in GroundClass::ALL {
        let own: Vec<SensorRecord> = corpus.records_of(gc).cloned().collect();
        if own.len() < 2 {
            continue;
        }
        match FeatureStats::fit(&own) {
            Ok(s) => {
                corpus.feature_stats.insert(gc, s);
            }
            Err(e) => log::warn!("{gc}: no feature statistics: {e}"),
        }
    }
    let report = IngestReport {
        schema_version: SCHEMA_VERSION,
        drives: reports,
        total,
    };
    Ok((corpus, report))
}

/// Loads raw CSV drives and builds a corpus.
pub fn ingest_files(paths: &[PathBuf], schema: &CsvSchema, cfg: &IngestConfig) -> Result<(Corpus, IngestReport)> {
    let mut drives = Vec::with_capacity(paths.len());
    for p in paths {
        let loaded = load_csv(p, schema)?;
        // File name only, so reports do not depend on where the inputs live.
        let source = p.file_name().map_or_else(|| p.display().to_string(), |n| n.to_string_lossy().into_owned());
        drives.push((source, loaded.records, loaded.dropped_incomplete));
    }
    ingest_records(&drives, cfg)
}

impl Corpus {
    pub fn records_of(&self, gc: GroundClass) -> impl Iterator<Item = &SensorRecord> {
        self.drives.iter().flatten().filter(move |r| r.ground_class == gc)
    }

    pub fn chains(&self, gc: GroundClass) -> Vec<Chunk> {
        class_chains(&self.drives, gc)
    }

    pub fn optimality(&self, gc: GroundClass) -> Result<&OptimalityConfig> {
        self.optimality
            .get(&gc)
            .ok_or_else(|| Error::InvalidConfig(format!("corpus has no optimality config for {gc}")))
    }

    /// Writes drives, actions, statistics and any optimality configs.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, (drive, actions)) in self.drives.iter().zip(&self.actions).enumerate() {
            write_csv(drive_path(dir, i), drive)?;
            write_json(&actions_path(dir, i), actions)?;
        }
        for (gc, stats) in &self.feature_stats {
            write_json(&feature_stats_path(dir, *gc), stats)?;
        }
        self.write_optimality(dir)
    }

    pub fn write_optimality(&self, dir: &Path) -> Result<()> {
        for (gc, cfg) in &self.optimality {
            write_json(&corpus_optimality_path(dir, *gc), cfg)?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut ids: Vec<usize> = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if let Some(id) = name.strip_prefix("drive_").and_then(|s| s.strip_suffix(".csv")) {
                if let Ok(i) = id.parse() {
                    ids.push(i);
                }
            }
        }
        ids.sort_unstable();
        if ids.is_empty() {
            return Err(Error::InsufficientData(format!("no drive_NNN.csv files in {}", dir.display())));
        }
        if ids.iter().enumerate().any(|(k, &i)| k != i) {
            return Err(Error::InvalidConfig(format!("drive files in {} are not numbered 0..n", dir.display())));
        }
        let mut corpus = Corpus {
            drives: Vec::new(),
            actions: Vec::new(),
            feature_stats: BTreeMap::new(),
            optimality: BTreeMap::new(),
        };
        let schema = CsvSchema::default();
        for i in ids {
            corpus.drives.push(load_csv(drive_path(dir, i), &schema)?.records);
            corpus.actions.push(read_json(&actions_path(dir, i))?);
        }
        for gc in GroundClass::ALL {
            let p = feature_stats_path(dir, gc);
            if p.exists() {
                corpus.feature_stats.insert(gc, read_json(&p)?);
            }
            let p = corpus_optimality_path(dir, gc);
            if p.exists() {
                corpus.optimality.insert(gc, read_json(&p)?);
            }
        }
        Ok(corpus)
    }
}

// ---------------------------------------------------------------------------
// Optimality
// ---------------------------------------------------------------------------

/// Fits one optimality config per ground class with enough records.
pub fn fit_optimality(corpus: &mut Corpus, w1: f64, w2: f64, ub: f64) -> Result<()> {
    let all: Vec<SensorRecord> = corpus.drives.iter().flatten().cloned().collect();
    corpus.optimality.clear();
    for gc in GroundClass::ALL {
        if corpus.records_of(gc).next().is_none() {
            continue;
        }
        match fit_config(&all, gc, w1, w2, ub) {
            Ok(cfg) => {
                corpus.optimality.insert(gc, cfg);
            }
            Err(Error::InsufficientData(m)) => log::warn!("skipping {gc}: {m}"),
            Err(e) => return Err(e),
        }
    }
    if corpus.optimality.is_empty() {
        return Err(Error::InsufficientData("no ground class has enough records".into()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainOptions {
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub grid: Option<Grid>,
    /// Defaults to every class with an optimality config.
    pub classes: Option<Vec<GroundClass>>,
}

impl TrainOptions {
    /// Same seed for the split and for training.
    pub fn seeded(seed: u64) -> Self {
        let mut o = TrainOptions::default();
        o.train.seed = seed;
        o.split.seed = seed;
        o
    }
}

#[derive(Debug, Clone)]
pub struct TrainedClass {
    pub model: MlpModel,
    pub optimality: OptimalityConfig,
    pub corpus: NeighborCorpus,
    pub grid: Option<GridSearchResult>,
}

/// Standardized features and raw optimality targets of every record.
pub fn dataset(chunks: &[Chunk], scaler: &FeatureStats, optimality: &OptimalityConfig) -> Result<Dataset> {
    let mut data = Dataset::new(crate::domain::N_FEATURES);
    for r in chunks.iter().flat_map(|c| &c.records) {
        data.push(&scaler.apply(&r.features()), optimality.score_record(r))?;
    }
    Ok(data)
}

pub fn train_class(corpus: &Corpus, gc: GroundClass, opts: &TrainOptions) -> Result<TrainedClass> {
    let optimality = corpus.optimality(gc)?.clone();
    let split = split_chains(&corpus.chains(gc), &opts.split)?;
    let train_records: Vec<SensorRecord> = split.train.iter().flat_map(|c| c.records.iter().cloned()).collect();
    let scaler = FeatureStats::fit(&train_records)?;
    let data = dataset(&split.train, &scaler, &optimality)?;
    log::info!(
        "{gc}: {} train / {} validation / {} test samples",
        split.info.n_train,
        split.info.n_validation,
        split.info.n_test
    );

    let mut cfg = opts.train.clone();
    let mut grid_result = None;
    if let Some(grid) = &opts.grid {
        let res = kfold_grid_search(&data, grid, &cfg)?;
        cfg = res.best.clone();
        log::info!("{gc}: grid search picked {:?}", res.scores[res.best_index].cell);
        grid_result = Some(res);
    }

    let neighbor_corpus = NeighborCorpus::new(gc, split.train.clone());
    let mut model = train(&data, &cfg, gc, scaler, neighbor_corpus.fingerprint.clone())?;
    let errors = chunk_errors(&model, &optimality, &split.validation)?;
    model.calibration = Some(CredibilityCalibration::fit(
        &errors,
        split.info.validation_fingerprint.clone(),
    )?);
    model.split = Some(split.info);
    Ok(TrainedClass {
        model,
        optimality,
        corpus: neighbor_corpus,
        grid: grid_result,
    })
}

pub fn train_all(corpus: &Corpus, opts: &TrainOptions) -> Result<Vec<TrainedClass>> {
    let classes = match &opts.classes {
        Some(c) => c.clone(),
        None => corpus.optimality.keys().copied().collect(),
    };
    if classes.is_empty() {
        return Err(Error::InsufficientData("no ground class to train; run fit-optimality first".into()));
    }
    classes.iter().map(|&gc| train_class(corpus, gc, opts)).collect()
}

/// Writes model, optimality and neighbour files per class, plus grid results.
pub fn write_models(dir: &Path, trained: &[TrainedClass]) -> Result<()> {
    for t in trained {
        write_class(dir, &t.model, &t.optimality, &t.corpus)?;
        if let Some(g) = &t.grid {
            write_json(&dir.join(format!("grid_{}.json", t.model.ground_class.code())), g)?;
        }
    }
    Ok(())
}

/// Engines straight from training output, without a round trip through disk.
pub fn registry_from(trained: Vec<TrainedClass>, config: AdvisorConfig) -> Result<Registry> {
    let mut registry = Registry::new(config)?;
    for t in trained {
        registry.insert(ClassEngine::build(t.model, t.optimality, &t.corpus.chunks)?);
    }
    Ok(registry)
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// The held-out split of one class, prepared for offline validation.
pub struct TestSet {
    pub ground_class: GroundClass,
    /// Test records in corpus order.
    pub records: Vec<SensorRecord>,
    /// One per (record, successor) pair.
    pub samples: Vec<Sample>,
    /// Row of each sample's current record in `records`.
    pub rows: Vec<usize>,
    index: NeighborIndex,
    cops: Vec<[f64; N_COP]>,
    scores: Vec<f64>,
    cop_scale: [f64; N_COP],
}

impl TestSet {
    /// Rebuilds the test split recorded in the engine's model and checks
    /// that it matches the one used at training time.
    pub fn build(corpus: &Corpus, engine: &ClassEngine) -> Result<Self> {
        let gc = engine.ground_class();
        let model = &engine.model;
        let info = model
            .split
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig(format!("model for {gc} carries no split information")))?;
        let split = split_chains(&corpus.chains(gc), &info.config)?;
        if split.info.test_fingerprint != info.test_fingerprint {
            return Err(Error::FingerprintMismatch {
                ground_class: gc,
                expected: info.test_fingerprint.clone(),
                actual: split.info.test_fingerprint,
            });
        }
        let scaler = &model.feature_scaler;
        let opt = &engine.optimality;
        let mut records = Vec::new();
        let mut samples = Vec::new();
        let mut rows = Vec::new();
        for chunk in &split.test {
            let actions = corpus.actions.get(chunk.drive).ok_or_else(|| {
                Error::InvalidConfig(format!("no action series for drive {}", chunk.drive))
            })?;
            let base = records.len();
            for (k, pair) in chunk.records.windows(2).enumerate() {
                let (now, next) = (&pair[0], &pair[1]);
                samples.push(Sample {
                    cop: now.cop,
                    score: opt.score_record(now),
                    next_cop: next.cop,
                    next_score: opt.score_record(next),
                    actions: std::array::from_fn(|i| actions.has_action(i, next.timestamp)),
                    cxp: scaler.apply_cxp(&now.cxp),
                    exclude: Some(base + k),
                });
                rows.push(base + k);
            }
            records.extend(chunk.records.iter().cloned());
        }
        let points: Vec<CxpPoint> = records.iter().map(|r| scaler.apply_cxp(&r.cxp)).collect();
        let index = NeighborIndex::build(points)?;
        Ok(TestSet {
            ground_class: gc,
            cops: records.iter().map(|r| r.cop).collect(),
            scores: records.iter().map(|r| opt.score_record(r)).collect(),
            cop_scale: std::array::from_fn(|j| scaler.std[j]),
            records,
            samples,
            rows,
            index,
        })
    }

    pub fn history(&self) -> History<'_> {
        History {
            index: &self.index,
            cops: &self.cops,
            scores: &self.scores,
            cop_scale: self.cop_scale,
        }
    }

    pub fn gradient_recommendations(&self, engine: &ClassEngine, cfg: &AdvisorConfig) -> Result<Vec<[f64; N_COP]>> {
        self.rows
            .iter()
            .map(|&r| Ok(engine.gradient_step(&self.records[r].cop, &self.records[r].cxp, cfg)?.deltas))
            .collect()
    }

    pub fn baseline_recommendations(&self, engine: &ClassEngine) -> Result<Vec<[f64; N_COP]>> {
        self.rows
            .iter()
            .zip(&self.samples)
            .map(|(&r, s)| Ok(engine.baseline(&self.records[r].cop, &self.records[r].cxp, s.score)?.deltas))
            .collect()
    }

    pub fn evaluate(&self, recommendations: &[[f64; N_COP]], mode: ImprovementMode) -> Result<ClassCells> {
        if recommendations.len() != self.samples.len() {
            return Err(Error::DimensionMismatch {
                expected: self.samples.len(),
                actual: recommendations.len(),
            });
        }
        Ok(ClassCells {
            ground_class: self.ground_class,
            sv: synchronized(&self.samples, recommendations, mode),
            cv: contextual(&self.samples, recommendations, &self.history(), mode)?,
        })
    }

    /// Prediction RMSE of the raw score over every test record.
    pub fn rmse(&self, engine: &ClassEngine) -> Result<f64> {
        let mut sse = 0.0;
        for (r, y) in self.records.iter().zip(&self.scores) {
            let p = engine.model.predict(&engine.model.standardize(&r.cop, &r.cxp))?;
            sse += (p - y).powi(2);
        }
        Ok((sse / self.records.len() as f64).sqrt())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ValidateOptions {
    pub mode: ImprovementMode,
    /// Also score the neighbour-average baseline.
    pub baseline: bool,
}

pub const GRADIENT_NAME: &str = "GB";
pub const BASELINE_NAME: &str = "NN";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationOutcome {
    pub report: ValidationReport,
    /// Test-split RMSE of the raw score per class.
    pub rmse: BTreeMap<GroundClass, f64>,
}

pub fn validate(corpus: &Corpus, registry: &Registry, opts: &ValidateOptions) -> Result<ValidationOutcome> {
    let mut gb = Vec::new();
    let mut nn = Vec::new();
    let mut rmse = BTreeMap::new();
    for gc in registry.classes() {
        let engine = registry.engine(gc)?;
        let set = TestSet::build(corpus, engine)?;
        rmse.insert(gc, set.rmse(engine)?);
        gb.push(set.evaluate(&set.gradient_recommendations(engine, &registry.config)?, opts.mode)?);
        if opts.baseline {
            nn.push(set.evaluate(&set.baseline_recommendations(engine)?, opts.mode)?);
        }
    }
    let mut recommenders = vec![report(GRADIENT_NAME, gb)];
    if opts.baseline {
        recommenders.push(report(BASELINE_NAME, nn));
    }
    Ok(ValidationOutcome {
        report: ValidationReport {
            schema_version: SCHEMA_VERSION,
            mode: opts.mode,
            recommenders,
        },
        rmse,
    })
}

/// Hash of every file in a directory, by name; used to compare runs.
pub fn directory_fingerprint(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.is_file() {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.insert(entry.file_name().to_string_lossy().into_owned(), fingerprint(&bytes));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advisor::load_registry;
    use crate::sim::{generate_drive, GcSegment, SimSpec};

    fn small_corpus() -> Corpus {
        let drives: Vec<(String, Vec<SensorRecord>, usize)> = (0..2)
            .map(|d| {
                let spec = SimSpec {
                    segments: GroundClass::ALL
                        .iter()
                        .map(|&gc| GcSegment {
                            ground_class: gc,
                            samples: 700,
                        })
                        .collect(),
                    ..SimSpec::single(GroundClass::Gc1, 1, 40 + d)
                };
                (format!("sim{d}"), generate_drive(&spec).unwrap().0, 0)
            })
            .collect();
        let (mut corpus, report) = ingest_records(&drives, &IngestConfig::default()).unwrap();
        assert_eq!(report.drives.len(), 2);
        fit_optimality(&mut corpus, 0.8, 3.0, 150.0).unwrap();
        corpus
    }

    fn quick() -> TrainOptions {
        let mut o = TrainOptions::seeded(7);
        o.train.epochs = 5;
        o.train.hidden_layers = vec![8];
        o
    }

    #[test]
    fn corpus_round_trips_through_disk() {
        let corpus = small_corpus();
        let dir = tempfile::tempdir().unwrap();
        corpus.write(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(corpus.optimality.len(), 3);
    }

    #[test]
    fn train_write_load_validate() {
        let corpus = small_corpus();
        let dir = tempfile::tempdir().unwrap();
        let trained = train_all(&corpus, &quick()).unwrap();
        assert_eq!(trained.len(), 3);
        write_models(dir.path(), &trained).unwrap();
        let registry = load_registry(dir.path(), AdvisorConfig::default()).unwrap();
        let outcome = validate(
            &corpus,
            &registry,
            &ValidateOptions {
                baseline: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(outcome.report.recommenders.len(), 2);
        assert_eq!(outcome.rmse.len(), 3);
        assert!(outcome.report.recommenders[0].classes.iter().any(|c| c.sv.iter().any(|x| x.num > 0)));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = small_corpus();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_models(a.path(), &train_all(&corpus, &quick()).unwrap()).unwrap();
        write_models(b.path(), &train_all(&corpus, &quick()).unwrap()).unwrap();
        let fa = directory_fingerprint(a.path()).unwrap();
        assert_eq!(fa.len(), 9);
        assert_eq!(fa, directory_fingerprint(b.path()).unwrap());
    }

    #[test]
    fn changed_corpus_is_detected() {
        let mut corpus = small_corpus();
        let trained = train_all(&corpus, &quick()).unwrap();
        let registry = registry_from(trained, AdvisorConfig::default()).unwrap();
        corpus.drives.iter_mut().flatten().for_each(|r| r.working_pressure += 1.0);
        let err = validate(&corpus, &registry, &ValidateOptions::default()).unwrap_err();
        assert!(matches!(err, Error::FingerprintMismatch { .. }), "{err}");
    }

    #[test]
    fn training_needs_optimality() {
        let mut corpus = small_corpus();
        corpus.optimality.remove(&GroundClass::Gc2);
        let opts = TrainOptions {
            classes: Some(vec![GroundClass::Gc2]),
            ..quick()
        };
        assert!(matches!(train_all(&corpus, &opts), Err(Error::InvalidConfig(_))));
    }
}
