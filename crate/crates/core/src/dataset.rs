//! Train / validation / test partitioning of a processed corpus.
//!
//! Records are first cut into successor chains (same ground class, nominal
//! spacing), then into blocks of consecutive samples. Whole blocks are
//! assigned to a split by a seeded shuffle, so neighbouring samples rarely
//! straddle splits and every chunk keeps its successor relation intact.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{GroundClass, SensorRecord, SAMPLE_PERIOD_S, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::ingest::segments;
use crate::stats::fingerprint;

/// Consecutive records of one drive; `records[i + 1]` is the successor of `records[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub drive: usize,
    pub records: Vec<SensorRecord>,
}

impl Chunk {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub block_size: usize,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            block_size: 50,
            train_fraction: 0.70,
            validation_fraction: 0.15,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.block_size >= 2
            && self.train_fraction > 0.0
            && self.validation_fraction > 0.0
            && self.train_fraction + self.validation_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid split configuration {self:?}")))
        }
    }
}

/// Recorded in model metadata so a later run can rebuild and verify the split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub schema_version: u32,
    pub config: SplitConfig,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub train_fingerprint: String,
    pub validation_fingerprint: String,
    pub test_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Chunk>,
    pub validation: Vec<Chunk>,
    pub test: Vec<Chunk>,
    pub info: SplitInfo,
}

/// Successor chains of one ground class across all drives, in drive order.
pub fn class_chains(drives: &[Vec<SensorRecord>], gc: GroundClass) -> Vec<Chunk> {
    let mut out = Vec::new();
    for (d, records) in drives.iter().enumerate() {
        for range in segments(records, SAMPLE_PERIOD_S) {
            let seg = &records[range];
            if seg[0].ground_class == gc {
                out.push(Chunk {
                    drive: d,
                    records: seg.to_vec(),
                });
            }
        }
    }
    out
}

pub fn count_records(chunks: &[Chunk]) -> usize {
    chunks.iter().map(Chunk::len).sum()
}

/// Assigns blocks of the given chains to train / validation / test.
pub fn split_chains(chains: &[Chunk], cfg: &SplitConfig) -> Result<Split> {
    cfg.validate()?;
    let mut blocks: Vec<Chunk> = Vec::new();
    for chain in chains {
        for piece in chain.records.chunks(cfg.block_size) {
            blocks.push(Chunk {
                drive: chain.drive,
                records: piece.to_vec(),
            });
        }
    }
    if blocks.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} blocks of {} samples cannot be split three ways",
            blocks.len(),
            cfg.block_size
        )));
    }
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let nb = blocks.len();
    let n_train = ((cfg.train_fraction * nb as f64).round() as usize).clamp(1, nb - 2);
    let n_val = ((cfg.validation_fraction * nb as f64).round() as usize).clamp(1, nb - n_train - 1);
    let mut parts = vec![Part::Test; nb];
    for (rank, &b) in order.iter().enumerate() {
        parts[b] = if rank < n_train {
            Part::Train
        } else if rank < n_train + n_val {
            Part::Validation
        } else {
            Part::Test
        };
    }
    // Blocks stay in corpus order inside each part.
    let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (block, part) in blocks.into_iter().zip(parts) {
        match part {
            Part::Train => train.push(block),
            Part::Validation => validation.push(block),
            Part::Test => test.push(block),
        }
    }
    let info = SplitInfo {
        schema_version: SCHEMA_VERSION,
        config: cfg.clone(),
        n_train: count_records(&train),
        n_validation: count_records(&validation),
        n_test: count_records(&test),
        train_fingerprint: fingerprint(&train),
        validation_fingerprint: fingerprint(&validation),
        test_fingerprint: fingerprint(&test),
    };
    Ok(Split {
        train,
        validation,
        test,
        info,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::tests::sample_record;

    fn drive(n: usize, gc_switch: usize) -> Vec<SensorRecord> {
        (0..n)
            .map(|i| {
                let mut r = sample_record();
                r.timestamp = i as f64 * SAMPLE_PERIOD_S;
                r.tunnel_length = i as f64 * 0.01;
                r.cop[0] = i as f64;
                r.ground_class = if i < gc_switch { GroundClass::Gc1 } else { GroundClass::Gc2 };
                r
            })
            .collect()
    }

    #[test]
    fn chains_follow_ground_class() {
        let drives = vec![drive(300, 120), drive(80, 80)];
        let gc1 = class_chains(&drives, GroundClass::Gc1);
        assert_eq!(gc1.len(), 2);
        assert_eq!(count_records(&gc1), 200);
        let gc2 = class_chains(&drives, GroundClass::Gc2);
        assert_eq!(count_records(&gc2), 180);
    }

    #[test]
    fn split_partitions_every_record_once() {
        let drives = vec![drive(1000, 1000), drive(437, 437)];
        let chains = class_chains(&drives, GroundClass::Gc1);
        let split = split_chains(&chains, &SplitConfig::default()).unwrap();
        let total = split.info.n_train + split.info.n_validation + split.info.n_test;
        assert_eq!(total, 1437);
        let mut seen: Vec<(usize, u64)> = [&split.train, &split.validation, &split.test]
            .iter()
            .flat_map(|p| p.iter())
            .flat_map(|c| c.records.iter().map(move |r| (c.drive, r.timestamp.to_bits())))
            .collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 1437);
        let frac = split.info.n_train as f64 / total as f64;
        assert!((frac - 0.7).abs() < 0.05, "{frac}");
        assert!(split.train.iter().all(|c| c.len() <= 50));
    }

    #[test]
    fn split_is_seeded() {
        let chains = class_chains(&[drive(2000, 2000)], GroundClass::Gc1);
        let a = split_chains(&chains, &SplitConfig::default()).unwrap();
        let b = split_chains(&chains, &SplitConfig::default()).unwrap();
        assert_eq!(a.info, b.info);
        let c = split_chains(&chains, &SplitConfig { seed: 1, ..SplitConfig::default() }).unwrap();
        assert_ne!(a.info.test_fingerprint, c.info.test_fingerprint);
    }

    #[test]
    fn tiny_corpus_rejected() {
        let chains = class_chains(&[drive(60, 60)], GroundClass::Gc1);
        assert!(matches!(
            split_chains(&chains, &SplitConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }
}
