//! Orthogonal low-rank embedding score: `Σ_c ‖M_c‖* − ‖M‖*`. It is zero when
//! class subspaces are mutually orthogonal and grows as they entangle.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::dataset::ProvenancedDataset;
use crate::diffusion::FrozenEncoder;
use crate::error::{invalid, Result};
use crate::numerics::{self, nuclear_norm};
use crate::{rng, stats};

/// Encoded features (p×N) with labels and optional provenance annotations.
#[derive(Debug, Clone)]
pub struct RepresentationBatch {
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    pub generations: Option<Vec<u32>>,
    pub confidences: Option<Vec<f64>>,
}

impl RepresentationBatch {
    pub fn new(features: DMatrix<f64>, labels: Vec<usize>) -> Result<Self> {
        numerics::check_dims("label count", labels.len(), features.ncols())?;
        Ok(Self { features, labels, generations: None, confidences: None })
    }
}

fn gather(features: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    features.select_columns(idx)
}

/// OLE of a labelled set of columns. A single class gives exactly 0.
pub fn ole_score(features: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    if features.ncols() == 0 {
        return invalid("OLE of an empty batch");
    }
    numerics::check_dims("label count", labels.len(), features.ncols())?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        groups.entry(y).or_default().push(i);
    }
    if groups.len() == 1 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for idx in groups.values() {
        sum += nuclear_norm(&gather(features, idx))?;
    }
    Ok(sum - nuclear_norm(features)?)
}

pub fn ole_batch(batch: &RepresentationBatch) -> Result<f64> {
    ole_score(&batch.features, &batch.labels)
}

/// OLE of two class matrices sharing a row space.
pub fn ole_two(m0: &DMatrix<f64>, m1: &DMatrix<f64>) -> Result<f64> {
    numerics::check_dims("row count", m1.nrows(), m0.nrows())?;
    let mut joint = DMatrix::zeros(m0.nrows(), m0.ncols() + m1.ncols());
    joint.columns_mut(0, m0.ncols()).copy_from(m0);
    joint.columns_mut(m0.ncols(), m1.ncols()).copy_from(m1);
    Ok(nuclear_norm(m0)? + nuclear_norm(m1)? - nuclear_norm(&joint)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    GroundTruth,
    /// k-means pseudo-labels with this many clusters.
    KMeans(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OleCell {
    pub generation: u32,
    pub timestep: usize,
    pub mean: f64,
    pub std: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OleTable {
    pub cells: Vec<OleCell>,
}

impl OleTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("generation,timestep,ole_mean,ole_std,n_batches\n");
        for c in &self.cells {
            out.push_str(&format!("{},{},{},{},{}\n", c.generation, c.timestep, c.mean, c.std, c.batches));
        }
        out
    }

    /// Timestep with the smallest mean OLE among cells of one generation.
    pub fn argmin_timestep(&self, generation: u32) -> Option<usize> {
        self.cells
            .iter()
            .filter(|c| c.generation == generation)
            .min_by(|a, b| a.mean.total_cmp(&b.mean).then(a.timestep.cmp(&b.timestep)))
            .map(|c| c.timestep)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ScanSettings {
    pub batch_size: usize,
    pub batches: usize,
    pub labels: LabelSource,
    pub seed: u64,
}

/// Random subset of `k` indices from `0..n` (all of them if `k >= n`), sorted.
pub(crate) fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    use rand::seq::index;
    if k >= n {
        return (0..n).collect();
    }
    let mut g = rng::rng_from(seed);
    let mut v = index::sample(&mut g, n, k).into_vec();
    v.sort_unstable();
    v
}

/// OLE of encoded batches for every (dataset, timestep) pair. `sets` pairs a
/// generation index with its dataset.
pub fn ole_scan(
    sets: &[(u32, &ProvenancedDataset)],
    encoder: &FrozenEncoder,
    timesteps: &[usize],
    settings: ScanSettings,
) -> Result<OleTable> {
    if settings.batch_size < 2 || settings.batches == 0 {
        return invalid("ole_scan needs batch_size >= 2 and batches >= 1");
    }
    let mut jobs = Vec::new();
    for (si, &(generation, data)) in sets.iter().enumerate() {
        if data.len() < 2 {
            return invalid(format!("generation {generation} has fewer than two samples"));
        }
        for &t in timesteps {
            for b in 0..settings.batches {
                jobs.push((si, generation, data, t, b));
            }
        }
    }
    let values: Vec<f64> = jobs
        .par_iter()
        .map(|&(si, _, data, t, b)| {
            let key = [si as u64, t as u64, b as u64];
            let idx = sample_indices(data.len(), settings.batch_size, rng::sub_seed(settings.seed, &[0, key[0], key[1], key[2]]));
            let sub = data.select(&idx);
            let z = encoder.encode_batch(&sub.features, t, rng::sub_seed(settings.seed, &[1, key[0], key[1], key[2]]))?;
            let labels = match settings.labels {
                LabelSource::GroundTruth => sub.labels.clone(),
                LabelSource::KMeans(k) => {
                    numerics::kmeans(&z, k.min(z.ncols()), rng::sub_seed(settings.seed, &[2, key[0], key[1], key[2]]))?.assignments
                }
            };
            ole_score(&z, &labels)
        })
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    let mut it = values.chunks(settings.batches);
    for &(generation, _) in sets {
        for &t in timesteps {
            let chunk = it.next().expect("one chunk per cell");
            cells.push(OleCell {
                generation,
                timestep: t,
                mean: stats::mean(chunk),
                std: stats::std_dev(chunk),
                batches: chunk.len(),
            });
        }
    }
    Ok(OleTable { cells })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationReport {
    pub ole: Vec<f64>,
    pub mean_generation: Vec<f64>,
    pub mean_confidence: Vec<f64>,
    pub pearson_generation: f64,
    pub pearson_confidence: f64,
}

/// Pearson correlation of per-batch OLE with the batch's mean generation tag
/// and mean confidence. Needs at least ten annotated batches.
pub fn correlation_report(batches: &[RepresentationBatch]) -> Result<CorrelationReport> {
    if batches.len() < 10 {
        return invalid(format!("correlation_report needs at least 10 batches, got {}", batches.len()));
    }
    let mut ole = Vec::new();
    let mut gens = Vec::new();
    let mut confs = Vec::new();
    for b in batches {
        let (Some(g), Some(c)) = (&b.generations, &b.confidences) else {
            return invalid("every batch needs generation tags and confidences");
        };
        ole.push(ole_batch(b)?);
        gens.push(stats::mean(&g.iter().map(|&v| v as f64).collect::<Vec<_>>()));
        confs.push(stats::mean(c));
    }
    let pearson_generation = stats::pearson(&ole, &gens)?;
    let pearson_confidence = stats::pearson(&ole, &confs)?;
    Ok(CorrelationReport { ole, mean_generation: gens, mean_confidence: confs, pearson_generation, pearson_confidence })
}
