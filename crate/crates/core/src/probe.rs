//! Linear softmax probe on noised latents and the confidence-ranked filter.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dataset::ProvenancedDataset;
use crate::diffusion::FrozenEncoder;
use crate::error::{invalid, Error, Result};
use crate::numerics;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeClassifier {
    /// C×p.
    pub weights: DMatrix<f64>,
    pub biases: DVector<f64>,
    /// Noise level of the latents the probe was trained on.
    pub timestep: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeHyper {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    /// Full-batch descent from zero weights is deterministic; the seed is
    /// kept so probe runs share the seeding interface of the other stages.
    pub seed: u64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self { learning_rate: 0.1, epochs: 500, l2: 1e-4, seed: 0 }
    }
}

impl ProbeClassifier {
    pub fn new(weights: DMatrix<f64>, biases: DVector<f64>, timestep: usize) -> Result<Self> {
        numerics::check_dims("bias length", biases.len(), weights.nrows())?;
        if weights.nrows() < 2 {
            return invalid("a probe needs at least two classes");
        }
        Ok(Self { weights, biases, timestep })
    }

    pub fn classes(&self) -> usize {
        self.weights.nrows()
    }
    pub fn latent_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn probabilities(&self, h: &DVector<f64>) -> Result<DVector<f64>> {
        numerics::check_dims("latent dimension", h.len(), self.latent_dim())?;
        Ok(softmax(&self.weights * h + &self.biases))
    }

    /// Softmax probability of class `y` at latent `h`.
    pub fn confidence(&self, h: &DVector<f64>, y: usize) -> Result<f64> {
        if y >= self.classes() {
            return invalid(format!("label {y} out of range for {} classes", self.classes()));
        }
        Ok(self.probabilities(h)?[y])
    }

    pub fn predict(&self, h: &DVector<f64>) -> Result<usize> {
        Ok(self.probabilities(h)?.argmax().0)
    }
}

fn softmax(logits: DVector<f64>) -> DVector<f64> {
    let top = logits.max();
    let e = logits.map(|v| (v - top).exp());
    let z = e.sum();
    e / z
}

fn loss_and_grad(w: &DMatrix<f64>, b: &DVector<f64>, x: &DMatrix<f64>, y: &[usize], l2: f64) -> (f64, DMatrix<f64>, DVector<f64>) {
    let n = x.ncols() as f64;
    let logits = w * x + b * DVector::from_element(x.ncols(), 1.0).transpose();
    let mut resid = DMatrix::zeros(w.nrows(), x.ncols());
    let mut loss = 0.0;
    for j in 0..x.ncols() {
        let col = logits.column(j);
        let top = col.max();
        let lse = top + col.map(|v| (v - top).exp()).sum().ln();
        loss -= col[y[j]] - lse;
        for c in 0..w.nrows() {
            resid[(c, j)] = (col[c] - lse).exp() - f64::from(u8::from(c == y[j]));
        }
    }
    let gw = &resid * x.transpose() / n + w * l2;
    let gb = resid.column_sum() / n;
    (loss / n + 0.5 * l2 * w.norm_squared(), gw, gb)
}

/// Full-batch gradient descent on mean cross-entropy plus `l2/2·‖W‖²`.
/// Returns the probe and the loss before each epoch and after the last.
pub fn train_probe_traced(latents: &DMatrix<f64>, labels: &[usize], classes: usize, hyper: ProbeHyper, timestep: usize) -> Result<(ProbeClassifier, Vec<f64>)> {
    numerics::check_dims("label count", labels.len(), latents.ncols())?;
    if classes < 2 {
        return invalid("probe training needs at least two classes");
    }
    if latents.ncols() == 0 {
        return invalid("probe training on an empty set");
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return invalid(format!("label {y} out of range for {classes} classes"));
    }
    numerics::ensure_finite(latents, "latents")?;
    let mut w = DMatrix::zeros(classes, latents.nrows());
    let mut b = DVector::zeros(classes);
    let mut history = Vec::with_capacity(hyper.epochs + 1);
    for epoch in 0..=hyper.epochs {
        let (loss, gw, gb) = loss_and_grad(&w, &b, latents, labels, hyper.l2);
        if !loss.is_finite() || history.first().is_some_and(|&l0: &f64| loss > 10.0 * l0) {
            return Err(Error::TrainingFailure(format!("loss diverged to {loss} at epoch {epoch}")));
        }
        history.push(loss);
        if epoch == hyper.epochs {
            break;
        }
        w -= gw * hyper.learning_rate;
        b -= gb * hyper.learning_rate;
    }
    Ok((ProbeClassifier::new(w, b, timestep)?, history))
}

pub fn train_probe(latents: &DMatrix<f64>, labels: &[usize], classes: usize, hyper: ProbeHyper, timestep: usize) -> Result<ProbeClassifier> {
    Ok(train_probe_traced(latents, labels, classes, hyper, timestep)?.0)
}

/// Confidence of every sample's own label, each encoded at the probe's
/// timestep with noise keyed by `(seed, index)`.
pub fn score_dataset(data: &ProvenancedDataset, probe: &ProbeClassifier, encoder: &FrozenEncoder, seed: u64) -> Result<Vec<f64>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let h = encoder.encode(&data.sample(i), probe.timestep, rng::sub_seed(seed, &[i as u64]))?;
            probe.confidence(&h, data.labels[i])
        })
        .collect()
}

/// Indices of the `budget` highest scores, ties broken by lower index,
/// returned in ascending index order.
pub fn top_indices(scores: &[f64], budget: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if budget < scores.len() {
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        idx.truncate(budget);
        idx.sort_unstable();
    }
    idx
}

/// Keeps the `budget` samples the probe is most confident about.
pub fn lsf_filter(data: &ProvenancedDataset, probe: &ProbeClassifier, encoder: &FrozenEncoder, budget: usize, seed: u64) -> Result<ProvenancedDataset> {
    if data.is_empty() {
        return invalid("cannot filter an empty dataset");
    }
    let scores = score_dataset(data, probe, encoder, seed)?;
    Ok(data.select(&top_indices(&scores, budget)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_probe_is_uniform() {
        let p = ProbeClassifier::new(DMatrix::zeros(3, 2), DVector::zeros(3), 0).unwrap();
        let h = DVector::from_vec(vec![5.0, -1.0]);
        for y in 0..3 {
            assert!((p.confidence(&h, y).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(p.confidence(&h, 3).is_err());
    }

    #[test]
    fn confidence_is_shift_invariant_and_stable() {
        let w = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let p = ProbeClassifier::new(w, DVector::from_vec(vec![1000.0, 1000.0]), 0).unwrap();
        let c = p.confidence(&DVector::from_vec(vec![1.0]), 0).unwrap();
        assert!((c - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-14);
    }

    #[test]
    fn zero_epochs_returns_zero_parameters() {
        let x = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let hyper = ProbeHyper { epochs: 0, ..Default::default() };
        let p = train_probe(&x, &[0, 1], 2, hyper, 3).unwrap();
        assert_eq!(p.weights, DMatrix::zeros(2, 1));
        assert_eq!(p.timestep, 3);
    }

    #[test]
    fn separable_data_is_learned() {
        let x = DMatrix::from_fn(2, 40, |i, j| if i == 0 { if j % 2 == 0 { 2.0 } else { -2.0 } } else { (j as f64 * 0.1).sin() });
        let y: Vec<usize> = (0..40).map(|j| j % 2).collect();
        let (p, hist) = train_probe_traced(&x, &y, 2, ProbeHyper::default(), 0).unwrap();
        assert!(hist.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        for j in 0..40 {
            assert_eq!(p.predict(&x.column(j).into_owned()).unwrap(), y[j]);
        }
    }

    #[test]
    fn top_indices_breaks_ties_by_index() {
        assert_eq!(top_indices(&[0.5, 0.9, 0.9, 0.1], 2), vec![1, 2]);
        assert_eq!(top_indices(&[0.5, 0.5, 0.5], 1), vec![0]);
        assert_eq!(top_indices(&[0.1, 0.2], 5), vec![0, 1]);
    }
}
