//! Linear (softmax-regression) probes on frozen features.

use serde::{Deserialize, Serialize};

use crate::neurocore::{
    per_sample_cross_entropy, sgd_step, softmax_cross_entropy, Activation, DenseLayer, Matrix,
    Mlp, RandomStream, SgdConfig,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            learning_rate: 0.1,
            weight_decay: 1e-4,
        }
    }
}

/// Softmax regression over standardized features.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
    head: Mlp,
}

impl LinearProbe {
    pub fn fit(
        x: &Matrix,
        labels: &[usize],
        num_classes: usize,
        cfg: &ProbeConfig,
        stream: &mut RandomStream,
    ) -> Result<Self> {
        if x.rows() == 0 || x.rows() != labels.len() {
            return Err(Error::input("probe needs one label per non-empty row"));
        }
        let mean = x.column_means();
        let inv_std = x
            .column_stds()
            .into_iter()
            .map(|s| if s > 1e-12 { 1.0 / s } else { 0.0 })
            .collect();
        let mut probe = Self {
            mean,
            inv_std,
            head: Mlp::new(vec![DenseLayer::new(
                Matrix::zeros(num_classes, x.cols()),
                vec![0.0; num_classes],
                Activation::Logits,
            )?])?,
        };
        let z = probe.standardize(x);
        let sgd = SgdConfig {
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            decay_factor: 1.0,
            decay_every: 1,
        };
        let batch = cfg.batch_size.max(1);
        for epoch in 0..cfg.epochs {
            let order = stream.permutation(z.rows());
            for chunk in order.chunks(batch) {
                let xb = z.select_rows(chunk);
                let yb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let acts = probe.head.forward(&xb)?;
                let (_, g) = softmax_cross_entropy(acts.output(), &yb)?;
                let grads = probe.head.backward(&acts, &g)?;
                sgd_step(&mut probe.head, &grads, &sgd, epoch)?;
            }
        }
        Ok(probe)
    }

    fn standardize(&self, x: &Matrix) -> Matrix {
        let mut z = x.clone();
        for r in 0..z.rows() {
            for ((v, m), s) in z.row_mut(r).iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
        z
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.head.predict(&self.standardize(x))
    }

    pub fn loss(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        let l = per_sample_cross_entropy(&self.logits(x)?, labels)?;
        Ok(l.iter().sum::<f64>() / l.len() as f64)
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        Ok(accuracy(&self.logits(x)?, labels))
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = (0..logits.rows())
        .filter(|&r| argmax(logits.row(r)) == labels[r])
        .count();
    hits as f64 / labels.len() as f64
}

/// Fits a probe on a seeded 70% split and reports accuracy on the remaining 30%.
pub fn holdout_accuracy(
    x: &Matrix,
    labels: &[usize],
    num_classes: usize,
    stream: &mut RandomStream,
) -> Result<f64> {
    let order = stream.permutation(x.rows());
    let cut = x.rows() * 7 / 10;
    let (train, test) = order.split_at(cut);
    let ytr: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let yte: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    let probe = LinearProbe::fit(
        &x.select_rows(train),
        &ytr,
        num_classes,
        &ProbeConfig::default(),
        stream,
    )?;
    probe.accuracy(&x.select_rows(test), &yte)
}
