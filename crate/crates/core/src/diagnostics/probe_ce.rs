use serde::{Deserialize, Serialize};

use crate::neurocore::{
    norm, per_sample_cross_entropy, sgd_step, softmax_cross_entropy, Activation, Matrix, Mlp,
    RandomStream, SgdConfig,
};
use crate::{Error, Result};

/// Settings of the weight-space modality classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityProbeConfig {
    pub hidden: [usize; 2],
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ModalityProbeConfig {
    fn default() -> Self {
        Self {
            hidden: [32, 16],
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.05,
        }
    }
}

fn pad_normalized(rows: &Matrix, width: usize) -> Vec<Vec<f64>> {
    (0..rows.rows())
        .filter_map(|r| {
            let row = rows.row(r);
            let n = norm(row);
            (n > 1e-12).then(|| {
                let mut v: Vec<f64> = row.iter().map(|x| x / n).collect();
                v.resize(width, 0.0);
                v
            })
        })
        .collect()
}

/// Trains a two-hidden-layer relu classifier to tell which modality a neuron's
/// incoming weight vector comes from, using `reference[i]` (rows from a
/// unimodal model of modality `i`), then returns its mean cross-entropy on the
/// fusion rows `fusion_blocks[i]` labelled `i`. Rows are unit-normalized and
/// zero-padded to a common width; all-zero rows are skipped.
pub fn modality_probe_ce(
    reference: &[Matrix],
    fusion_blocks: &[Matrix],
    cfg: &ModalityProbeConfig,
    stream: &RandomStream,
) -> Result<f64> {
    let m = reference.len();
    if m < 2 || fusion_blocks.len() != m {
        return Err(Error::input(
            "need reference and fusion rows for the same two or more modalities",
        ));
    }
    let width = reference
        .iter()
        .chain(fusion_blocks)
        .map(Matrix::cols)
        .max()
        .unwrap_or(0);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, r) in reference.iter().enumerate() {
        let rows = pad_normalized(r, width);
        if rows.len() < 2 {
            return Err(Error::input(format!(
                "modality {i} has fewer than two usable reference rows"
            )));
        }
        ys.extend(std::iter::repeat_n(i, rows.len()));
        xs.extend(rows);
    }
    let x = Matrix::from_rows(&xs)?;
    let [h1, h2] = cfg.hidden;
    let mut clf = Mlp::he(
        &[width, h1, h2, m],
        Activation::Relu,
        Activation::Logits,
        &mut stream.fork("probe-init"),
    )?;
    let sgd = SgdConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: 0.0,
        decay_factor: 1.0,
        decay_every: 1,
    };
    let mut order_stream = stream.fork("probe-batches");
    for epoch in 0..cfg.epochs {
        let order = order_stream.permutation(x.rows());
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let xb = x.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| ys[i]).collect();
            let acts = clf.forward(&xb)?;
            let (_, g) = softmax_cross_entropy(acts.output(), &yb)?;
            let grads = clf.backward(&acts, &g)?;
            sgd_step(&mut clf, &grads, &sgd, epoch)?;
        }
    }

    let mut total = 0.0;
    let mut count = 0usize;
    for (i, b) in fusion_blocks.iter().enumerate() {
        let rows = pad_normalized(b, width);
        if rows.is_empty() {
            continue;
        }
        let logits = clf.predict(&Matrix::from_rows(&rows)?)?;
        let ce = per_sample_cross_entropy(&logits, &vec![i; rows.len()])?;
        total += ce.iter().sum::<f64>();
        count += ce.len();
    }
    if count == 0 {
        return Err(Error::input("fusion rows are all zero"));
    }
    Ok(total / count as f64)
}
