//! Test-time handling of missing modalities.
//!
//! Modalities are ranked by how similar their shared latents are to a
//! reference modality; a missing modality's encoding is then replaced by the
//! decoded latent of the available modality closest to it in that ranking.
//! Baseline policies (zeros, noise, nearest representation, training
//! averages, late-fusion drop) fill the same gaps for comparison.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::fusion::FusionModel;
use crate::neurocore::{dot, mean_row_cosine, norm, softmax, Matrix, RandomStream};
use crate::probe::{accuracy, argmax};
use crate::synthgen::{sample_mask, MissingnessMask, MultimodalDataset};
use crate::{Error, Result};

/// Missingness rates of the standard evaluation.
pub const STANDARD_RATES: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityRanking {
    pub reference: usize,
    /// Non-reference modalities, most similar first.
    pub order: Vec<usize>,
    /// Mean latent cosine of every modality to the reference (reference = 1).
    pub similarities: Vec<f64>,
}

impl ModalityRanking {
    /// Available modality closest to `missing` by similarity value; ties go to
    /// the lower index. `None` when nothing is available.
    pub fn nearest_available(&self, missing: usize, available: &[bool]) -> Option<usize> {
        let target = self.similarities[missing];
        let mut best: Option<(f64, usize)> = None;
        for (j, &ok) in available.iter().enumerate() {
            if !ok || j == missing {
                continue;
            }
            let d = (self.similarities[j] - target).abs();
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, j));
            }
        }
        best.map(|(_, j)| j)
    }
}

/// Ranks modalities by mean cosine between their latent `g_i(x)` and the
/// reference modality's latent on the same samples.
pub fn rank_modalities(
    model: &FusionModel,
    ds: &MultimodalDataset,
    reference: usize,
) -> Result<ModalityRanking> {
    if model.ebr.is_none() {
        return Err(Error::state("ranking needs an attached EBR head"));
    }
    let m = model.num_modalities();
    if reference >= m {
        return Err(Error::input(format!("reference modality {reference} out of range")));
    }
    let latents = (0..m)
        .map(|i| model.ebr_latent(&ds.modalities, i))
        .collect::<Result<Vec<_>>>()?;
    let similarities: Vec<f64> = (0..m)
        .map(|i| {
            if i == reference {
                1.0
            } else {
                mean_row_cosine(&latents[i], &latents[reference])
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..m).filter(|&i| i != reference).collect();
    order.sort_by(|&a, &b| similarities[b].total_cmp(&similarities[a]).then(a.cmp(&b)));
    Ok(ModalityRanking {
        reference,
        order,
        similarities,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    EbrRanked,
    Zeros,
    Random,
    NearestRep,
    TrainAverage,
    LateFusionDrop,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 6] = [
        PolicyKind::EbrRanked,
        PolicyKind::Zeros,
        PolicyKind::Random,
        PolicyKind::NearestRep,
        PolicyKind::TrainAverage,
        PolicyKind::LateFusionDrop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::EbrRanked => "ebr_ranked",
            PolicyKind::Zeros => "zeros",
            PolicyKind::Random => "random",
            PolicyKind::NearestRep => "nearest_rep",
            PolicyKind::TrainAverage => "train_average",
            PolicyKind::LateFusionDrop => "late_fusion_drop",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|p| p.as_str() == s.trim())
            .ok_or_else(|| Error::config(format!("unknown substitution policy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstitutionPolicy {
    pub kind: PolicyKind,
    /// For `train_average`: use the mean encoding of the predicted class.
    pub class_conditional: bool,
}

impl SubstitutionPolicy {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            class_conditional: false,
        }
    }

    pub fn label(&self) -> String {
        if self.kind == PolicyKind::TrainAverage && self.class_conditional {
            "train_average_cls".into()
        } else {
            self.kind.as_str().into()
        }
    }
}

/// Statistics from training data that the policies need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionContext {
    pub ranking: Option<ModalityRanking>,
    /// Mean training encoding of each modality.
    pub means: Vec<Vec<f64>>,
    /// `class_means[i][c]`: mean training encoding of modality `i` over class `c`.
    pub class_means: Vec<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl SubstitutionContext {
    /// Training-set statistics; the ranking is computed when EBR is attached,
    /// against `reference` (defaults to the strongest modality when known, else the last).
    pub fn fit(
        model: &FusionModel,
        train: &MultimodalDataset,
        reference: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        let enc = model.encode(&train.modalities)?;
        let c = model.num_classes();
        let means = enc.iter().map(Matrix::column_means).collect();
        let class_means = enc
            .iter()
            .map(|e| {
                (0..c)
                    .map(|k| {
                        let rows: Vec<usize> =
                            (0..train.len()).filter(|&r| train.labels[r] == k).collect();
                        if rows.is_empty() {
                            e.column_means()
                        } else {
                            e.select_rows(&rows).column_means()
                        }
                    })
                    .collect()
            })
            .collect();
        let reference = match reference {
            Some(r) => r,
            None => train
                .strength_order()
                .and_then(|o| o.last().copied())
                .unwrap_or(model.num_modalities() - 1),
        };
        let ranking = if model.ebr.is_some() {
            Some(rank_modalities(model, train, reference)?)
        } else {
            None
        };
        Ok(Self {
            ranking,
            means,
            class_means,
            seed,
        })
    }
}

/// Per-modality encodings with absent slots filled by `policy`. Present
/// modalities keep their plain encodings bit for bit, except under
/// `late_fusion_drop`, which rescales them by `m / present`.
pub fn substitute(
    model: &FusionModel,
    inputs: &[Matrix],
    mask: &MissingnessMask,
    ctx: &SubstitutionContext,
    policy: SubstitutionPolicy,
) -> Result<Vec<Matrix>> {
    let m = model.num_modalities();
    let n = inputs.first().map_or(0, Matrix::rows);
    if mask.num_modalities != m || mask.len() != n {
        return Err(Error::input("mask shape does not match the batch"));
    }
    if let Some(r) = (0..n).find(|&r| mask.row(r).iter().all(|p| !p)) {
        return Err(Error::input(format!("sample {r} has every modality missing")));
    }
    let mut enc = model.encode(inputs)?;
    if !mask.any_missing() {
        return Ok(enc);
    }
    let dims = model.encoding_dims();
    match policy.kind {
        PolicyKind::Zeros => {
            for_missing(mask, |r, i| enc[i].row_mut(r).iter_mut().for_each(|v| *v = 0.0));
        }
        PolicyKind::Random => {
            let mut s = RandomStream::new(ctx.seed).fork("random-substitute");
            for r in 0..n {
                for i in 0..m {
                    if !mask.is_present(r, i) {
                        for v in enc[i].row_mut(r) {
                            *v = s.normal();
                        }
                    }
                }
            }
        }
        PolicyKind::TrainAverage if !policy.class_conditional => {
            for_missing(mask, |r, i| enc[i].row_mut(r).copy_from_slice(&ctx.means[i]));
        }
        PolicyKind::TrainAverage => {
            let mut first = enc.clone();
            for_missing(mask, |r, i| first[i].row_mut(r).copy_from_slice(&ctx.means[i]));
            let refs: Vec<&Matrix> = first.iter().collect();
            let (_, logits) = model.predict_from_encodings(&refs)?;
            for_missing(mask, |r, i| {
                let k = argmax(logits.row(r));
                enc[i].row_mut(r).copy_from_slice(&ctx.class_means[i][k]);
            });
        }
        PolicyKind::NearestRep => {
            let plain = enc.clone();
            for r in 0..n {
                for i in 0..m {
                    if mask.is_present(r, i) {
                        continue;
                    }
                    let mut best: Option<(f64, usize)> = None;
                    for j in 0..m {
                        if !mask.is_present(r, j) || dims[j] != dims[i] {
                            continue;
                        }
                        let c = encoding_cosine(plain[j].row(r), &ctx.means[i]);
                        if best.is_none_or(|(bc, _)| c > bc) {
                            best = Some((c, j));
                        }
                    }
                    match best {
                        Some((_, j)) => enc[i].row_mut(r).copy_from_slice(plain[j].row(r)),
                        None => enc[i].row_mut(r).copy_from_slice(&ctx.means[i]),
                    }
                }
            }
        }
        PolicyKind::LateFusionDrop => {
            for r in 0..n {
                let present = mask.row(r).iter().filter(|p| **p).count();
                let scale = m as f64 / present as f64;
                for i in 0..m {
                    let row = enc[i].row_mut(r);
                    if mask.is_present(r, i) {
                        row.iter_mut().for_each(|v| *v *= scale);
                    } else {
                        row.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
        }
        PolicyKind::EbrRanked => {
            let ranking = ctx
                .ranking
                .as_ref()
                .ok_or_else(|| Error::state("ebr_ranked needs a ranking from an EBR model"))?;
            let latents = (0..m)
                .map(|j| model.ebr_latent(inputs, j))
                .collect::<Result<Vec<_>>>()?;
            for i in 0..m {
                // Group rows by chosen donor so each decoder call is batched.
                let mut by_donor: Vec<Vec<usize>> = vec![Vec::new(); m];
                for r in 0..n {
                    if !mask.is_present(r, i) {
                        let j = ranking
                            .nearest_available(i, mask.row(r))
                            .expect("row has a present modality");
                        by_donor[j].push(r);
                    }
                }
                for (j, rows) in by_donor.iter().enumerate() {
                    if rows.is_empty() {
                        continue;
                    }
                    let proxy = model.decode_latent(&latents[j].select_rows(rows), i)?;
                    for (k, &r) in rows.iter().enumerate() {
                        enc[i].row_mut(r).copy_from_slice(proxy.row(k));
                    }
                }
            }
        }
    }
    Ok(enc)
}

fn for_missing(mask: &MissingnessMask, mut f: impl FnMut(usize, usize)) {
    for r in 0..mask.len() {
        for i in 0..mask.num_modalities {
            if !mask.is_present(r, i) {
                f(r, i);
            }
        }
    }
}

/// Macro one-vs-rest ROC AUC over classes that have both positives and
/// negatives; ties in score count one half.
pub fn macro_auc(logits: &Matrix, labels: &[usize]) -> f64 {
    let probs = softmax(logits);
    let mut total = 0.0;
    let mut classes = 0usize;
    for c in 0..logits.cols() {
        let mut scored: Vec<(f64, bool)> = (0..labels.len())
            .map(|r| (probs.get(r, c), labels[r] == c))
            .collect();
        let pos = scored.iter().filter(|s| s.1).count();
        let neg = scored.len() - pos;
        if pos == 0 || neg == 0 {
            continue;
        }
        scored.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Sum of positive ranks with average ranks for ties.
        let mut rank_sum = 0.0;
        let mut i = 0;
        while i < scored.len() {
            let mut j = i;
            while j + 1 < scored.len() && scored[j + 1].0 == scored[i].0 {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            rank_sum += avg * scored[i..=j].iter().filter(|s| s.1).count() as f64;
            i = j + 1;
        }
        let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
        total += u / (pos as f64 * neg as f64);
        classes += 1;
    }
    if classes == 0 {
        0.5
    } else {
        total / classes as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateMetrics {
    pub rate: f64,
    pub accuracy: f64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingnessReport {
    pub policy: String,
    pub per_rate: Vec<RateMetrics>,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
}

impl MissingnessReport {
    /// `rate, policy, accuracy, auc` rows.
    pub fn csv_rows(&self) -> Vec<(f64, String, f64, f64)> {
        self.per_rate
            .iter()
            .map(|r| (r.rate, self.policy.clone(), r.accuracy, r.auc))
            .collect()
    }
}

/// Arithmetic mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Masks the test set at every rate, fills gaps with `policy`, and reports
/// accuracy and macro AUC per rate plus their mean and std across rates.
/// The mask for a given rate depends only on `ctx.seed` and the rate.
pub fn evaluate_missingness(
    model: &FusionModel,
    test: &MultimodalDataset,
    ctx: &SubstitutionContext,
    rates: &[f64],
    policy: SubstitutionPolicy,
) -> Result<MissingnessReport> {
    let m = test.num_modalities();
    let mut per_rate = Vec::with_capacity(rates.len());
    for &rate in rates {
        let mut s = RandomStream::new(ctx.seed).fork_indexed("mask", rate.to_bits());
        let mask = sample_mask(test.len(), m, rate, &mut s)?;
        let enc = substitute(model, &test.modalities, &mask, ctx, policy)?;
        let refs: Vec<&Matrix> = enc.iter().collect();
        let (_, logits) = model.predict_from_encodings(&refs)?;
        per_rate.push(RateMetrics {
            rate,
            accuracy: accuracy(&logits, &test.labels),
            auc: macro_auc(&logits, &test.labels),
        });
    }
    let accs: Vec<f64> = per_rate.iter().map(|r| r.accuracy).collect();
    let aucs: Vec<f64> = per_rate.iter().map(|r| r.auc).collect();
    let (accuracy_mean, accuracy_std) = mean_std(&accs);
    let (auc_mean, auc_std) = mean_std(&aucs);
    Ok(MissingnessReport {
        policy: policy.label(),
        per_rate,
        accuracy_mean,
        accuracy_std,
        auc_mean,
        auc_std,
    })
}

/// Cosine of two encodings, exposed for diagnostics of the nearest-rep policy.
pub fn encoding_cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}
