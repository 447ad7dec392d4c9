//! Numerical probes of the theory: collision bounds, polysemanticity,
//! gradient rank, AGOP gaps, interference, entanglement, CKA, VIF and the
//! weight-space modality classifier.

mod geometry;
mod probe_ce;
mod similarity;

pub use geometry::{
    agop, agop_gap, empirical_collision_fraction, entanglement_ratio, feature_alignment,
    fusion_alignment, gamma, layer_agop, layer_maps, ledger_probes, lifted_features,
    sample_jacobian, split_blocks, AgopGap, EntanglementRatio, FeatureAlignment, LayerMaps,
    SubspaceProbe, JACOBIAN_SAMPLES, MIN_BLOCK_SHARE,
};
pub use probe_ce::{modality_probe_ce, ModalityProbeConfig};
pub use similarity::{linear_cka, vif_mean, Cka, VIF_CAP, VIF_RIDGE};

use serde::{Deserialize, Serialize};

use crate::fusion::FusionModel;
use crate::neurocore::{dot, effective_rank, softmax_cross_entropy, Matrix, RandomStream};
use crate::synthgen::MultimodalDataset;
use crate::trainers::TrainTrace;
use crate::{Error, Result};

/// Default alignment threshold for "feature encoded in a subspace".
pub const TAU_ENC: f64 = 0.5;

/// Upper bound on the probability of a cross-modal collision:
/// `m(m−1)·(min dim)² / (Σ dims)²`, clamped to `[0, 1]`.
pub fn collision_bound(dims: &[usize]) -> Result<f64> {
    if dims.is_empty() {
        return Err(Error::input("collision bound needs at least one modality"));
    }
    let m = dims.len() as f64;
    let min = *dims.iter().min().expect("non-empty") as f64;
    let sum: f64 = dims.iter().map(|&d| d as f64).sum();
    if sum == 0.0 {
        return Ok(0.0);
    }
    Ok((m * (m - 1.0) * min * min / (sum * sum)).clamp(0.0, 1.0))
}

/// Mean absolute directional derivative of the per-sample semantic loss along
/// the observation-space direction of every predictive member of a conjugate
/// pair, over up to 1000 samples.
pub fn interference_score(model: &FusionModel, ds: &MultimodalDataset) -> Result<f64> {
    let pairs = ds.conjugate_pairs()?;
    if pairs.is_empty() {
        return Err(Error::state("dataset has no conjugate pairs"));
    }
    let features = ds.ledger_features()?;
    let targets: Vec<_> = features
        .iter()
        .filter(|f| pairs.iter().any(|&(p, _)| p == f.latent))
        .collect();
    if targets.is_empty() {
        return Err(Error::state("no modality observes a conjugate predictive latent"));
    }
    let rows: Vec<usize> = (0..ds.len().min(1000)).collect();
    let sub = ds.subset(&rows);
    let fwd = model.forward(&sub.modalities)?;
    let (_, dlogits) = softmax_cross_entropy(fwd.logits(), &sub.labels)?;
    // Per-sample gradients: undo the batch mean.
    let grads = model.backward(&fwd, &dlogits.scale(rows.len() as f64))?;
    let mut total = 0.0;
    for f in &targets {
        let g = &grads.encoders[f.modality].input;
        total += (0..g.rows())
            .map(|r| dot(g.row(r), &f.direction).abs())
            .sum::<f64>()
            / g.rows() as f64;
    }
    Ok(total / targets.len() as f64)
}

/// Per-epoch gradient ranks from a trace, with the final AGOP's rank.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRankTrace {
    pub layer_names: Vec<String>,
    /// 0-based epochs that recorded gradient ranks.
    pub epochs: Vec<usize>,
    /// `ranks[k][layer]` at `epochs[k]`.
    pub ranks: Vec<Vec<usize>>,
    pub agop_rank: Option<usize>,
    /// Last-epoch rank of the first fusion layer over the AGOP rank.
    pub ratio: Option<f64>,
}

impl GradientRankTrace {
    /// Fraction of layers whose last recorded rank is at most their first.
    pub fn non_increasing_fraction(&self) -> Option<f64> {
        let first = self.ranks.first()?;
        let last = self.ranks.last()?;
        if first.is_empty() {
            return None;
        }
        let ok = first.iter().zip(last).filter(|(a, b)| b <= a).count();
        Some(ok as f64 / first.len() as f64)
    }
}

pub fn gradient_rank_trace(
    trace: &TrainTrace,
    final_agop: Option<&Matrix>,
    rank_tol: f64,
) -> GradientRankTrace {
    let recorded: Vec<_> = trace.records.iter().filter(|r| !r.grad_ranks.is_empty()).collect();
    let epochs = recorded.iter().map(|r| r.epoch).collect();
    let ranks: Vec<Vec<usize>> = recorded.iter().map(|r| r.grad_ranks.clone()).collect();
    let agop_rank = final_agop.map(|a| effective_rank(a, rank_tol));
    let fusion_idx = trace.layer_names.iter().position(|n| n == "fusion.0");
    let ratio = match (agop_rank, fusion_idx, ranks.last()) {
        (Some(a), Some(i), Some(last)) if a > 0 && i < last.len() => Some(last[i] as f64 / a as f64),
        _ => None,
    };
    GradientRankTrace {
        layer_names: trace.layer_names.clone(),
        epochs,
        ranks,
        agop_rank,
        ratio,
    }
}

/// Observation-space incoming-weight rows of fusion layer 0, one block per modality.
pub fn fusion_rows(model: &FusionModel, ds: &MultimodalDataset) -> Result<Vec<Matrix>> {
    Ok(layer_maps(model, ds, 0)?.row_jacobians)
}

/// Reference rows for [`modality_probe_ce`]: `unimodal[i]` is a single-modality
/// model trained on modality `i` of `ds`.
pub fn reference_rows(unimodal: &[FusionModel], ds: &MultimodalDataset) -> Result<Vec<Matrix>> {
    unimodal
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let single = ds.select_modalities(&[i])?;
            Ok(layer_maps(u, &single, 0)?.row_jacobians.swap_remove(0))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseOptions {
    pub layer: usize,
    pub tau: f64,
    /// Epoch count used in the `γ^{−1/n}` bound.
    pub epoch: usize,
    pub rank_tol: f64,
    pub probe: ModalityProbeConfig,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self {
            layer: 0,
            tau: TAU_ENC,
            epoch: 1,
            rank_tol: 1e-2,
            probe: ModalityProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGap {
    pub members: Vec<usize>,
    pub gamma: f64,
    pub gap: f64,
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub collision_bound: f64,
    pub empirical_collision_fraction: f64,
    /// AGOP of every fusion layer.
    pub agop: Vec<Matrix>,
    pub agop_rank: Vec<usize>,
    pub probes: Vec<ProbeGap>,
    /// `None` when the dataset has no conjugate pairs.
    pub interference_score: Option<f64>,
    pub entanglement_ratio: EntanglementRatio,
    pub cka: Vec<f64>,
    pub vif_mean: f64,
    /// `None` when no unimodal references were supplied.
    pub modality_probe_ce: Option<f64>,
}

impl DiagnosticsReport {
    pub fn is_finite(&self) -> bool {
        let opt = |v: Option<f64>| v.is_none_or(f64::is_finite);
        self.collision_bound.is_finite()
            && self.empirical_collision_fraction.is_finite()
            && self.agop.iter().all(Matrix::is_finite)
            && self.probes.iter().all(|p| p.gap.is_finite() && opt(p.bound))
            && opt(self.interference_score)
            && opt(self.entanglement_ratio.value)
            && self.cka.iter().all(|v| v.is_finite())
            && self.vif_mean.is_finite()
            && opt(self.modality_probe_ce)
    }
}

/// Full report for one model on a ledger-bearing dataset.
pub fn diagnose(
    model: &FusionModel,
    ds: &MultimodalDataset,
    references: Option<&[Matrix]>,
    opts: &DiagnoseOptions,
) -> Result<DiagnosticsReport> {
    let features = ds.ledger_features()?;
    let alignment = fusion_alignment(model, ds, opts.layer)?;
    let maps = layer_maps(model, ds, opts.layer)?;
    let agops = (0..model.fusion.layers().len())
        .map(|l| agop(model, ds, l))
        .collect::<Result<Vec<_>>>()?;
    let probes = ledger_probes(&maps, features, opts.tau)?
        .into_iter()
        .map(|(p, g)| {
            let gap = agop_gap(&p, &agops[opts.layer], g, opts.epoch)?;
            Ok(ProbeGap {
                members: p.members,
                gamma: g,
                gap: gap.gap,
                bound: gap.bound,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let interference = match interference_score(model, ds) {
        Ok(v) => Some(v),
        Err(Error::State(_)) => None,
        Err(e) => return Err(e),
    };
    let (fused, _) = model.fuse_predict(&ds.modalities)?;
    let enc = model.encode(&ds.modalities)?;
    let cka = enc.iter().map(|e| linear_cka(e, &fused).value).collect();
    let probe_ce = match references {
        Some(r) => Some(modality_probe_ce(
            r,
            &fusion_rows(model, ds)?,
            &opts.probe,
            &RandomStream::new(0).fork("modality-probe"),
        )?),
        None => None,
    };
    Ok(DiagnosticsReport {
        collision_bound: collision_bound(&model.encoding_dims())?,
        empirical_collision_fraction: alignment.collision_fraction(opts.tau),
        agop_rank: agops.iter().map(|a| effective_rank(a, opts.rank_tol)).collect(),
        agop: agops,
        probes,
        interference_score: interference,
        entanglement_ratio: alignment.entanglement_ratio(opts.tau),
        cka,
        vif_mean: vif_mean(&fused)?,
        modality_probe_ce: probe_ce,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collision_bound_hand_values() {
        assert_eq!(collision_bound(&[16]).unwrap(), 0.0);
        assert!((collision_bound(&[8, 8]).unwrap() - 0.5).abs() < 1e-12);
        assert!((collision_bound(&[4; 5]).unwrap() - 0.8).abs() < 1e-12);
        assert!(collision_bound(&[]).is_err());
    }

    #[test]
    fn collision_bound_monotone_in_m() {
        let mut prev = 0.0;
        for m in 1..10 {
            let b = collision_bound(&vec![16; m]).unwrap();
            assert!(b >= prev);
            prev = b;
        }
    }
}
