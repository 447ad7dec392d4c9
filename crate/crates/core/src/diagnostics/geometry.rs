//! Input-space geometry of the fusion head: Jacobians, effective neuron rows,
//! ledger alignment, polysemanticity degree and AGOP.

use serde::{Deserialize, Serialize};

use crate::fusion::{FusionKind, FusionModel};
use crate::neurocore::{orthonormal_basis, Activation, Activations, Matrix, Mlp};
use crate::synthgen::{LedgerFeature, MultimodalDataset};
use crate::{Error, Result};

/// Samples used when averaging per-sample Jacobians.
pub const JACOBIAN_SAMPLES: usize = 256;

/// A block whose norm is below this share of the row's largest block is
/// treated as not encoding anything.
pub const MIN_BLOCK_SHARE: f64 = 0.1;

/// Jacobian of one sample's MLP output w.r.t. its input, using the batch
/// activations `acts`. With `pre_activation_last` the last layer's
/// nonlinearity is skipped.
pub fn sample_jacobian(mlp: &Mlp, acts: &Activations, sample: usize, pre_activation_last: bool) -> Matrix {
    let layers = mlp.layers();
    let mut j = Matrix::identity(mlp.in_dim());
    for (k, layer) in layers.iter().enumerate() {
        j = layer.weight.matmul(&j);
        let skip = pre_activation_last && k + 1 == layers.len();
        if layer.activation == Activation::Relu && !skip {
            let out = acts.0[k + 1].row(sample);
            for (r, &y) in out.iter().enumerate() {
                if y <= 0.0 {
                    j.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
    j
}

fn jacobian_rows(ds: &MultimodalDataset) -> Vec<usize> {
    (0..ds.len().min(JACOBIAN_SAMPLES)).collect()
}

/// Sample-mean Jacobians from each modality's observations to the input of
/// fusion layer `layer`, and to that layer's pre-activations (the effective
/// observation-space rows of its neurons).
#[derive(Debug, Clone)]
pub struct LayerMaps {
    pub layer: usize,
    /// Per modality: `(layer input dim) × obs_dim`.
    pub input_jacobians: Vec<Matrix>,
    /// Per modality: `(layer width) × obs_dim`.
    pub row_jacobians: Vec<Matrix>,
}

pub fn layer_maps(model: &FusionModel, ds: &MultimodalDataset, layer: usize) -> Result<LayerMaps> {
    let fusion_layers = model.fusion.layers();
    if layer >= fusion_layers.len() {
        return Err(Error::input(format!(
            "fusion layer {layer} out of range ({} layers)",
            fusion_layers.len()
        )));
    }
    let rows = jacobian_rows(ds);
    if rows.is_empty() {
        return Err(Error::input("dataset is empty"));
    }
    let xs: Vec<Matrix> = ds.modalities.iter().map(|x| x.select_rows(&rows)).collect();
    let fwd = model.forward(&xs)?;
    let m = model.num_modalities();
    let dims = model.encoding_dims();
    let fin = model.fusion.in_dim();
    let offsets: Vec<usize> = dims
        .iter()
        .scan(0, |acc, d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();
    let target_in = fusion_layers[layer].in_dim();
    let mut sums: Vec<Matrix> = ds
        .obs_dims()
        .iter()
        .map(|&d| Matrix::zeros(target_in, d))
        .collect();

    for s in 0..rows.len() {
        // Jacobian of fusion-layer-`layer` input w.r.t. the fusion input.
        let mut prefix = Matrix::identity(fin);
        for (k, fl) in fusion_layers.iter().enumerate().take(layer) {
            prefix = fl.weight.matmul(&prefix);
            if fl.activation == Activation::Relu {
                let out = fwd.fusion.0[k + 1].row(s);
                for (r, &y) in out.iter().enumerate() {
                    if y <= 0.0 {
                        prefix.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
        }
        for i in 0..m {
            let t = &fwd.encoders[i];
            let mut j = sample_jacobian(&model.encoders[i], &t.base, s, false);
            if let (Some(ebr), Some(h), Some(d)) = (&model.ebr, &t.head, &t.decoder) {
                j = sample_jacobian(&ebr.heads[i], h, s, false).matmul(&j);
                j = sample_jacobian(&ebr.decoders[i], d, s, false).matmul(&j);
            }
            let block = match model.fusion_kind {
                FusionKind::Concat => prefix.columns(offsets[i]..offsets[i] + dims[i]),
                FusionKind::MeanPool => prefix.scale(1.0 / m as f64),
            };
            sums[i].axpy(1.0, &block.matmul(&j));
        }
    }
    let scale = 1.0 / rows.len() as f64;
    let input_jacobians: Vec<Matrix> = sums.into_iter().map(|s| s.scale(scale)).collect();
    let w = &fusion_layers[layer].weight;
    let row_jacobians = input_jacobians.iter().map(|j| w.matmul(j)).collect();
    Ok(LayerMaps {
        layer,
        input_jacobians,
        row_jacobians,
    })
}

/// `|cos|` between every neuron row and every ledger feature, computed per
/// modality block: the row's block for the feature's modality is normalized
/// on its own. Blocks below [`MIN_BLOCK_SHARE`] of the row's largest block count as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAlignment {
    /// `rows × features`.
    pub cosines: Matrix,
    pub feature_modality: Vec<usize>,
    pub feature_predictive: Vec<bool>,
}

/// Aligns `rows[i]` (per-modality blocks of neuron rows, in observation space) with ledger features.
pub fn feature_alignment(blocks: &[Matrix], features: &[LedgerFeature]) -> Result<FeatureAlignment> {
    let n_rows = blocks.first().map_or(0, Matrix::rows);
    if blocks.iter().any(|b| b.rows() != n_rows) {
        return Err(Error::input("row blocks disagree on the number of rows"));
    }
    for f in features {
        let b = blocks
            .get(f.modality)
            .ok_or_else(|| Error::input(format!("feature modality {} has no block", f.modality)))?;
        if b.cols() != f.direction.len() {
            return Err(Error::input("feature direction does not match block width"));
        }
    }
    let mut cosines = Matrix::zeros(n_rows, features.len());
    for r in 0..n_rows {
        let norms: Vec<f64> = blocks.iter().map(|b| crate::neurocore::norm(b.row(r))).collect();
        let max = norms.iter().copied().fold(0.0, f64::max);
        if max <= 0.0 {
            continue;
        }
        for (c, f) in features.iter().enumerate() {
            let nb = norms[f.modality];
            if nb < MIN_BLOCK_SHARE * max {
                continue;
            }
            cosines.set(r, c, crate::neurocore::abs_cosine(blocks[f.modality].row(r), &f.direction));
        }
    }
    Ok(FeatureAlignment {
        cosines,
        feature_modality: features.iter().map(|f| f.modality).collect(),
        feature_predictive: features.iter().map(|f| f.role.is_predictive()).collect(),
    })
}

impl FeatureAlignment {
    pub fn rows(&self) -> usize {
        self.cosines.rows()
    }

    /// Distinct modalities with at least one feature at or above `tau` in row `r`.
    pub fn encoded_modalities(&self, r: usize, tau: f64) -> Vec<usize> {
        let mut mods: Vec<usize> = self
            .cosines
            .row(r)
            .iter()
            .zip(&self.feature_modality)
            .filter(|(c, _)| **c >= tau)
            .map(|(_, &m)| m)
            .collect();
        mods.sort_unstable();
        mods.dedup();
        mods
    }

    /// Rows encoding features from at least two modalities.
    pub fn polysemantic_rows(&self, tau: f64) -> Vec<usize> {
        (0..self.rows())
            .filter(|&r| self.encoded_modalities(r, tau).len() >= 2)
            .collect()
    }

    pub fn collision_fraction(&self, tau: f64) -> f64 {
        if self.rows() == 0 {
            return 0.0;
        }
        self.polysemantic_rows(tau).len() as f64 / self.rows() as f64
    }
}

/// Ratio of mean predictive to mean noisy alignment over the cross-modal
/// polysemantic rows. `value` is `None` when no such row exists or the noisy
/// alignment is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntanglementRatio {
    pub value: Option<f64>,
    pub rows: usize,
}

impl FeatureAlignment {
    pub fn entanglement_ratio(&self, tau: f64) -> EntanglementRatio {
        let rows = self.polysemantic_rows(tau);
        let mut pred = (0.0, 0usize);
        let mut noisy = (0.0, 0usize);
        for &r in &rows {
            for (c, &p) in self.feature_predictive.iter().enumerate() {
                let v = self.cosines.get(r, c);
                let acc = if p { &mut pred } else { &mut noisy };
                acc.0 += v;
                acc.1 += 1;
            }
        }
        let value = if rows.is_empty() || noisy.1 == 0 || pred.1 == 0 || noisy.0 <= 0.0 {
            None
        } else {
            Some((pred.0 / pred.1 as f64) / (noisy.0 / noisy.1 as f64))
        };
        EntanglementRatio {
            value,
            rows: rows.len(),
        }
    }
}

/// Splits full neuron rows into per-modality blocks by column widths.
pub fn split_blocks(rows: &Matrix, widths: &[usize]) -> Result<Vec<Matrix>> {
    if widths.iter().sum::<usize>() != rows.cols() {
        return Err(Error::input("block widths do not cover the row width"));
    }
    let mut off = 0;
    Ok(widths
        .iter()
        .map(|&w| {
            let b = rows.columns(off..off + w);
            off += w;
            b
        })
        .collect())
}

/// Ledger alignment of fusion layer `layer`'s neurons, in observation space.
pub fn fusion_alignment(
    model: &FusionModel,
    ds: &MultimodalDataset,
    layer: usize,
) -> Result<FeatureAlignment> {
    let features = ds.ledger_features()?;
    let maps = layer_maps(model, ds, layer)?;
    feature_alignment(&maps.row_jacobians, features)
}

/// Fraction of fusion-layer neurons aligned at `tau` with features from at
/// least two modalities.
pub fn empirical_collision_fraction(
    model: &FusionModel,
    ds: &MultimodalDataset,
    layer: usize,
    tau: f64,
) -> Result<f64> {
    Ok(fusion_alignment(model, ds, layer)?.collision_fraction(tau))
}

pub fn entanglement_ratio(
    model: &FusionModel,
    ds: &MultimodalDataset,
    layer: usize,
    tau: f64,
) -> Result<EntanglementRatio> {
    Ok(fusion_alignment(model, ds, layer)?.entanglement_ratio(tau))
}

/// A subspace of a layer's input space with orthonormal basis columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceProbe {
    pub layer: usize,
    /// `input dim × k`, orthonormal columns.
    pub basis: Matrix,
    /// Indices of the ledger features the probe was built from.
    pub members: Vec<usize>,
}

impl SubspaceProbe {
    pub fn from_directions(layer: usize, directions: &[Vec<f64>], members: Vec<usize>) -> Result<Self> {
        let basis = orthonormal_basis(directions, 1e-10)?;
        if basis.cols() == 0 {
            return Err(Error::input("probe directions span nothing"));
        }
        Ok(Self {
            layer,
            basis,
            members,
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.cols()
    }

    /// Norm of the projection of `v / ‖v‖` onto the subspace.
    pub fn projection_norm(&self, v: &[f64]) -> f64 {
        let n = crate::neurocore::norm(v);
        if n == 0.0 {
            return 0.0;
        }
        let mut sq = 0.0;
        for c in 0..self.basis.cols() {
            let p: f64 = (0..v.len()).map(|r| self.basis.get(r, c) * v[r]).sum::<f64>() / n;
            sq += p * p;
        }
        sq.sqrt()
    }

    /// `B Bᵀ`.
    pub fn projector(&self) -> Matrix {
        self.basis.matmul_t(&self.basis)
    }
}

/// Degree of polysemanticity: features whose unit direction projects onto the
/// probe with norm at least `tau`, divided by the probe's dimension.
pub fn gamma(probe: &SubspaceProbe, feature_directions: &[Vec<f64>], tau: f64) -> f64 {
    let count = feature_directions
        .iter()
        .filter(|d| probe.projection_norm(d) >= tau)
        .count();
    count as f64 / probe.dim() as f64
}

/// Ledger feature directions pushed into fusion layer `layer`'s input space
/// through the mean observation→input Jacobian.
pub fn lifted_features(maps: &LayerMaps, features: &[LedgerFeature]) -> Vec<Vec<f64>> {
    features
        .iter()
        .map(|f| {
            let j = &maps.input_jacobians[f.modality];
            (0..j.rows())
                .map(|r| crate::neurocore::dot(j.row(r), &f.direction))
                .collect()
        })
        .collect()
}

/// Average gradient outer product of fusion layer `layer`: `(1/n) Σ J(x)ᵀ J(x)`
/// with `J` the Jacobian of the layer output w.r.t. its input.
pub fn agop(model: &FusionModel, ds: &MultimodalDataset, layer: usize) -> Result<Matrix> {
    let fusion_layers = model.fusion.layers();
    if layer >= fusion_layers.len() {
        return Err(Error::input(format!("fusion layer {layer} out of range")));
    }
    if ds.is_empty() {
        return Err(Error::input("dataset is empty"));
    }
    let enc = model.encode(&ds.modalities)?;
    let refs: Vec<&Matrix> = enc.iter().collect();
    let input = model.fusion_input(&refs)?;
    let acts = model.fusion.forward(&input)?;
    let l = &fusion_layers[layer];
    Ok(layer_agop(l.activation, &l.weight, &acts.0[layer + 1]))
}

/// AGOP of a single dense layer given its outputs on a batch: `Wᵀ diag(p) W`,
/// where `p_r` is the fraction of samples on which unit `r` is active.
pub fn layer_agop(activation: Activation, weight: &Matrix, outputs: &Matrix) -> Matrix {
    let n = outputs.rows().max(1) as f64;
    let active: Vec<f64> = (0..weight.rows())
        .map(|r| match activation {
            Activation::Relu => (0..outputs.rows()).filter(|&s| outputs.get(s, r) > 0.0).count() as f64 / n,
            _ => 1.0,
        })
        .collect();
    let scaled = Matrix::from_fn(weight.rows(), weight.cols(), |r, c| weight.get(r, c) * active[r]);
    let a = weight.t_matmul(&scaled);
    // Symmetrize away rounding asymmetry.
    Matrix::from_fn(a.rows(), a.cols(), |r, c| 0.5 * (a.get(r, c) + a.get(c, r)))
}

/// Trace-normalized gap between a probe's projector and the AGOP, with the
/// bound `γ^{−1/n}` (`None` when `γ = 0` or `n = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgopGap {
    pub gap: f64,
    pub gamma: f64,
    pub bound: Option<f64>,
}

pub fn agop_gap(probe: &SubspaceProbe, agop: &Matrix, gamma: f64, epoch: usize) -> Result<AgopGap> {
    let d = agop.rows();
    if probe.basis.rows() > d {
        return Err(Error::input("probe basis is wider than the AGOP"));
    }
    let basis = if probe.basis.rows() < d {
        let b = &probe.basis;
        Matrix::from_fn(d, b.cols(), |r, c| if r < b.rows() { b.get(r, c) } else { 0.0 })
    } else {
        probe.basis.clone()
    };
    let p = basis.matmul_t(&basis).scale(1.0 / basis.cols() as f64);
    let tr = agop.trace();
    let a = if tr > 0.0 { agop.scale(1.0 / tr) } else { agop.clone() };
    let gap = p.sub(&a).frobenius_norm();
    let bound = (gamma > 0.0 && epoch > 0).then(|| gamma.powf(-1.0 / epoch as f64));
    Ok(AgopGap { gap, gamma, bound })
}

/// Probes built from ledger features: one per predictive feature (its lifted
/// direction) and one per cross-modal pair of predictive features (the
/// normalized sum of both lifted directions). Each comes with its measured γ.
pub fn ledger_probes(
    maps: &LayerMaps,
    features: &[LedgerFeature],
    tau: f64,
) -> Result<Vec<(SubspaceProbe, f64)>> {
    let lifted = lifted_features(maps, features);
    let unit: Vec<Option<Vec<f64>>> = lifted
        .iter()
        .map(|v| {
            let n = crate::neurocore::norm(v);
            (n > 1e-12).then(|| v.iter().map(|x| x / n).collect())
        })
        .collect();
    let predictive: Vec<usize> = (0..features.len())
        .filter(|&f| features[f].role.is_predictive() && unit[f].is_some())
        .collect();
    let mut out = Vec::new();
    for &f in &predictive {
        let probe = SubspaceProbe::from_directions(maps.layer, &[unit[f].clone().expect("checked")], vec![f])?;
        let g = gamma(&probe, &lifted, tau);
        out.push((probe, g));
    }
    for (a, &f) in predictive.iter().enumerate() {
        for &h in &predictive[a + 1..] {
            if features[f].modality == features[h].modality {
                continue;
            }
            let (u, v) = (unit[f].as_ref().expect("checked"), unit[h].as_ref().expect("checked"));
            let sum: Vec<f64> = u.iter().zip(v).map(|(x, y)| x + y).collect();
            if crate::neurocore::norm(&sum) < 1e-9 {
                continue;
            }
            let probe = SubspaceProbe::from_directions(maps.layer, &[sum], vec![f, h])?;
            let g = gamma(&probe, &lifted, tau);
            out.push((probe, g));
        }
    }
    Ok(out)
}
