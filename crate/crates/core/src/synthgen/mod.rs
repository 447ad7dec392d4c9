//! Synthetic multimodal data with a ground-truth feature ledger.
//!
//! Every sample draws a label `y` and a latent vector `z`. Predictive latents
//! are a class mean plus unit Gaussian noise, noisy latents are
//! class-independent Gaussians, and each conjugate pair `(z_y, z_ε)` is built
//! as `z_ε = u − z_y` so that `z_y + z_ε = u` carries no label information.
//! Modality `i` observes `x_i = M_i z` through a mixing matrix supported on the
//! latents it can see; the ledger records the observation-space direction of
//! every observed latent together with its role.

mod csv_io;
mod mask;

pub use csv_io::{load_csv, write_csv};
pub use mask::{expected_absence_rate, sample_mask, MissingnessMask};

use serde::{Deserialize, Serialize};

use crate::neurocore::{norm, Matrix, RandomStream};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LatentRole {
    Predictive,
    Noisy,
    ConjugatePredictive,
    ConjugateNoisy,
}

impl LatentRole {
    /// Carries label information on its own.
    pub fn is_predictive(self) -> bool {
        matches!(self, LatentRole::Predictive | LatentRole::ConjugatePredictive)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    pub num_classes: usize,
    pub roles: Vec<LatentRole>,
    /// `(predictive, noisy)` latent indices of each conjugate pair.
    pub conjugate_pairs: Vec<(usize, usize)>,
    /// Distance between the extreme class means of every predictive latent.
    pub class_separation: f64,
}

impl LatentSpec {
    pub fn latent_dim(&self) -> usize {
        self.roles.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if !self.roles.iter().any(|r| r.is_predictive()) {
            return Err(Error::config("at least one predictive latent is required"));
        }
        let mut seen = vec![0usize; self.roles.len()];
        for &(p, q) in &self.conjugate_pairs {
            if p >= self.roles.len() || q >= self.roles.len() {
                return Err(Error::config("conjugate pair index out of range"));
            }
            if self.roles[p] != LatentRole::ConjugatePredictive
                || self.roles[q] != LatentRole::ConjugateNoisy
            {
                return Err(Error::config(format!(
                    "pair ({p}, {q}) must join a conjugate-predictive and a conjugate-noisy latent"
                )));
            }
            seen[p] += 1;
            seen[q] += 1;
        }
        for (i, role) in self.roles.iter().enumerate() {
            let conj = matches!(
                role,
                LatentRole::ConjugatePredictive | LatentRole::ConjugateNoisy
            );
            if conj && seen[i] != 1 {
                return Err(Error::config(format!(
                    "conjugate latent {i} must appear in exactly one pair"
                )));
            }
        }
        if !(self.class_separation.is_finite() && self.class_separation >= 0.0) {
            return Err(Error::config("class separation must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub modality_id: usize,
    pub obs_dim: usize,
    /// `obs_dim × latent_dim`, unit-norm rows, zero outside `latent_subset`.
    pub mixing: Matrix,
    pub latent_subset: Vec<usize>,
    pub strength: f64,
    pub noise_rate: f64,
}

impl ModalitySpec {
    /// Random Gaussian mixing over `latent_subset` with rows normalized to unit length.
    pub fn random(
        modality_id: usize,
        obs_dim: usize,
        latents: &LatentSpec,
        latent_subset: Vec<usize>,
        stream: &mut RandomStream,
    ) -> Result<Self> {
        let latent_dim = latents.latent_dim();
        if latent_subset.is_empty() || latent_subset.iter().any(|&k| k >= latent_dim) {
            return Err(Error::config("latent subset empty or out of range"));
        }
        let mut mixing = Matrix::zeros(obs_dim, latent_dim);
        for r in 0..obs_dim {
            for &k in &latent_subset {
                mixing.set(r, k, stream.normal());
            }
            let n = norm(mixing.row(r));
            for v in mixing.row_mut(r) {
                *v /= n;
            }
        }
        Ok(Self {
            modality_id,
            obs_dim,
            mixing,
            latent_subset,
            strength: 0.0,
            noise_rate: 0.0,
        }
        .with_derived_strength(latents))
    }

    fn with_derived_strength(mut self, latents: &LatentSpec) -> Self {
        self.strength = observed_strength(&self.latent_subset, latents);
        self
    }

    fn validate(&self, latents: &LatentSpec, index: usize) -> Result<()> {
        if self.modality_id != index {
            return Err(Error::config(format!(
                "modality at position {index} has id {}",
                self.modality_id
            )));
        }
        if self.mixing.shape() != (self.obs_dim, latents.latent_dim()) {
            return Err(Error::config(format!(
                "modality {index}: mixing is {:?}, expected ({}, {})",
                self.mixing.shape(),
                self.obs_dim,
                latents.latent_dim()
            )));
        }
        if self.latent_subset.iter().any(|&k| k >= latents.latent_dim()) {
            return Err(Error::config(format!("modality {index}: latent out of range")));
        }
        for r in 0..self.obs_dim {
            if (norm(self.mixing.row(r)) - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "modality {index}: mixing row {r} is not unit norm"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.strength) || !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(Error::config(format!(
                "modality {index}: strength and noise_rate must lie in [0, 1]"
            )));
        }
        Ok(())
    }
}

/// Fraction of `subset` that is predictive.
pub fn observed_strength(subset: &[usize], latents: &LatentSpec) -> f64 {
    if subset.is_empty() {
        return 0.0;
    }
    let p = subset
        .iter()
        .filter(|&&k| latents.roles[k].is_predictive())
        .count();
    p as f64 / subset.len() as f64
}

/// One observed latent of one modality, with its unit direction in observation space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerFeature {
    pub modality: usize,
    pub latent: usize,
    pub role: LatentRole,
    pub direction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Ledger {
    Known {
        features: Vec<LedgerFeature>,
        conjugate_pairs: Vec<(usize, usize)>,
    },
    /// Externally ingested data; latent roles are not available.
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalDataset {
    pub modalities: Vec<Matrix>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub ledger: Ledger,
    /// Per-modality strength when known.
    pub strengths: Option<Vec<f64>>,
    /// Ground-truth latents, kept for oracles.
    pub latents: Option<Matrix>,
}

impl MultimodalDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn obs_dims(&self) -> Vec<usize> {
        self.modalities.iter().map(Matrix::cols).collect()
    }

    pub fn ledger_features(&self) -> Result<&[LedgerFeature]> {
        match &self.ledger {
            Ledger::Known { features, .. } => Ok(features),
            Ledger::Unknown => Err(Error::state(
                "dataset has unknown latent roles; this diagnostic needs a ground-truth ledger",
            )),
        }
    }

    pub fn conjugate_pairs(&self) -> Result<&[(usize, usize)]> {
        match &self.ledger {
            Ledger::Known {
                conjugate_pairs, ..
            } => Ok(conjugate_pairs),
            Ledger::Unknown => Err(Error::state(
                "dataset has unknown latent roles; this diagnostic needs a ground-truth ledger",
            )),
        }
    }

    /// Rows `indices` of every modality.
    pub fn subset(&self, indices: &[usize]) -> MultimodalDataset {
        MultimodalDataset {
            modalities: self.modalities.iter().map(|m| m.select_rows(indices)).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            ledger: self.ledger.clone(),
            strengths: self.strengths.clone(),
            latents: self.latents.as_ref().map(|z| z.select_rows(indices)),
        }
    }

    /// First `n_train` rows and the rest.
    pub fn split(&self, n_train: usize) -> (MultimodalDataset, MultimodalDataset) {
        let n_train = n_train.min(self.len());
        let train: Vec<usize> = (0..n_train).collect();
        let test: Vec<usize> = (n_train..self.len()).collect();
        (self.subset(&train), self.subset(&test))
    }

    /// Modality indices ordered from weakest to strongest (ties by index).
    pub fn strength_order(&self) -> Option<Vec<usize>> {
        let s = self.strengths.as_ref()?;
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
        Some(order)
    }

    /// Keeps only the listed modalities, renumbering them `0..k`.
    pub fn select_modalities(&self, keep: &[usize]) -> Result<MultimodalDataset> {
        if keep.iter().any(|&i| i >= self.num_modalities()) || keep.is_empty() {
            return Err(Error::input("modality selection out of range"));
        }
        let ledger = match &self.ledger {
            Ledger::Known {
                features,
                conjugate_pairs,
            } => Ledger::Known {
                features: features
                    .iter()
                    .filter_map(|f| {
                        keep.iter().position(|&k| k == f.modality).map(|pos| LedgerFeature {
                            modality: pos,
                            ..f.clone()
                        })
                    })
                    .collect(),
                conjugate_pairs: conjugate_pairs.clone(),
            },
            Ledger::Unknown => Ledger::Unknown,
        };
        Ok(MultimodalDataset {
            modalities: keep.iter().map(|&i| self.modalities[i].clone()).collect(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            ledger,
            strengths: self
                .strengths
                .as_ref()
                .map(|s| keep.iter().map(|&i| s[i]).collect()),
            latents: self.latents.clone(),
        })
    }
}

/// Class-mean levels shared by all predictive latents: evenly spaced, centered,
/// spanning `separation`.
fn class_levels(num_classes: usize, separation: f64) -> Vec<f64> {
    let half = (num_classes as f64 - 1.0) / 2.0;
    (0..num_classes)
        .map(|c| separation * (c as f64 - half) / (2.0 * half))
        .collect()
}

pub fn generate(
    spec: &LatentSpec,
    modalities: &[ModalitySpec],
    n: usize,
    stream: &RandomStream,
) -> Result<MultimodalDataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("dataset size must be at least 1"));
    }
    if modalities.is_empty() {
        return Err(Error::config("need at least one modality"));
    }
    for (i, m) in modalities.iter().enumerate() {
        m.validate(spec, i)?;
    }

    let c = spec.num_classes;
    let d = spec.latent_dim();
    let levels = class_levels(c, spec.class_separation);
    let mut means_rng = stream.fork("class-means");
    // Equal separation on every predictive latent; only the class order differs.
    let class_means: Vec<Vec<f64>> = (0..d)
        .map(|k| {
            if spec.roles[k].is_predictive() {
                let perm = means_rng.permutation(c);
                perm.iter().map(|&p| levels[p]).collect()
            } else {
                vec![0.0; c]
            }
        })
        .collect();

    let mut rng = stream.fork("samples");
    let mut labels = Vec::with_capacity(n);
    let mut z = Matrix::zeros(n, d);
    for r in 0..n {
        let y = rng.below(c);
        labels.push(y);
        for k in 0..d {
            let v = match spec.roles[k] {
                LatentRole::Predictive | LatentRole::ConjugatePredictive => {
                    class_means[k][y] + rng.normal()
                }
                LatentRole::Noisy => rng.normal(),
                // filled below from its partner
                LatentRole::ConjugateNoisy => rng.normal(),
            };
            z.set(r, k, v);
        }
        for &(p, q) in &spec.conjugate_pairs {
            let u = z.get(r, q);
            z.set(r, q, u - z.get(r, p));
        }
    }

    let mut features = Vec::new();
    let mut observations = Vec::with_capacity(modalities.len());
    for m in modalities {
        observations.push(z.matmul_t(&m.mixing));
        for &k in &m.latent_subset {
            let col = m.mixing.column(k);
            let n = norm(&col);
            features.push(LedgerFeature {
                modality: m.modality_id,
                latent: k,
                role: spec.roles[k],
                direction: col.iter().map(|v| v / n).collect(),
            });
        }
    }

    let mut ds = MultimodalDataset {
        modalities: observations,
        labels,
        num_classes: c,
        ledger: Ledger::Known {
            features,
            conjugate_pairs: spec.conjugate_pairs.clone(),
        },
        strengths: Some(modalities.iter().map(|m| m.strength).collect()),
        latents: Some(z),
    };
    for m in modalities {
        if m.noise_rate > 0.0 {
            let mut noise = stream.fork_indexed("noise", m.modality_id as u64);
            ds = inject_noise(&ds, m.modality_id, m.noise_rate.min(0.5), &mut noise)?;
        }
    }
    Ok(ds)
}

/// Adds uniform noise of per-coordinate-std amplitude to `⌊noise_rate · obs_dim⌋`
/// randomly chosen coordinates of every sample of one modality.
pub fn inject_noise(
    ds: &MultimodalDataset,
    modality: usize,
    noise_rate: f64,
    stream: &mut RandomStream,
) -> Result<MultimodalDataset> {
    if modality >= ds.num_modalities() {
        return Err(Error::input(format!(
            "modality {modality} out of range for {} modalities",
            ds.num_modalities()
        )));
    }
    if !(0.0..=0.5).contains(&noise_rate) {
        return Err(Error::input(format!(
            "noise rate {noise_rate} outside [0, 0.5]"
        )));
    }
    let mut out = ds.clone();
    let x = &mut out.modalities[modality];
    let dim = x.cols();
    let count = (noise_rate * dim as f64).floor() as usize;
    if count == 0 {
        return Ok(out);
    }
    let amp = x.column_stds();
    for r in 0..x.rows() {
        let coords = stream.permutation(dim);
        for &c in &coords[..count] {
            let v = x.get(r, c) + stream.uniform_range(-amp[c], amp[c]);
            x.set(r, c, v);
        }
    }
    Ok(out)
}

/// Desk-scale construction: modality 0 is the weakest, the rest are strong.
///
/// Modality 0 observes one conjugate pair and `weak_predictive` predictive
/// latents that no other modality sees, padded with noisy latents. Strong
/// modalities draw from a shared pool of predictive latents, so they are
/// largely redundant with each other.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeskDataConfig {
    pub num_modalities: usize,
    pub num_classes: usize,
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub latents_per_modality: usize,
    pub weak_predictive: usize,
    pub strong_predictive: usize,
    pub shared_pool: usize,
    pub class_separation: f64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DeskDataConfig {
    fn default() -> Self {
        Self {
            num_modalities: 2,
            num_classes: 4,
            latent_dim: 24,
            obs_dim: 32,
            latents_per_modality: 8,
            weak_predictive: 1,
            strong_predictive: 3,
            shared_pool: 4,
            class_separation: 2.0,
            n_train: 4000,
            n_test: 1000,
        }
    }
}

impl DeskDataConfig {
    /// Latent layout: `[pair_p, pair_n, weak_unique…, shared_pool…, noisy…]`.
    pub fn latent_spec(&self) -> Result<LatentSpec> {
        let fixed = 2 + self.weak_predictive + self.shared_pool;
        if self.latent_dim <= fixed {
            return Err(Error::config(format!(
                "latent_dim {} too small for {fixed} structured latents",
                self.latent_dim
            )));
        }
        let mut roles = vec![LatentRole::ConjugatePredictive, LatentRole::ConjugateNoisy];
        roles.extend(std::iter::repeat_n(
            LatentRole::Predictive,
            self.weak_predictive + self.shared_pool,
        ));
        roles.extend(std::iter::repeat_n(LatentRole::Noisy, self.latent_dim - fixed));
        Ok(LatentSpec {
            num_classes: self.num_classes,
            roles,
            conjugate_pairs: vec![(0, 1)],
            class_separation: self.class_separation,
        })
    }

    pub fn modality_specs(
        &self,
        latents: &LatentSpec,
        stream: &RandomStream,
    ) -> Result<Vec<ModalitySpec>> {
        if self.num_modalities == 0 {
            return Err(Error::config("need at least one modality"));
        }
        let k = self.latents_per_modality;
        let weak_fixed = 2 + self.weak_predictive;
        if k < weak_fixed || k < self.strong_predictive || self.strong_predictive > self.shared_pool {
            return Err(Error::config("latents_per_modality too small for the requested layout"));
        }
        let shared: Vec<usize> = (weak_fixed..weak_fixed + self.shared_pool).collect();
        let noisy: Vec<usize> = (weak_fixed + self.shared_pool..self.latent_dim).collect();
        let mut layout = stream.fork("layout");
        let mut specs = Vec::with_capacity(self.num_modalities);
        for i in 0..self.num_modalities {
            let mut subset: Vec<usize>;
            let noisy_needed;
            if i == 0 {
                subset = (0..weak_fixed).collect();
                noisy_needed = k - weak_fixed;
            } else {
                let mut pool = shared.clone();
                layout.shuffle(&mut pool);
                subset = pool[..self.strong_predictive].to_vec();
                noisy_needed = k - self.strong_predictive;
            }
            if noisy_needed > noisy.len() {
                return Err(Error::config("not enough noisy latents for the layout"));
            }
            let mut pool = noisy.clone();
            layout.shuffle(&mut pool);
            subset.extend_from_slice(&pool[..noisy_needed]);
            subset.sort_unstable();
            let mut mix = stream.fork_indexed("mixing", i as u64);
            specs.push(ModalitySpec::random(i, self.obs_dim, latents, subset, &mut mix)?);
        }
        Ok(specs)
    }

    /// Generates `n_train + n_test` samples and splits them.
    pub fn generate(&self, stream: &RandomStream) -> Result<(MultimodalDataset, MultimodalDataset)> {
        let latents = self.latent_spec()?;
        let specs = self.modality_specs(&latents, stream)?;
        let ds = generate(&latents, &specs, self.n_train + self.n_test, &stream.fork("data"))?;
        Ok(ds.split(self.n_train))
    }
}
