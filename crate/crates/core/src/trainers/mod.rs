//! Training regimes: vanilla multimodal ERM with optional β-upweighting,
//! cross-modal knowledge distillation with teacher sequencing, and the
//! adversarial basis-reallocation schedule.

mod checkpoint;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diagnostics::linear_cka;
use crate::fusion::{FusionModel, ModelGrads};
use crate::neurocore::{
    cosine_alignment, effective_rank, mean_row_cosine, sgd_step, softmax_cross_entropy,
    Activation, Matrix, Mlp, MlpGrads, RandomStream, SgdConfig,
};
use crate::probe::holdout_accuracy;
use crate::synthgen::{inject_noise, MultimodalDataset};
use crate::{Error, Result};

pub use checkpoint::{checkpoint, restore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Vanilla,
    Kd,
    Ebr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdSequence {
    WeakestToStrongest,
    StrongestToWeakest,
    StrongestOnly,
    Random,
    Simultaneous,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $name:literal),* $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$variant),*];

            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $name),* }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim() {
                    $($name => Ok($ty::$variant),)*
                    other => Err(Error::config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"), other
                    ))),
                }
            }
        }
    };
}

str_enum!(TrainMode { Vanilla => "vanilla", Kd => "kd", Ebr => "ebr" });
str_enum!(KdSequence {
    WeakestToStrongest => "weakest_to_strongest",
    StrongestToWeakest => "strongest_to_weakest",
    StrongestOnly => "strongest_only",
    Random => "random",
    Simultaneous => "simultaneous",
});

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Weight of the auxiliary probe loss on the weakest modality's encoding.
    pub beta: f64,
    /// Overrides the automatically determined weakest modality.
    pub weak_modality: Option<usize>,
    pub kd_sequence: KdSequence,
    /// Weight of the alignment term during distillation; 0 disables distillation.
    pub kd_weight: f64,
    /// Epochs of the student alignment stage.
    pub kd_epochs: usize,
    /// Epochs of unimodal teacher pretraining.
    pub teacher_epochs: usize,
    /// Phase length, in epochs, of the alternating EBR schedule.
    pub ebr_interleave: usize,
    /// Apply all EBR update rules on every step instead of alternating phases.
    pub ebr_simultaneous: bool,
    /// Weight of the adversarial term in the encoder update.
    pub md_weight: f64,
    /// Training-time corruption rate of the weakest modality.
    pub noise_rate: f64,
    pub seed: u64,
    /// Rows of the fixed training subset used for per-epoch trace metrics.
    pub trace_rows: usize,
    /// Gradient ranks are recorded every this many epochs, plus the last one.
    pub trace_every: usize,
    pub rank_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Vanilla,
            epochs: 300,
            batch_size: 64,
            sgd: SgdConfig::default(),
            beta: 0.0,
            weak_modality: None,
            kd_sequence: KdSequence::WeakestToStrongest,
            kd_weight: 1.0,
            kd_epochs: 100,
            teacher_epochs: 100,
            ebr_interleave: 10,
            ebr_simultaneous: false,
            md_weight: 1.0,
            noise_rate: 0.0,
            seed: 1,
            trace_rows: 256,
            trace_every: 10,
            rank_tol: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.kd_weight >= 0.0 && self.kd_weight.is_finite()) {
            return Err(Error::config(format!("kd_weight must be >= 0, got {}", self.kd_weight)));
        }
        if !(self.md_weight >= 0.0 && self.md_weight.is_finite()) {
            return Err(Error::config(format!("md_weight must be >= 0, got {}", self.md_weight)));
        }
        if self.ebr_interleave == 0 {
            return Err(Error::config("ebr_interleave must be >= 1"));
        }
        if self.trace_every == 0 {
            return Err(Error::config("trace_every must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(0.0..=0.5).contains(&self.noise_rate) {
            return Err(Error::config(format!("noise_rate {} outside [0, 0.5]", self.noise_rate)));
        }
        if !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return Err(Error::config("rank_tol must be in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean semantic loss over the epoch's batches.
    pub sem_loss: f64,
    /// Mean modality-discrimination loss, EBR only.
    pub md_loss: Option<f64>,
    /// Mean loss of the per-modality linear probes on the encodings.
    pub probe_losses: Vec<f64>,
    /// Effective rank of the fused representation on the trace subset.
    pub fused_rank: usize,
    /// Effective rank of each layer's weight gradient summed over the epoch;
    /// empty on epochs between `trace_every` strides.
    pub grad_ranks: Vec<usize>,
    /// Linear CKA between each modality's encoding and the fused representation.
    pub cka: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub layer_names: Vec<String>,
    pub records: Vec<EpochRecord>,
    /// Mean student/teacher cosine per alignment epoch (distillation only).
    pub kd_alignment: Vec<f64>,
    pub weak_modality: Option<usize>,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn final_sem_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.sem_loss)
    }

    pub fn is_finite(&self) -> bool {
        self.kd_alignment.iter().all(|v| v.is_finite())
            && self.records.iter().all(|r| {
                r.sem_loss.is_finite()
                    && r.md_loss.is_none_or(f64::is_finite)
                    && r.probe_losses.iter().all(|v| v.is_finite())
                    && r.cka.iter().all(|v| v.is_finite())
            })
    }
}

/// Called after every main-stage epoch with the epoch index and current model.
pub type Observer<'a> = dyn FnMut(usize, &FusionModel) -> Result<()> + 'a;

/// Modalities ordered weakest first: ledger strength when known, otherwise
/// held-out linear-probe accuracy on the raw observations. Ties go to the lower index.
pub fn strength_order(ds: &MultimodalDataset, stream: &RandomStream) -> Result<Vec<usize>> {
    if let Some(order) = ds.strength_order() {
        return Ok(order);
    }
    let mut scored = Vec::with_capacity(ds.num_modalities());
    for (i, x) in ds.modalities.iter().enumerate() {
        let mut s = stream.fork_indexed("strength-probe", i as u64);
        scored.push((holdout_accuracy(x, &ds.labels, ds.num_classes, &mut s)?, i));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().map(|(_, i)| i).collect())
}

fn weak_modality(ds: &MultimodalDataset, cfg: &TrainConfig) -> Result<usize> {
    match cfg.weak_modality {
        Some(w) if w < ds.num_modalities() => Ok(w),
        Some(w) => Err(Error::config(format!(
            "weak modality {w} out of range for {} modalities",
            ds.num_modalities()
        ))),
        None => Ok(strength_order(ds, &RandomStream::new(cfg.seed))?[0]),
    }
}

fn check_inputs(model: &FusionModel, ds: &MultimodalDataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::input("training dataset is empty"));
    }
    if ds.num_modalities() != model.num_modalities() {
        return Err(Error::config(format!(
            "dataset has {} modalities, model expects {}",
            ds.num_modalities(),
            model.num_modalities()
        )));
    }
    if ds.num_classes > model.num_classes() {
        return Err(Error::config("dataset has more classes than the model"));
    }
    Ok(())
}

fn noisy_copy(ds: &MultimodalDataset, cfg: &TrainConfig, weak: usize) -> Result<MultimodalDataset> {
    let mut out = ds.clone();
    if cfg.noise_rate > 0.0 {
        let mut s = RandomStream::new(cfg.seed).fork("train-noise");
        out = inject_noise(&out, weak, cfg.noise_rate, &mut s)?;
    }
    Ok(out)
}

/// Dispatches on `cfg.mode`.
pub fn train(
    model: FusionModel,
    ds: &MultimodalDataset,
    cfg: &TrainConfig,
) -> Result<(FusionModel, TrainTrace)> {
    train_observed(model, ds, cfg, &mut |_, _| Ok(()))
}

pub fn train_observed(
    model: FusionModel,
    ds: &MultimodalDataset,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<(FusionModel, TrainTrace)> {
    match cfg.mode {
        TrainMode::Vanilla => train_vanilla_observed(model, ds, cfg, observer),
        TrainMode::Kd => train_kd_observed(model, ds, cfg, observer),
        TrainMode::Ebr => train_ebr_observed(model, ds, cfg, observer),
    }
}

/// End-to-end minimization of the semantic loss, plus `β` times a jointly
/// trained linear probe's loss on the weakest modality's encoding.
pub fn train_vanilla(
    model: FusionModel,
    ds: &MultimodalDataset,
    cfg: &TrainConfig,
) -> Result<(FusionModel, TrainTrace)> {
    train_vanilla_observed(model, ds, cfg, &mut |_, _| Ok(()))
}

pub fn train_vanilla_observed(
    mut model: FusionModel,
    ds: &MultimodalDataset,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<(FusionModel, TrainTrace)> {
    check_inputs(&model, ds, cfg)?;
    let weak = weak_modality(ds, cfg)?;
    let data = noisy_copy(ds, cfg, weak)?;
    let trace = Loop::new(&model, &data, cfg, weak, Schedule::Plain, true)?.run(
        &mut model,
        cfg.epochs,
        observer,
    )?;
    Ok((model, trace))
}

/// Teacher pretraining, student alignment in the configured sequence, then
/// vanilla training initialized from the distilled encoders.
pub fn train_kd(
    model: FusionModel,
    ds: &MultimodalDataset,
    cfg: &TrainConfig,
) -> Result<(FusionModel, TrainTrace)> {
    train_kd_observed(model, ds, cfg, &mut |_, _| Ok(()))
}

pub fn train_kd_observed(
    mut model: FusionModel,
    ds: &MultimodalDataset,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<(FusionModel, TrainTrace)> {
    check_inputs(&model, ds, cfg)?;
    if cfg.kd_weight == 0.0 || cfg.epochs == 0 {
        return train_vanilla_observed(model, ds, cfg, observer);
    }
    let weak = weak_modality(ds, cfg)?;
    let data = noisy_copy(ds, cfg, weak)?;
    let order = match cfg.weak_modality {
        Some(_) => {
            let mut o = strength_order(ds, &RandomStream::new(cfg.seed))?;
            o.retain(|&i| i != weak);
            o.insert(0, weak);
            o
        }
        None => strength_order(ds, &RandomStream::new(cfg.seed))?,
    };
    let teachers: Vec<usize> = order.iter().copied().filter(|&i| i != weak).collect();
    let stages = kd_stages(&teachers, cfg.kd_sequence, &RandomStream::new(cfg.seed))?;
    let stream = RandomStream::new(cfg.seed).fork("kd");

    let mut teacher_cfg = cfg.clone();
    teacher_cfg.beta = 0.0;
    teacher_cfg.noise_rate = 0.0;
    teacher_cfg.weak_modality = Some(0);
    for &t in &teachers {
        let uni = model.unimodal(t, &stream.fork_indexed("teacher-init", t as u64))?;
        let uni_ds = data.select_modalities(&[t])?;
        teacher_cfg.seed = stream.fork_indexed("teacher", t as u64).next_u64();
        let mut trained = uni;
        Loop::new(&trained, &uni_ds, &teacher_cfg, 0, Schedule::Plain, false)?.run(
            &mut trained,
            cfg.teacher_epochs,
            &mut |_, _| Ok(()),
        )?;
        model.encoders[t] = trained.encoders.swap_remove(0);
    }

    let alignment = align_student(&mut model, &data, cfg, weak, &stages, &stream)?;

    let mut trace = Loop::new(&model, &data, cfg, weak, Schedule::Plain, true)?.run(
        &mut model,
        cfg.epochs,
        observer,
    )?;
    trace.kd_alignment = alignment;
    Ok((model, trace))
}

/// Teacher groups in distillation order. `teachers` is ordered weakest first.
pub fn kd_stages(
    teachers: &[usize],
    sequence: KdSequence,
    stream: &RandomStream,
) -> Result<Vec<Vec<usize>>> {
    if teachers.is_empty() {
        return Err(Error::config("distillation needs at least one teacher modality"));
    }
    Ok(match sequence {
        KdSequence::WeakestToStrongest => teachers.iter().map(|&t| vec![t]).collect(),
        KdSequence::StrongestToWeakest => teachers.iter().rev().map(|&t| vec![t]).collect(),
        KdSequence::StrongestOnly => vec![vec![*teachers.last().expect("non-empty")]],
        KdSequence::Random => {
            let mut t = teachers.to_vec();
            stream.fork("kd-sequence").shuffle(&mut t);
            t.into_iter().map(|t| vec![t]).collect()
        }
        KdSequence::Simultaneous => vec![teachers.to_vec()],
    })
}

/// Trains the student encoder on its own labels plus `kd_weight` times the
/// mean `(1 − cos)` to a learned linear projection of each frozen teacher
/// encoding in the current stage. Returns the mean cosine per epoch.
fn align_student(
    model: &mut FusionModel,
    data: &MultimodalDataset,
    cfg: &TrainConfig,
    student: usize,
    stages: &[Vec<usize>],
    stream: &RandomStream,
) -> Result<Vec<f64>> {
    let mut uni = model.unimodal(student, &stream.fork("student-init"))?;
    let s_dim = uni.encoders[0].out_dim();
    let mut projections: Vec<Option<Mlp>> = vec![None; model.num_modalities()];
    for &t in stages.iter().flatten() {
        if projections[t].is_none() {
            let mut s = stream.fork_indexed("projection", t as u64);
            projections[t] = Some(Mlp::he(
                &[model.encoders[t].out_dim(), s_dim],
                Activation::Identity,
                Activation::Identity,
                &mut s,
            )?);
        }
    }
    let teacher_enc: Vec<Option<Matrix>> = (0..model.num_modalities())
        .map(|t| {
            if projections[t].is_some() {
                model.encoders[t].predict(&data.modalities[t]).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;

    let mut batches = stream.fork("align-batches");
    let n = data.len();
    let epochs = cfg.kd_epochs;
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let stage = &stages[(epoch * stages.len() / epochs.max(1)).min(stages.len() - 1)];
        let order = batches.permutation(n);
        let mut cos_sum = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = vec![data.modalities[student].select_rows(chunk)];
            let yb: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let trace = uni.forward(&xb)?;
            let (_, dlogits) = softmax_cross_entropy(trace.logits(), &yb)?;
            let enc = trace.encoders[0].encoding();
            let mut enc_grad = Matrix::zeros(enc.rows(), enc.cols());
            for &t in stage {
                let proj = projections[t].as_mut().expect("projection allocated");
                let tb = teacher_enc[t].as_ref().expect("teacher encoded").select_rows(chunk);
                let acts = proj.forward(&tb)?;
                let (loss, g_student, g_proj) = cosine_alignment(enc, acts.output())?;
                cos_sum += (1.0 - loss) * chunk.len() as f64;
                count += chunk.len();
                enc_grad.axpy(cfg.kd_weight, &g_student);
                let pg = proj.backward(&acts, &g_proj.scale(cfg.kd_weight))?;
                sgd_step(proj, &pg, &cfg.sgd, epoch)?;
            }
            let grads = uni.backward_with(&trace, &dlogits, &[Some(enc_grad)])?;
            apply_plain(&mut uni, &grads, &cfg.sgd, epoch)?;
        }
        history.push(if count > 0 { cos_sum / count as f64 } else { 0.0 });
    }
    model.encoders[student] = uni.encoders.swap_remove(0);
    Ok(history)
}

/// Mean cosine between a student encoding and a projected teacher encoding.
pub fn alignment_cosine(student: &Matrix, projected_teacher: &Matrix) -> f64 {
    mean_row_cosine(student, projected_teacher)
}

/// Alternating schedule implementing the three EBR update rules.
pub fn train_ebr(
    model: FusionModel,
    ds: &MultimodalDataset,
    cfg: &TrainConfig,
) -> Result<(FusionModel, TrainTrace)> {
    train_ebr_observed(model, ds, cfg, &mut |_, _| Ok(()))
}

pub fn train_ebr_observed(
    mut model: FusionModel,
    ds: &MultimodalDataset,
    cfg: &TrainConfig,
    observer: &mut Observer<'_>,
) -> Result<(FusionModel, TrainTrace)> {
    if model.ebr.is_none() {
        return Err(Error::state("EBR training needs an attached EBR head"));
    }
    check_inputs(&model, ds, cfg)?;
    let weak = weak_modality(ds, cfg)?;
    let data = noisy_copy(ds, cfg, weak)?;
    let trace = Loop::new(&model, &data, cfg, weak, Schedule::Ebr, true)?.run(
        &mut model,
        cfg.epochs,
        observer,
    )?;
    Ok((model, trace))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EbrPhase {
    /// `g_i ← g_i − ∇L_sem`, `h⁻¹_i ← h⁻¹_i − ∇L_sem`, fusion and classifier on `L_sem`.
    Semantic,
    /// `ψ ← ψ − ∇_ψ L_md`, `g_i ← g_i + ∇L_md`.
    Discriminative,
    /// Both of the above in one step.
    Simultaneous,
}

impl EbrPhase {
    /// Blocks of `ebr_interleave` epochs alternate, semantic first; the last
    /// block of training is always semantic so the run ends on `L_sem`.
    pub fn at_epoch(epoch: usize, cfg: &TrainConfig) -> EbrPhase {
        if cfg.ebr_simultaneous {
            EbrPhase::Simultaneous
        } else if (epoch / cfg.ebr_interleave) % 2 == 0
            || epoch + cfg.ebr_interleave >= cfg.epochs
        {
            EbrPhase::Semantic
        } else {
            EbrPhase::Discriminative
        }
    }
}

/// Separate gradients of the two EBR losses on one batch.
#[derive(Debug, Clone)]
pub struct EbrGradients {
    pub sem_loss: f64,
    /// `L_md = Σ_i CE(ψ(g_i(x)), i)`.
    pub md_loss: f64,
    /// Gradients of `L_sem` (plus any auxiliary encoding terms).
    pub sem: ModelGrads,
    /// Gradients of `L_md` for `ψ`, `f̄_i` and `h_i`; decoders, fusion and classifier are zero.
    pub md: ModelGrads,
}

/// Computes `∇L_sem` and `∇L_md` on one batch.
pub fn ebr_gradients(
    model: &FusionModel,
    inputs: &[Matrix],
    labels: &[usize],
) -> Result<EbrGradients> {
    let trace = model.forward(inputs)?;
    ebr_gradients_from(model, &trace, labels, &[])
}

fn ebr_gradients_from(
    model: &FusionModel,
    trace: &crate::fusion::ForwardTrace,
    labels: &[usize],
    extra: &[Option<Matrix>],
) -> Result<EbrGradients> {
    let ebr = model
        .ebr
        .as_ref()
        .ok_or_else(|| Error::state("EBR training needs an attached EBR head"))?;
    let (sem_loss, dlogits) = softmax_cross_entropy(trace.logits(), labels)?;
    let sem = model.backward_with(trace, &dlogits, extra)?;
    let mut md = ModelGrads::zeros_like(model);
    let mut md_loss = 0.0;
    let n = labels.len();
    for (i, enc) in trace.encoders.iter().enumerate() {
        let latent = enc
            .latent()
            .ok_or_else(|| Error::state("trace has no latent activations"))?;
        let acts = ebr.discriminator.forward(latent)?;
        let (loss, g) = softmax_cross_entropy(acts.output(), &vec![i; n])?;
        md_loss += loss;
        let dg = ebr.discriminator.backward(&acts, &g)?;
        let (eg, hg) = model.latent_backward(enc, i, &dg.input)?;
        md.discriminator
            .as_mut()
            .expect("attached")
            .accumulate(1.0, &dg);
        md.encoders[i] = eg;
        md.heads[i] = hg;
    }
    Ok(EbrGradients {
        sem_loss,
        md_loss,
        sem,
        md,
    })
}

/// Combines the two gradients into the descent direction of one phase.
/// Groups that do not move in the phase are `None`.
pub fn ebr_direction(
    grads: &EbrGradients,
    phase: EbrPhase,
    md_weight: f64,
) -> Result<EbrDirection> {
    let sem_on = phase != EbrPhase::Discriminative;
    let md_on = phase != EbrPhase::Semantic;
    let m = grads.sem.encoders.len();
    let mut encoders = Vec::with_capacity(m);
    let mut heads = Vec::with_capacity(m);
    for i in 0..m {
        let mut e = MlpGrads::zeros_like_grads(&grads.sem.encoders[i]);
        let mut h = MlpGrads::zeros_like_grads(&grads.sem.heads[i]);
        if sem_on {
            e.accumulate(1.0, &grads.sem.encoders[i]);
            h.accumulate(1.0, &grads.sem.heads[i]);
        }
        if md_on {
            e.accumulate(-md_weight, &grads.md.encoders[i]);
            h.accumulate(-md_weight, &grads.md.heads[i]);
        }
        encoders.push(e);
        heads.push(h);
    }
    Ok(EbrDirection {
        encoders,
        heads,
        decoders: sem_on.then(|| grads.sem.decoders.clone()),
        fusion: sem_on.then(|| grads.sem.fusion.clone()),
        classifier: sem_on.then(|| grads.sem.classifier.clone()),
        discriminator: if md_on {
            grads.md.discriminator.clone()
        } else {
            None
        },
    })
}

/// Per-group descent directions for one EBR step.
#[derive(Debug, Clone)]
pub struct EbrDirection {
    pub encoders: Vec<MlpGrads>,
    pub heads: Vec<MlpGrads>,
    pub decoders: Option<Vec<MlpGrads>>,
    pub fusion: Option<MlpGrads>,
    pub classifier: Option<MlpGrads>,
    pub discriminator: Option<MlpGrads>,
}

/// Applies one SGD step along `dir`.
pub fn ebr_step(
    model: &mut FusionModel,
    dir: &EbrDirection,
    sgd: &SgdConfig,
    epoch: usize,
) -> Result<()> {
    for (enc, g) in model.encoders.iter_mut().zip(&dir.encoders) {
        sgd_step(enc, g, sgd, epoch)?;
    }
    if let Some(g) = &dir.fusion {
        sgd_step(&mut model.fusion, g, sgd, epoch)?;
    }
    if let Some(g) = &dir.classifier {
        sgd_step(&mut model.classifier, g, sgd, epoch)?;
    }
    let ebr = model
        .ebr
        .as_mut()
        .ok_or_else(|| Error::state("EBR step needs an attached EBR head"))?;
    for (h, g) in ebr.heads.iter_mut().zip(&dir.heads) {
        sgd_step(h, g, sgd, epoch)?;
    }
    if let Some(ds) = &dir.decoders {
        for (d, g) in ebr.decoders.iter_mut().zip(ds) {
            sgd_step(d, g, sgd, epoch)?;
        }
    }
    if let Some(g) = &dir.discriminator {
        sgd_step(&mut ebr.discriminator, g, sgd, epoch)?;
    }
    Ok(())
}

/// Descent on every group present in `grads` except the discriminator.
fn apply_plain(model: &mut FusionModel, grads: &ModelGrads, sgd: &SgdConfig, epoch: usize) -> Result<()> {
    for (enc, g) in model.encoders.iter_mut().zip(&grads.encoders) {
        sgd_step(enc, g, sgd, epoch)?;
    }
    sgd_step(&mut model.fusion, &grads.fusion, sgd, epoch)?;
    sgd_step(&mut model.classifier, &grads.classifier, sgd, epoch)?;
    if let Some(ebr) = &mut model.ebr {
        for (h, g) in ebr.heads.iter_mut().zip(&grads.heads) {
            sgd_step(h, g, sgd, epoch)?;
        }
        for (d, g) in ebr.decoders.iter_mut().zip(&grads.decoders) {
            sgd_step(d, g, sgd, epoch)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Schedule {
    Plain,
    Ebr,
}

/// Shared epoch loop: batching, probes, trace recording.
struct Loop<'a> {
    data: &'a MultimodalDataset,
    cfg: &'a TrainConfig,
    weak: usize,
    schedule: Schedule,
    full_trace: bool,
    probes: Vec<Mlp>,
    trace_rows: Vec<usize>,
    batches: RandomStream,
}

impl<'a> Loop<'a> {
    fn new(
        model: &FusionModel,
        data: &'a MultimodalDataset,
        cfg: &'a TrainConfig,
        weak: usize,
        schedule: Schedule,
        full_trace: bool,
    ) -> Result<Self> {
        let stream = RandomStream::new(cfg.seed);
        let probes = model
            .encoding_dims()
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let mut s = stream.fork_indexed("probe-init", i as u64);
                Mlp::he(
                    &[d, model.num_classes()],
                    Activation::Identity,
                    Activation::Logits,
                    &mut s,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let mut pick = stream.fork("trace-rows");
        let mut trace_rows = pick.permutation(data.len());
        trace_rows.truncate(cfg.trace_rows.min(data.len()));
        trace_rows.sort_unstable();
        Ok(Self {
            data,
            cfg,
            weak,
            schedule,
            full_trace,
            probes,
            trace_rows,
            batches: stream.fork("batches"),
        })
    }

    fn run(
        mut self,
        model: &mut FusionModel,
        epochs: usize,
        observer: &mut Observer<'_>,
    ) -> Result<TrainTrace> {
        let mut trace = TrainTrace {
            layer_names: layer_names(model),
            records: Vec::with_capacity(epochs),
            kd_alignment: Vec::new(),
            weak_modality: Some(self.weak),
        };
        for epoch in 0..epochs {
            let ranks = epoch % self.cfg.trace_every == 0 || epoch + 1 == epochs;
            let record = self.epoch(model, epoch, ranks)?;
            trace.records.push(record);
            observer(epoch, model)?;
        }
        Ok(trace)
    }

    fn epoch(&mut self, model: &mut FusionModel, epoch: usize, ranks: bool) -> Result<EpochRecord> {
        let cfg = self.cfg;
        let n = self.data.len();
        let m = model.num_modalities();
        let order = self.batches.permutation(n);
        let mut accum = ModelGrads::zeros_like(model);
        let mut sem_sum = 0.0;
        let mut md_sum = 0.0;
        let mut probe_sums = vec![0.0; m];
        let phase = EbrPhase::at_epoch(epoch, cfg);
        for chunk in order.chunks(cfg.batch_size) {
            let w = chunk.len() as f64;
            let xb: Vec<Matrix> = self
                .data
                .modalities
                .iter()
                .map(|x| x.select_rows(chunk))
                .collect();
            let yb: Vec<usize> = chunk.iter().map(|&i| self.data.labels[i]).collect();
            let fwd = model.forward(&xb)?;

            let mut extra: Vec<Option<Matrix>> = vec![None; m];
            for (i, probe) in self.probes.iter_mut().enumerate() {
                let acts = probe.forward(fwd.encoders[i].encoding())?;
                let (loss, g) = softmax_cross_entropy(acts.output(), &yb)?;
                probe_sums[i] += loss * w;
                let pg = probe.backward(&acts, &g)?;
                if i == self.weak && cfg.beta > 0.0 {
                    extra[i] = Some(pg.input.scale(cfg.beta));
                }
                sgd_step(probe, &pg, &cfg.sgd, epoch)?;
            }

            match self.schedule {
                Schedule::Plain => {
                    let (loss, dlogits) = softmax_cross_entropy(fwd.logits(), &yb)?;
                    sem_sum += loss * w;
                    let grads = model.backward_with(&fwd, &dlogits, &extra)?;
                    apply_plain(model, &grads, &cfg.sgd, epoch)?;
                    if self.full_trace && ranks {
                        accum.accumulate(1.0, &grads);
                    }
                }
                Schedule::Ebr => {
                    let grads = ebr_gradients_from(model, &fwd, &yb, &extra)?;
                    sem_sum += grads.sem_loss * w;
                    md_sum += grads.md_loss * w;
                    let dir = ebr_direction(&grads, phase, cfg.md_weight)?;
                    ebr_step(model, &dir, &cfg.sgd, epoch)?;
                    if self.full_trace && ranks {
                        accumulate_direction(&mut accum, &dir);
                    }
                }
            }
        }
        let nf = n as f64;
        let sem_loss = sem_sum / nf;
        let probe_losses: Vec<f64> = probe_sums.iter().map(|s| s / nf).collect();
        if !sem_loss.is_finite() {
            return Err(Error::state(format!("semantic loss diverged at epoch {epoch}")));
        }
        let (fused_rank, grad_ranks, cka) = if self.full_trace {
            self.trace_metrics(model, ranks.then_some(&accum))?
        } else {
            (0, Vec::new(), Vec::new())
        };
        Ok(EpochRecord {
            epoch,
            sem_loss,
            md_loss: (self.schedule == Schedule::Ebr).then_some(md_sum / nf),
            probe_losses,
            fused_rank,
            grad_ranks,
            cka,
        })
    }

    fn trace_metrics(
        &self,
        model: &FusionModel,
        accum: Option<&ModelGrads>,
    ) -> Result<(usize, Vec<usize>, Vec<f64>)> {
        let xs: Vec<Matrix> = self
            .data
            .modalities
            .iter()
            .map(|x| x.select_rows(&self.trace_rows))
            .collect();
        let fwd = model.forward(&xs)?;
        let fused = fwd.fused();
        let fused_rank = effective_rank(fused, self.cfg.rank_tol);
        let cka = fwd
            .encodings()
            .iter()
            .map(|e| linear_cka(e, fused).value)
            .collect::<Vec<_>>();
        let grad_ranks = accum.map_or_else(Vec::new, |a| {
            layer_gradients(a)
                .iter()
                .map(|g| effective_rank(g, self.cfg.rank_tol))
                .collect()
        });
        Ok((fused_rank, grad_ranks, cka))
    }
}

fn accumulate_direction(accum: &mut ModelGrads, dir: &EbrDirection) {
    for (a, g) in accum.encoders.iter_mut().zip(&dir.encoders) {
        a.accumulate(1.0, g);
    }
    for (a, g) in accum.heads.iter_mut().zip(&dir.heads) {
        a.accumulate(1.0, g);
    }
    if let Some(ds) = &dir.decoders {
        for (a, g) in accum.decoders.iter_mut().zip(ds) {
            a.accumulate(1.0, g);
        }
    }
    if let Some(g) = &dir.fusion {
        accum.fusion.accumulate(1.0, g);
    }
    if let Some(g) = &dir.classifier {
        accum.classifier.accumulate(1.0, g);
    }
    if let (Some(a), Some(g)) = (&mut accum.discriminator, &dir.discriminator) {
        a.accumulate(1.0, g);
    }
}

/// Layer names in the order of [`layer_gradients`].
pub fn layer_names(model: &FusionModel) -> Vec<String> {
    let mut names = Vec::new();
    let mut push = |prefix: String, mlp: &Mlp| {
        for l in 0..mlp.layers().len() {
            names.push(format!("{prefix}.{l}"));
        }
    };
    for (i, e) in model.encoders.iter().enumerate() {
        push(format!("encoder{i}"), e);
    }
    push("fusion".into(), &model.fusion);
    push("classifier".into(), &model.classifier);
    if let Some(ebr) = &model.ebr {
        for (i, h) in ebr.heads.iter().enumerate() {
            push(format!("head{i}"), h);
        }
        for (i, d) in ebr.decoders.iter().enumerate() {
            push(format!("decoder{i}"), d);
        }
        push("discriminator".into(), &ebr.discriminator);
    }
    names
}

/// Weight-gradient matrices of every layer, ordered as [`layer_names`].
pub fn layer_gradients(grads: &ModelGrads) -> Vec<&Matrix> {
    let mut out = Vec::new();
    for g in &grads.encoders {
        out.extend(g.layers.iter().map(|l| &l.weight));
    }
    out.extend(grads.fusion.layers.iter().map(|l| &l.weight));
    out.extend(grads.classifier.layers.iter().map(|l| &l.weight));
    for g in grads.heads.iter().chain(&grads.decoders) {
        out.extend(g.layers.iter().map(|l| &l.weight));
    }
    if let Some(g) = &grads.discriminator {
        out.extend(g.layers.iter().map(|l| &l.weight));
    }
    out
}
