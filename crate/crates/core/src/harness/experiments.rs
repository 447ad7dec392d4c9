use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::diagnostics::{
    agop, collision_bound, fusion_alignment, fusion_rows, gradient_rank_trace, layer_maps,
    ledger_probes, linear_cka, modality_probe_ce, reference_rows, vif_mean, agop_gap,
    ModalityProbeConfig,
};
use crate::fusion::FusionModel;
use crate::neurocore::{effective_rank, Matrix, RandomStream};
use crate::probe::{accuracy, LinearProbe, ProbeConfig};
use crate::substitution::{
    evaluate_missingness, macro_auc, PolicyKind, SubstitutionContext, SubstitutionPolicy,
};
use crate::synthgen::MultimodalDataset;
use crate::trainers::{train_observed, KdSequence, TrainMode, TrainTrace};
use crate::Result;

use super::{ExperimentId, RunConfig, Series};

/// What distinguishes one trained model from another within a run config.
#[derive(Debug, Clone, PartialEq)]
pub struct RunKey {
    pub m: usize,
    pub mode: TrainMode,
    pub beta: f64,
    pub noise_rate: f64,
    pub kd_sequence: KdSequence,
    /// Train a single-modality model on this modality instead.
    pub only: Option<usize>,
    /// Keep copies of the model at evenly spaced epochs.
    pub snapshots: bool,
}

impl RunKey {
    pub fn new(cfg: &RunConfig, m: usize, mode: TrainMode) -> Self {
        Self {
            m,
            mode,
            beta: cfg.beta,
            noise_rate: cfg.noise_rate,
            kd_sequence: cfg.kd_sequence,
            only: None,
            snapshots: false,
        }
    }

    pub fn unimodal(cfg: &RunConfig, m: usize, modality: usize) -> Self {
        Self {
            only: Some(modality),
            ..Self::new(cfg, m, TrainMode::Vanilla)
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub model: FusionModel,
    pub trace: TrainTrace,
    /// `(epochs completed, model)`.
    pub snapshots: Vec<(usize, FusionModel)>,
}

type Shared<T> = Mutex<HashMap<String, Arc<T>>>;

fn data_cache() -> &'static Shared<(MultimodalDataset, MultimodalDataset)> {
    static C: OnceLock<Shared<(MultimodalDataset, MultimodalDataset)>> = OnceLock::new();
    C.get_or_init(Default::default)
}

fn model_cache() -> &'static Shared<TrainedRun> {
    static C: OnceLock<Shared<TrainedRun>> = OnceLock::new();
    C.get_or_init(Default::default)
}

/// Drops every in-process dataset and model memoized by the runner.
pub fn clear_model_cache() {
    data_cache().lock().expect("cache lock").clear();
    model_cache().lock().expect("cache lock").clear();
}

fn memo<T>(cache: &'static Shared<T>, key: String, make: impl FnOnce() -> Result<T>) -> Result<Arc<T>> {
    if let Some(v) = cache.lock().expect("cache lock").get(&key) {
        return Ok(v.clone());
    }
    let v = Arc::new(make()?);
    cache
        .lock()
        .expect("cache lock")
        .entry(key)
        .or_insert_with(|| v.clone());
    Ok(v)
}

/// Train/test desk datasets for `m` modalities and one seed.
pub fn desk_data(cfg: &RunConfig, m: usize, seed: u64) -> Result<Arc<(MultimodalDataset, MultimodalDataset)>> {
    let data = cfg.data_config(m);
    memo(data_cache(), format!("{data:?}|{seed}"), || {
        data.generate(&RandomStream::new(seed).fork("desk"))
    })
}

/// Trains (or fetches from the in-process cache) the model described by `key`.
pub fn trained_run(cfg: &RunConfig, key: &RunKey, seed: u64) -> Result<Arc<TrainedRun>> {
    let data = desk_data(cfg, key.m, seed)?;
    let arch = cfg.architecture();
    let mut tc = cfg.train_config(key.mode, seed);
    tc.beta = key.beta;
    tc.noise_rate = key.noise_rate;
    tc.kd_sequence = key.kd_sequence;
    let train = match key.only {
        Some(i) => {
            tc.weak_modality = Some(0);
            data.0.select_modalities(&[i])?
        }
        None => data.0.clone(),
    };
    let cache_key = format!("{:?}|{tc:?}|{arch:?}|{key:?}|{seed}", cfg.data_config(key.m));
    memo(model_cache(), cache_key, || {
        let init = RandomStream::new(seed).fork("model");
        let mut model = FusionModel::new(&arch, &train.obs_dims(), cfg.num_classes, &init)?;
        if key.mode == TrainMode::Ebr {
            model.attach_ebr(&arch, &init.fork("ebr"))?;
        }
        let every = if key.snapshots && cfg.snapshots > 0 {
            (cfg.epochs / cfg.snapshots).max(1)
        } else {
            usize::MAX
        };
        let mut snapshots = Vec::new();
        let (model, trace) = train_observed(model, &train, &tc, &mut |epoch, m| {
            if (epoch + 1) % every == 0 {
                snapshots.push((epoch + 1, m.clone()));
            }
            Ok(())
        })?;
        Ok(TrainedRun {
            model,
            trace,
            snapshots,
        })
    })
}

fn test_inputs(test: &MultimodalDataset, only: Option<usize>) -> Vec<Matrix> {
    match only {
        Some(i) => vec![test.modalities[i].clone()],
        None => test.modalities.clone(),
    }
}

fn diag_set(test: &MultimodalDataset, rows: usize) -> MultimodalDataset {
    let idx: Vec<usize> = (0..test.len().min(rows.max(1))).collect();
    test.subset(&idx)
}

fn weakest_and_strongest(ds: &MultimodalDataset) -> (usize, usize) {
    match ds.strength_order() {
        Some(o) => (o[0], *o.last().expect("non-empty")),
        None => (0, ds.num_modalities() - 1),
    }
}

fn probe_loss(
    encoder: &crate::neurocore::Mlp,
    train: &Matrix,
    train_y: &[usize],
    test: &Matrix,
    test_y: &[usize],
    classes: usize,
    seed: u64,
) -> Result<f64> {
    let mut s = RandomStream::new(seed).fork("probe-eval");
    let probe = LinearProbe::fit(&encoder.predict(train)?, train_y, classes, &ProbeConfig::default(), &mut s)?;
    probe.loss(&encoder.predict(test)?, test_y)
}

fn key<T: ToString>(v: T) -> Vec<String> {
    vec![v.to_string()]
}

const MODES: [TrainMode; 3] = [TrainMode::Vanilla, TrainMode::Kd, TrainMode::Ebr];

pub(crate) fn run_seed(id: ExperimentId, cfg: &RunConfig, seed: u64) -> Result<Vec<Series>> {
    match id {
        ExperimentId::Lemma1Collisions => lemma1(cfg, seed),
        ExperimentId::Lemma2Gradrank => lemma2(cfg, seed),
        ExperimentId::Fig3LossGap => fig3(cfg, seed),
        ExperimentId::Fig4RankBeta => fig4(cfg, seed),
        ExperimentId::Fig5Dynamics => fig5(cfg, seed),
        ExperimentId::Fig6Denoising => fig6(cfg, seed),
        ExperimentId::Tab5KdSequence => tab5(cfg, seed),
        ExperimentId::Tab6Substitution => tab6(cfg, seed),
        ExperimentId::Tab7Vif => tab7(cfg, seed),
        ExperimentId::Tab9Polysemanticity => tab9(cfg, seed),
        ExperimentId::Thm2AgopGap => thm2(cfg, seed),
        ExperimentId::Thm3KdGap => thm3(cfg, seed),
    }
}

fn lemma1(cfg: &RunConfig, seed: u64) -> Result<Vec<Series>> {
    let mut s = Series::new(
        "collisions",
        &["m"],
        &["bound", "empirical_fraction", "entanglement_ratio", "polysemantic_fraction"],
    );
    for &m in &cfg.m_values {
        let run = trained_run(cfg, &RunKey::new(cfg, m, TrainMode::Vanilla), seed)?;
        let data = desk_data(cfg, m, seed)?;
        let diag = diag_set(&data.1, cfg.diag_rows);
        let align = fusion_alignment(&run.model, &diag, 0)?;
        s.push(
            key(m),
            vec![
                Some(collision_bound(&run.model.encoding_dims())?),
                Some(align.collision_fraction(cfg.tau)),
                align.entanglement_ratio(cfg.tau).value,
                Some(align.polysemantic_rows(cfg.tau).len() as f64 / align.rows().max(1) as f64),
            ],
        );
    }
    Ok(vec![s])
}

fn lemma2(cfg: &RunConfig, seed: u64) -> Result<Vec<Series>> {
    let run = trained_run(cfg, &RunKey::new(cfg, cfg.m, TrainMode::Vanilla), seed)?;
    let data = desk_data(cfg, cfg.m, seed)?;
    let diag = diag_set(&data.1, cfg.diag_rows);
    let a = agop(&run.model, &diag, 0)?;
    let trace = gradient_rank_trace(&run.trace, Some(&a), cfg.rank_tol);
    let mut layers = Series::new("layer_ranks", &["layer"], &["first_epoch_rank", "final_epoch_rank"]);
    if let (Some(first), Some(last)) = (trace.ranks.first(), trace.ranks.last()) {
        for (l, name) in trace.layer_names.iter().enumerate() {
            layers.push(key(name), vec![Some(first[l] as f64), Some(last[l] as f64)]);
        }
    }
    let mut summary = Series::new(
        "summary",
        &[],
        &["non_increasing_fraction", "agop_rank", "fusion_rank_over_agop_rank"],
    );
    summary.push(
        vec![],
        vec![
            trace.non_increasing_fraction(),
            trace.agop_rank.map(|r| r as f64),
            trace.ratio,
        ],
    );
    let mut per_epoch = Series::new("fusion_rank", &["epoch"], &["rank"]);
    if let Some(i) = trace.layer_names.iter().position(|n| n == "fusion.0") {
        for (e, r) in trace.epochs.iter().zip(&trace.ranks) {
            per_epoch.push(key(e + 1), vec![Some(r[i] as f64)]);
        }
    }
    Ok(vec![layers, summary, per_epoch])
}

fn fig3(cfg: &RunConfig, seed: u64) -> Result<Vec<Series>> {
    let mut s = Series::new("loss_gap", &["m"], &["prefix_loss", "unimodal_loss", "gap"]);
    for &m in &cfg.m_values {
        let data = desk_data(cfg, m, seed)?;
        let (train, test) = (&data.0, &data.1);
        let (weak, _) = weakest_and_strongest(train);
        let run = trained_run(cfg, &RunKey::new(cfg, m, TrainMode::Vanilla), seed)?;
        let uni = trained_run(cfg, &RunKey::unimodal(cfg, m, weak), seed)?;
        let (xtr, xte) = (&train.modalities[weak], &test.modalities[weak]);
        let prefix = probe_loss(&run.model.encoders[weak], xtr, &train.labels, xte, &test.labels, cfg.num_classes, seed)?;
        let base = probe_loss(&uni.model.encoders[0], xtr, &train.labels, xte, &test.labels, cfg.num_classes, seed)?;
        s.push(key(m), vec![Some(prefix), Some(base), Some(prefix - base)]);
    }
    Ok(vec![s])
}

fn fused_test(model: &FusionModel, test: &MultimodalDataset, only: Option<usize>) -> Result<(Matrix, Matrix)> {
    model.fuse_predict(&test_inputs(test, only))
}

fn fig4(cfg: &RunConfig, seed: u64) -> Result<Vec<Series>> {
    let data = desk_data(cfg, cfg.m, seed)?;
    let test = &data.1;
    let (weak, strong) = weakest_and_strongest(&data.0);
    let uni = trained_run(cfg, &RunKey::unimodal(cfg, cfg.m, weak), seed)?;
    let uni_rank = effective_rank(&fused_test(&uni.model, test, Some(weak))?.0, cfg.rank_tol) as f64;
    let mut rank = Series::new("rank", &["beta"], &["vanilla", "kd", "ebr", "unimodal"]);
    let mut sim = Series::new(
        "similarity",
        &["beta"],
        &["vanilla_weak", "vanilla_strong", "kd_weak", "kd_strong", "ebr_weak", "ebr_strong"],
    );
    for &beta in &cfg.betas {
        let mut ranks = Vec::new();
        let mut sims = Vec::new();
        for mode in MODES {
            let k = RunKey {
                beta,
                ..RunKey::new(cfg, cfg.m, mode)
            };
            let run = trained_run(cfg, &k, seed)?;
            let (fused, _) = fused_test(&run.model, test, None)?;
            ranks.push(Some(effective_rank(&fused, cfg.rank_tol) as f64));
            let enc = run.model.encode(&test.modalities)?;
            sims.push(Some(linear_cka(&enc[weak], &fused).value));
            sims.push(Some(linear_cka(&enc[strong], &fused).value));
        }
        ranks.push(Some(uni_rank));
        rank.push(key(beta), ranks);
        sim.push(key(beta), sims);
    }
    Ok(vec![rank, sim])
}

fn fig5(cfg: &RunConfig, seed: u64) -> Result<Vec<Series>> {
    let data = desk_data(cfg, cfg.m, seed)?;
    let (weak, strong) = weakest_and_strongest(&data.0);
    let mut s = Series::new(
        "dynamics",
        &["mode", "epoch"],
        &["sem_loss", "md_loss", "fused_rank", "cka_weak", "cka_strong"],
    );
    for mode in MODES {
        let run = trained_run(cfg, &RunKey::new(cfg, cfg.m, mode), seed)?;
        for r in &run.trace.records {
            s.push(
                vec![mode.to_string(), (r.epoch + 1).to_string()],
                vec![
                    Some(r.sem_loss),
                    r.md_loss,
                    Some(r.fused_rank as f64),
                    r.cka.get(weak).copied(),
                    r.cka.get(strong).copied(),
                ],
            );
        }
    }
    Ok(vec![s])
}

fn test_metrics(model: &FusionModel, test: &MultimodalDataset) -> Result<(f64, f64)> {
    let (_, logits) = model.fuse_predict(&test.modalities)?;
    Ok((accuracy(&logits, &test.labels), macro_auc(&logits, &test.labels)))
}

fn fig6(cfg: &RunConfig, seed: u64) -> Result<Vec<Series>> {
    let data = desk_data(cfg, cfg.m, seed)?;
    let mut s = Series::new("accuracy", &["noise_rate"], &["vanilla", "kd", "ebr"]);
    for &noise_rate in &cfg.noise_rates {
        let mut row = Vec::new();
        for mode in MODES {
            let k = RunKey {
                noise_rate,
                ..RunKey::new(cfg, cfg.m, mode)
            };
            let run = trained_run(cfg, &k, seed)?;
            row.push(Some(test_metrics(&run.model, &data.1)?.0));
        }
        s.push(key(noise_rate), row);
    }
    Ok(vec![s])
}

fn tab5(cfg: &RunConfig, seed: u64) -> Result<Vec<Series>> {
    let data = desk_data(cfg, cfg.m, seed)?;
    let mut s = Series::new("kd_sequence", &["sequence"], &["accuracy", "auc"]);
    for &kd_sequence in &cfg.kd_sequences {
        let k = RunKey {
            kd_sequence,
            ..RunKey::new(cfg, cfg.m, TrainMode::Kd)
        };
        let run = trained_run(cfg, &k, seed)?;
        let (acc, auc) = test_metrics(&run.model, &data.1)?;
        s.push(key(kd_sequence), vec![Some(acc), Some(auc)]);
    }
    Ok(vec![s])
}

/// Policies of the substitution table, in display order.
pub(crate) fn table_policies() -> Vec<SubstitutionPolicy> {
    let mut out: Vec<SubstitutionPolicy> = PolicyKind::ALL.into_iter().map(SubstitutionPolicy::new).collect();
    out.insert(
        5,
        SubstitutionPolicy {
            kind: PolicyKind::TrainAverage,
            class_conditional: true,
        },
    );
    out
}

fn tab6(cfg: &RunConfig, seed: u64) -> Result<Vec<Series>> {
    let data = desk_data(cfg, cfg.m, seed)?;
    let run = trained_run(cfg, &RunKey::new(cfg, cfg.m, TrainMode::Ebr), seed)?;
    let ctx = SubstitutionContext::fit(&run.model, &data.0, None, seed)?;
    let mut per_rate = Series::new("per_rate", &["policy", "rate"], &["accuracy", "auc"]);
    let mut summary = Series::new(
        "summary",
        &["policy"],
        &["accuracy_mean", "accuracy_std", "auc_mean", "auc_std"],
    );
    for policy in table_policies() {
        let rep = evaluate_missingness(&run.model, &data.1, &ctx, &cfg.missing_rates, policy)?;
        for r in &rep.per_rate {
            per_rate.push(
                vec![rep.policy.clone(), r.rate.to_string()],
                vec![Some(r.accuracy), Some(r.auc)],
            );
        }
        summary.push(
            key(&rep.policy),
            vec![
                Some(rep.accuracy_mean),
                Some(rep.accuracy_std),
                Some(rep.auc_mean),
                Some(rep.auc_std),
            ],
        );
    }
    Ok(vec![per_rate, summary])
}

fn tab7(cfg: &RunConfig, seed: u64) -> Result<Vec<Series>> {
    let mut s = Series::new("vif", &["mode", "m"], &["vif"]);
    let m_max = *cfg.m_values.iter().max().expect("validated non-empty");
    for mode in MODES {
        for &m in &cfg.m_values {
            if mode != TrainMode::Vanilla && m != m_max {
                continue;
            }
            let data = desk_data(cfg, m, seed)?;
            let run = trained_run(cfg, &RunKey::new(cfg, m, mode), seed)?;
            let (fused, _) = fused_test(&run.model, &data.1, None)?;
            s.push(vec![mode.to_string(), m.to_string()], vec![Some(vif_mean(&fused)?)]);
        }
    }
    Ok(vec![s])
}

fn tab9(cfg: &RunConfig, seed: u64) -> Result<Vec<Series>> {
    let data = desk_data(cfg, cfg.m, seed)?;
    let diag = diag_set(&data.1, cfg.diag_rows);
    let unimodal = (0..cfg.m)
        .map(|i| Ok(trained_run(cfg, &RunKey::unimodal(cfg, cfg.m, i), seed)?.model.clone()))
        .collect::<Result<Vec<_>>>()?;
    let refs = reference_rows(&unimodal, &diag)?;
    let mut s = Series::new("probe_ce", &["mode"], &["cross_entropy"]);
    for mode in MODES {
        let run = trained_run(cfg, &RunKey::new(cfg, cfg.m, mode), seed)?;
        let rows = fusion_rows(&run.model, &diag)?;
        let stream = RandomStream::new(seed).fork("modality-probe");
        let ce = modality_probe_ce(&refs, &rows, &ModalityProbeConfig::default(), &stream)?;
        s.push(key(mode), vec![Some(ce)]);
    }
    Ok(vec![s])
}

/// Mean AGOP gap and bound over probes selected by `keep(members, γ)`.
struct GapSummary {
    gap: Option<f64>,
    bound: Option<f64>,
    count: usize,
}

fn probe_gaps(
    model: &FusionModel,
    diag: &MultimodalDataset,
    epoch: usize,
    tau: f64,
    groups: &[&dyn Fn(&[usize], f64) -> bool],
) -> Result<Vec<GapSummary>> {
    let maps = layer_maps(model, diag, 0)?;
    let a = agop(model, diag, 0)?;
    let probes = ledger_probes(&maps, diag.ledger_features()?, tau)?;
    let mut out = Vec::with_capacity(groups.len());
    for keep in groups {
        let mut gaps = Vec::new();
        let mut bounds = Vec::new();
        for (p, g) in &probes {
            if keep(&p.members, *g) {
                let r = agop_gap(p, &a, *g, epoch)?;
                gaps.push(r.gap);
                bounds.extend(r.bound);
            }
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        out.push(GapSummary {
            gap: mean(&gaps),
            bound: mean(&bounds),
            count: gaps.len(),
        });
    }
    Ok(out)
}

fn thm2(cfg: &RunConfig, seed: u64) -> Result<Vec<Series>> {
    let data = desk_data(cfg, cfg.m, seed)?;
    let diag = diag_set(&data.1, cfg.diag_rows);
    let k = RunKey {
        snapshots: true,
        ..RunKey::new(cfg, cfg.m, TrainMode::Vanilla)
    };
    let run = trained_run(cfg, &k, seed)?;
    let mono = |_: &[usize], g: f64| (g - 1.0).abs() < 1e-9;
    let poly = |_: &[usize], g: f64| g >= 2.0;
    let mut s = Series::new(
        "gap",
        &["epoch"],
        &["gap_gamma1", "gap_gamma2plus", "bound_gamma1", "bound_gamma2plus", "count_gamma1", "count_gamma2plus"],
    );
    for (epoch, model) in &run.snapshots {
        let r = probe_gaps(model, &diag, *epoch, cfg.tau, &[&mono, &poly])?;
        s.push(
            key(epoch),
            vec![
                r[0].gap,
                r[1].gap,
                r[0].bound,
                r[1].bound,
                Some(r[0].count as f64),
                Some(r[1].count as f64),
            ],
        );
    }
    Ok(vec![s])
}

fn thm3(cfg: &RunConfig, seed: u64) -> Result<Vec<Series>> {
    let data = desk_data(cfg, cfg.m, seed)?;
    let diag = diag_set(&data.1, cfg.diag_rows);
    let cross = |members: &[usize], _: f64| members.len() == 2;
    let runs = [TrainMode::Vanilla, TrainMode::Kd]
        .into_iter()
        .map(|mode| {
            trained_run(
                cfg,
                &RunKey {
                    snapshots: true,
                    ..RunKey::new(cfg, cfg.m, mode)
                },
                seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut s = Series::new("gap", &["epoch"], &["vanilla", "kd", "kd_minus_vanilla"]);
    for ((epoch, van), (_, kd)) in runs[0].snapshots.iter().zip(&runs[1].snapshots) {
        let v = probe_gaps(van, &diag, *epoch, cfg.tau, &[&cross])?[0].gap;
        let k = probe_gaps(kd, &diag, *epoch, cfg.tau, &[&cross])?[0].gap;
        let diff = v.zip(k).map(|(v, k)| k - v);
        s.push(key(epoch), vec![v, k, diff]);
    }
    Ok(vec![s])
}
