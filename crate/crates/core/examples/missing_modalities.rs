//! Masks modalities at test time and compares every substitution policy,
//! including the ranking learned by basis reallocation.
//!
//! `cargo run --release --example missing_modalities`

use collapse_lab::harness::{desk_data, trained_run, RunConfig, RunKey};
use collapse_lab::substitution::{
    evaluate_missingness, PolicyKind, SubstitutionContext, SubstitutionPolicy, STANDARD_RATES,
};
use collapse_lab::trainers::TrainMode;

fn main() -> collapse_lab::Result<()> {
    let cfg = RunConfig {
        n_train: 1500,
        epochs: 40,
        lr_decay_every: 20,
        ..RunConfig::default()
    };
    let seed = 5;
    let run = trained_run(&cfg, &RunKey::new(&cfg, cfg.m, TrainMode::Ebr), seed)?;
    let (train, test) = &*desk_data(&cfg, cfg.m, seed)?;
    let ctx = SubstitutionContext::fit(&run.model, train, None, seed)?;
    if let Some(rank) = &ctx.ranking {
        println!("modality ranking: {rank:?}");
    }
    for kind in PolicyKind::ALL {
        let rep = evaluate_missingness(&run.model, test, &ctx, &STANDARD_RATES, SubstitutionPolicy::new(kind))?;
        let per_rate: Vec<String> = rep.per_rate.iter().map(|r| format!("{:.2}", r.accuracy)).collect();
        println!(
            "{:<18} mean acc {:.3} ± {:.3}   per rate {}",
            rep.policy,
            rep.accuracy_mean,
            rep.accuracy_std,
            per_rate.join(" ")
        );
    }
    Ok(())
}
