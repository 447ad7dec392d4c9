//! Trains a vanilla model and prints its collapse diagnostics: collision
//! bound and empirical collision fraction, AGOP ranks and probe gaps,
//! entanglement ratio, CKA, VIF and the weight-space modality probe.
//!
//! `cargo run --release --example diagnose_model`

use collapse_lab::diagnostics::{diagnose, reference_rows, DiagnoseOptions};
use collapse_lab::harness::{desk_data, trained_run, RunConfig, RunKey};
use collapse_lab::trainers::TrainMode;

fn main() -> collapse_lab::Result<()> {
    let cfg = RunConfig {
        n_train: 1500,
        epochs: 40,
        lr_decay_every: 20,
        ..RunConfig::default()
    };
    let seed = 11;
    let m = 3;
    let run = trained_run(&cfg, &RunKey::new(&cfg, m, TrainMode::Vanilla), seed)?;
    let data = desk_data(&cfg, m, seed)?;
    let rows: Vec<usize> = (0..cfg.diag_rows.min(data.1.len())).collect();
    let diag = data.1.subset(&rows);

    let unimodal = (0..m)
        .map(|i| trained_run(&cfg, &RunKey::unimodal(&cfg, m, i), seed).map(|r| r.model.clone()))
        .collect::<collapse_lab::Result<Vec<_>>>()?;
    let refs = reference_rows(&unimodal, &diag)?;

    let opts = DiagnoseOptions {
        epoch: cfg.epochs,
        rank_tol: cfg.rank_tol,
        ..DiagnoseOptions::default()
    };
    let r = diagnose(&run.model, &diag, Some(&refs), &opts)?;
    println!("collision bound          {:.4}", r.collision_bound);
    println!("collision fraction       {:.4}", r.empirical_collision_fraction);
    println!("agop rank per layer      {:?}", r.agop_rank);
    println!("interference score       {:?}", r.interference_score);
    println!("entanglement ratio       {:?} over {} rows", r.entanglement_ratio.value, r.entanglement_ratio.rows);
    println!("cka per modality         {:?}", r.cka);
    println!("vif mean                 {:.3}", r.vif_mean);
    println!("modality probe CE        {:?}", r.modality_probe_ce);
    for p in r.probes.iter().take(8) {
        println!("  probe {:?}: gamma {:.2} gap {:.4} bound {:?}", p.members, p.gamma, p.gap, p.bound);
    }
    Ok(())
}
