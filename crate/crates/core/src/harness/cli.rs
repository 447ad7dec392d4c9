use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::{format_number, run_cached, trained_run, desk_data, ExperimentId, ExperimentSpec, RunConfig, RunKey};
use crate::diagnostics::{diagnose, DiagnoseOptions};
use crate::substitution::{evaluate_missingness, SubstitutionContext};
use crate::synthgen::write_csv;
use crate::trainers::{checkpoint, restore, KdSequence, TrainMode};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "collapse-lab", version, about = "Multimodal collapse experiments on synthetic data")]
struct Cli {
    /// Flat `key = value` config file; explicit flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated seed list for `run`.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    mode: Option<String>,
    #[arg(long = "kd-sequence", global = true)]
    kd_sequence: Option<String>,
    #[arg(long = "noise-rate", global = true)]
    noise_rate: Option<f64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "results")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run registered experiments (or `all`) across seeds and write their bundles.
    Run {
        #[arg(required = true)]
        experiments: Vec<String>,
    },
    /// List registered experiment ids.
    List,
    /// Train one model and write a checkpoint plus test metrics.
    Train,
    /// Diagnose a checkpoint against regenerated data.
    Diagnose {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Masked evaluation of a checkpoint under every substitution policy.
    Substitute {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write the desk dataset as CSV.
    GenData,
}

/// Runs the CLI on `args` (including the program name) and returns the exit
/// code: 0 on success, 2 on usage errors, 1 on runtime failures.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e @ (Error::Usage(_) | Error::Config(_))) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = cli.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = cli.beta {
        cfg.beta = v;
    }
    if let Some(v) = &cli.mode {
        cfg.mode = v.parse::<TrainMode>()?;
    }
    if let Some(v) = &cli.kd_sequence {
        cfg.kd_sequence = v.parse::<KdSequence>()?;
    }
    if let Some(v) = cli.noise_rate {
        cfg.noise_rate = v;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seeds(cli: &Cli) -> Vec<u64> {
    match (&cli.seeds, cli.seed) {
        (Some(s), _) => s.clone(),
        (None, Some(s)) => vec![s],
        (None, None) => (1..=5).collect(),
    }
}

fn default_checkpoint(out: &Path) -> PathBuf {
    out.join("train").join("model.ckpt")
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    let seed = cli.seed.unwrap_or(1);
    match &cli.command {
        Command::List => {
            for id in ExperimentId::ALL {
                println!("{:<22}{}", id.as_str(), id.description());
            }
        }
        Command::Run { experiments } => {
            let ids: Vec<ExperimentId> = if experiments.iter().any(|e| e == "all") {
                ExperimentId::ALL.to_vec()
            } else {
                experiments.iter().map(|e| e.parse()).collect::<Result<_>>()?
            };
            for id in ids {
                let spec = ExperimentSpec::new(id, seeds(&cli), cfg.clone());
                let (bundle, hit) = run_cached(&spec, &cli.out)?;
                if !bundle.complete {
                    return Err(Error::state(format!(
                        "{id} incomplete: {}",
                        bundle.failure.unwrap_or_default()
                    )));
                }
                println!(
                    "{id}: {} ({}config {})",
                    cli.out.join(id.as_str()).display(),
                    if hit { "cached, " } else { "" },
                    &bundle.provenance.config_hash[..12]
                );
            }
        }
        Command::Train => {
            let run = trained_run(&cfg, &RunKey::new(&cfg, cfg.m, cfg.mode), seed)?;
            let data = desk_data(&cfg, cfg.m, seed)?;
            let (_, logits) = run.model.fuse_predict(&data.1.modalities)?;
            let acc = crate::probe::accuracy(&logits, &data.1.labels);
            let auc = crate::substitution::macro_auc(&logits, &data.1.labels);
            let dir = cli.out.join("train");
            fs::create_dir_all(&dir)?;
            checkpoint(&run.model, &run.trace, &default_checkpoint(&cli.out))?;
            let metrics = serde_json::json!({
                "mode": cfg.mode.as_str(),
                "seed": seed,
                "modalities": cfg.m,
                "test_accuracy": acc,
                "test_auc": auc,
                "final_sem_loss": run.trace.final_sem_loss(),
            });
            fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&metrics)? + "\n")?;
            println!("trained {} (m={}, seed {seed}): test accuracy {acc:.4}, auc {auc:.4}", cfg.mode, cfg.m);
        }
        Command::Diagnose { checkpoint: path } => {
            let path = path.clone().unwrap_or_else(|| default_checkpoint(&cli.out));
            let (model, _) = restore(&path)?;
            let data = desk_data(&cfg, model.num_modalities(), seed)?;
            let rows: Vec<usize> = (0..data.1.len().min(cfg.diag_rows)).collect();
            let diag = data.1.subset(&rows);
            let opts = DiagnoseOptions {
                tau: cfg.tau,
                epoch: cfg.epochs,
                rank_tol: cfg.rank_tol,
                ..DiagnoseOptions::default()
            };
            let report = diagnose(&model, &diag, None, &opts)?;
            let dir = cli.out.join("diagnose");
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
            println!("collision bound      {:.4}", report.collision_bound);
            println!("collision fraction   {:.4}", report.empirical_collision_fraction);
            println!("agop rank            {:?}", report.agop_rank);
            println!("vif mean             {:.4}", report.vif_mean);
            println!("entanglement ratio   {:?}", report.entanglement_ratio.value);
            println!("cka per modality     {:?}", report.cka);
        }
        Command::Substitute { checkpoint: path } => {
            let path = path.clone().unwrap_or_else(|| default_checkpoint(&cli.out));
            let (model, _) = restore(&path)?;
            let data = desk_data(&cfg, model.num_modalities(), seed)?;
            let ctx = SubstitutionContext::fit(&model, &data.0, None, seed)?;
            let dir = cli.out.join("substitute");
            fs::create_dir_all(&dir)?;
            let mut w = csv::Writer::from_path(dir.join("missingness.csv"))?;
            w.write_record(["rate", "policy", "accuracy", "auc"])?;
            for policy in super::experiments::table_policies() {
                if policy.kind == crate::substitution::PolicyKind::EbrRanked && ctx.ranking.is_none() {
                    continue;
                }
                let rep = evaluate_missingness(&model, &data.1, &ctx, &cfg.missing_rates, policy)?;
                for (rate, name, acc, auc) in rep.csv_rows() {
                    w.write_record([
                        format_number(Some(rate)),
                        name,
                        format_number(Some(acc)),
                        format_number(Some(auc)),
                    ])?;
                }
                println!(
                    "{:<18} accuracy {:.4} ± {:.4}  auc {:.4} ± {:.4}",
                    rep.policy, rep.accuracy_mean, rep.accuracy_std, rep.auc_mean, rep.auc_std
                );
            }
            w.flush()?;
        }
        Command::GenData => {
            let data = desk_data(&cfg, cfg.m, seed)?;
            let dir = cli.out.join("data");
            let train = write_csv(&data.0, &dir.join("train"), "label")?;
            let test = write_csv(&data.1, &dir.join("test"), "label")?;
            for p in train.iter().chain(&test) {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
