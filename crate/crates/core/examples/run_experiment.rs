//! Runs one registered experiment across seeds through the harness, writes
//! its CSV and JSON bundle, and shows that a second call is served from the
//! on-disk cache.
//!
//! `cargo run --release --example run_experiment -- [experiment_id] [out_dir]`

use std::path::PathBuf;

use collapse_lab::harness::{run_cached, ExperimentId, ExperimentSpec, RunConfig};

fn main() -> collapse_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let id: ExperimentId = args.next().as_deref().unwrap_or("tab9_polysemanticity").parse()?;
    let out = PathBuf::from(args.next().unwrap_or_else(|| "results-example".into()));
    let cfg: RunConfig = "n_train = 1000\nepochs = 30\nlr_decay_every = 15\nkd_epochs = 10\nteacher_epochs = 10"
        .parse()?;
    let spec = ExperimentSpec::new(id, vec![1, 2], cfg);

    let (bundle, hit) = run_cached(&spec, &out)?;
    println!("{id}: hash {} (cache hit: {hit})", &bundle.provenance.config_hash[..12]);
    for s in &bundle.aggregated {
        println!("series {} ({} rows)", s.name, s.rows.len());
        println!("  {}", s.header().join(", "));
        for r in s.rows.iter().take(5) {
            let vals: Vec<String> = r.values.iter().map(|v| v.map_or("-".into(), |x| format!("{x:.4}"))).collect();
            println!("  {} | {}", r.key.join(", "), vals.join(", "));
        }
    }
    let (_, hit) = run_cached(&spec, &out)?;
    println!("second call cache hit: {hit}; files under {}", out.join(id.as_str()).display());
    Ok(())
}
