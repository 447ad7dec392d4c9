//! Experiment registry, runner and result persistence.
//!
//! Every experiment runs once per seed and yields named [`Series`] of rows.
//! A [`ResultBundle`] keeps the per-seed records, their mean and sample std
//! across seeds, and the provenance needed to rerun it. Bundles are cached on
//! disk by config hash and emitted as CSV plus JSON.

mod config;
mod experiments;

pub mod cli;

pub use config::{sha256_hex, RunConfig};
pub use experiments::{clear_model_cache, desk_data, trained_run, RunKey, TrainedRun};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::substitution::mean_std;
use crate::{Error, Result};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    Fig3LossGap,
    Fig4RankBeta,
    Fig5Dynamics,
    Fig6Denoising,
    Tab5KdSequence,
    Tab6Substitution,
    Tab7Vif,
    Tab9Polysemanticity,
    Lemma1Collisions,
    Lemma2Gradrank,
    Thm2AgopGap,
    Thm3KdGap,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 12] = [
        ExperimentId::Fig3LossGap,
        ExperimentId::Fig4RankBeta,
        ExperimentId::Fig5Dynamics,
        ExperimentId::Fig6Denoising,
        ExperimentId::Tab5KdSequence,
        ExperimentId::Tab6Substitution,
        ExperimentId::Tab7Vif,
        ExperimentId::Tab9Polysemanticity,
        ExperimentId::Lemma1Collisions,
        ExperimentId::Lemma2Gradrank,
        ExperimentId::Thm2AgopGap,
        ExperimentId::Thm3KdGap,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::Fig3LossGap => "fig3_loss_gap",
            ExperimentId::Fig4RankBeta => "fig4_rank_beta",
            ExperimentId::Fig5Dynamics => "fig5_dynamics",
            ExperimentId::Fig6Denoising => "fig6_denoising",
            ExperimentId::Tab5KdSequence => "tab5_kd_sequence",
            ExperimentId::Tab6Substitution => "tab6_substitution",
            ExperimentId::Tab7Vif => "tab7_vif",
            ExperimentId::Tab9Polysemanticity => "tab9_polysemanticity",
            ExperimentId::Lemma1Collisions => "lemma1_collisions",
            ExperimentId::Lemma2Gradrank => "lemma2_gradrank",
            ExperimentId::Thm2AgopGap => "thm2_agop_gap",
            ExperimentId::Thm3KdGap => "thm3_kd_gap",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            ExperimentId::Fig3LossGap => "weak-modality probe loss: multimodal prefix vs unimodal baseline, per m",
            ExperimentId::Fig4RankBeta => "fused-representation rank and similarity vs beta for vanilla/kd/ebr",
            ExperimentId::Fig5Dynamics => "per-epoch loss, rank and similarity for vanilla/kd/ebr",
            ExperimentId::Fig6Denoising => "test accuracy vs training noise rate on the weakest modality",
            ExperimentId::Tab5KdSequence => "final accuracy per distillation sequence",
            ExperimentId::Tab6Substitution => "masked-evaluation accuracy and AUC per substitution policy",
            ExperimentId::Tab7Vif => "fused-representation VIF per m and training mode",
            ExperimentId::Tab9Polysemanticity => "weight-space modality classifier cross-entropy per mode",
            ExperimentId::Lemma1Collisions => "collision bound and empirical collision fraction per m",
            ExperimentId::Lemma2Gradrank => "accumulated-gradient rank at first and last epoch per layer",
            ExperimentId::Thm2AgopGap => "AGOP gap of monosemantic vs polysemantic probes over epochs",
            ExperimentId::Thm3KdGap => "AGOP gap of cross-modal probes under kd vs vanilla over epochs",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentId::ALL
            .into_iter()
            .find(|e| e.as_str() == s.trim())
            .ok_or_else(|| Error::Usage(format!("unknown experiment id {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub id: ExperimentId,
    pub seeds: Vec<u64>,
    pub config: RunConfig,
}

impl ExperimentSpec {
    pub fn new(id: ExperimentId, seeds: Vec<u64>, config: RunConfig) -> Self {
        Self { id, seeds, config }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seed list is empty"));
        }
        self.config.validate()
    }

    pub fn canonical_text(&self) -> String {
        format!(
            "experiment = {}\nseeds = {}\ncode_version = {CODE_VERSION}\n{}",
            self.id,
            join_seeds(&self.seeds),
            self.config.to_text()
        )
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(&self.canonical_text())
    }
}

fn join_seeds(seeds: &[u64]) -> String {
    seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub key: Vec<String>,
    /// `None` for values that are undefined for this row.
    pub values: Vec<Option<f64>>,
}

/// A table with string key columns and numeric value columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub key_columns: Vec<String>,
    pub value_columns: Vec<String>,
    pub rows: Vec<Row>,
}

impl Series {
    pub fn new(name: &str, keys: &[&str], values: &[&str]) -> Self {
        Self {
            name: name.into(),
            key_columns: keys.iter().map(|s| s.to_string()).collect(),
            value_columns: values.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, key: Vec<String>, values: Vec<Option<f64>>) {
        debug_assert_eq!(key.len(), self.key_columns.len());
        debug_assert_eq!(values.len(), self.value_columns.len());
        let values = values
            .into_iter()
            .map(|v| v.filter(|x| x.is_finite()))
            .collect();
        self.rows.push(Row { key, values });
    }

    pub fn header(&self) -> Vec<String> {
        self.key_columns
            .iter()
            .chain(&self.value_columns)
            .cloned()
            .collect()
    }

    pub fn find(&self, key: &[&str]) -> Option<&Row> {
        self.rows
            .iter()
            .find(|r| r.key.iter().map(String::as_str).eq(key.iter().copied()))
    }

    pub fn value(&self, key: &[&str], column: &str) -> Option<f64> {
        let c = self.value_columns.iter().position(|v| v == column)?;
        self.find(key)?.values[c]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub series: Vec<Series>,
}

impl SeedRecord {
    pub fn series(&self, name: &str) -> Option<&Series> {
        self.series.iter().find(|s| s.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub experiment: ExperimentId,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub code_version: String,
    pub config: std::collections::BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultBundle {
    pub experiment: ExperimentId,
    pub complete: bool,
    pub failure: Option<String>,
    pub records: Vec<SeedRecord>,
    /// Per series: every value column `v` becomes `v_mean` and `v_std`.
    pub aggregated: Vec<Series>,
    pub provenance: Provenance,
}

impl ResultBundle {
    pub fn aggregated(&self, name: &str) -> Option<&Series> {
        self.aggregated.iter().find(|s| s.name == name)
    }

    /// Mean across seeds of `column` in the row with `key` of series `name`.
    pub fn mean(&self, name: &str, key: &[&str], column: &str) -> Option<f64> {
        self.aggregated(name)?.value(key, &format!("{column}_mean"))
    }

    /// Per-seed values of one cell.
    pub fn per_seed(&self, name: &str, key: &[&str], column: &str) -> Vec<Option<f64>> {
        self.records
            .iter()
            .map(|r| r.series(name).and_then(|s| s.value(key, column)))
            .collect()
    }
}

/// Mean and sample std across seeds for every cell, keeping first-seen order
/// of series and keys. Missing cells are skipped; a cell with no values is `None`.
pub fn aggregate(records: &[SeedRecord]) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for rec in records {
        for s in &rec.series {
            if out.iter().any(|o| o.name == s.name) {
                continue;
            }
            let mut values = Vec::new();
            for v in &s.value_columns {
                values.push(format!("{v}_mean"));
                values.push(format!("{v}_std"));
            }
            out.push(Series {
                name: s.name.clone(),
                key_columns: s.key_columns.clone(),
                value_columns: values,
                rows: Vec::new(),
            });
        }
    }
    for agg in &mut out {
        let mut keys: Vec<Vec<String>> = Vec::new();
        for rec in records {
            if let Some(s) = rec.series(&agg.name) {
                for r in &s.rows {
                    if !keys.contains(&r.key) {
                        keys.push(r.key.clone());
                    }
                }
            }
        }
        let width = agg.value_columns.len() / 2;
        for key in keys {
            let mut values = Vec::with_capacity(width * 2);
            for c in 0..width {
                let cell: Vec<f64> = records
                    .iter()
                    .filter_map(|rec| rec.series(&agg.name))
                    .filter_map(|s| s.rows.iter().find(|r| r.key == key))
                    .filter_map(|r| r.values.get(c).copied().flatten())
                    .collect();
                if cell.is_empty() {
                    values.extend([None, None]);
                } else {
                    let (m, s) = mean_std(&cell);
                    values.extend([Some(m), Some(s)]);
                }
            }
            agg.rows.push(Row { key, values });
        }
    }
    out
}

/// Runs `spec` for every seed. A failing seed stops the run and yields a
/// bundle flagged incomplete that carries the records finished so far.
pub fn run(spec: &ExperimentSpec) -> Result<ResultBundle> {
    spec.validate()?;
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .max(1);
    let mut records = Vec::with_capacity(spec.seeds.len());
    let mut failure = None;
    'outer: for chunk in spec.seeds.chunks(threads) {
        let results: Vec<Result<Vec<Series>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&seed| scope.spawn(move || experiments::run_seed(spec.id, &spec.config, seed)))
                .collect();
            handles
                .into_iter()
                .map(|h| {
                    h.join()
                        .unwrap_or_else(|_| Err(Error::state("experiment thread panicked")))
                })
                .collect()
        });
        for (&seed, r) in chunk.iter().zip(results) {
            match r {
                Ok(series) => records.push(SeedRecord { seed, series }),
                Err(e) => {
                    failure = Some(format!("seed {seed}: {e}"));
                    break 'outer;
                }
            }
        }
    }
    let aggregated = aggregate(&records);
    Ok(ResultBundle {
        experiment: spec.id,
        complete: failure.is_none(),
        failure,
        records,
        aggregated,
        provenance: Provenance {
            experiment: spec.id,
            config_hash: spec.config_hash(),
            seeds: spec.seeds.clone(),
            code_version: CODE_VERSION.into(),
            config: spec.config.to_map(),
        },
    })
}

/// Returns the bundle stored under `out` when its config hash matches and it
/// is complete; otherwise runs `spec` and emits the result when complete.
/// The flag is `true` on a cache hit.
pub fn run_cached(spec: &ExperimentSpec, out: &Path) -> Result<(ResultBundle, bool)> {
    let path = out.join(spec.id.as_str()).join("bundle.json");
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(b) = serde_json::from_str::<ResultBundle>(&text) {
            if b.complete && b.provenance.config_hash == spec.config_hash() {
                return Ok((b, true));
            }
        }
    }
    let bundle = run(spec)?;
    if bundle.complete {
        emit(&bundle, out, &[Format::Csv, Format::Json])?;
    }
    Ok((bundle, false))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

/// Round-trippable 17-significant-digit rendering; empty for missing values.
pub fn format_number(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.16e}"),
        None => String::new(),
    }
}

/// Writes `<out>/<id>/<series>.csv` for every aggregated series (CSV),
/// `<out>/<id>/bundle.json` (JSON) and always `<out>/<id>/provenance.json`.
/// CSV files start with `#` lines carrying the config hash and seeds.
pub fn emit(bundle: &ResultBundle, out: &Path, formats: &[Format]) -> Result<Vec<PathBuf>> {
    if !bundle.complete {
        return Err(Error::state(format!(
            "refusing to emit incomplete bundle for {}: {}",
            bundle.experiment,
            bundle.failure.as_deref().unwrap_or("unknown failure")
        )));
    }
    let dir = out.join(bundle.experiment.as_str());
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    if formats.contains(&Format::Csv) {
        for s in &bundle.aggregated {
            let path = dir.join(format!("{}.csv", s.name));
            fs::write(&path, series_csv(s, &bundle.provenance)?)?;
            written.push(path);
        }
    }
    if formats.contains(&Format::Json) {
        let path = dir.join("bundle.json");
        fs::write(&path, serde_json::to_string_pretty(bundle)? + "\n")?;
        written.push(path);
    }
    let path = dir.join("provenance.json");
    fs::write(&path, serde_json::to_string_pretty(&bundle.provenance)? + "\n")?;
    written.push(path);
    Ok(written)
}

fn series_csv(s: &Series, prov: &Provenance) -> Result<String> {
    let mut text = format!(
        "# experiment = {}\n# config_hash = {}\n# seeds = {}\n",
        prov.experiment,
        prov.config_hash,
        join_seeds(&prov.seeds)
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(s.header())?;
    for r in &s.rows {
        let fields: Vec<String> = r
            .key
            .iter()
            .cloned()
            .chain(r.values.iter().map(|v| format_number(*v)))
            .collect();
        w.write_record(&fields)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::state(format!("csv buffer: {e}")))?;
    text.push_str(&String::from_utf8(bytes).map_err(|e| Error::state(e.to_string()))?);
    Ok(text)
}

/// Parses a series CSV written by [`emit`] given its key column count.
pub fn read_series_csv(name: &str, text: &str, key_columns: usize) -> Result<Series> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.len() < key_columns {
        return Err(Error::input("CSV has fewer columns than keys"));
    }
    let mut s = Series {
        name: name.into(),
        key_columns: header[..key_columns].to_vec(),
        value_columns: header[key_columns..].to_vec(),
        rows: Vec::new(),
    };
    for rec in r.records() {
        let rec = rec?;
        let key = rec.iter().take(key_columns).map(str::to_string).collect();
        let values = rec
            .iter()
            .skip(key_columns)
            .map(|f| {
                if f.is_empty() {
                    Ok(None)
                } else {
                    f.parse::<f64>()
                        .map(Some)
                        .map_err(|_| Error::input(format!("bad number {f:?}")))
                }
            })
            .collect::<Result<_>>()?;
        s.rows.push(Row { key, values });
    }
    Ok(s)
}
