//! Run configuration and the batch commands behind the `dirnas` binary.
//!
//! Every artifact a command writes carries the resolved [`RunConfig`] and
//! the crate version. Randomness comes only from seeds in the config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bench::{build_oracle, gen_dataset, run_seed, train_discrete, DatasetSpec, OracleTable, ToyDataset, TrainBudget};
use crate::diagnostics::{
    dominant_eigenvalue, epoch_hook, exploration_band, hessian_trace, laplace_bound_check, oracle_scorer, state_mu,
    state_objective, write_csv, write_diagnostics_csv, DiagConfig,
};
use crate::dirichlet::DistanceKind;
use crate::engine::{init_state, resume_search, EpochHook, LogRecord, SearchConfig, TrainState};
use crate::error::{ensure, Error, Result};
use crate::progressive::StageSpec;
use crate::space::{CellSpec, Genotype};
use crate::{Rng, VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub budget: TrainBudget,
    pub r_seeds: usize,
    pub seed: u64,
    /// Existing table used for ranking, bands and `eval` comparisons.
    pub table: Option<PathBuf>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { budget: TrainBudget::default(), r_seeds: 3, seed: 0, table: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Run the instruments after every search epoch.
    pub per_epoch: bool,
    pub instruments: DiagConfig,
    /// Monte-Carlo draws for the bound check in `diagnose`.
    pub bound_mc: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { per_epoch: false, instruments: DiagConfig::default(), bound_mc: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub space: String,
    pub out: PathBuf,
    pub workers: usize,
    pub dataset: DatasetSpec,
    pub search: SearchConfig,
    pub oracle: OracleConfig,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            space: "micro".into(),
            out: PathBuf::from("runs/default"),
            workers: 1,
            dataset: DatasetSpec::default(),
            search: SearchConfig::default(),
            oracle: OracleConfig::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

/// Command-line values that win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub stage_schedule: Option<String>,
    pub lambda: Option<f64>,
    pub distance: Option<DistanceKind>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` (or starts from defaults), applies `overrides` and validates.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        if let Some(s) = overrides.seed {
            cfg.search.seed = s;
        }
        if let Some(o) = &overrides.out {
            cfg.out = o.clone();
        }
        if let Some(w) = overrides.workers {
            cfg.workers = w;
        }
        if let Some(s) = &overrides.stage_schedule {
            cfg.search.schedule = StageSpec::parse_schedule(s)?;
        }
        if let Some(l) = overrides.lambda {
            cfg.search.lambda = l;
        }
        if let Some(d) = overrides.distance {
            cfg.search.distance = d;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn cell_spec(&self) -> Result<CellSpec> {
        CellSpec::by_name(&self.space)
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.cell_spec()?;
        self.search.validate(&spec)?;
        ensure!(self.workers >= 1, Config, "workers must be at least 1");
        let d = &self.dataset;
        ensure!(d.n >= 64, Config, "dataset needs at least 64 points");
        ensure!(d.noise.is_finite() && d.noise >= 0.0, Config, "dataset noise must be non-negative");
        ensure!(
            d.n * 2 / 5 >= self.search.batch_size,
            Config,
            "each dataset split needs at least one batch of {}",
            self.search.batch_size
        );
        let b = &self.oracle.budget;
        ensure!(b.steps >= 1 && b.batch_size >= 1 && b.channels >= 1 && b.n_cells >= 1, Config, "oracle budget sizes must be positive");
        ensure!(b.lr.is_finite() && b.lr > 0.0, Config, "oracle lr must be positive");
        ensure!(self.oracle.r_seeds >= 1, Config, "oracle needs at least one seed per genotype");
        let i = &self.diagnostics.instruments;
        ensure!(i.trace_probes == 0 || i.trace_probes >= 2, Config, "trace_probes must be 0 or at least 2");
        ensure!(i.power_iters >= 1 && i.batch >= 1, Config, "power_iters and batch must be positive");
        ensure!(self.diagnostics.bound_mc >= 2, Config, "bound_mc must be at least 2");
        Ok(())
    }

    /// The config as embedded in outputs. `out` is left out so a rerun into
    /// another directory produces byte-identical files.
    pub fn embedded(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("config is an object").remove("out");
        v
    }

    /// `{"version", "config"}` embedded in every output.
    pub fn provenance(&self) -> Value {
        json!({ "version": VERSION, "config": self.embedded() })
    }

    fn provenance_line(&self) -> String {
        format!("dirnas {VERSION} config={}", self.embedded())
    }

    pub fn dataset(&self) -> Result<ToyDataset> {
        gen_dataset(self.dataset.kind, self.dataset.n, self.dataset.noise, self.dataset.seed)
    }

    fn load_table(&self, path: Option<&Path>, data: &ToyDataset) -> Result<Option<OracleTable>> {
        match path.or(self.oracle.table.as_deref()) {
            Some(p) => {
                ensure!(p.exists(), Contract, "oracle table {} does not exist", p.display());
                Ok(Some(OracleTable::load(p, data)?))
            }
            None => Ok(None),
        }
    }
}

/// Canonical genotype JSON with a trailing `"provenance"` key.
pub fn genotype_json(g: &Genotype, provenance: &Value) -> String {
    let base = g.to_json();
    format!("{},\"provenance\":{}}}\n", &base[..base.len() - 1], provenance)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub genotype: Genotype,
    pub genotype_key: String,
    pub eta_norm: f64,
    pub epochs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle_rank: Option<f64>,
}

/// Runs a full search into `cfg.out`: `genotype.json`, `trajectory.jsonl`,
/// `checkpoints/stage<i>.json` after each stage, `summary.json` and, with
/// per-epoch instruments, `diagnostics.csv`. On a numeric failure the last
/// completed epoch's state goes to `abort_state.json`.
pub fn cmd_search(cfg: &RunConfig) -> Result<SearchSummary> {
    cfg.validate()?;
    let spec = cfg.cell_spec()?;
    let data = cfg.dataset()?;
    let table = cfg.load_table(None, &data)?;
    let ckpt_dir = cfg.out.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;

    let state = init_state(&cfg.search, &spec, data.in_dim(), data.n_classes)?;
    let mut last = state.clone();
    let mut hook_fn = epoch_hook(cfg.diagnostics.instruments, table.as_ref());
    let hook: Option<&mut EpochHook> = if cfg.diagnostics.per_epoch { Some(&mut hook_fn) } else { None };
    let result = resume_search(state, &data, hook, |s, _| {
        last = s.clone();
        if s.stage_epoch == 0 {
            s.save(&ckpt_dir.join(format!("stage{}.json", s.stage - 1)))?;
        }
        Ok(())
    });
    let mut outcome = match result {
        Ok(o) => o,
        Err(e) => {
            let dump = cfg.out.join("abort_state.json");
            last.save(&dump)?;
            return Err(Error::Numeric(format!("{e}; state dumped to {}", dump.display())));
        }
    };

    let prov = cfg.provenance();
    if let Some(LogRecord::Header { config, .. }) = outcome.log.records.first_mut() {
        *config = cfg.embedded();
    } else {
        outcome.log.records.insert(0, LogRecord::Header { version: VERSION.into(), config: cfg.embedded() });
    }
    outcome.log.write_jsonl(&cfg.out.join("trajectory.jsonl"))?;
    std::fs::write(cfg.out.join("genotype.json"), genotype_json(&outcome.genotype, &prov))?;
    if cfg.diagnostics.per_epoch {
        write_diagnostics_csv(&outcome.log, &cfg.out.join("diagnostics.csv"), Some(&cfg.provenance_line()))?;
    }
    let summary = SearchSummary {
        genotype_key: outcome.genotype.key(),
        eta_norm: outcome.state.eta_norm(),
        epochs: outcome.state.epoch,
        oracle_accuracy: table.as_ref().map(|t| t.get(&outcome.genotype)).transpose()?,
        oracle_rank: table.as_ref().map(|t| t.rank_of(&outcome.genotype)).transpose()?,
        genotype: outcome.genotype,
    };
    let mut v = serde_json::to_value(&summary)?;
    v["provenance"] = prov;
    write_json(&cfg.out.join("summary.json"), &v)?;
    Ok(summary)
}

/// Trains every genotype of the space and writes `oracle.json`.
pub fn cmd_oracle(cfg: &RunConfig) -> Result<OracleTable> {
    cfg.validate()?;
    let spec = cfg.cell_spec()?;
    let data = cfg.dataset()?;
    std::fs::create_dir_all(&cfg.out)?;
    let mut table = build_oracle(&spec, &data, &cfg.oracle.budget, cfg.oracle.r_seeds, cfg.oracle.seed, cfg.workers)?;
    table.provenance = Some(cfg.provenance());
    table.save(&cfg.out.join("oracle.json"))?;
    Ok(table)
}

fn load_checkpoint(cfg: &RunConfig, checkpoint: &Path, data: &ToyDataset) -> Result<TrainState> {
    ensure!(checkpoint.exists(), Contract, "checkpoint {} does not exist", checkpoint.display());
    let state = TrainState::load(checkpoint)?;
    ensure!(
        state.net.spec.name == cfg.space && state.net.in_dim == data.in_dim() && state.net.n_classes == data.n_classes,
        Contract,
        "checkpoint {} does not match the configured space and dataset",
        checkpoint.display()
    );
    Ok(state)
}

/// Scores `samples` Dirichlet draws from a checkpoint plus the mean
/// architecture against an oracle table; writes `band.csv`.
pub fn cmd_band(cfg: &RunConfig, checkpoint: &Path, oracle: Option<&Path>, samples: usize) -> Result<crate::diagnostics::Band> {
    cfg.validate()?;
    ensure!(samples >= 1, Config, "band needs at least one sample");
    let data = cfg.dataset()?;
    let state = load_checkpoint(cfg, checkpoint, &data)?;
    let table = cfg
        .load_table(oracle, &data)?
        .ok_or_else(|| Error::Contract("band needs an oracle table (--oracle or oracle.table)".into()))?;
    let mut rng = Rng::new(cfg.search.seed).substream_indexed("band", state.epoch as u64);
    let band = exploration_band(&state.net.spec, &state.net.edge_ops, &state.betas()?, samples, &oracle_scorer(&table), &mut rng)?;
    std::fs::create_dir_all(&cfg.out)?;
    let mut rows: Vec<Vec<String>> = band
        .genotypes
        .iter()
        .zip(&band.scores)
        .enumerate()
        .map(|(i, (g, s))| vec!["sample".into(), i.to_string(), g.clone(), s.to_string()])
        .collect();
    rows.push(vec!["mean".into(), samples.to_string(), band.mean_arch.clone(), band.mean_arch_score.to_string()]);
    write_csv(&cfg.out.join("band.csv"), Some(&cfg.provenance_line()), &["kind", "index", "genotype", "score"], &rows)?;
    Ok(band)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub epoch: usize,
    pub eigenvalue: f64,
    pub eigen_converged: bool,
    pub trace: f64,
    pub trace_se: f64,
    pub bound: crate::diagnostics::BoundRecord,
}

/// Curvature and bound readings at a checkpoint; writes `diagnose.csv`.
pub fn cmd_diagnose(cfg: &RunConfig, checkpoint: &Path) -> Result<DiagnoseReport> {
    cfg.validate()?;
    let data = cfg.dataset()?;
    let state = load_checkpoint(cfg, checkpoint, &data)?;
    let ic = cfg.diagnostics.instruments;
    let f = state_objective(&state, &data, ic.batch);
    let mu = state_mu(&state)?;
    let root = Rng::new(cfg.search.seed).substream_indexed("diagnose", state.epoch as u64);
    let e = dominant_eigenvalue(&f, &mu, ic.power_iters, ic.power_tol, &mut root.substream("power"))?;
    let t = hessian_trace(&f, &mu, ic.trace_probes.max(2), &mut root.substream("trace"))?;
    let bound = laplace_bound_check(&state.betas()?, &f, cfg.diagnostics.bound_mc, ic.trace_probes.max(2), &mut root.substream("bound"))?;
    let report = DiagnoseReport { epoch: state.epoch, eigenvalue: e.value, eigen_converged: e.converged, trace: t.mean, trace_se: t.se, bound };
    std::fs::create_dir_all(&cfg.out)?;
    let b = &report.bound;
    let row: Vec<String> = [
        report.epoch as f64,
        report.eigenvalue,
        report.trace,
        report.trace_se,
        b.lhs,
        b.lhs_se,
        b.rhs,
        b.delta_used,
        b.sigma_bound,
        b.psd_proxy,
    ]
    .iter()
    .map(|v| v.to_string())
    .chain([report.eigen_converged.to_string()])
    .collect();
    write_csv(
        &cfg.out.join("diagnose.csv"),
        Some(&cfg.provenance_line()),
        &["epoch", "eigenvalue", "trace", "trace_se", "bound_lhs", "bound_lhs_se", "bound_rhs", "delta", "sigma_bound", "psd_proxy", "eigen_converged"],
        &[row],
    )?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub genotype: String,
    pub runs: Vec<f64>,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub table_accuracy: Option<f64>,
}

/// Retrains a genotype with the oracle's budget and seeds; writes `eval.json`.
pub fn cmd_eval(cfg: &RunConfig, genotype_file: &Path, oracle: Option<&Path>) -> Result<EvalReport> {
    cfg.validate()?;
    let spec = cfg.cell_spec()?;
    let text = std::fs::read_to_string(genotype_file)
        .map_err(|e| Error::Contract(format!("cannot read genotype {}: {e}", genotype_file.display())))?;
    let g = Genotype::from_json(&text)?;
    g.validate_for(&spec)?;
    let data = cfg.dataset()?;
    let table = cfg.load_table(oracle, &data)?;
    let runs = (0..cfg.oracle.r_seeds)
        .map(|i| train_discrete(&g, &spec, &data, &cfg.oracle.budget, run_seed(cfg.oracle.seed, &g, i)))
        .collect::<Result<Vec<f64>>>()?;
    let report = EvalReport {
        genotype: g.key(),
        accuracy: runs.iter().sum::<f64>() / runs.len() as f64,
        runs,
        table_accuracy: table.map(|t| t.get(&g)).transpose()?,
    };
    std::fs::create_dir_all(&cfg.out)?;
    let mut v = serde_json::to_value(&report)?;
    v["provenance"] = cfg.provenance();
    write_json(&cfg.out.join("eval.json"), &v)?;
    Ok(report)
}

/// Parses `eta-l2`, `eta-norm` or `kl`.
pub fn parse_distance(s: &str) -> Result<DistanceKind> {
    match s {
        "eta-l2" => Ok(DistanceKind::EtaL2),
        "eta-norm" => Ok(DistanceKind::EtaNorm),
        "kl" => Ok(DistanceKind::Kl),
        other => Err(Error::Config(format!("unknown distance '{other}' (expected eta-l2, eta-norm or kl)"))),
    }
}

/// Process exit code for an error: 2 for configuration problems, 1 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}
