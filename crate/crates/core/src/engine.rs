//! Alternating search loop: momentum SGD on the weight split with sampled
//! mixing weights, then Adam on the concentration logits over the
//! architecture split through the pathwise gradient.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::ToyDataset;
use crate::dirichlet::{distance_penalty, grad_eta_from_grad_theta, sample, Concentration, DistanceKind, SimplexSample};
use crate::error::{ensure, Error, Result};
use crate::nn::{cosine_lr, AdamConfig, AdamState, Tensor2};
use crate::progressive::{stage_transition, StageSpec, TransitionReport};
use crate::space::{select_genotype, CellSpec, Genotype, SubsetPolicy, SuperNet};
use crate::{Rng, VERSION};

/// What happens to surviving `eta` entries when a stage prunes operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaCarry {
    #[default]
    Keep,
    /// Redraw from the initial distribution.
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub seed: u64,
    pub lambda: f64,
    pub eta_init_scale: f64,
    pub distance: DistanceKind,
    pub w_lr: f64,
    pub w_momentum: f64,
    pub w_weight_decay: f64,
    /// Global gradient-norm cap for weight steps; 0 disables.
    pub w_grad_clip: f64,
    pub arch_lr: f64,
    pub arch_beta1: f64,
    pub arch_beta2: f64,
    pub batch_size: usize,
    /// Dirichlet samples averaged per architecture step.
    pub mc_samples: usize,
    pub channels: usize,
    pub n_cells: usize,
    pub subset_policy: SubsetPolicy,
    pub schedule: Vec<StageSpec>,
    pub eta_carry: EtaCarry,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lambda: 1e-3,
            eta_init_scale: 1e-3,
            distance: DistanceKind::EtaL2,
            w_lr: 0.1,
            w_momentum: 0.9,
            w_weight_decay: 3e-4,
            w_grad_clip: 5.0,
            arch_lr: 0.03,
            arch_beta1: 0.9,
            arch_beta2: 0.999,
            batch_size: 64,
            mc_samples: 1,
            channels: 16,
            n_cells: 1,
            subset_policy: SubsetPolicy::Random,
            schedule: vec![
                StageSpec { epochs: 25, partial_k: 2, registry_size: 4 },
                StageSpec { epochs: 25, partial_k: 1, registry_size: 2 },
            ],
            eta_carry: EtaCarry::Keep,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self, spec: &CellSpec) -> Result<()> {
        ensure!(self.lambda.is_finite() && self.lambda >= 0.0, Config, "lambda must be finite and non-negative");
        ensure!(self.eta_init_scale.is_finite() && self.eta_init_scale >= 0.0, Config, "eta_init_scale must be non-negative");
        for (name, v) in [("w_lr", self.w_lr), ("arch_lr", self.arch_lr)] {
            ensure!(v.is_finite() && v > 0.0, Config, "{name} must be positive");
        }
        for (name, v) in [("w_momentum", self.w_momentum), ("arch_beta1", self.arch_beta1), ("arch_beta2", self.arch_beta2)] {
            ensure!((0.0..1.0).contains(&v), Config, "{name} must lie in [0, 1)");
        }
        ensure!(self.w_weight_decay.is_finite() && self.w_weight_decay >= 0.0, Config, "w_weight_decay must be non-negative");
        ensure!(self.w_grad_clip.is_finite() && self.w_grad_clip >= 0.0, Config, "w_grad_clip must be non-negative");
        ensure!(self.batch_size >= 1 && self.mc_samples >= 1, Config, "batch_size and mc_samples must be at least 1");
        ensure!(self.channels >= 1 && self.n_cells >= 1, Config, "channels and n_cells must be at least 1");
        StageSpec::validate_schedule(&self.schedule, self.channels, spec.ops.len())
    }

    pub fn total_epochs(&self) -> usize {
        self.schedule.iter().map(|s| s.epochs).sum()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.arch_lr, beta1: self.arch_beta1, beta2: self.arch_beta2, eps: 1e-8 }
    }
}

/// Everything needed to continue a search exactly where it stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub version: String,
    pub config: SearchConfig,
    pub net: SuperNet,
    pub concentrations: Vec<Concentration>,
    pub arch_moments: Vec<AdamState>,
    pub stage: usize,
    pub stage_epoch: usize,
    pub epoch: usize,
    pub weight_steps: u64,
    pub arch_steps: u64,
    pub rng_data: Rng,
    pub rng_subsets: Rng,
    pub rng_dirichlet: Rng,
    pub rng_widen: Rng,
}

pub fn init_state(config: &SearchConfig, spec: &CellSpec, in_dim: usize, n_classes: usize) -> Result<TrainState> {
    config.validate(spec)?;
    let root = Rng::new(config.seed);
    let net = SuperNet::build(
        spec,
        in_dim,
        n_classes,
        config.channels,
        config.n_cells,
        config.schedule[0].partial_k,
        config.subset_policy,
        &mut root.substream("weights"),
    )?;
    let mut eta_rng = root.substream("eta");
    let concentrations: Vec<Concentration> = net
        .edge_ops
        .iter()
        .map(|ops| Concentration::new(ops.iter().map(|_| config.eta_init_scale * eta_rng.normal()).collect()))
        .collect();
    let arch_moments = concentrations.iter().map(|c| AdamState::new(c.len())).collect();
    Ok(TrainState {
        version: VERSION.to_string(),
        config: config.clone(),
        net,
        concentrations,
        arch_moments,
        stage: 0,
        stage_epoch: 0,
        epoch: 0,
        weight_steps: 0,
        arch_steps: 0,
        rng_data: root.substream("data"),
        rng_subsets: root.substream("subsets"),
        rng_dirichlet: root.substream("dirichlet"),
        rng_widen: root.substream("widen"),
    })
}

impl TrainState {
    pub fn betas(&self) -> Result<Vec<Vec<f64>>> {
        self.concentrations.iter().map(|c| c.beta()).collect()
    }

    pub fn etas(&self) -> Vec<Vec<f64>> {
        self.concentrations.iter().map(|c| c.eta.clone()).collect()
    }

    /// ‖η‖₂ over all edges.
    pub fn eta_norm(&self) -> f64 {
        self.concentrations.iter().flat_map(|c| &c.eta).map(|e| e * e).sum::<f64>().sqrt()
    }

    /// Per-edge argmax of the Dirichlet mean, as global registry indices.
    pub fn genotype(&self) -> Result<Genotype> {
        select_genotype(&self.net.spec, &self.net.edge_ops, &self.betas()?)
    }

    pub fn finished(&self) -> bool {
        self.stage >= self.config.schedule.len()
    }

    /// Current stage, or the last one once finished.
    pub fn stage_spec(&self) -> StageSpec {
        self.config.schedule[self.stage.min(self.config.schedule.len() - 1)]
    }

    /// Weight learning rate for the current epoch (cosine, restarted per stage).
    pub fn lr(&self) -> f64 {
        let s = self.stage_spec();
        cosine_lr(self.stage_epoch, s.epochs, self.config.w_lr)
    }

    /// Summed distance penalty over edges.
    pub fn penalty(&self) -> Result<f64> {
        let mut total = 0.0;
        for c in &self.concentrations {
            total += distance_penalty(self.config.distance, &c.eta, self.config.lambda)?.0;
        }
        Ok(total)
    }

    fn draw_thetas(&mut self) -> Result<(Vec<SimplexSample>, Vec<Vec<f64>>)> {
        let betas = self.betas()?;
        let samples = betas
            .iter()
            .map(|b| sample(b, &mut self.rng_dirichlet))
            .collect::<Result<Vec<_>>>()?;
        Ok((samples, betas))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let state: TrainState = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        ensure!(state.version == VERSION, Config, "checkpoint version {} does not match {VERSION}", state.version);
        Ok(state)
    }
}

fn dump_hint(state: &TrainState) -> String {
    format!("epoch {}, weight step {}, arch step {}", state.epoch, state.weight_steps, state.arch_steps)
}

/// One weight update on a batch of the weight split. Returns the loss.
pub fn step_weights(state: &mut TrainState, x: &Tensor2, labels: &[usize], lr: f64) -> Result<f64> {
    let (samples, _) = state.draw_thetas()?;
    let thetas: Vec<Vec<f64>> = samples.into_iter().map(|s| s.theta).collect();
    let subsets = state.net.draw_subsets(&mut state.rng_subsets);
    let (loss, grads) = state.net.loss_and_grad(x, labels, &thetas, &subsets)?;
    ensure!(loss.is_finite(), Numeric, "non-finite training loss at {}", dump_hint(state));
    state.net.params.zero_grads();
    for (name, g) in &grads.weights {
        state.net.params.accumulate_grad(name, g)?;
    }
    let c = &state.config;
    state.net.params.clip_grad_norm(c.w_grad_clip);
    state.net.params.sgd_momentum_step(lr, c.w_momentum, c.w_weight_decay);
    state.weight_steps += 1;
    Ok(loss)
}

/// Gradient of the architecture objective w.r.t. every edge's `eta`,
/// averaged over `mc_samples` draws. Returns (mean loss, gradients).
pub fn architecture_gradient(state: &mut TrainState, x: &Tensor2, labels: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    let m = state.config.mc_samples;
    let mut grad: Vec<Vec<f64>> = state.concentrations.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut loss_sum = 0.0;
    for _ in 0..m {
        let (samples, betas) = state.draw_thetas()?;
        let thetas: Vec<Vec<f64>> = samples.iter().map(|s| s.theta.clone()).collect();
        let subsets = state.net.draw_subsets(&mut state.rng_subsets);
        let (loss, grads) = state.net.loss_and_grad(x, labels, &thetas, &subsets)?;
        ensure!(loss.is_finite(), Numeric, "non-finite validation loss at {}", dump_hint(state));
        loss_sum += loss;
        for e in 0..grad.len() {
            let g = grad_eta_from_grad_theta(&grads.theta[e], &samples[e], &betas[e], &state.concentrations[e].eta)?;
            for (acc, v) in grad[e].iter_mut().zip(g) {
                *acc += v / m as f64;
            }
        }
    }
    for (e, g) in grad.iter_mut().enumerate() {
        let (_, pg) = distance_penalty(state.config.distance, &state.concentrations[e].eta, state.config.lambda)?;
        for (acc, v) in g.iter_mut().zip(pg) {
            *acc += v;
        }
        ensure!(g.iter().all(|v| v.is_finite()), Numeric, "non-finite eta gradient at {}", dump_hint(state));
    }
    Ok((loss_sum / m as f64, grad))
}

/// One Adam update of the concentration logits on a batch of the
/// architecture split. Returns the (sampled) validation loss.
pub fn step_architecture(state: &mut TrainState, x: &Tensor2, labels: &[usize]) -> Result<f64> {
    let (loss, grad) = architecture_gradient(state, x, labels)?;
    let cfg = state.config.adam();
    for ((c, m), g) in state.concentrations.iter_mut().zip(&mut state.arch_moments).zip(&grad) {
        m.step(&mut c.eta, g, &cfg);
    }
    state.arch_steps += 1;
    Ok(loss)
}

/// Optional per-epoch instrument readings.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochDiagnostics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dominant_eigenvalue: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eigen_converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hessian_trace: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_mean_arch: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    pub stage_epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub eta: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub eta_norm: f64,
    pub penalty: f64,
    pub genotype: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<EpochDiagnostics>,
}

/// One line of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Header { version: String, config: serde_json::Value },
    Epoch(EpochRecord),
    Transition(TransitionReport),
    Final { genotype: Genotype, eta_norm: f64 },
}

/// Append-only list of records, serialized one JSON object per line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub records: Vec<LogRecord>,
}

impl TrajectoryLog {
    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(self.to_jsonl().as_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { records })
    }
}

/// Called once per epoch, after training and before any stage transition.
pub type EpochHook<'a> = dyn FnMut(&TrainState, &ToyDataset) -> Result<EpochDiagnostics> + 'a;

/// Runs one epoch: every weight step over the shuffled weight split, then
/// as many architecture steps on architecture-split batches. Performs the
/// stage transition when the epoch closes a stage.
pub fn run_epoch(
    state: &mut TrainState,
    data: &ToyDataset,
    hook: Option<&mut EpochHook>,
) -> Result<(EpochRecord, Option<TransitionReport>)> {
    ensure!(!state.finished(), Contract, "search already finished");
    ensure!(
        data.in_dim() == state.net.in_dim && data.n_classes == state.net.n_classes,
        Contract,
        "dataset does not match the network"
    );
    let bs = state.config.batch_size;
    ensure!(data.weight_idx.len() >= bs && data.arch_idx.len() >= bs, Config, "each split needs at least one batch of {bs}");
    let lr = state.lr();
    let mut w_idx = data.weight_idx.clone();
    let mut a_idx = data.arch_idx.clone();
    state.rng_data.shuffle(&mut w_idx);
    state.rng_data.shuffle(&mut a_idx);
    let w_batches: Vec<&[usize]> = w_idx.chunks(bs).collect();
    let a_batches: Vec<&[usize]> = a_idx.chunks(bs).collect();

    let mut train_loss = 0.0;
    for b in &w_batches {
        let (x, y) = data.batch(b);
        train_loss += step_weights(state, &x, &y, lr)?;
    }
    let mut val_loss = 0.0;
    for i in 0..w_batches.len() {
        let (x, y) = data.batch(a_batches[i % a_batches.len()]);
        val_loss += step_architecture(state, &x, &y)?;
    }
    let n = w_batches.len() as f64;
    let diagnostics = match hook {
        Some(h) => Some(h(state, data)?),
        None => None,
    };
    let record = EpochRecord {
        epoch: state.epoch,
        stage: state.stage,
        stage_epoch: state.stage_epoch,
        lr,
        train_loss: train_loss / n,
        val_loss: val_loss / n,
        eta: state.etas(),
        beta: state.betas()?,
        eta_norm: state.eta_norm(),
        penalty: state.penalty()?,
        genotype: state.genotype()?.key(),
        diagnostics,
    };
    state.epoch += 1;
    state.stage_epoch += 1;
    let mut transition = None;
    if state.stage_epoch >= state.stage_spec().epochs {
        state.stage += 1;
        state.stage_epoch = 0;
        if !state.finished() {
            transition = Some(transition_to(state, state.stage)?);
        }
    }
    Ok((record, transition))
}

fn transition_to(state: &mut TrainState, stage: usize) -> Result<TransitionReport> {
    let next = state.config.schedule[stage];
    let report = stage_transition(
        &mut state.net,
        &mut state.concentrations,
        &mut state.arch_moments,
        &next,
        stage,
        &mut state.rng_widen,
    )?;
    if state.config.eta_carry == EtaCarry::Reset && report.edge_ops_before != report.edge_ops_after {
        let mut rng = Rng::new(state.config.seed).substream_indexed("eta-reset", stage as u64);
        for (c, m) in state.concentrations.iter_mut().zip(&mut state.arch_moments) {
            c.eta.iter_mut().for_each(|e| *e = state.config.eta_init_scale * rng.normal());
            *m = AdamState::new(c.len());
        }
    }
    Ok(report)
}

pub struct SearchOutcome {
    pub genotype: Genotype,
    pub log: TrajectoryLog,
    pub state: TrainState,
}

/// Runs the remaining epochs of `state` and selects the final genotype.
/// `on_epoch` sees the state after every epoch (checkpointing, progress).
pub fn resume_search(
    mut state: TrainState,
    data: &ToyDataset,
    mut hook: Option<&mut EpochHook>,
    mut on_epoch: impl FnMut(&TrainState, &[LogRecord]) -> Result<()>,
) -> Result<SearchOutcome> {
    let mut log = TrajectoryLog::default();
    while !state.finished() {
        let (rec, tr) = run_epoch(&mut state, data, hook.as_deref_mut())?;
        let start = log.records.len();
        log.push(LogRecord::Epoch(rec));
        if let Some(t) = tr {
            log.push(LogRecord::Transition(t));
        }
        on_epoch(&state, &log.records[start..])?;
    }
    let genotype = state.genotype()?;
    log.push(LogRecord::Final { genotype: genotype.clone(), eta_norm: state.eta_norm() });
    Ok(SearchOutcome { genotype, log, state })
}

/// Full search from scratch, logging a header with `config`.
pub fn run_search(
    config: &SearchConfig,
    spec: &CellSpec,
    data: &ToyDataset,
    hook: Option<&mut EpochHook>,
) -> Result<SearchOutcome> {
    ensure!(data.labels.len() >= 2 * config.batch_size, Config, "dataset needs at least two batches of samples");
    let state = init_state(config, spec, data.in_dim(), data.n_classes)?;
    let mut out = resume_search(state, data, hook, |_, _| Ok(()))?;
    out.log.records.insert(
        0,
        LogRecord::Header { version: VERSION.to_string(), config: serde_json::to_value(config)? },
    );
    Ok(out)
}
