//! Curvature and exploration instruments: Hessian-vector products over the
//! architecture logits, power iteration, Hutchinson traces, the Laplace
//! bound check and Dirichlet exploration bands.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::{OracleTable, ToyDataset};
use crate::dirichlet::{laplace_params, laplace_sample, sample, sigma_lower_bound, softmax, LaplaceParams};
use crate::engine::{EpochDiagnostics, TrainState, TrajectoryLog};
use crate::error::{ensure, Error, Result};
use crate::nn::Tensor2;
use crate::space::{discretize_sample, select_genotype, CellSpec, Genotype, Subsets, SuperNet};
use crate::Rng;

/// A smooth scalar function of the concatenated per-edge logits.
pub trait LogitObjective {
    fn dim(&self) -> usize;
    fn value_grad(&self, mu: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, mu: &[f64]) -> Result<f64> {
        Ok(self.value_grad(mu)?.0)
    }
}

/// `½ μᵀAμ + bᵀμ + c`, with `A` symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: f64,
}

impl Quadratic {
    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let a = (0..n).map(|i| (0..n).map(|j| if i == j { diag[i] } else { 0.0 }).collect()).collect();
        Self { a, b: vec![0.0; n], c: 0.0 }
    }

    /// `Q diag(eigs) Qᵀ` for a random orthogonal `Q` (Gram-Schmidt on
    /// Gaussian columns), so the spectrum is known exactly.
    pub fn with_spectrum(eigs: &[f64], rng: &mut Rng) -> Self {
        let n = eigs.len();
        let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
        while q.len() < n {
            let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            for u in &q {
                let d: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                q.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        let a = (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|k| q[k][i] * eigs[k] * q[k][j]).sum()).collect())
            .collect();
        Self { a, b: vec![0.0; n], c: 0.0 }
    }

    /// Random PSD quadratic `LLᵀ` with a random linear term.
    pub fn random_psd(n: usize, rng: &mut Rng) -> Self {
        let l: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.normal() / (n as f64).sqrt()).collect()).collect();
        let a = (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|k| l[i][k] * l[j][k]).sum()).collect())
            .collect();
        Self { a, b: (0..n).map(|_| rng.normal()).collect(), c: rng.normal() }
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            a: self.a.iter().map(|r| r.iter().map(|v| s * v).collect()).collect(),
            b: self.b.iter().map(|v| s * v).collect(),
            c: s * self.c,
        }
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        self.a.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.a.len()).map(|i| self.a[i][i]).sum()
    }
}

impl LogitObjective for Quadratic {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn value_grad(&self, mu: &[f64]) -> Result<(f64, Vec<f64>)> {
        ensure!(mu.len() == self.dim(), Contract, "expected {} logits, got {}", self.dim(), mu.len());
        let am = self.matvec(mu);
        let value = 0.5 * mu.iter().zip(&am).map(|(a, b)| a * b).sum::<f64>()
            + self.b.iter().zip(mu).map(|(a, b)| a * b).sum::<f64>()
            + self.c;
        Ok((value, am.iter().zip(&self.b).map(|(a, b)| a + b).collect()))
    }
}

/// Validation loss of a frozen network at `θ_e = softmax(μ_e)` on every
/// edge, with a fixed batch and fixed channel subsets.
pub struct NetworkObjective<'a> {
    pub net: &'a SuperNet,
    pub x: Tensor2,
    pub labels: Vec<usize>,
    pub subsets: Subsets,
}

impl<'a> NetworkObjective<'a> {
    pub fn new(net: &'a SuperNet, x: Tensor2, labels: Vec<usize>, subsets: Subsets) -> Self {
        Self { net, x, labels, subsets }
    }

    fn split(&self, mu: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        let mut pos = 0;
        for ops in &self.net.edge_ops {
            out.push(mu[pos..pos + ops.len()].to_vec());
            pos += ops.len();
        }
        out
    }
}

impl LogitObjective for NetworkObjective<'_> {
    fn dim(&self) -> usize {
        self.net.edge_ops.iter().map(|o| o.len()).sum()
    }

    fn value_grad(&self, mu: &[f64]) -> Result<(f64, Vec<f64>)> {
        ensure!(mu.len() == self.dim(), Contract, "expected {} logits, got {}", self.dim(), mu.len());
        let thetas: Vec<Vec<f64>> = self.split(mu).iter().map(|m| softmax(m)).collect();
        let (loss, grads) = self.net.loss_and_grad(&self.x, &self.labels, &thetas, &self.subsets)?;
        let mut g = Vec::with_capacity(mu.len());
        for (theta, gt) in thetas.iter().zip(&grads.theta) {
            let dot: f64 = theta.iter().zip(gt).map(|(t, g)| t * g).sum();
            g.extend(theta.iter().zip(gt).map(|(t, g)| t * (g - dot)));
        }
        Ok((loss, g))
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Default finite-difference radius `1e-3·(1 + ‖μ‖)`.
pub fn default_hvp_eps(mu: &[f64]) -> f64 {
    1e-3 * (1.0 + norm(mu))
}

/// Hessian-vector product by central differences of exact gradients.
pub fn hvp(f: &dyn LogitObjective, mu: &[f64], v: &[f64], eps: Option<f64>) -> Result<Vec<f64>> {
    ensure!(v.len() == mu.len(), Contract, "direction has {} entries for {} logits", v.len(), mu.len());
    let nv = norm(v);
    ensure!(nv > 0.0, Contract, "hvp needs a non-zero direction");
    let eps = eps.unwrap_or_else(|| default_hvp_eps(mu));
    let shifted = |s: f64| -> Vec<f64> { mu.iter().zip(v).map(|(m, d)| m + s * eps * d / nv).collect() };
    let (_, gp) = f.value_grad(&shifted(1.0))?;
    let (_, gm) = f.value_grad(&shifted(-1.0))?;
    let out: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) * nv / (2.0 * eps)).collect();
    ensure!(out.iter().all(|x| x.is_finite()), Numeric, "non-finite Hessian-vector product");
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eigen {
    /// Largest-magnitude eigenvalue, reported as a magnitude.
    pub value: f64,
    /// Rayleigh quotient at the final iterate (carries the sign).
    pub rayleigh: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Power iteration on the Hessian from a random unit start.
pub fn dominant_eigenvalue(f: &dyn LogitObjective, mu: &[f64], iters: usize, tol: f64, rng: &mut Rng) -> Result<Eigen> {
    let n = mu.len();
    ensure!(n > 0, Contract, "empty logit vector");
    let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    let mut value = 0.0;
    let mut rayleigh = 0.0;
    for it in 1..=iters {
        let hv = hvp(f, mu, &v, None)?;
        rayleigh = dot(&v, &hv);
        let nh = norm(&hv);
        if nh == 0.0 {
            return Ok(Eigen { value: 0.0, rayleigh: 0.0, iterations: it, converged: true });
        }
        let converged = (nh - value).abs() < tol * nh.max(1.0);
        value = nh;
        v = hv.into_iter().map(|x| x / nh).collect();
        if converged {
            return Ok(Eigen { value, rayleigh, iterations: it, converged: true });
        }
    }
    Ok(Eigen { value, rayleigh, iterations: iters, converged: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub mean: f64,
    /// Standard error over probes (0 for the exact trace).
    pub se: f64,
    pub probes: usize,
}

/// Hutchinson estimator with Rademacher probes.
pub fn hessian_trace(f: &dyn LogitObjective, mu: &[f64], probes: usize, rng: &mut Rng) -> Result<TraceEstimate> {
    ensure!(probes >= 2, Contract, "need at least two probes");
    let vals = (0..probes)
        .map(|_| {
            let z: Vec<f64> = (0..mu.len()).map(|_| rng.rademacher()).collect();
            Ok(dot(&z, &hvp(f, mu, &z, None)?))
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = vals.iter().sum::<f64>() / probes as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (probes - 1) as f64;
    Ok(TraceEstimate { mean, se: (var / probes as f64).sqrt(), probes })
}

/// Trace from the `dim` basis directions.
pub fn hessian_trace_exact(f: &dyn LogitObjective, mu: &[f64]) -> Result<TraceEstimate> {
    let n = mu.len();
    let mut total = 0.0;
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        total += hvp(f, mu, &e, None)?[i];
    }
    Ok(TraceEstimate { mean: total, se: 0.0, probes: n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub value_at_mu: f64,
    pub trace: f64,
    pub trace_se: f64,
    pub delta_used: f64,
    pub sigma_bound: f64,
    /// Smallest Rayleigh quotient seen over random probes.
    pub psd_proxy: f64,
}

impl BoundRecord {
    pub fn holds(&self, n_se: f64) -> bool {
        self.lhs >= self.rhs - n_se * self.lhs_se
    }
}

/// Compares the Laplace-smoothed expectation of `f` against the
/// second-order bound at the Laplace mean. `betas` holds one concentration
/// per edge; `f` takes the concatenated logits. The trace is exact when
/// the dimension is at most `probes`.
pub fn laplace_bound_check(betas: &[Vec<f64>], f: &dyn LogitObjective, n_mc: usize, probes: usize, rng: &mut Rng) -> Result<BoundRecord> {
    ensure!(n_mc >= 2, Contract, "need at least two Monte-Carlo draws");
    let params = betas.iter().map(|b| laplace_params(b)).collect::<Result<Vec<LaplaceParams>>>()?;
    let mu: Vec<f64> = params.iter().flat_map(|p| p.mu.clone()).collect();
    ensure!(mu.len() == f.dim(), Contract, "objective expects {} logits, concentrations give {}", f.dim(), mu.len());
    let mut sigma = f64::INFINITY;
    let mut delta_used = 0.0f64;
    for b in betas {
        let delta = norm(&b.iter().map(|v| v - 1.0).collect::<Vec<_>>());
        delta_used = delta_used.max(delta);
        sigma = sigma.min(sigma_lower_bound(delta, b.len())?);
    }
    let mut vals = Vec::with_capacity(n_mc);
    for _ in 0..n_mc {
        let z: Vec<f64> = params.iter().flat_map(|p| laplace_sample(p, rng)).collect();
        vals.push(f.value(&z)?);
    }
    let lhs = vals.iter().sum::<f64>() / n_mc as f64;
    let var = vals.iter().map(|v| (v - lhs).powi(2)).sum::<f64>() / (n_mc - 1) as f64;
    let trace = if mu.len() <= probes { hessian_trace_exact(f, &mu)? } else { hessian_trace(f, &mu, probes, rng)? };
    let value_at_mu = f.value(&mu)?;
    let mut psd_proxy = f64::INFINITY;
    for _ in 0..16 {
        let v: Vec<f64> = (0..mu.len()).map(|_| rng.normal()).collect();
        psd_proxy = psd_proxy.min(dot(&v, &hvp(f, &mu, &v, None)?) / dot(&v, &v));
    }
    Ok(BoundRecord {
        lhs,
        lhs_se: (var / n_mc as f64).sqrt(),
        rhs: value_at_mu + 0.5 * sigma * trace.mean,
        value_at_mu,
        trace: trace.mean,
        trace_se: trace.se,
        delta_used,
        sigma_bound: sigma,
        psd_proxy,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub min: f64,
    pub max: f64,
    pub mean_arch_score: f64,
    pub mean_arch: String,
    pub scores: Vec<f64>,
    pub genotypes: Vec<String>,
}

impl Band {
    pub fn width(&self) -> f64 {
        self.max - self.min
    }
}

/// Scores `n_samples` architectures discretized from Dirichlet draws, plus
/// the architecture at the Dirichlet mean.
pub fn exploration_band(
    spec: &CellSpec,
    edge_ops: &[Vec<usize>],
    betas: &[Vec<f64>],
    n_samples: usize,
    scorer: &dyn Fn(&Genotype) -> Result<f64>,
    rng: &mut Rng,
) -> Result<Band> {
    ensure!(n_samples >= 1, Contract, "band needs at least one sample");
    let mut scores = Vec::with_capacity(n_samples);
    let mut genotypes = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let thetas = betas.iter().map(|b| Ok(sample(b, rng)?.theta)).collect::<Result<Vec<_>>>()?;
        let g = discretize_sample(spec, edge_ops, &thetas)?;
        scores.push(scorer(&g)?);
        genotypes.push(g.key());
    }
    let mean_arch = select_genotype(spec, edge_ops, betas)?;
    Ok(Band {
        min: scores.iter().cloned().fold(f64::INFINITY, f64::min),
        max: scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        mean_arch_score: scorer(&mean_arch)?,
        mean_arch: mean_arch.key(),
        scores,
        genotypes,
    })
}

/// Median width over `n_bands` independent bands.
pub fn median_band_width(
    spec: &CellSpec,
    edge_ops: &[Vec<usize>],
    betas: &[Vec<f64>],
    n_bands: usize,
    per_band: usize,
    scorer: &dyn Fn(&Genotype) -> Result<f64>,
    rng: &mut Rng,
) -> Result<f64> {
    let mut widths = (0..n_bands)
        .map(|_| Ok(exploration_band(spec, edge_ops, betas, per_band, scorer, rng)?.width()))
        .collect::<Result<Vec<f64>>>()?;
    widths.sort_by(f64::total_cmp);
    let m = widths.len();
    Ok(if m % 2 == 1 { widths[m / 2] } else { 0.5 * (widths[m / 2 - 1] + widths[m / 2]) })
}

/// Oracle lookup as a band scorer.
pub fn oracle_scorer(table: &OracleTable) -> impl Fn(&Genotype) -> Result<f64> + '_ {
    move |g| table.get(g)
}

/// What the per-epoch instrument hook measures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagConfig {
    pub eigenvalue: bool,
    pub trace_probes: usize,
    pub power_iters: usize,
    pub power_tol: f64,
    /// Samples per exploration band; 0 disables bands.
    pub band_samples: usize,
    /// Architecture-split points used for curvature.
    pub batch: usize,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self { eigenvalue: true, trace_probes: 16, power_iters: 100, power_tol: 1e-6, band_samples: 100, batch: 128 }
    }
}

/// Frozen validation objective for the current state. Subsets come from a
/// stream keyed by the epoch, so training draws are never disturbed.
pub fn state_objective<'a>(state: &'a TrainState, data: &ToyDataset, batch: usize) -> NetworkObjective<'a> {
    let n = batch.min(data.arch_idx.len()).max(1);
    let (x, y) = data.batch(&data.arch_idx[..n]);
    let mut rng = Rng::new(state.config.seed).substream_indexed("diag-subsets", state.epoch as u64);
    let subsets = state.net.draw_subsets(&mut rng);
    NetworkObjective::new(&state.net, x, y, subsets)
}

/// Laplace logits at the current concentrations, concatenated over edges.
pub fn state_mu(state: &TrainState) -> Result<Vec<f64>> {
    Ok(state
        .betas()?
        .iter()
        .map(|b| laplace_params(b).map(|p| p.mu))
        .collect::<Result<Vec<_>>>()?
        .concat())
}

/// Per-epoch hook computing curvature and (with an oracle) band statistics.
pub fn epoch_hook<'a>(
    cfg: DiagConfig,
    oracle: Option<&'a OracleTable>,
) -> impl FnMut(&TrainState, &ToyDataset) -> Result<EpochDiagnostics> + 'a {
    move |state, data| {
        let mut out = EpochDiagnostics::default();
        let root = Rng::new(state.config.seed);
        if cfg.eigenvalue || cfg.trace_probes > 0 {
            let f = state_objective(state, data, cfg.batch);
            let mu = state_mu(state)?;
            if cfg.eigenvalue {
                let e = dominant_eigenvalue(&f, &mu, cfg.power_iters, cfg.power_tol, &mut root.substream_indexed("diag-power", state.epoch as u64))?;
                out.dominant_eigenvalue = Some(e.value);
                out.eigen_converged = Some(e.converged);
            }
            if cfg.trace_probes >= 2 {
                let t = hessian_trace(&f, &mu, cfg.trace_probes, &mut root.substream_indexed("diag-trace", state.epoch as u64))?;
                out.hessian_trace = Some(t.mean);
            }
        }
        if let (Some(table), true) = (oracle, cfg.band_samples > 0) {
            let band = exploration_band(
                &state.net.spec,
                &state.net.edge_ops,
                &state.betas()?,
                cfg.band_samples,
                &oracle_scorer(table),
                &mut root.substream_indexed("diag-band", state.epoch as u64),
            )?;
            out.band_min = Some(band.min);
            out.band_max = Some(band.max);
            out.band_mean_arch = Some(band.mean_arch_score);
        }
        Ok(out)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Serde(e.to_string())
}

/// CSV writer whose first line is `# <provenance>` when one is given.
pub fn csv_writer(path: &Path, provenance: Option<&str>) -> Result<csv::Writer<std::fs::File>> {
    let mut file = std::fs::File::create(path)?;
    if let Some(p) = provenance {
        writeln!(file, "# {}", p.replace('\n', " "))?;
    }
    Ok(csv::Writer::from_writer(file))
}

/// Writes `rows` under `header`.
pub fn write_csv(path: &Path, provenance: Option<&str>, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path, provenance)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Plot-ready CSV: one row per epoch with whatever instruments ran.
pub fn write_diagnostics_csv(log: &TrajectoryLog, path: &Path, provenance: Option<&str>) -> Result<()> {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    let rows: Vec<Vec<String>> = log
        .epochs()
        .map(|e| {
            let d = e.diagnostics.clone().unwrap_or_default();
            vec![
                e.epoch.to_string(),
                e.stage.to_string(),
                opt(d.dominant_eigenvalue),
                d.eigen_converged.map(|c| c.to_string()).unwrap_or_default(),
                opt(d.hessian_trace),
                opt(d.band_min),
                opt(d.band_max),
                opt(d.band_mean_arch),
            ]
        })
        .collect();
    write_csv(
        path,
        provenance,
        &["epoch", "stage", "eigenvalue", "eigen_converged", "trace", "band_min", "band_max", "band_mean_arch"],
        &rows,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{full_edge_ops, SubsetPolicy};

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-12)
    }

    #[test]
    fn hvp_examples() {
        let q = Quadratic::diagonal(&[1.0, 3.0]);
        let h = hvp(&q, &[0.3, -0.2], &[0.0, 1.0], None).unwrap();
        assert!((h[0]).abs() < 1e-9 && (h[1] - 3.0).abs() < 1e-9);
        let lin = Quadratic { a: vec![vec![0.0; 3]; 3], b: vec![1.0, -2.0, 0.5], c: 1.0 };
        assert!(hvp(&lin, &[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], None).unwrap().iter().all(|v| v.abs() < 1e-8));
        let mut rng = Rng::new(0);
        for _ in 0..10 {
            let q = Quadratic::random_psd(6, &mut rng);
            let mu: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let v: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
            let got = hvp(&q, &mu, &v, None).unwrap();
            let want = q.matvec(&v);
            assert!(norm(&got.iter().zip(&want).map(|(a, b)| a - b).collect::<Vec<_>>()) < 1e-6 * norm(&want));
        }
        assert!(hvp(&q, &[0.0, 0.0], &[0.0, 0.0], None).is_err());
    }

    #[test]
    fn power_iteration_examples() {
        let mut rng = Rng::new(1);
        let e = dominant_eigenvalue(&Quadratic::diagonal(&[1.0, 3.0]), &[0.0, 0.0], 100, 1e-9, &mut rng).unwrap();
        assert!((e.value - 3.0).abs() < 1e-3 && e.converged);
        let e = dominant_eigenvalue(&Quadratic::diagonal(&[-2.0, 1.0]), &[0.0, 0.0], 100, 1e-9, &mut rng).unwrap();
        assert!((e.value - 2.0).abs() < 1e-3);
        assert!((e.rayleigh + 2.0).abs() < 1e-3);
        let q = Quadratic::with_spectrum(&[5.0, 2.0, 1.0, -1.0, 0.5], &mut rng);
        let a = dominant_eigenvalue(&q, &[0.0; 5], 200, 1e-10, &mut Rng::new(4)).unwrap();
        let b = dominant_eigenvalue(&q.scaled(2.0), &[0.0; 5], 200, 1e-10, &mut Rng::new(4)).unwrap();
        assert!(rel(a.value, 5.0) < 1e-3);
        assert!(rel(b.value, 2.0 * a.value) < 1e-6);
    }

    #[test]
    fn trace_examples() {
        let mut rng = Rng::new(2);
        let t = hessian_trace(&Quadratic::diagonal(&[1.0, 3.0]), &[0.0, 0.0], 64, &mut rng).unwrap();
        assert!((t.mean - 4.0).abs() <= 3.0 * t.se + 1e-9);
        let z = Quadratic::diagonal(&[0.0; 4]);
        assert_eq!(hessian_trace(&z, &[0.0; 4], 8, &mut rng).unwrap().mean, 0.0);
        let id = Quadratic::diagonal(&[1.0; 7]);
        let t = hessian_trace(&id, &[0.0; 7], 64, &mut rng).unwrap();
        assert!((t.mean - 7.0).abs() < 1e-6);
        let q = Quadratic::random_psd(5, &mut rng);
        assert!((hessian_trace_exact(&q, &[0.1; 5]).unwrap().mean - q.trace()).abs() < 1e-6);
    }

    #[test]
    fn bound_examples() {
        let mut rng = Rng::new(3);
        let c = Quadratic { a: vec![vec![0.0; 4]; 4], b: vec![0.0; 4], c: 2.5 };
        let r = laplace_bound_check(&[vec![1.3, 0.8, 1.0, 1.1]], &c, 100, 64, &mut rng).unwrap();
        assert_eq!((r.lhs, r.rhs), (2.5, 2.5));
        let q = Quadratic::random_psd(4, &mut rng);
        let r = laplace_bound_check(&[vec![1.0; 4]], &q, 1000, 64, &mut rng).unwrap();
        assert_eq!(r.delta_used, 0.0);
        assert_eq!(r.sigma_bound, laplace_params(&[1.0; 4]).unwrap().sigma_diag[0]);
        assert!(r.holds(3.0));
    }

    #[test]
    fn network_objective_gradient_and_band() {
        let spec = CellSpec::micro();
        let net = SuperNet::build(&spec, 2, 2, 8, 1, 2, SubsetPolicy::Random, &mut Rng::new(0)).unwrap();
        let mut rng = Rng::new(1);
        let x = Tensor2::from_vec(6, 2, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let subsets = net.draw_subsets(&mut rng);
        let f = NetworkObjective::new(&net, x, vec![0, 1, 0, 1, 1, 0], subsets);
        let mu: Vec<f64> = (0..12).map(|_| 0.3 * rng.normal()).collect();
        let (_, g) = f.value_grad(&mu).unwrap();
        for i in 0..12 {
            let h = 1e-5;
            let mut p = mu.clone();
            p[i] += h;
            let mut m = mu.clone();
            m[i] -= h;
            let fd = (f.value(&p).unwrap() - f.value(&m).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8 + 1e-5 * g[i].abs());
        }
        assert_eq!(f.value(&mu).unwrap(), f.value(&mu).unwrap());

        let score = |g: &Genotype| Ok(g.choices.iter().sum::<usize>() as f64);
        let ops = full_edge_ops(&spec);
        let flat = vec![vec![1e6; 4]; 3];
        let band = exploration_band(&spec, &ops, &flat, 50, &score, &mut rng).unwrap();
        assert!(band.scores.len() == 50);
        let sharp = vec![vec![1e6, 1e6 * 1.5, 1e6, 1e6]; 3];
        let band = exploration_band(&spec, &ops, &sharp, 50, &score, &mut rng).unwrap();
        assert_eq!(band.width(), 0.0);
        assert_eq!(band.mean_arch, "1-1-1");
    }
}
