//! Staged search: prune each edge's operations by Dirichlet mean, shrink the
//! partial-channel divisor and widen the surviving weights by random index
//! replication.

use serde::{Deserialize, Serialize};

use crate::dirichlet::{mean, Concentration};
use crate::error::{ensure, Result};
use crate::nn::{AdamState, Tensor2};
use crate::space::{op_param_names, SuperNet};
use crate::Rng;

/// One stage of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub epochs: usize,
    pub partial_k: usize,
    pub registry_size: usize,
}

impl StageSpec {
    /// Parses `"25:2:4,25:1:2"` (epochs:K:ops per stage).
    pub fn parse_schedule(s: &str) -> Result<Vec<StageSpec>> {
        let stages = s
            .split(',')
            .map(|part| {
                let fields: Vec<&str> = part.trim().split(':').collect();
                ensure!(fields.len() == 3, Config, "stage '{part}' is not epochs:K:ops");
                let num = |f: &str| {
                    f.trim()
                        .parse::<usize>()
                        .map_err(|_| crate::Error::Config(format!("bad integer '{f}' in stage '{part}'")))
                };
                Ok(StageSpec { epochs: num(fields[0])?, partial_k: num(fields[1])?, registry_size: num(fields[2])? })
            })
            .collect::<Result<Vec<_>>>()?;
        ensure!(!stages.is_empty(), Config, "empty stage schedule");
        Ok(stages)
    }

    pub fn format_schedule(stages: &[StageSpec]) -> String {
        stages
            .iter()
            .map(|s| format!("{}:{}:{}", s.epochs, s.partial_k, s.registry_size))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Checks a whole schedule against the channel count and registry size.
    pub fn validate_schedule(stages: &[StageSpec], channels: usize, n_ops: usize) -> Result<()> {
        ensure!(!stages.is_empty(), Config, "empty stage schedule");
        let mut prev_ops = n_ops;
        let mut prev_k = usize::MAX;
        for (i, s) in stages.iter().enumerate() {
            ensure!(s.partial_k >= 1 && channels.is_multiple_of(s.partial_k), Config, "stage {i}: K={} does not divide {channels} channels", s.partial_k);
            ensure!(s.registry_size >= 1, Config, "stage {i}: registry size must be at least 1");
            ensure!(s.registry_size <= prev_ops, Config, "stage {i}: registry size {} exceeds {prev_ops}", s.registry_size);
            ensure!(s.partial_k <= prev_k, Config, "stage {i}: K must not grow across stages");
            prev_ops = s.registry_size;
            prev_k = s.partial_k;
        }
        ensure!(
            stages[0].registry_size == n_ops,
            Config,
            "first stage uses {} ops but the space has {n_ops}",
            stages[0].registry_size
        );
        Ok(())
    }
}

/// Index map from a width-`q` layer onto a width-`n` one: the identity on
/// the first `n` positions, uniform draws from `0..n` beyond. Zero-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WidenMapping {
    pub n: usize,
    pub q: usize,
    pub table: Vec<usize>,
}

impl WidenMapping {
    pub fn identity(n: usize) -> Self {
        Self { n, q: n, table: (0..n).collect() }
    }

    pub fn get(&self, j: usize) -> usize {
        self.table[j]
    }
}

pub fn widen_mapping(n: usize, q: usize, rng: &mut Rng) -> Result<WidenMapping> {
    ensure!(n >= 1 && q >= n, Contract, "widen mapping needs q >= n >= 1 (got n={n}, q={q})");
    let mut table: Vec<usize> = (0..n).collect();
    table.extend((n..q).map(|_| rng.below(n)));
    Ok(WidenMapping { n, q, table })
}

/// `U[o, i] = W[g_out(o), g_in(i)]`, copied without rescaling.
pub fn widen_weights(w: &Tensor2, g_out: &WidenMapping, g_in: &WidenMapping) -> Result<Tensor2> {
    ensure!(
        g_out.n == w.rows && g_in.n == w.cols,
        Contract,
        "mappings ({}, {}) do not match a {}x{} tensor",
        g_out.n,
        g_in.n,
        w.rows,
        w.cols
    );
    let mut u = Tensor2::zeros(g_out.q, g_in.q);
    for o in 0..g_out.q {
        let src = w.row(g_out.get(o));
        for (i, v) in u.data[o * g_in.q..(o + 1) * g_in.q].iter_mut().enumerate() {
            *v = src[g_in.get(i)];
        }
    }
    Ok(u)
}

/// Seeds used for one widened operation, for the transition report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidenRecord {
    pub tensor: String,
    pub seed: u64,
    pub from: [usize; 2],
    pub to: [usize; 2],
}

/// Shrinks the partial divisor to `k_new`, widening every op weight with
/// independent output/input mappings. Biases follow the output mapping;
/// optimizer buffers of widened tensors restart at zero.
pub fn widen_supernet(net: &mut SuperNet, k_new: usize, rng: &mut Rng) -> Result<Vec<WidenRecord>> {
    ensure!(k_new >= 1 && k_new < net.partial_k, Contract, "new K={k_new} must be below the current K={}", net.partial_k);
    ensure!(net.channels.is_multiple_of(k_new), Contract, "K={k_new} does not divide {} channels", net.channels);
    let (n, q) = (net.width(), net.channels / k_new);
    let mut records = Vec::new();
    for cell in 0..net.n_cells {
        for (e, ops) in net.edge_ops.iter().enumerate() {
            for &o in ops {
                let kind = net.spec.ops[o];
                if !kind.has_weights() {
                    continue;
                }
                let (wn, bn) = op_param_names(cell, e, kind);
                let seed = rng.next_seed();
                let mut local = Rng::new(seed);
                let g_out = widen_mapping(n, q, &mut local)?;
                let g_in = widen_mapping(n, q, &mut local)?;
                let w = widen_weights(net.params.value(&wn)?, &g_out, &g_in)?;
                let b = widen_weights(net.params.value(&bn)?, &WidenMapping::identity(1), &g_out)?;
                net.params.get_mut(&wn)?.reset_with(w);
                net.params.get_mut(&bn)?.reset_with(b);
                records.push(WidenRecord { tensor: wn, seed, from: [n, n], to: [q, q] });
            }
        }
    }
    net.partial_k = k_new;
    Ok(records)
}

/// Per edge, the edge-local indices of the `keep` operations with the
/// largest Dirichlet mean, in ascending order. Ties go to the lower index.
pub fn top_ops(beta: &[f64], keep: usize) -> Result<Vec<usize>> {
    ensure!(keep >= 1 && keep <= beta.len(), Contract, "keep={keep} outside 1..={}", beta.len());
    let m = mean(beta);
    let mut order: Vec<usize> = (0..m.len()).collect();
    order.sort_by(|&a, &b| m[b].total_cmp(&m[a]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// What survives pruning on every edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Pruned {
    /// Global registry indices per edge.
    pub edge_ops: Vec<Vec<usize>>,
    pub concentrations: Vec<Concentration>,
    /// Edge-local positions that survived.
    pub kept: Vec<Vec<usize>>,
}

pub fn prune_ops(edge_ops: &[Vec<usize>], concentrations: &[Concentration], keep: usize) -> Result<Pruned> {
    ensure!(edge_ops.len() == concentrations.len(), Contract, "one concentration per edge required");
    let mut out = Pruned { edge_ops: Vec::new(), concentrations: Vec::new(), kept: Vec::new() };
    for (ops, c) in edge_ops.iter().zip(concentrations) {
        ensure!(ops.len() == c.len(), Contract, "edge has {} ops but {} concentrations", ops.len(), c.len());
        let kept = top_ops(&c.beta()?, keep)?;
        out.edge_ops.push(kept.iter().map(|&i| ops[i]).collect());
        out.concentrations.push(Concentration::new(kept.iter().map(|&i| c.eta[i]).collect()));
        out.kept.push(kept);
    }
    Ok(out)
}

/// Drops the weights of operations no longer alive on each edge.
pub fn prune_supernet(net: &mut SuperNet, edge_ops: Vec<Vec<usize>>) -> Result<()> {
    ensure!(edge_ops.len() == net.edge_ops.len(), Contract, "edge count mismatch");
    for cell in 0..net.n_cells {
        for (e, (old, new)) in net.edge_ops.iter().zip(&edge_ops).enumerate() {
            ensure!(new.iter().all(|o| old.contains(o)), Contract, "pruning cannot revive operations on edge {e}");
            for &o in old.iter().filter(|o| !new.contains(o)) {
                let kind = net.spec.ops[o];
                if kind.has_weights() {
                    let (wn, bn) = op_param_names(cell, e, kind);
                    net.params.params.remove(&wn);
                    net.params.params.remove(&bn);
                }
            }
        }
    }
    net.edge_ops = edge_ops;
    Ok(())
}

/// Registry and shape deltas of one transition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub stage: usize,
    pub k_from: usize,
    pub k_to: usize,
    pub edge_ops_before: Vec<Vec<String>>,
    pub edge_ops_after: Vec<Vec<String>>,
    pub params_before: usize,
    pub params_after: usize,
    pub op_params_before: usize,
    pub op_params_after: usize,
    pub footprint_before: usize,
    pub footprint_after: usize,
    pub widened: Vec<WidenRecord>,
}

fn edge_op_names(net: &SuperNet) -> Vec<Vec<String>> {
    net.edge_ops
        .iter()
        .map(|ops| ops.iter().map(|&o| net.spec.ops[o].name().to_string()).collect())
        .collect()
}

/// Prune to `next.registry_size` ops per edge, then widen to `next.partial_k`.
/// Surviving `eta` entries and their optimizer moments are kept as they are.
pub fn stage_transition(
    net: &mut SuperNet,
    concentrations: &mut Vec<Concentration>,
    arch_moments: &mut [AdamState],
    next: &StageSpec,
    stage: usize,
    rng: &mut Rng,
) -> Result<TransitionReport> {
    ensure!(arch_moments.len() == concentrations.len(), Contract, "one optimizer state per edge required");
    ensure!(next.partial_k <= net.partial_k, Contract, "K cannot grow from {} to {}", net.partial_k, next.partial_k);
    ensure!(net.channels.is_multiple_of(next.partial_k), Contract, "K={} does not divide {} channels", next.partial_k, net.channels);
    let mut report = TransitionReport {
        stage,
        k_from: net.partial_k,
        k_to: next.partial_k,
        edge_ops_before: edge_op_names(net),
        edge_ops_after: Vec::new(),
        params_before: net.param_count(),
        params_after: 0,
        op_params_before: net.op_param_count(),
        op_params_after: 0,
        footprint_before: net.activation_footprint(),
        footprint_after: 0,
        widened: Vec::new(),
    };
    let pruned = prune_ops(&net.edge_ops, concentrations, next.registry_size)?;
    if pruned.edge_ops != net.edge_ops {
        for (m, kept) in arch_moments.iter_mut().zip(&pruned.kept) {
            m.retain(kept);
        }
        prune_supernet(net, pruned.edge_ops)?;
        *concentrations = pruned.concentrations;
    }
    if next.partial_k < net.partial_k {
        report.widened = widen_supernet(net, next.partial_k, rng)?;
    }
    report.edge_ops_after = edge_op_names(net);
    report.params_after = net.param_count();
    report.op_params_after = net.op_param_count();
    report.footprint_after = net.activation_footprint();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{select_genotype, CellSpec, SubsetPolicy};

    fn random(rows: usize, cols: usize, rng: &mut Rng) -> Tensor2 {
        Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn mapping_examples() {
        let mut rng = Rng::new(0);
        let g = widen_mapping(4, 8, &mut rng).unwrap();
        assert_eq!(g.get(1), 1);
        for j in 0..4 {
            assert_eq!(g.get(j), j);
        }
        assert!(g.table[4..].iter().all(|&v| v < 4));
        assert_eq!(widen_mapping(5, 5, &mut rng).unwrap(), WidenMapping::identity(5));
        assert!(widen_mapping(4, 3, &mut rng).is_err());
        assert_eq!(widen_mapping(4, 8, &mut Rng::new(3)).unwrap(), widen_mapping(4, 8, &mut Rng::new(3)).unwrap());
    }

    #[test]
    fn widen_weights_is_index_copy() {
        let mut rng = Rng::new(1);
        for _ in 0..50 {
            let (r, c) = (1 + rng.below(6), 1 + rng.below(6));
            let w = random(r, c, &mut rng);
            let go = widen_mapping(r, r + rng.below(6), &mut rng).unwrap();
            let gi = widen_mapping(c, c + rng.below(6), &mut rng).unwrap();
            let u = widen_weights(&w, &go, &gi).unwrap();
            for o in 0..go.q {
                for i in 0..gi.q {
                    assert_eq!(u.at(o, i).to_bits(), w.at(go.get(o), gi.get(i)).to_bits());
                }
            }
            let id = widen_weights(&w, &WidenMapping::identity(r), &WidenMapping::identity(c)).unwrap();
            assert_eq!(id, w);
        }
        let ones = Tensor2::filled(2, 3, 1.0);
        let u = widen_weights(&ones, &widen_mapping(2, 5, &mut rng).unwrap(), &widen_mapping(3, 4, &mut rng).unwrap()).unwrap();
        assert!(u.data.iter().all(|&v| v == 1.0));
        assert!(widen_weights(&ones, &WidenMapping::identity(3), &WidenMapping::identity(3)).is_err());
    }

    #[test]
    fn prune_examples() {
        let to_eta = |beta: &[f64]| -> Vec<f64> { beta.iter().map(|&b| if b > 1.0 { b - 1.0 } else { b.ln() }).collect() };
        let c = vec![Concentration::new(to_eta(&[0.5, 2.0, 1.2, 0.3]))];
        let p = prune_ops(&[vec![0, 1, 2, 3]], &c, 2).unwrap();
        assert_eq!(p.kept, vec![vec![1, 2]]);
        assert_eq!(p.edge_ops, vec![vec![1, 2]]);
        assert_eq!(p.concentrations[0].eta[0].to_bits(), c[0].eta[1].to_bits());
        let same = prune_ops(&[vec![0, 1, 2, 3]], &c, 4).unwrap();
        assert_eq!(same.concentrations, c);
        assert!(prune_ops(&[vec![0, 1, 2, 3]], &c, 0).is_err());
        assert!(prune_ops(&[vec![0, 1, 2, 3]], &c, 5).is_err());
    }

    #[test]
    fn schedule_parsing() {
        let s = StageSpec::parse_schedule("25:2:4, 25:1:2").unwrap();
        assert_eq!(s[1], StageSpec { epochs: 25, partial_k: 1, registry_size: 2 });
        assert_eq!(StageSpec::format_schedule(&s), "25:2:4,25:1:2");
        assert!(StageSpec::validate_schedule(&s, 8, 4).is_ok());
        assert!(StageSpec::validate_schedule(&s, 8, 5).is_err());
        assert!(StageSpec::validate_schedule(&StageSpec::parse_schedule("5:3:4").unwrap(), 8, 4).is_err());
        assert!(StageSpec::validate_schedule(&StageSpec::parse_schedule("5:2:4,5:1:5").unwrap(), 8, 4).is_err());
        assert!(StageSpec::parse_schedule("5:2").is_err());
        assert!(StageSpec::parse_schedule("a:2:4").is_err());
    }

    fn toy_state(seed: u64) -> (SuperNet, Vec<Concentration>, Vec<AdamState>) {
        let mut rng = Rng::new(seed);
        let net = SuperNet::build(&CellSpec::micro(), 2, 2, 8, 2, 2, SubsetPolicy::Random, &mut rng).unwrap();
        let conc: Vec<Concentration> = (0..3).map(|_| Concentration::new((0..4).map(|_| rng.normal()).collect())).collect();
        let moments = vec![AdamState::new(4); 3];
        (net, conc, moments)
    }

    #[test]
    fn transition_prunes_widens_and_keeps_genotype() {
        let (mut net, mut conc, mut moments) = toy_state(4);
        let before = net.clone();
        let betas: Vec<Vec<f64>> = conc.iter().map(|c| c.beta().unwrap()).collect();
        let g_before = select_genotype(&net.spec, &net.edge_ops, &betas).unwrap();
        let next = StageSpec { epochs: 1, partial_k: 1, registry_size: 2 };
        let report = stage_transition(&mut net, &mut conc, &mut moments, &next, 1, &mut Rng::new(9)).unwrap();
        let betas: Vec<Vec<f64>> = conc.iter().map(|c| c.beta().unwrap()).collect();
        assert_eq!(select_genotype(&net.spec, &net.edge_ops, &betas).unwrap(), g_before);
        assert!(net.edge_ops.iter().all(|o| o.len() == 2));
        assert!(moments.iter().all(|m| m.m.len() == 2));
        assert_eq!(net.param_count(), net.expected_param_count());
        assert_eq!(report.footprint_before, report.footprint_after);
        for (name, p) in &net.params.params {
            if name.starts_with("cell") && name.ends_with(".w") {
                assert_eq!(p.value.shape(), (8, 8));
                let old = before.params.value(name).unwrap();
                for o in 0..4 {
                    for i in 0..4 {
                        assert_eq!(p.value.at(o, i), old.at(o, i));
                    }
                }
            }
        }
        let x = random(5, 2, &mut Rng::new(0));
        let thetas: Vec<Vec<f64>> = conc.iter().map(|c| mean(&c.beta().unwrap())).collect();
        let cache = net.forward(&x, &thetas, &net.draw_subsets(&mut Rng::new(0))).unwrap();
        assert!(cache.logits.is_finite());
    }

    #[test]
    fn noop_transition_leaves_state_alone() {
        let (mut net, mut conc, mut moments) = toy_state(5);
        let (n0, c0, m0) = (net.clone(), conc.clone(), moments.clone());
        let next = StageSpec { epochs: 1, partial_k: 2, registry_size: 4 };
        let report = stage_transition(&mut net, &mut conc, &mut moments, &next, 1, &mut Rng::new(1)).unwrap();
        assert_eq!((net, conc, moments), (n0, c0, m0));
        assert!(report.widened.is_empty());
    }

    #[test]
    fn transition_is_deterministic() {
        let run = || {
            let (mut net, mut conc, mut moments) = toy_state(6);
            let next = StageSpec { epochs: 1, partial_k: 1, registry_size: 2 };
            let r = stage_transition(&mut net, &mut conc, &mut moments, &next, 1, &mut Rng::new(2)).unwrap();
            (net, r)
        };
        assert_eq!(run(), run());
    }
}
