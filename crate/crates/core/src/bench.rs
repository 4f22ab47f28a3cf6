//! Toy datasets, discrete-architecture training and the exhaustive oracle
//! table used to rank search results.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dirichlet::argmax;
use crate::error::{ensure, Error, Result};
use crate::nn::{affine_backward, affine_forward, cosine_lr, softmax_xent, Tensor2};
use crate::rng::derive_seed;
use crate::space::{CellSpec, Genotype, SuperNet};
use crate::{Rng, VERSION};

use DatasetKind as Kind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Moons,
    Blobs,
    Spirals,
}

impl DatasetKind {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "moons" => Ok(Self::Moons),
            "blobs" => Ok(Self::Blobs),
            "spirals" => Ok(Self::Spirals),
            other => Err(Error::Config(format!("unknown dataset kind '{other}'"))),
        }
    }

    pub fn n_classes(self) -> usize {
        match self {
            Self::Blobs => 3,
            Self::Moons | Self::Spirals => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { kind: DatasetKind::Spirals, n: 1024, noise: 0.1, seed: 0 }
    }
}

/// 2-D points with a 40/40/20 split into weight, architecture and test parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub spec: DatasetSpec,
    pub n_classes: usize,
    pub features: Tensor2,
    pub labels: Vec<usize>,
    pub weight_idx: Vec<usize>,
    pub arch_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl ToyDataset {
    pub fn in_dim(&self) -> usize {
        self.features.cols
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor2, Vec<usize>) {
        let d = self.features.cols;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.features.row(i));
        }
        (Tensor2 { rows: idx.len(), cols: d, data }, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Weight and architecture parts together.
    pub fn train_idx(&self) -> Vec<usize> {
        let mut v = self.weight_idx.clone();
        v.extend(&self.arch_idx);
        v
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("dataset serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn gen_dataset(kind: DatasetKind, n: usize, noise: f64, seed: u64) -> Result<ToyDataset> {
    ensure!(n >= 64, Config, "dataset needs at least 64 points (got {n})");
    ensure!(noise.is_finite() && noise >= 0.0, Config, "noise must be finite and non-negative");
    let spec = DatasetSpec { kind, n, noise, seed };
    let root = Rng::new(seed);
    let mut noise_rng = root.substream("noise");
    let k = kind.n_classes();
    let mut points = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for c in 0..k {
        let m = n / k + usize::from(c < n % k);
        for i in 0..m {
            let t = (i as f64 + 0.5) / m as f64;
            let (x, y) = match kind {
                Kind::Moons => {
                    let a = std::f64::consts::PI * t;
                    if c == 0 {
                        (a.cos(), a.sin())
                    } else {
                        (1.0 - a.cos(), 0.5 - a.sin())
                    }
                }
                Kind::Blobs => {
                    let a = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
                    (a.cos(), a.sin())
                }
                Kind::Spirals => {
                    let a = 2.0 * std::f64::consts::PI * t + std::f64::consts::PI * c as f64;
                    (t * a.cos(), t * a.sin())
                }
            };
            points.push(x + noise * noise_rng.normal());
            points.push(y + noise * noise_rng.normal());
            labels.push(c);
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    root.substream("split").shuffle(&mut order);
    let (n_w, n_a) = (n * 2 / 5, n * 2 / 5);
    let mut weight_idx = order[..n_w].to_vec();
    let mut arch_idx = order[n_w..n_w + n_a].to_vec();
    let mut test_idx = order[n_w + n_a..].to_vec();
    for v in [&mut weight_idx, &mut arch_idx, &mut test_idx] {
        v.sort_unstable();
    }
    Ok(ToyDataset {
        spec,
        n_classes: k,
        features: Tensor2 { rows: n, cols: 2, data: points },
        labels,
        weight_idx,
        arch_idx,
        test_idx,
    })
}

/// Schedule for training one discrete network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainBudget {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; 0 disables.
    pub grad_clip: f64,
    pub channels: usize,
    pub n_cells: usize,
}

impl Default for TrainBudget {
    fn default() -> Self {
        Self { steps: 500, batch_size: 64, lr: 0.1, momentum: 0.9, weight_decay: 3e-4, grad_clip: 5.0, channels: 16, n_cells: 1 }
    }
}

/// Fraction of `idx` the network classifies correctly (ties go to the
/// lower class index).
pub fn accuracy(net: &SuperNet, data: &ToyDataset, idx: &[usize]) -> Result<f64> {
    let (x, y) = data.batch(idx);
    let thetas: Vec<Vec<f64>> = net.edge_ops.iter().map(|ops| vec![1.0 / ops.len() as f64; ops.len()]).collect();
    let subsets = net.draw_subsets(&mut Rng::new(0));
    let logits = net.forward(&x, &thetas, &subsets)?.logits;
    let hits = (0..x.rows).filter(|&r| argmax(logits.row(r)) == y[r]).count();
    Ok(hits as f64 / x.rows as f64)
}

/// Endless reshuffled minibatches over a fixed index set.
struct Batcher {
    idx: Vec<usize>,
    pos: usize,
    batch: usize,
}

impl Batcher {
    fn new(idx: Vec<usize>, batch: usize) -> Self {
        let pos = idx.len();
        Self { idx, pos, batch: batch.min(pos).max(1) }
    }

    fn next(&mut self, rng: &mut Rng) -> &[usize] {
        if self.pos + self.batch > self.idx.len() {
            rng.shuffle(&mut self.idx);
            self.pos = 0;
        }
        self.pos += self.batch;
        &self.idx[self.pos - self.batch..self.pos]
    }
}

/// Train `genotype` from scratch on the weight and architecture parts and
/// return its test accuracy.
pub fn train_discrete(genotype: &Genotype, spec: &CellSpec, data: &ToyDataset, budget: &TrainBudget, seed: u64) -> Result<f64> {
    let root = Rng::new(seed);
    let mut net = SuperNet::build_discrete(
        genotype,
        spec,
        data.in_dim(),
        data.n_classes,
        budget.channels,
        budget.n_cells,
        &mut root.substream("init"),
    )?;
    let mut data_rng = root.substream("data");
    let mut batches = Batcher::new(data.train_idx(), budget.batch_size);
    let thetas = vec![vec![1.0]; spec.n_edges()];
    let subsets = net.draw_subsets(&mut Rng::new(0));
    for step in 0..budget.steps {
        let (x, y) = data.batch(batches.next(&mut data_rng));
        let (loss, grads) = net.loss_and_grad(&x, &y, &thetas, &subsets)?;
        ensure!(loss.is_finite(), Numeric, "non-finite loss while training {}", genotype.describe());
        net.params.zero_grads();
        for (name, g) in &grads.weights {
            net.params.accumulate_grad(name, g)?;
        }
        net.params.clip_grad_norm(budget.grad_clip);
        let lr = cosine_lr(step, budget.steps, budget.lr);
        net.params.sgd_momentum_step(lr, budget.momentum, budget.weight_decay);
    }
    accuracy(&net, data, &data.test_idx)
}

/// Multinomial logistic regression on the raw features, trained on the
/// same budget. Reference point for the discrete networks.
pub fn linear_probe(data: &ToyDataset, budget: &TrainBudget, seed: u64) -> Result<f64> {
    let mut w = Tensor2::zeros(data.n_classes, data.in_dim());
    let mut b = Tensor2::zeros(1, data.n_classes);
    let (mut mw, mut mb) = (w.clone(), b.clone());
    let mut rng = Rng::new(seed);
    let mut batches = Batcher::new(data.train_idx(), budget.batch_size);
    for step in 0..budget.steps {
        let (x, y) = data.batch(batches.next(&mut rng));
        let (_, g) = softmax_xent(&affine_forward(&x, &w, &b)?, &y)?;
        let (_, gw, gb) = affine_backward(&g, &x, &w)?;
        let lr = cosine_lr(step, budget.steps, budget.lr);
        for (p, (m, g)) in [(&mut w, (&mut mw, &gw)), (&mut b, (&mut mb, &gb))] {
            for i in 0..p.data.len() {
                m.data[i] = budget.momentum * m.data[i] + g.data[i];
                p.data[i] -= lr * m.data[i];
            }
        }
    }
    let (x, y) = data.batch(&data.test_idx);
    let logits = affine_forward(&x, &w, &b)?;
    Ok((0..x.rows).filter(|&r| argmax(logits.row(r)) == y[r]).count() as f64 / x.rows as f64)
}

pub const ENUMERATION_CAP: u128 = 4096;

/// Every genotype of the space in lexicographic order of choices.
pub fn enumerate_space(spec: &CellSpec) -> Result<Vec<Genotype>> {
    enumerate_space_capped(spec, ENUMERATION_CAP)
}

pub fn enumerate_space_capped(spec: &CellSpec, cap: u128) -> Result<Vec<Genotype>> {
    let total = spec.n_genotypes();
    ensure!(total <= cap, Config, "space '{}' has {total} genotypes, above the cap of {cap}", spec.name);
    let (n_ops, n_edges) = (spec.ops.len(), spec.n_edges());
    (0..total as usize)
        .map(|mut code| {
            let mut choices = vec![0; n_edges];
            for c in choices.iter_mut().rev() {
                *c = code % n_ops;
                code /= n_ops;
            }
            Genotype::new(spec, choices)
        })
        .collect()
}

/// Mean test accuracy of every genotype in a space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTable {
    pub version: String,
    pub space: String,
    pub ops: Vec<String>,
    pub dataset: DatasetSpec,
    pub dataset_hash: String,
    pub budget: TrainBudget,
    pub r_seeds: usize,
    pub seed: u64,
    /// Genotype key → mean accuracy.
    pub accuracy: BTreeMap<String, f64>,
    /// Genotype key → per-seed accuracies.
    pub runs: BTreeMap<String, Vec<f64>>,
    /// Resolved run configuration, when built from the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl OracleTable {
    pub fn get(&self, genotype: &Genotype) -> Result<f64> {
        self.accuracy
            .get(&genotype.key())
            .copied()
            .ok_or_else(|| Error::Contract(format!("genotype {} is not in the oracle table", genotype.key())))
    }

    /// Fraction of genotypes with strictly higher mean accuracy; 0 is best.
    pub fn rank_of(&self, genotype: &Genotype) -> Result<f64> {
        ensure!(genotype.space == self.space && genotype.ops == self.ops, Contract, "genotype is from a different space");
        let acc = self.get(genotype)?;
        let better = self.accuracy.values().filter(|&&a| a > acc).count();
        Ok(better as f64 / self.accuracy.len() as f64)
    }

    pub fn best(&self) -> Option<(&String, f64)> {
        self.accuracy
            .iter()
            .fold(None, |best: Option<(&String, f64)>, (k, &a)| match best {
                Some((_, b)) if b >= a => best,
                _ => Some((k, a)),
            })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Load a table, refusing it unless it was built on `data`.
    pub fn load(path: &Path, data: &ToyDataset) -> Result<Self> {
        let table: OracleTable = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let hash = data.hash();
        ensure!(
            table.dataset_hash == hash,
            Contract,
            "oracle table {} was built on dataset {} but the current dataset hashes to {hash}",
            path.display(),
            table.dataset_hash
        );
        Ok(table)
    }
}

/// Seed for the `index`-th training run of `genotype`.
pub fn run_seed(seed: u64, genotype: &Genotype, index: usize) -> u64 {
    derive_seed(seed, &genotype.key(), index as u64)
}

/// Train every genotype `r_seeds` times on `workers` threads. Results do not
/// depend on the worker count.
pub fn build_oracle(
    spec: &CellSpec,
    data: &ToyDataset,
    budget: &TrainBudget,
    r_seeds: usize,
    seed: u64,
    workers: usize,
) -> Result<OracleTable> {
    ensure!(r_seeds >= 1, Config, "oracle needs at least one seed per genotype");
    let genotypes = enumerate_space(spec)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let runs: Vec<(String, Vec<f64>)> = pool.install(|| {
        genotypes
            .par_iter()
            .map(|g| {
                let accs = (0..r_seeds)
                    .map(|i| train_discrete(g, spec, data, budget, run_seed(seed, g, i)))
                    .collect::<Result<Vec<_>>>()?;
                Ok((g.key(), accs))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let accuracy = runs.iter().map(|(k, a)| (k.clone(), a.iter().sum::<f64>() / a.len() as f64)).collect();
    Ok(OracleTable {
        version: VERSION.to_string(),
        space: spec.name.clone(),
        ops: spec.op_names(),
        dataset: data.spec,
        dataset_hash: data.hash(),
        budget: *budget,
        r_seeds,
        seed,
        accuracy,
        runs: runs.into_iter().collect(),
        provenance: None,
    })
}
