use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CellSpec, Genotype, OpKind, SCALE_FACTOR};
use crate::error::{ensure, Error, Result};
use crate::nn::{
    affine_backward, affine_forward, relu_backward, relu_forward, scale_backward, scale_forward,
    softmax_xent, ParamStore, Tensor2,
};
use crate::rng::Rng;

/// How the partial-channel subset is chosen for each edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetPolicy {
    /// Fresh uniform subset per edge on every forward pass.
    #[default]
    Random,
    /// Always the leading `C/K` features.
    Fixed,
}

/// Selected feature indices, indexed `[cell][edge]`.
pub type Subsets = Vec<Vec<Vec<usize>>>;

/// An operation on one edge together with its weights, if it has any.
#[derive(Debug, Clone, Copy)]
pub struct EdgeOp<'a> {
    pub kind: OpKind,
    pub weight: Option<(&'a Tensor2, &'a Tensor2)>,
}

struct OpOutput {
    out: Tensor2,
    /// Pre-activation of `affine_relu`.
    pre: Option<Tensor2>,
}

fn apply_op(op: &EdgeOp, x: &Tensor2) -> Result<OpOutput> {
    let weights = || {
        op.weight
            .ok_or_else(|| Error::Contract(format!("{} op is missing its weights", op.kind.name())))
    };
    Ok(match op.kind {
        OpKind::Zero => OpOutput { out: Tensor2::zeros(x.rows, x.cols), pre: None },
        OpKind::Identity => OpOutput { out: x.clone(), pre: None },
        OpKind::Scale => OpOutput { out: scale_forward(x, SCALE_FACTOR), pre: None },
        OpKind::Affine => {
            let (w, b) = weights()?;
            OpOutput { out: affine_forward(x, w, b)?, pre: None }
        }
        OpKind::AffineRelu => {
            let (w, b) = weights()?;
            let z = affine_forward(x, w, b)?;
            OpOutput { out: relu_forward(&z), pre: Some(z) }
        }
    })
}

/// Gradient w.r.t. the op input, plus `(grad_W, grad_b)` for weighted ops.
fn op_backward(
    op: &EdgeOp,
    grad: &Tensor2,
    x: &Tensor2,
    cached: &OpOutput,
) -> Result<(Tensor2, Option<(Tensor2, Tensor2)>)> {
    Ok(match op.kind {
        OpKind::Zero => (Tensor2::zeros(x.rows, x.cols), None),
        OpKind::Identity => (grad.clone(), None),
        OpKind::Scale => (scale_backward(grad, SCALE_FACTOR), None),
        OpKind::Affine => {
            let (w, _) = op.weight.expect("checked in forward");
            let (gx, gw, gb) = affine_backward(grad, x, w)?;
            (gx, Some((gw, gb)))
        }
        OpKind::AffineRelu => {
            let (w, _) = op.weight.expect("checked in forward");
            let gz = relu_backward(grad, cached.pre.as_ref().expect("relu keeps its input"));
            let (gx, gw, gb) = affine_backward(&gz, x, w)?;
            (gx, Some((gw, gb)))
        }
    })
}

struct MixedCache {
    x_sub: Tensor2,
    outs: Vec<OpOutput>,
}

fn mixed_forward_cached(
    x: &Tensor2,
    theta: &[f64],
    ops: &[EdgeOp],
    subset: &[usize],
) -> Result<(Tensor2, MixedCache)> {
    ensure!(theta.len() == ops.len(), Contract, "{} mixing weights for {} ops", theta.len(), ops.len());
    ensure!(
        !subset.is_empty() && subset.len() <= x.cols && subset.iter().all(|&c| c < x.cols),
        Contract,
        "channel subset of size {} is invalid for {} features",
        subset.len(),
        x.cols
    );
    let full = subset.len() == x.cols;
    let x_sub = if full { x.clone() } else { x.gather_cols(subset) };
    let mut mix = Tensor2::zeros(x.rows, subset.len());
    let mut outs = Vec::with_capacity(ops.len());
    for (op, &t) in ops.iter().zip(theta) {
        let o = apply_op(op, &x_sub)?;
        mix.axpy(t, &o.out);
        outs.push(o);
    }
    let y = if full {
        mix
    } else {
        let mut y = x.clone();
        y.scatter_cols(subset, &mix);
        y
    };
    Ok((y, MixedCache { x_sub, outs }))
}

/// `ô(x)` on the channel subset, identity on the complement.
pub fn mixed_op_forward(x: &Tensor2, theta: &[f64], ops: &[EdgeOp], subset: &[usize]) -> Result<Tensor2> {
    Ok(mixed_forward_cached(x, theta, ops, subset)?.0)
}

struct CellCache {
    edges: Vec<MixedCache>,
}

/// Intermediate values of one forward pass, consumed by [`SuperNet::backward`].
pub struct ForwardCache {
    input: Tensor2,
    cells: Vec<CellCache>,
    features: Tensor2,
    pub logits: Tensor2,
    subsets: Subsets,
    thetas: Vec<Vec<f64>>,
}

/// Gradients of one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: BTreeMap<String, Tensor2>,
    /// Per edge, summed over cells.
    pub theta: Vec<Vec<f64>>,
}

/// Stem → `n_cells` stacked cells sharing one edge distribution → linear classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuperNet {
    pub spec: CellSpec,
    pub in_dim: usize,
    pub n_classes: usize,
    pub channels: usize,
    pub n_cells: usize,
    pub partial_k: usize,
    pub policy: SubsetPolicy,
    /// Global registry indices of the operations alive on each edge.
    pub edge_ops: Vec<Vec<usize>>,
    pub params: ParamStore,
}

pub fn op_param_names(cell: usize, edge: usize, op: OpKind) -> (String, String) {
    let base = format!("cell{cell}.edge{edge}.{}", op.name());
    (format!("{base}.w"), format!("{base}.b"))
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Tensor2 {
    Tensor2 { rows, cols, data: (0..rows * cols).map(|_| scale * rng.normal()).collect() }
}

impl SuperNet {
    /// Build with every registry operation on every edge.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        spec: &CellSpec,
        in_dim: usize,
        n_classes: usize,
        channels: usize,
        n_cells: usize,
        partial_k: usize,
        policy: SubsetPolicy,
        rng: &mut Rng,
    ) -> Result<Self> {
        let edge_ops = super::full_edge_ops(spec);
        Self::build_with_ops(spec, edge_ops, in_dim, n_classes, channels, n_cells, partial_k, policy, rng)
    }

    /// Build with an explicit per-edge operation list.
    #[allow(clippy::too_many_arguments)]
    pub fn build_with_ops(
        spec: &CellSpec,
        edge_ops: Vec<Vec<usize>>,
        in_dim: usize,
        n_classes: usize,
        channels: usize,
        n_cells: usize,
        partial_k: usize,
        policy: SubsetPolicy,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate()?;
        ensure!(channels > 0 && n_cells > 0 && in_dim > 0 && n_classes > 1, Config, "network dimensions must be positive (and at least two classes)");
        ensure!(partial_k >= 1 && channels.is_multiple_of(partial_k), Config, "channels {channels} not divisible by partial divisor {partial_k}");
        ensure!(edge_ops.len() == spec.n_edges(), Config, "edge operation lists do not match the cell");
        for ops in &edge_ops {
            ensure!(!ops.is_empty() && ops.iter().all(|&o| o < spec.ops.len()), Config, "invalid edge operation list {ops:?}");
        }
        let width = channels / partial_k;
        let mut params = ParamStore::default();
        params.insert("stem.w", gaussian(channels, in_dim, 0.1 / (in_dim as f64).sqrt(), rng));
        params.insert("stem.b", Tensor2::zeros(1, channels));
        for cell in 0..n_cells {
            for (e, ops) in edge_ops.iter().enumerate() {
                for &o in ops {
                    let kind = spec.ops[o];
                    if kind.has_weights() {
                        let (wn, bn) = op_param_names(cell, e, kind);
                        params.insert(wn, gaussian(width, width, 0.1 / (width as f64).sqrt(), rng));
                        params.insert(bn, Tensor2::zeros(1, width));
                    }
                }
            }
        }
        params.insert("cls.w", gaussian(n_classes, channels, 0.1 / (channels as f64).sqrt(), rng));
        params.insert("cls.b", Tensor2::zeros(1, n_classes));
        Ok(Self {
            spec: spec.clone(),
            in_dim,
            n_classes,
            channels,
            n_cells,
            partial_k,
            policy,
            edge_ops,
            params,
        })
    }

    /// Features each mixed operation sees.
    pub fn width(&self) -> usize {
        self.channels / self.partial_k
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Closed-form parameter count for a net with these shapes.
    pub fn expected_param_count(&self) -> usize {
        let w = self.width();
        let per_cell: usize = self
            .edge_ops
            .iter()
            .flat_map(|ops| ops.iter())
            .filter(|&&o| self.spec.ops[o].has_weights())
            .map(|_| w * w + w)
            .sum();
        self.in_dim * self.channels + self.channels + self.n_cells * per_cell + self.channels * self.n_classes + self.n_classes
    }

    /// Parameters held by the cell operations only.
    pub fn op_param_count(&self) -> usize {
        self.params
            .params
            .iter()
            .filter(|(k, _)| k.starts_with("cell"))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    /// Per-example activation footprint of the mixed ops: Σ over cells and
    /// edges of `|ops| · C/K`.
    pub fn activation_footprint(&self) -> usize {
        self.n_cells * self.edge_ops.iter().map(|ops| ops.len() * self.width()).sum::<usize>()
    }

    pub fn draw_subsets(&self, rng: &mut Rng) -> Subsets {
        let w = self.width();
        (0..self.n_cells)
            .map(|_| {
                (0..self.spec.n_edges())
                    .map(|_| {
                        if w == self.channels {
                            (0..self.channels).collect()
                        } else {
                            match self.policy {
                                SubsetPolicy::Random => rng.subset(self.channels, w),
                                SubsetPolicy::Fixed => (0..w).collect(),
                            }
                        }
                    })
                    .collect()
            })
            .collect()
    }

    fn edge_op_list(&self, cell: usize, edge: usize) -> Result<Vec<EdgeOp<'_>>> {
        self.edge_ops[edge]
            .iter()
            .map(|&o| {
                let kind = self.spec.ops[o];
                let weight = if kind.has_weights() {
                    let (wn, bn) = op_param_names(cell, edge, kind);
                    Some((self.params.value(&wn)?, self.params.value(&bn)?))
                } else {
                    None
                };
                Ok(EdgeOp { kind, weight })
            })
            .collect()
    }

    fn check_thetas(&self, thetas: &[Vec<f64>]) -> Result<()> {
        ensure!(thetas.len() == self.spec.n_edges(), Contract, "{} mixing vectors for {} edges", thetas.len(), self.spec.n_edges());
        for (e, (t, ops)) in thetas.iter().zip(&self.edge_ops).enumerate() {
            ensure!(t.len() == ops.len(), Contract, "edge {e}: {} mixing weights for {} ops", t.len(), ops.len());
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor2, thetas: &[Vec<f64>], subsets: &Subsets) -> Result<ForwardCache> {
        self.check_thetas(thetas)?;
        ensure!(x.cols == self.in_dim, Contract, "input has {} features, network expects {}", x.cols, self.in_dim);
        ensure!(subsets.len() == self.n_cells, Contract, "subsets for {} cells, network has {}", subsets.len(), self.n_cells);
        let mut h = affine_forward(x, self.params.value("stem.w")?, self.params.value("stem.b")?)?;
        let mut cells = Vec::with_capacity(self.n_cells);
        for cell in 0..self.n_cells {
            let mut nodes: Vec<Tensor2> = Vec::with_capacity(self.spec.n_nodes);
            nodes.push(h);
            for _ in 1..self.spec.n_nodes {
                nodes.push(Tensor2::zeros(x.rows, self.channels));
            }
            let mut edge_caches: Vec<Option<MixedCache>> = (0..self.spec.n_edges()).map(|_| None).collect();
            for j in 1..self.spec.n_nodes {
                for (e, &(src, dst)) in self.spec.edges.iter().enumerate() {
                    if dst != j {
                        continue;
                    }
                    let ops = self.edge_op_list(cell, e)?;
                    let (y, cache) = mixed_forward_cached(&nodes[src], &thetas[e], &ops, &subsets[cell][e])?;
                    nodes[j].add_assign(&y);
                    edge_caches[e] = Some(cache);
                }
            }
            h = nodes[self.spec.n_nodes - 1].clone();
            cells.push(CellCache {
                edges: edge_caches.into_iter().map(|c| c.expect("every edge visited")).collect(),
            });
        }
        let logits = affine_forward(&h, self.params.value("cls.w")?, self.params.value("cls.b")?)?;
        Ok(ForwardCache {
            input: x.clone(),
            cells,
            features: h,
            logits,
            subsets: subsets.clone(),
            thetas: thetas.to_vec(),
        })
    }

    pub fn loss(&self, x: &Tensor2, labels: &[usize], thetas: &[Vec<f64>], subsets: &Subsets) -> Result<(f64, Tensor2)> {
        let cache = self.forward(x, thetas, subsets)?;
        let (loss, _) = softmax_xent(&cache.logits, labels)?;
        ensure!(loss.is_finite(), Numeric, "non-finite loss {loss} (logits finite: {})", cache.logits.is_finite());
        Ok((loss, cache.logits))
    }

    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor2) -> Result<Gradients> {
        let mut weights = BTreeMap::new();
        let mut theta: Vec<Vec<f64>> = self.edge_ops.iter().map(|ops| vec![0.0; ops.len()]).collect();
        let (mut g, gw, gb) = affine_backward(grad_logits, &cache.features, self.params.value("cls.w")?)?;
        weights.insert("cls.w".to_string(), gw);
        weights.insert("cls.b".to_string(), gb);
        for cell in (0..self.n_cells).rev() {
            let cc = &cache.cells[cell];
            let mut node_grads: Vec<Tensor2> = (0..self.spec.n_nodes).map(|_| Tensor2::zeros(g.rows, self.channels)).collect();
            node_grads[self.spec.n_nodes - 1] = g;
            for j in (1..self.spec.n_nodes).rev() {
                for (e, &(src, dst)) in self.spec.edges.iter().enumerate() {
                    if dst != j {
                        continue;
                    }
                    let ops = self.edge_op_list(cell, e)?;
                    let subset = &cache.subsets[cell][e];
                    let ec = &cc.edges[e];
                    let gy = &node_grads[j];
                    let full = subset.len() == self.channels;
                    let g_sub = if full { gy.clone() } else { gy.gather_cols(subset) };
                    let mut gx_sub = Tensor2::zeros(g_sub.rows, g_sub.cols);
                    for (k, op) in ops.iter().enumerate() {
                        theta[e][k] += g_sub.dot(&ec.outs[k].out);
                        let t = cache.thetas[e][k];
                        let scaled = scale_forward(&g_sub, t);
                        let (gx, wgrads) = op_backward(op, &scaled, &ec.x_sub, &ec.outs[k])?;
                        gx_sub.add_assign(&gx);
                        if let Some((gw, gb)) = wgrads {
                            let (wn, bn) = op_param_names(cell, e, op.kind);
                            weights.insert(wn, gw);
                            weights.insert(bn, gb);
                        }
                    }
                    // The bypassed complement passes gy straight through.
                    let gx = if full {
                        gx_sub
                    } else {
                        let mut pass = gy.clone();
                        pass.scatter_cols(subset, &gx_sub);
                        pass
                    };
                    node_grads[src].add_assign(&gx);
                }
            }
            g = std::mem::replace(&mut node_grads[0], Tensor2::zeros(0, 0));
        }
        let (_, gw, gb) = affine_backward(&g, &cache.input, self.params.value("stem.w")?)?;
        weights.insert("stem.w".to_string(), gw);
        weights.insert("stem.b".to_string(), gb);
        Ok(Gradients { weights, theta })
    }

    /// Loss and all gradients on one batch.
    pub fn loss_and_grad(
        &self,
        x: &Tensor2,
        labels: &[usize],
        thetas: &[Vec<f64>],
        subsets: &Subsets,
    ) -> Result<(f64, Gradients)> {
        let cache = self.forward(x, thetas, subsets)?;
        let (loss, grad_logits) = softmax_xent(&cache.logits, labels)?;
        ensure!(loss.is_finite(), Numeric, "non-finite loss {loss}");
        let grads = self.backward(&cache, &grad_logits)?;
        Ok((loss, grads))
    }

    /// One-hot mixing weights selecting `genotype`'s operation on every edge.
    pub fn one_hot_thetas(&self, genotype: &Genotype) -> Result<Vec<Vec<f64>>> {
        self.edge_ops
            .iter()
            .zip(&genotype.choices)
            .map(|(ops, &c)| {
                let pos = ops
                    .iter()
                    .position(|&o| o == c)
                    .ok_or_else(|| Error::Contract(format!("operation {c} is not alive on this edge")))?;
                let mut t = vec![0.0; ops.len()];
                t[pos] = 1.0;
                Ok(t)
            })
            .collect()
    }

    /// Standalone discrete network for `genotype`, sharing this net's
    /// weights. Requires full channel connection.
    pub fn restrict_to(&self, genotype: &Genotype) -> Result<SuperNet> {
        ensure!(self.partial_k == 1, Contract, "discrete networks use full channel connection");
        self.one_hot_thetas(genotype)?;
        let mut params = ParamStore::default();
        for name in ["stem.w", "stem.b", "cls.w", "cls.b"] {
            params.insert(name, self.params.value(name)?.clone());
        }
        for cell in 0..self.n_cells {
            for (e, &c) in genotype.choices.iter().enumerate() {
                let kind = self.spec.ops[c];
                if kind.has_weights() {
                    let (wn, bn) = op_param_names(cell, e, kind);
                    params.insert(wn.clone(), self.params.value(&wn)?.clone());
                    params.insert(bn.clone(), self.params.value(&bn)?.clone());
                }
            }
        }
        Ok(SuperNet {
            edge_ops: genotype.choices.iter().map(|&c| vec![c]).collect(),
            params,
            ..self.clone_shape()
        })
    }

    fn clone_shape(&self) -> SuperNet {
        SuperNet {
            spec: self.spec.clone(),
            in_dim: self.in_dim,
            n_classes: self.n_classes,
            channels: self.channels,
            n_cells: self.n_cells,
            partial_k: self.partial_k,
            policy: self.policy,
            edge_ops: Vec::new(),
            params: ParamStore::default(),
        }
    }

    /// Fresh discrete network for `genotype` (one op per edge, `K = 1`).
    pub fn build_discrete(
        genotype: &Genotype,
        spec: &CellSpec,
        in_dim: usize,
        n_classes: usize,
        channels: usize,
        n_cells: usize,
        rng: &mut Rng,
    ) -> Result<SuperNet> {
        genotype.validate_for(spec)?;
        let edge_ops = genotype.choices.iter().map(|&c| vec![c]).collect();
        Self::build_with_ops(spec, edge_ops, in_dim, n_classes, channels, n_cells, 1, SubsetPolicy::Fixed, rng)
    }
}
