//! Cell search space: candidate operations, the cell DAG, discrete
//! architectures, and the super-network that mixes them.

mod supernet;

pub use supernet::{
    mixed_op_forward, op_param_names, EdgeOp, ForwardCache, Gradients, SubsetPolicy, Subsets, SuperNet,
};

use serde::{Deserialize, Serialize};

use crate::dirichlet::{argmax, mean};
use crate::error::{ensure, Error, Result};

/// Dense stand-ins for the usual cell operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    /// Outputs zeros ("none").
    Zero,
    /// Skip connection.
    Identity,
    /// Learned linear map.
    Affine,
    /// Learned linear map followed by ReLU.
    AffineRelu,
    /// Multiplication by 0.5; the parameter-free pooling analog.
    Scale,
}

pub const SCALE_FACTOR: f64 = 0.5;

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Zero => "zero",
            OpKind::Identity => "identity",
            OpKind::Affine => "affine",
            OpKind::AffineRelu => "affine_relu",
            OpKind::Scale => "scale",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "zero" | "none" => OpKind::Zero,
            "identity" | "skip" => OpKind::Identity,
            "affine" => OpKind::Affine,
            "affine_relu" => OpKind::AffineRelu,
            "scale" => OpKind::Scale,
            other => return Err(Error::Config(format!("unknown operation '{other}'"))),
        })
    }

    pub fn has_weights(self) -> bool {
        matches!(self, OpKind::Affine | OpKind::AffineRelu)
    }
}

/// The four-operation registry used by the micro space.
pub fn default_registry() -> Vec<OpKind> {
    vec![OpKind::Zero, OpKind::Identity, OpKind::Affine, OpKind::AffineRelu]
}

/// [`default_registry`] plus the scale op.
pub fn extended_registry() -> Vec<OpKind> {
    let mut r = default_registry();
    r.push(OpKind::Scale);
    r
}

/// A cell DAG: node 0 is the cell input, every edge `(i, j)` has `i < j`,
/// and the last node is the cell output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub name: String,
    pub n_nodes: usize,
    pub edges: Vec<(usize, usize)>,
    pub ops: Vec<OpKind>,
}

impl CellSpec {
    pub fn new(name: &str, n_nodes: usize, edges: Vec<(usize, usize)>, ops: Vec<OpKind>) -> Result<Self> {
        let spec = Self { name: name.to_string(), n_nodes, edges, ops };
        spec.validate()?;
        Ok(spec)
    }

    /// Fully connected DAG over `n_nodes` nodes, edges in lexicographic order.
    pub fn dense(name: &str, n_nodes: usize, ops: Vec<OpKind>) -> Result<Self> {
        let mut edges = Vec::new();
        for j in 1..n_nodes {
            for i in 0..j {
                edges.push((i, j));
            }
        }
        edges.sort();
        Self::new(name, n_nodes, edges, ops)
    }

    /// Three nodes, three edges, four operations: 64 architectures.
    pub fn micro() -> Self {
        Self::dense("micro", 3, default_registry()).expect("micro space is valid")
    }

    /// Four nodes, six edges, five operations: 15,625 architectures.
    pub fn nb201_like() -> Self {
        Self::dense("nb201-like", 4, extended_registry()).expect("nb201-like space is valid")
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "micro" => Ok(Self::micro()),
            "nb201-like" => Ok(Self::nb201_like()),
            other => Err(Error::Config(format!("unknown search space '{other}'"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.ops.is_empty(), Config, "operation registry is empty");
        ensure!(self.n_nodes >= 2, Config, "a cell needs at least two nodes");
        for &(i, j) in &self.edges {
            ensure!(i < j, Config, "edge ({i},{j}) violates i < j");
            ensure!(j < self.n_nodes, Config, "edge ({i},{j}) references a missing node");
        }
        for j in 1..self.n_nodes {
            ensure!(
                self.edges.iter().any(|&(_, d)| d == j),
                Config,
                "node {j} has no incoming edge"
            );
        }
        Ok(())
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn op_names(&self) -> Vec<String> {
        self.ops.iter().map(|o| o.name().to_string()).collect()
    }

    /// `|O|^E`, saturating.
    pub fn n_genotypes(&self) -> u128 {
        (self.ops.len() as u128).saturating_pow(self.edges.len() as u32)
    }
}

/// One discrete operation per edge. `choices` index the full registry of
/// the space, whatever pruning happened during search.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genotype {
    pub space: String,
    pub ops: Vec<String>,
    pub choices: Vec<usize>,
}

impl Genotype {
    pub fn new(spec: &CellSpec, choices: Vec<usize>) -> Result<Self> {
        ensure!(
            choices.len() == spec.n_edges(),
            Contract,
            "genotype has {} choices for {} edges",
            choices.len(),
            spec.n_edges()
        );
        for &c in &choices {
            ensure!(c < spec.ops.len(), Contract, "choice {c} outside registry of {}", spec.ops.len());
        }
        Ok(Self { space: spec.name.clone(), ops: spec.op_names(), choices })
    }

    /// Stable lookup key, e.g. `"3-1-0"`.
    pub fn key(&self) -> String {
        self.choices.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("-")
    }

    /// Human-readable form, e.g. `"affine_relu|identity|zero"`.
    pub fn describe(&self) -> String {
        self.choices
            .iter()
            .map(|&c| self.ops[c].as_str())
            .collect::<Vec<_>>()
            .join("|")
    }

    /// Canonical JSON: `{"space":…,"ops":[…],"choices":[…]}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("genotype serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn validate_for(&self, spec: &CellSpec) -> Result<()> {
        ensure!(self.space == spec.name, Contract, "genotype is for space '{}', not '{}'", self.space, spec.name);
        ensure!(self.ops == spec.op_names(), Contract, "genotype registry does not match space '{}'", spec.name);
        Genotype::new(spec, self.choices.clone()).map(|_| ())
    }
}

/// Per edge, the operation with the largest Dirichlet mean; ties go to the
/// lowest registry index. `edge_ops[e]` maps edge-local indices to the
/// global registry.
pub fn select_genotype(spec: &CellSpec, edge_ops: &[Vec<usize>], betas: &[Vec<f64>]) -> Result<Genotype> {
    ensure!(betas.len() == spec.n_edges(), Contract, "one concentration vector per edge required");
    let choices = edge_ops
        .iter()
        .zip(betas)
        .map(|(ops, beta)| {
            ensure!(ops.len() == beta.len(), Contract, "edge has {} ops but {} concentrations", ops.len(), beta.len());
            Ok(ops[argmax(&mean(beta))])
        })
        .collect::<Result<Vec<_>>>()?;
    Genotype::new(spec, choices)
}

/// Per-edge argmax of a sampled mixing weight.
pub fn discretize_sample(spec: &CellSpec, edge_ops: &[Vec<usize>], thetas: &[Vec<f64>]) -> Result<Genotype> {
    ensure!(thetas.len() == spec.n_edges(), Contract, "one sample per edge required");
    let choices = edge_ops
        .iter()
        .zip(thetas)
        .map(|(ops, theta)| {
            ensure!(ops.len() == theta.len(), Contract, "edge has {} ops but sample has {}", ops.len(), theta.len());
            Ok(ops[argmax(theta)])
        })
        .collect::<Result<Vec<_>>>()?;
    Genotype::new(spec, choices)
}

/// Edge-to-registry map with every operation on every edge.
pub fn full_edge_ops(spec: &CellSpec) -> Vec<Vec<usize>> {
    vec![(0..spec.ops.len()).collect(); spec.n_edges()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_spaces() {
        let m = CellSpec::micro();
        assert_eq!(m.edges, vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(m.n_genotypes(), 64);
        let n = CellSpec::nb201_like();
        assert_eq!(n.n_edges(), 6);
        assert_eq!(n.n_genotypes(), 15_625);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(CellSpec::new("x", 3, vec![(1, 0), (0, 2)], default_registry()).is_err());
        assert!(CellSpec::new("x", 3, vec![(0, 2)], default_registry()).is_err());
        assert!(CellSpec::new("x", 2, vec![(0, 1)], vec![]).is_err());
    }

    #[test]
    fn select_examples() {
        let spec = CellSpec::new("one", 2, vec![(0, 1)], default_registry()).unwrap();
        let ops = full_edge_ops(&spec);
        let g = select_genotype(&spec, &ops, &[vec![1.0, 5.0, 1.0, 1.0]]).unwrap();
        assert_eq!(g.choices, vec![1]);
        let g = select_genotype(&spec, &ops, &[[1.0, 5.0, 1.0, 1.0].iter().map(|b| b * 7.3).collect()]).unwrap();
        assert_eq!(g.choices, vec![1]);
        let g = select_genotype(&spec, &ops, &[vec![2.0; 4]]).unwrap();
        assert_eq!(g.choices, vec![0]);
    }

    #[test]
    fn select_maps_pruned_edges_to_global_indices() {
        let spec = CellSpec::micro();
        let ops = vec![vec![1, 3], vec![0, 2], vec![2, 3]];
        let g = select_genotype(&spec, &ops, &[vec![1.0, 2.0], vec![3.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(g.choices, vec![3, 0, 2]);
    }

    #[test]
    fn discretize_examples() {
        let spec = CellSpec::new("one", 2, vec![(0, 1)], vec![OpKind::Zero, OpKind::Identity, OpKind::Affine]).unwrap();
        let ops = full_edge_ops(&spec);
        assert_eq!(discretize_sample(&spec, &ops, &[vec![0.0, 0.0, 1.0]]).unwrap().choices, vec![2]);
        assert_eq!(discretize_sample(&spec, &ops, &[vec![0.4, 0.35, 0.25]]).unwrap().choices, vec![0]);
        let beta = vec![0.5, 3.0, 1.0];
        assert_eq!(
            discretize_sample(&spec, &ops, &[mean(&beta)]).unwrap(),
            select_genotype(&spec, &ops, &[beta]).unwrap()
        );
    }

    #[test]
    fn genotype_json_is_canonical() {
        let g = Genotype::new(&CellSpec::micro(), vec![3, 1, 0]).unwrap();
        assert_eq!(
            g.to_json(),
            r#"{"space":"micro","ops":["zero","identity","affine","affine_relu"],"choices":[3,1,0]}"#
        );
        assert_eq!(Genotype::from_json(&g.to_json()).unwrap(), g);
        assert_eq!(g.key(), "3-1-0");
        assert_eq!(g.describe(), "affine_relu|identity|zero");
        assert!(Genotype::new(&CellSpec::micro(), vec![4, 0, 0]).is_err());
    }
}
