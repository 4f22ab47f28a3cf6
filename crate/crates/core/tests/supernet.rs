use dirnas::nn::{softmax_xent, Tensor2};
use dirnas::space::{
    mixed_op_forward, CellSpec, EdgeOp, Genotype, OpKind, SubsetPolicy, SuperNet,
};
use dirnas::Rng;

fn random(rows: usize, cols: usize, rng: &mut Rng) -> Tensor2 {
    Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect()).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn micro(channels: usize, k: usize, cells: usize, seed: u64) -> SuperNet {
    SuperNet::build(&CellSpec::micro(), 2, 3, channels, cells, k, SubsetPolicy::Random, &mut Rng::new(seed)).unwrap()
}

fn random_thetas(net: &SuperNet, rng: &mut Rng) -> Vec<Vec<f64>> {
    net.edge_ops
        .iter()
        .map(|ops| {
            let raw: Vec<f64> = ops.iter().map(|_| 0.1 + rng.uniform()).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

#[test]
fn micro_param_count_matches_hand_count() {
    let net = SuperNet::build(&CellSpec::micro(), 2, 2, 8, 1, 2, SubsetPolicy::Random, &mut Rng::new(0)).unwrap();
    // stem 2*8+8, three edges with two 4x4 affine ops (+bias), classifier 8*2+2
    let hand = (2 * 8 + 8) + 3 * 2 * (4 * 4 + 4) + (8 * 2 + 2);
    assert_eq!(hand, 162);
    assert_eq!(net.param_count(), hand);
    assert_eq!(net.expected_param_count(), hand);
}

#[test]
fn full_divisor_gives_single_feature_ops() {
    let net = micro(8, 8, 1, 0);
    assert_eq!(net.width(), 1);
    assert_eq!(net.params.value("cell0.edge0.affine.w").unwrap().shape(), (1, 1));
    assert!(SuperNet::build(&CellSpec::micro(), 2, 2, 8, 1, 3, SubsetPolicy::Random, &mut Rng::new(0)).is_err());
}

#[test]
fn same_seed_same_weights() {
    assert_eq!(micro(8, 2, 2, 5), micro(8, 2, 2, 5));
    assert_ne!(micro(8, 2, 2, 5), micro(8, 2, 2, 6));
}

fn edge_ops(rng: &mut Rng, width: usize) -> (Vec<(Tensor2, Tensor2)>, Vec<OpKind>) {
    let kinds = vec![OpKind::Zero, OpKind::Identity, OpKind::Affine, OpKind::AffineRelu, OpKind::Scale];
    let weights = (0..2).map(|_| (random(width, width, rng), random(1, width, rng))).collect();
    (weights, kinds)
}

fn as_edge_ops<'a>(kinds: &[OpKind], w: &'a [(Tensor2, Tensor2)]) -> Vec<EdgeOp<'a>> {
    kinds
        .iter()
        .map(|&k| EdgeOp {
            kind: k,
            weight: match k {
                OpKind::Affine => Some((&w[0].0, &w[0].1)),
                OpKind::AffineRelu => Some((&w[1].0, &w[1].1)),
                _ => None,
            },
        })
        .collect()
}

#[test]
fn mixed_op_identity_and_zero_one_hots() {
    let mut rng = Rng::new(1);
    let x = random(5, 8, &mut rng);
    let (w, kinds) = edge_ops(&mut rng, 4);
    let ops = as_edge_ops(&kinds, &w);
    let subset = vec![1, 2, 5, 7];
    let y = mixed_op_forward(&x, &[0.0, 1.0, 0.0, 0.0, 0.0], &ops, &subset).unwrap();
    assert_eq!(y, x);
    let y = mixed_op_forward(&x, &[1.0, 0.0, 0.0, 0.0, 0.0], &ops, &subset).unwrap();
    for r in 0..5 {
        for c in 0..8 {
            let want = if subset.contains(&c) { 0.0 } else { x.at(r, c) };
            assert_eq!(y.at(r, c), want);
        }
    }
    assert!(mixed_op_forward(&x, &[1.0, 0.0], &ops, &subset).is_err());
    assert!(mixed_op_forward(&x, &[1.0, 0.0, 0.0, 0.0, 0.0], &ops, &[0, 9]).is_err());
}

#[test]
fn mixed_op_full_connection_has_no_bypass() {
    let mut rng = Rng::new(2);
    let x = random(3, 4, &mut rng);
    let (w, kinds) = edge_ops(&mut rng, 4);
    let ops = as_edge_ops(&kinds, &w);
    let y = mixed_op_forward(&x, &[0.0, 0.0, 0.0, 0.0, 1.0], &ops, &[0, 1, 2, 3]).unwrap();
    for (a, b) in y.data.iter().zip(&x.data) {
        assert_eq!(*a, 0.5 * b);
    }
}

#[test]
fn mixed_op_is_linear_in_theta_and_conserves_bypass() {
    let mut rng = Rng::new(3);
    for _ in 0..20 {
        let x = random(4, 8, &mut rng);
        let (w, kinds) = edge_ops(&mut rng, 4);
        let ops = as_edge_ops(&kinds, &w);
        let subset = rng.subset(8, 4);
        let t1: Vec<f64> = (0..5).map(|_| rng.uniform()).collect();
        let t2: Vec<f64> = (0..5).map(|_| rng.uniform()).collect();
        let a = rng.uniform();
        let mix: Vec<f64> = t1.iter().zip(&t2).map(|(p, q)| a * p + (1.0 - a) * q).collect();
        let y = mixed_op_forward(&x, &mix, &ops, &subset).unwrap();
        let y1 = mixed_op_forward(&x, &t1, &ops, &subset).unwrap();
        let y2 = mixed_op_forward(&x, &t2, &ops, &subset).unwrap();
        for r in 0..4 {
            for c in 0..8 {
                if subset.contains(&c) {
                    let lin = a * y1.at(r, c) + (1.0 - a) * y2.at(r, c);
                    assert!((y.at(r, c) - lin).abs() < 1e-12);
                } else {
                    assert_eq!(y.at(r, c), x.at(r, c));
                }
            }
        }
    }
}

#[test]
fn zero_classifier_gives_log_classes_loss() {
    let mut net = micro(8, 2, 1, 4);
    for name in ["cls.w", "cls.b"] {
        net.params.get_mut(name).unwrap().value.fill(0.0);
    }
    let mut rng = Rng::new(0);
    let x = random(10, 2, &mut rng);
    let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let thetas = random_thetas(&net, &mut rng);
    let subsets = net.draw_subsets(&mut rng);
    let (loss, _) = net.loss(&x, &labels, &thetas, &subsets).unwrap();
    assert!((loss - 3f64.ln()).abs() < 1e-14);
}

#[test]
fn repeated_forward_is_deterministic() {
    let net = micro(8, 2, 2, 7);
    let mut rng = Rng::new(1);
    let x = random(6, 2, &mut rng);
    let labels = vec![0, 1, 2, 0, 1, 2];
    let thetas = random_thetas(&net, &mut rng);
    let run = |seed| {
        let subsets = net.draw_subsets(&mut Rng::new(seed));
        net.loss_and_grad(&x, &labels, &thetas, &subsets).unwrap()
    };
    let (a, ga) = run(9);
    let (b, gb) = run(9);
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}

#[test]
fn theta_gradient_matches_tangent_finite_differences() {
    let mut rng = Rng::new(11);
    for trial in 0..10 {
        let net = micro(8, if trial % 2 == 0 { 2 } else { 1 }, 1 + trial % 2, 100 + trial as u64);
        let x = random(7, 2, &mut rng);
        let labels: Vec<usize> = (0..7).map(|_| rng.below(3)).collect();
        let thetas = random_thetas(&net, &mut rng);
        let subsets = net.draw_subsets(&mut rng);
        let (_, grads) = net.loss_and_grad(&x, &labels, &thetas, &subsets).unwrap();
        for e in 0..thetas.len() {
            let n = thetas[e].len();
            for _ in 0..3 {
                // random direction in the simplex tangent space
                let mut d: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
                let m = d.iter().sum::<f64>() / n as f64;
                d.iter_mut().for_each(|v| *v -= m);
                let h = 1e-4;
                let shifted = |s: f64| {
                    let mut t = thetas.clone();
                    for (v, dv) in t[e].iter_mut().zip(&d) {
                        *v += s * dv;
                    }
                    net.loss(&x, &labels, &t, &subsets).unwrap().0
                };
                let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                let an: f64 = grads.theta[e].iter().zip(&d).map(|(g, v)| g * v).sum();
                let scale = norm(&grads.theta[e]) * norm(&d);
                assert!((an - fd).abs() / scale.max(1e-8) < 1e-5, "trial {trial} edge {e}: {an} vs {fd}");
            }
        }
    }
}

#[test]
fn weight_gradients_match_finite_differences() {
    let mut rng = Rng::new(12);
    let net = micro(6, 2, 2, 3);
    let x = random(5, 2, &mut rng);
    let labels: Vec<usize> = (0..5).map(|_| rng.below(3)).collect();
    let thetas = random_thetas(&net, &mut rng);
    let subsets = net.draw_subsets(&mut rng);
    let (_, grads) = net.loss_and_grad(&x, &labels, &thetas, &subsets).unwrap();
    assert_eq!(grads.weights.len(), net.params.params.len());
    for (name, g) in &grads.weights {
        for i in 0..g.len() {
            let h = 1e-6;
            let eval = |s: f64| {
                let mut n2 = net.clone();
                n2.params.get_mut(name).unwrap().value.data[i] += s;
                n2.loss(&x, &labels, &thetas, &subsets).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(rel_err(g.data[i], fd) < 1e-5 || (g.data[i] - fd).abs() < 1e-9, "{name}[{i}]: {} vs {fd}", g.data[i]);
        }
    }
}

#[test]
fn one_hot_supernet_equals_discrete_network_bitwise() {
    let spec = CellSpec::micro();
    let net = SuperNet::build(&spec, 2, 3, 8, 2, 1, SubsetPolicy::Random, &mut Rng::new(21)).unwrap();
    let mut rng = Rng::new(5);
    let x = random(9, 2, &mut rng);
    let labels: Vec<usize> = (0..9).map(|_| rng.below(3)).collect();
    for choices in [vec![3, 1, 0], vec![2, 2, 3], vec![1, 0, 1], vec![0, 0, 0]] {
        let g = Genotype::new(&spec, choices).unwrap();
        let discrete = net.restrict_to(&g).unwrap();
        let subsets = net.draw_subsets(&mut rng);
        let (a, _) = net.loss(&x, &labels, &net.one_hot_thetas(&g).unwrap(), &subsets).unwrap();
        let (b, _) = discrete.loss(&x, &labels, &vec![vec![1.0]; 3], &discrete.draw_subsets(&mut rng)).unwrap();
        assert_eq!(a.to_bits(), b.to_bits(), "{}", g.describe());
    }
}

#[test]
fn all_zero_genotype_sees_nothing() {
    let spec = CellSpec::micro();
    let g = Genotype::new(&spec, vec![0, 0, 0]).unwrap();
    let net = SuperNet::build_discrete(&g, &spec, 2, 2, 8, 1, &mut Rng::new(0)).unwrap();
    let x = random(4, 2, &mut Rng::new(1));
    let cache = net.forward(&x, &[vec![1.0], vec![1.0], vec![1.0]], &net.draw_subsets(&mut Rng::new(0))).unwrap();
    let (loss, _) = softmax_xent(&cache.logits, &[0, 1, 0, 1]).unwrap();
    assert!((loss - 2f64.ln()).abs() < 0.05);
    for r in 0..4 {
        assert_eq!(cache.logits.row(r), cache.logits.row(0));
    }
}
