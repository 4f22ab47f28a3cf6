use dirnas::dirichlet::{laplace_params, pathwise_vjp, sample, sigma_lower_bound, softmax};
use dirnas::progressive::{top_ops, widen_mapping, StageSpec};
use dirnas::special::{digamma, log_gamma, reg_inc_beta, trigamma};
use dirnas::Rng;
use proptest::prelude::*;

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn log_gamma_recurrence(x in 1e-3f64..200.0) {
        let lhs = log_gamma(x + 1.0).unwrap();
        let rhs = log_gamma(x).unwrap() + x.ln();
        prop_assert!(rel_close(lhs, rhs, 1e-12), "{x}: {lhs} vs {rhs}");
    }

    #[test]
    fn digamma_recurrence(x in 1e-3f64..200.0) {
        let lhs = digamma(x + 1.0).unwrap();
        let rhs = digamma(x).unwrap() + 1.0 / x;
        prop_assert!(rel_close(lhs, rhs, 1e-11), "{x}: {lhs} vs {rhs}");
    }

    #[test]
    fn trigamma_recurrence(x in 1e-2f64..200.0) {
        let lhs = trigamma(x + 1.0).unwrap();
        let rhs = trigamma(x).unwrap() - 1.0 / (x * x);
        prop_assert!(rel_close(lhs, rhs, 1e-10), "{x}: {lhs} vs {rhs}");
    }

    #[test]
    fn inc_beta_reflection_and_monotone(x in 0.0f64..1.0, a in 0.05f64..50.0, b in 0.05f64..50.0) {
        let i = reg_inc_beta(x, a, b).unwrap();
        let j = reg_inc_beta(1.0 - x, b, a).unwrap();
        prop_assert!((0.0..=1.0).contains(&i));
        prop_assert!((i + j - 1.0).abs() < 1e-10, "{i} + {j}");
        let k = reg_inc_beta((x + 0.01).min(1.0), a, b).unwrap();
        prop_assert!(k >= i - 1e-12);
    }

    #[test]
    fn samples_live_on_the_simplex(beta in prop::collection::vec(1e-2f64..50.0, 2..8), seed in any::<u64>()) {
        let s = sample(&beta, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(s.theta.len(), beta.len());
        prop_assert!(s.theta.iter().all(|t| *t > 0.0 && *t < 1.0));
        prop_assert!((s.theta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let again = sample(&beta, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(s.theta, again.theta);
    }

    #[test]
    fn vjp_of_constant_direction_vanishes(beta in prop::collection::vec(0.2f64..20.0, 2..6), seed in any::<u64>()) {
        // Moving along (1,…,1) leaves the simplex, so no sample path responds to it.
        let s = sample(&beta, &mut Rng::new(seed)).unwrap();
        let g = pathwise_vjp(&vec![1.0; beta.len()], &s, &beta).unwrap();
        prop_assert!(g.iter().all(|v| v.abs() < 1e-6), "{g:?}");
    }

    #[test]
    fn laplace_mean_matches_normalized_beta(beta in prop::collection::vec(0.1f64..30.0, 2..8)) {
        let p = laplace_params(&beta).unwrap();
        prop_assert!(p.mu.iter().sum::<f64>().abs() < 1e-10);
        let total: f64 = beta.iter().sum();
        for (m, b) in softmax(&p.mu).iter().zip(&beta) {
            prop_assert!(rel_close(*m, b / total, 1e-12));
        }
    }

    #[test]
    fn sigma_bound_holds_inside_the_ball(beta in prop::collection::vec(0.2f64..5.0, 2..8)) {
        let delta = beta.iter().map(|b| (b - 1.0).powi(2)).sum::<f64>().sqrt();
        let lb = sigma_lower_bound(delta, beta.len()).unwrap();
        let p = laplace_params(&beta).unwrap();
        prop_assert!(p.sigma_diag.iter().all(|s| *s >= lb - 1e-12), "{:?} < {lb}", p.sigma_diag);
    }

    #[test]
    fn top_ops_keeps_the_largest(beta in prop::collection::vec(0.1f64..10.0, 2..8), keep in 1usize..8) {
        prop_assume!(keep <= beta.len());
        let kept = top_ops(&beta, keep).unwrap();
        prop_assert_eq!(kept.len(), keep);
        prop_assert!(kept.windows(2).all(|w| w[0] < w[1]));
        let floor = kept.iter().map(|&i| beta[i]).fold(f64::INFINITY, f64::min);
        let dropped = (0..beta.len()).filter(|i| !kept.contains(i)).map(|i| beta[i]).fold(0.0, f64::max);
        prop_assert!(floor >= dropped);
    }

    #[test]
    fn widen_mapping_is_surjective(n in 1usize..16, extra in 0usize..16, seed in any::<u64>()) {
        let m = widen_mapping(n, n + extra, &mut Rng::new(seed)).unwrap();
        prop_assert_eq!(m.table.len(), n + extra);
        prop_assert!((0..n).all(|j| m.get(j) == j));
        prop_assert!(m.table.iter().all(|&j| j < n));
    }

    #[test]
    fn schedule_round_trips(stages in prop::collection::vec((1usize..50, 1usize..4, 2usize..5), 1..4)) {
        let text = stages.iter().map(|(e, k, o)| format!("{e}:{k}:{o}")).collect::<Vec<_>>().join(",");
        let parsed = StageSpec::parse_schedule(&text).unwrap();
        prop_assert_eq!(StageSpec::format_schedule(&parsed), text);
    }
}
