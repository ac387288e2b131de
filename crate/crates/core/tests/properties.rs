//! Randomised invariants over small problems.

use empc_core::analysis::{delta_field, dissipativity_residual, ideal_model, lemma1_decompose};
use empc_core::cost::QuadraticCost;
use empc_core::grid::{lifetime_to_gamma, AffineDrift, Grid, NoiseSpec};
use empc_core::mpc::{expected_value_model, DeterministicModel, open_loop_plan, MpcProblem, MpcSolver};
use empc_core::scenario::{CostSpec, MdpSpec};
use empc_core::sim::{compare_policies, estimate_discounted_return, rollout_batch, InitialState, Metric, SimConfig};
use empc_core::solvers::{
    advantage, finite_horizon_dp, policy_evaluation, stationary_distribution, value_iteration, Mdp,
};
use empc_core::tables::{interpolate, ValueTable};
use proptest::prelude::*;

fn noise() -> impl Strategy<Value = NoiseSpec> {
    prop_oneof![
        Just(NoiseSpec::deterministic()),
        (0.01..0.1f64, 1.0..3.0f64, 1.0..3.0f64)
            .prop_map(|(sd, lo, hi)| NoiseSpec::new(sd, -lo * sd, hi * sd).unwrap()),
    ]
}

fn cost() -> impl Strategy<Value = CostSpec> {
    prop_oneof![
        (1.0..3.0f64, 0.2..1.0f64).prop_map(|(buy, sell)| CostSpec::Energy { buy, sell }),
        (0.2..0.8f64).prop_map(|centre| CostSpec::Abs { centre }),
        (0.0..1.0f64, 0.5..2.0f64, 0.5..2.0f64).prop_map(|(r, w_ss, w_aa)| CostSpec::Quadratic(QuadraticCost {
            s_ref: r,
            a_ref: 0.0,
            w_ss,
            w_sa: 0.0,
            w_aa
        })),
        (-1.0..1.0f64).prop_map(CostSpec::Constant),
    ]
}

prop_compose! {
    fn spec()(n_s in 6usize..28, n_a in 3usize..10, a_max in 0.1..0.3f64, noise in noise(),
              cost in cost(), gamma in 0.5..0.95f64, contraction in 0.7..1.0f64) -> MdpSpec {
        MdpSpec {
            grid: Grid::new(0.0, 1.0, n_s, -a_max, a_max, n_a).unwrap(),
            drift: AffineDrift { state_coeff: contraction, action_coeff: 1.0, offset: 0.5 * (1.0 - contraction) },
            noise,
            cost,
            gamma,
        }
    }
}

fn config() -> ProptestConfig {
    ProptestConfig { cases: 48, ..ProptestConfig::default() }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn kernel_rows_are_stochastic(spec in spec()) {
        let k = spec.kernel();
        let g = spec.grid;
        for s in 0..g.n_states {
            for a in 0..g.n_actions {
                let row = k.row(s, a);
                prop_assert!(row.probs.iter().all(|&p| p >= 0.0) && row.violation >= 0.0);
                let total: f64 = row.probs.iter().sum::<f64>() + row.violation;
                prop_assert!((total - 1.0).abs() <= 1e-12);
                // conditional mean within one cell of the drift for interior rows
                if row.violation == 0.0 && !spec.noise.is_deterministic() {
                    let mean: f64 = row.cells().map(|(c, p)| p * g.state(c)).sum();
                    let target = spec.drift.apply(g.state(s), g.action(a)) + spec.noise.mean();
                    prop_assert!((mean - target).abs() <= g.state_width());
                }
            }
            prop_assert_eq!(k.prob(g.violation(), s % g.n_actions, g.violation()), 1.0);
        }
    }

    #[test]
    fn bellman_consistency(spec in spec()) {
        let k = spec.kernel();
        let c = spec.cost_table().unwrap();
        let mdp = Mdp::new(&k, &c).unwrap();
        let sol = value_iteration(&mdp, spec.gamma, 1e-10, 100_000).unwrap();
        let (v, pi) = sol.q.greedy();
        prop_assert_eq!(&v, &sol.values);
        prop_assert_eq!(&pi, &sol.policy);
        let adv = advantage(&sol.q, &sol.values);
        for s in 0..k.n_states() {
            if let Some(a) = sol.policy.get(s) {
                prop_assert!(adv.get(s, a).unwrap().abs() <= 1e-12);
                prop_assert!(adv.row(s).iter().flatten().all(|&x| x >= -1e-12));
            }
        }
        for w in sol.history.windows(2) {
            if w[0] > 1e-12 {
                prop_assert!(w[1] <= spec.gamma * w[0] * (1.0 + 1e-9) + 1e-14);
            }
        }
        if sol.policy.defined_count() > 0 {
            let pe = policy_evaluation(&mdp, &sol.policy, spec.gamma, 1e-11, 1_000_000).unwrap();
            prop_assert!(pe.max_abs_diff(&sol.values) <= 2e-10);
            // finite horizon with terminal V* reproduces the optimal policy
            let fh = finite_horizon_dp(&mdp, spec.gamma, 3, &sol.values).unwrap();
            for p in &fh.policies {
                prop_assert_eq!(p, &sol.policy);
            }
        }
    }

    #[test]
    fn finite_horizon_is_monotone_for_nonnegative_cost(spec in spec()) {
        let spec = MdpSpec { cost: CostSpec::Abs { centre: 0.5 }, ..spec };
        let k = spec.kernel();
        let c = spec.cost_table().unwrap();
        let mdp = Mdp::new(&k, &c).unwrap();
        let zero = ValueTable::zeros(k.n_states());
        let mut prev: Option<ValueTable> = None;
        for n in 0..5 {
            let fh = finite_horizon_dp(&mdp, spec.gamma, n, &zero).unwrap();
            if let Some(p) = &prev {
                for s in 0..k.n_states() {
                    if let (Some(a), Some(b)) = (p.get(s), fh.values[0].get(s)) {
                        prop_assert!(b >= a - 1e-12);
                    }
                }
            }
            prev = Some(fh.values[0].clone());
        }
    }

    #[test]
    fn stationary_distribution_is_invariant(spec in spec()) {
        let k = spec.kernel();
        let c = spec.cost_table().unwrap();
        let mdp = Mdp::new(&k, &c).unwrap();
        let sol = value_iteration(&mdp, spec.gamma, 1e-10, 100_000).unwrap();
        prop_assume!(sol.policy.defined_count() > 0);
        let st = stationary_distribution(&k, &sol.policy, 1e-12, 2_000_000).unwrap();
        let rho = &st.distribution;
        prop_assert!((rho.total() - 1.0).abs() <= 1e-12);
        prop_assert!(rho.mass.iter().all(|&m| m >= 0.0));
        prop_assert_eq!(rho.violation_mass(), 0.0);
        if !st.averaged {
            let n = k.n_states();
            let mut next = vec![0.0; n + 1];
            for s in 0..n {
                if let Some(a) = sol.policy.get(s) {
                    for (sp, p) in k.row(s, a).cells() {
                        next[sp] += rho.mass[s] * p;
                    }
                }
            }
            let l1: f64 = next.iter().zip(&rho.mass).map(|(a, b)| (a - b).abs()).sum();
            prop_assert!(l1 <= 1e-9);
        }
    }

    #[test]
    fn interpolation_hits_nodes_and_stays_between(vals in prop::collection::vec(-5.0..5.0f64, 4..20), t in 0.0..1.0f64) {
        let g = Grid::new(0.0, 1.0, vals.len(), -1.0, 1.0, 2).unwrap();
        let v: Vec<Option<f64>> = vals.iter().map(|&x| Some(x)).collect();
        for i in 0..vals.len() {
            prop_assert_eq!(interpolate(&g, &v, g.state(i)), Some(vals[i]));
        }
        let i = ((t * (vals.len() - 1) as f64) as usize).min(vals.len() - 2);
        let x = g.state(i) + t.fract() * g.state_width();
        let y = interpolate(&g, &v, x).unwrap();
        prop_assert!(y >= vals[i].min(vals[i + 1]) - 1e-12 && y <= vals[i].max(vals[i + 1]) + 1e-12);
    }

    #[test]
    fn lifetime_round_trip(p in 0.01..0.99f64, n in 1u64..100_000) {
        let gamma = lifetime_to_gamma(n, p).unwrap().gamma;
        prop_assert!(gamma > 0.0 && gamma < 1.0);
        prop_assert!((gamma.powf(n as f64) - p).abs() <= 1e-10 * p);
    }

    #[test]
    fn mpc_tables_are_consistent(spec in spec(), horizon in 0usize..5) {
        let k = spec.kernel();
        let c = spec.cost_table().unwrap();
        let model = expected_value_model(&k);
        let solver = MpcSolver::new(MpcProblem::new(&model, &c, horizon, spec.gamma, ValueTable::zeros(k.n_states()))).unwrap();
        let (pi, v, q) = solver.policy_table();
        let (v2, pi2) = q.greedy();
        prop_assert_eq!(v, v2);
        prop_assert_eq!(pi, pi2);
    }

    #[test]
    fn mpc_value_grows_with_horizon(spec in spec()) {
        let spec = MdpSpec { cost: CostSpec::Abs { centre: 0.5 }, ..spec };
        let k = spec.kernel();
        let c = spec.cost_table().unwrap();
        let model = expected_value_model(&k);
        let zero = ValueTable::zeros(k.n_states());
        let mut prev: Option<ValueTable> = None;
        for n in 0..5 {
            let (_, v, _) = MpcSolver::new(MpcProblem::new(&model, &c, n, spec.gamma, zero.clone())).unwrap().policy_table();
            if let Some(p) = &prev {
                for s in 0..k.n_states() {
                    if let (Some(a), Some(b)) = (p.get(s), v.get(s)) {
                        prop_assert!(b >= a - 1e-12);
                    }
                }
            }
            prev = Some(v);
        }
    }

    #[test]
    fn deterministic_collapse(spec in spec(), horizon in 0usize..6) {
        let spec = MdpSpec { noise: NoiseSpec::deterministic(), ..spec };
        let k = spec.kernel();
        let c = spec.cost_table().unwrap();
        let mdp = Mdp::new(&k, &c).unwrap();
        let sol = value_iteration(&mdp, spec.gamma, 1e-12, 100_000).unwrap();
        prop_assume!(sol.policy.defined_count() > 0);
        let model = expected_value_model(&k);
        let solver = MpcSolver::new(MpcProblem::new(&model, &c, horizon, spec.gamma, sol.values.clone())).unwrap();
        let (pi, v, _) = solver.policy_table();
        prop_assert_eq!(pi, sol.policy.clone());
        prop_assert!(v.max_abs_diff(&sol.values) <= 1e-9);
    }

    #[test]
    fn tightened_mpc_actions_never_leave_the_box(spec in spec(), sd in 0.01..0.1f64, lo in 0.5..2.0f64, hi in 0.5..2.0f64) {
        let noise = NoiseSpec::new(sd, -lo * sd, hi * sd).unwrap();
        let spec = MdpSpec { drift: AffineDrift::additive(), noise, ..spec };
        let k = spec.kernel();
        let c = spec.cost_table().unwrap();
        let g = spec.grid;
        let model = DeterministicModel::from_fn(&g, |s, a| Some(g.state(s) + g.action(a)));
        let w = spec.noise.support_hi.max(-spec.noise.support_lo);
        let p = MpcProblem::new(&model, &c, 3, spec.gamma, ValueTable::zeros(k.n_states())).with_tightening(w, w);
        let (pi, _, _) = MpcSolver::new(p).unwrap().policy_table();
        for s in 0..k.n_states() {
            if let Some(a) = pi.get(s) {
                prop_assert_eq!(k.row(s, a).violation, 0.0);
            }
        }
    }

    #[test]
    fn planning_never_beats_policies(spec in spec(), s0 in 0usize..6) {
        let spec = MdpSpec { grid: Grid::new(0.0, 1.0, 12, -0.2, 0.2, 5).unwrap(), ..spec };
        let k = spec.kernel();
        let c = spec.cost_table().unwrap();
        let mdp = Mdp::new(&k, &c).unwrap();
        let zero = ValueTable::zeros(k.n_states());
        let fh = finite_horizon_dp(&mdp, spec.gamma, 2, &zero).unwrap();
        let s0 = s0 * 2;
        if let Some(dp) = fh.values[0].get(s0) {
            let plan = open_loop_plan(&k, &c, spec.gamma, 2, &zero, s0, 1e4).unwrap();
            prop_assert!(plan.objective >= dp - 1e-10);
        }
    }

    #[test]
    fn lemma_decomposition_is_exact(spec in spec(), s in 0usize..6, a in 0usize..3) {
        let k = spec.kernel();
        let c = spec.cost_table().unwrap();
        let mdp = Mdp::new(&k, &c).unwrap();
        let sol = value_iteration(&mdp, spec.gamma, 1e-10, 100_000).unwrap();
        let model = expected_value_model(&k);
        let d = delta_field(&k, &c, &sol.values, &model, 1e4);
        let (s, a) = (s * k.n_states() / 6, a * k.n_actions() / 3);
        if let (Some(delta), Ok(r)) = (d.get(s, a), lemma1_decompose(&k, &sol.values, &model, s, a, 4, 1e4)) {
            let scale = 1e-12 * (1.0 + r.trace_term.abs() + r.delta.abs());
            prop_assert!((r.trace_term + r.remainder - r.delta).abs() <= scale);
            prop_assert!((r.delta - delta).abs() <= scale);
            prop_assert!(r.moment_bounds.iter().all(|&m| m >= 0.0));
        }
    }

    #[test]
    fn ideal_model_sits_on_the_level_set(spec in spec(), v0 in -0.05..0.05f64) {
        let k = spec.kernel();
        let c = spec.cost_table().unwrap();
        let mdp = Mdp::new(&k, &c).unwrap();
        let sol = value_iteration(&mdp, spec.gamma, 1e-10, 100_000).unwrap();
        let tol = 1e-9;
        let rep = ideal_model(&k, &sol.values, v0, tol);
        let g = spec.grid;
        for s in 0..g.n_states {
            for a in 0..g.n_actions {
                if let Some(x) = rep.model.next_state(s, a) {
                    let e: f64 = k.row(s, a).cells().map(|(sp, p)| p * sol.values.get(sp).unwrap()).sum();
                    let vx = sol.values.interpolate(&g, x).unwrap();
                    prop_assert!((vx - (e - v0)).abs() <= tol * (1.0 + e.abs()) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn quadratic_costs_are_dissipative(w_ss in 0.5..3.0f64, w_aa in 0.5..3.0f64, w_sa in -0.4..0.4f64, s_bar in 0.2..0.8f64) {
        let q = QuadraticCost { s_ref: s_bar, a_ref: 0.0, w_ss, w_sa, w_aa };
        let spec = MdpSpec {
            grid: Grid::new(0.0, 1.0, 15, -0.2, 0.2, 7).unwrap(),
            drift: AffineDrift::additive(),
            noise: NoiseSpec::deterministic(),
            cost: CostSpec::Quadratic(q),
            gamma: 0.9,
        };
        let k = spec.kernel();
        let c = spec.cost_table().unwrap();
        let model = expected_value_model(&k);
        let r = dissipativity_residual(&model, &c, &vec![0.0; 15], 0.5 * q.min_eigenvalue(), s_bar);
        prop_assert!(r.entries().iter().flatten().all(|&x| x >= -1e-12));
    }

    #[test]
    fn simulation_is_reproducible(spec in spec(), seed in any::<u64>()) {
        let k = spec.kernel();
        let c = spec.cost_table().unwrap();
        let mdp = Mdp::new(&k, &c).unwrap();
        let sol = value_iteration(&mdp, spec.gamma, 1e-10, 100_000).unwrap();
        let s0 = (0..k.n_states()).find(|&s| sol.policy.get(s).is_some());
        prop_assume!(s0.is_some());
        let init = InitialState::State(s0.unwrap());
        let cfg = SimConfig { horizon: 50, n_rollouts: 16, seed, big_m: 1e4 };
        let a = rollout_batch(&k, &c, &sol.policy, &init, &cfg).unwrap();
        let b = rollout_batch(&k, &c, &sol.policy, &init, &cfg).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.violation_count(), 0);
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()
            .install(|| estimate_discounted_return(&k, &c, &sol.policy, &init, spec.gamma, &cfg).unwrap());
        let parallel = estimate_discounted_return(&k, &c, &sol.policy, &init, spec.gamma, &cfg).unwrap();
        prop_assert_eq!(serial, parallel);
        let d = compare_policies(&k, &c, &sol.policy, &sol.policy, &init, Metric::Discounted(spec.gamma), &cfg).unwrap();
        prop_assert_eq!(d.mean_diff, 0.0);
    }
}
