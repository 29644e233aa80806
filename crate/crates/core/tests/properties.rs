use pairvdn::boxjump::{BoxJumpConfig, BoxWorldState, Physics, OBS_DIM};
use pairvdn::matrix::{fit_decomposition, MatrixGameSpec, Payoff};
use pairvdn::maximizer::{
    argmax_bruteforce, argmax_cycle, argmax_graph, evaluate_joint, FactorTopology, PairwiseTableSet,
};
use pairvdn::models::{
    compute_q, greedy_actions, joint_value, td_targets, JointObservation, ModelKind, QOutput, Transition,
};
use pairvdn::nn::{ema_update, MlpParams};
use pairvdn::training::{evaluate, train, EnvSpec, EpsilonSchedule, Policy, QModel, ReplayBuffer, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn all_joint(n: usize, na: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|p: Vec<usize>| {
                (0..na).map(move |a| {
                    let mut v = p.clone();
                    v.push(a);
                    v
                })
            })
            .collect();
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cycle_and_graph_agree_with_bruteforce(seed: u64, n in 2usize..=7, na in 2usize..=4) {
        let mut r = rng(seed);
        let q = PairwiseTableSet::random(n, na, -1.0, 1.0, &mut r).unwrap();
        let cycle = FactorTopology::cycle(n).unwrap();
        let brute = argmax_bruteforce(&q, &cycle).unwrap();
        let dp = argmax_cycle(&q).unwrap();
        prop_assert!((dp.value - brute.value).abs() <= 1e-9);
        prop_assert_eq!(evaluate_joint(&q, &cycle, &dp.actions).unwrap().to_bits(), dp.value.to_bits());

        let topo = FactorTopology::random(n, &mut r).unwrap();
        let g = argmax_graph(&q, &topo).unwrap();
        let gb = argmax_bruteforce(&q, &topo).unwrap();
        prop_assert!((g.value - gb.value).abs() <= 1e-9);
        prop_assert_eq!(evaluate_joint(&q, &topo, &g.actions).unwrap().to_bits(), g.value.to_bits());
    }

    #[test]
    fn shifting_one_table_shifts_the_optimum(
        seed: u64, n in 2usize..=6, na in 2usize..=4, c in -3.0f64..3.0, w in 0.1f64..2.0,
    ) {
        let mut r = rng(seed);
        let mut q = PairwiseTableSet::random(n, na, -1.0, 1.0, &mut r).unwrap();
        let i = r.gen_range(0..n);
        let mut weights = vec![1.0; n];
        weights[i] = w;
        q.set_weights(weights).unwrap();
        let mut shifted = q.clone();
        shifted.table_mut(i).iter_mut().for_each(|v| *v += c);
        let topo = FactorTopology::cycle(n).unwrap();
        let base = argmax_cycle(&q).unwrap();
        let moved = argmax_cycle(&shifted).unwrap();
        prop_assert!((moved.value - (base.value + w * c)).abs() <= 1e-9);
        let on_original = evaluate_joint(&q, &topo, &moved.actions).unwrap();
        prop_assert!((on_original + w * c - moved.value).abs() <= 1e-9);
    }

    #[test]
    fn scaling_weights_scales_the_optimum(seed: u64, n in 2usize..=6, na in 2usize..=4, lambda in 0.01f64..10.0) {
        let mut r = rng(seed);
        let q = PairwiseTableSet::random(n, na, -1.0, 1.0, &mut r).unwrap();
        let mut scaled = q.clone();
        scaled.set_weights(vec![lambda; n]).unwrap();
        let topo = FactorTopology::cycle(n).unwrap();
        let base = argmax_cycle(&q).unwrap();
        let big = argmax_cycle(&scaled).unwrap();
        let tol = 1e-9 * lambda.max(1.0);
        prop_assert!((big.value - lambda * base.value).abs() <= tol);
        prop_assert!((evaluate_joint(&scaled, &topo, &base.actions).unwrap() - big.value).abs() <= tol);
    }

    #[test]
    fn negative_weights_still_match_bruteforce(seed: u64, n in 3usize..=7, na in 2usize..=3) {
        let mut r = rng(seed);
        let mut q = PairwiseTableSet::random(n, na, -1.0, 1.0, &mut r).unwrap();
        q.set_weights((0..n).map(|_| r.gen_range(-2.0..-0.1)).collect()).unwrap();
        let topo = FactorTopology::random(n, &mut r).unwrap();
        let g = argmax_graph(&q, &topo).unwrap();
        let b = argmax_bruteforce(&q, &topo).unwrap();
        prop_assert!((g.value - b.value).abs() <= 1e-9);
    }

    #[test]
    fn relabelling_actions_permutes_the_argmax(seed: u64, n in 2usize..=6, na in 2usize..=4) {
        let mut r = rng(seed);
        let q = PairwiseTableSet::random(n, na, -1.0, 1.0, &mut r).unwrap();
        let agent = r.gen_range(0..n);
        let mut perm: Vec<usize> = (0..na).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let prev = (agent + n - 1) % n;
        let mut relabelled = q.clone();
        for a in 0..na {
            for b in 0..na {
                relabelled.table_mut(agent)[perm[a] * na + b] = q.get(agent, a, b);
            }
        }
        // the in-edge table, read after the first rewrite when n == 2
        let source = relabelled.clone();
        for a in 0..na {
            for b in 0..na {
                relabelled.table_mut(prev)[a * na + perm[b]] = source.get(prev, a, b);
            }
        }
        let topo = FactorTopology::cycle(n).unwrap();
        let base = argmax_cycle(&q).unwrap();
        let moved = argmax_cycle(&relabelled).unwrap();
        prop_assert!((base.value - moved.value).abs() <= 1e-9);
        let mut mapped = base.actions.clone();
        mapped[agent] = perm[mapped[agent]];
        prop_assert!((evaluate_joint(&relabelled, &topo, &mapped).unwrap() - moved.value).abs() <= 1e-9);
    }

    #[test]
    fn forward_is_deterministic_and_ema_fixes_equal_params(seed: u64, c in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let p = MlpParams::init(&[4, 6, 3], &mut r).unwrap();
        let x: Vec<f64> = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
        let a = p.forward(&x).unwrap();
        let b = p.forward(&x).unwrap();
        prop_assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        prop_assert_eq!(ema_update(&p, &p, c).unwrap(), p);
    }

    #[test]
    fn greedy_actions_are_optimal_per_model(seed: u64, n in 2usize..=5, na in 2usize..=3) {
        let mut r = rng(seed);
        let obs_dim = 3;
        let jo = JointObservation::new(n, obs_dim, (0..n * obs_dim).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        for kind in [ModelKind::Vdn, ModelKind::Iql, ModelKind::PairVdn] {
            let p = MlpParams::init(&kind.layer_sizes(obs_dim, n, na, &[8]), &mut r).unwrap();
            let q = compute_q(kind, &p, &jo).unwrap();
            let greedy = greedy_actions(kind, &q).unwrap();
            match &q {
                QOutput::PerAgent { values, .. } => {
                    for (i, v) in values.iter().enumerate() {
                        let best = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        prop_assert_eq!(v[greedy[i]], best);
                    }
                }
                QOutput::Pair(_) => {
                    let best = all_joint(n, na)
                        .iter()
                        .map(|a| joint_value(kind, &q, a).unwrap())
                        .fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!((joint_value(kind, &q, &greedy).unwrap() - best).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn pairwise_tables_embed_any_additive_value(seed: u64, n in 2usize..=5, na in 1usize..=3) {
        let mut r = rng(seed);
        let values: Vec<Vec<f64>> = (0..n).map(|_| (0..na).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let vdn = QOutput::PerAgent { num_actions: na, values: values.clone() };
        let tables: Vec<Vec<Vec<f64>>> = values
            .iter()
            .map(|v| (0..na).map(|a| vec![v[a]; na]).collect())
            .collect();
        let pair = QOutput::Pair(PairwiseTableSet::from_nested(&tables).unwrap());
        for a in all_joint(n, na) {
            let x = joint_value(ModelKind::Vdn, &vdn, &a).unwrap();
            let y = joint_value(ModelKind::PairVdn, &pair, &a).unwrap();
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn agent_output_depends_only_on_own_row_and_id(seed: u64, n in 2usize..=6) {
        let mut r = rng(seed);
        let obs_dim = 3;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..obs_dim).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
        let p = MlpParams::init(&ModelKind::Vdn.layer_sizes(obs_dim, n, 4, &[8]), &mut r).unwrap();
        let agent = r.gen_range(0..n);
        // shuffle everyone else's rows
        let mut others: Vec<usize> = (0..n).filter(|&i| i != agent).collect();
        rand::seq::SliceRandom::shuffle(others.as_mut_slice(), &mut r);
        let mut permuted = rows.clone();
        for (slot, src) in (0..n).filter(|&i| i != agent).zip(&others) {
            permuted[slot] = rows[*src].clone();
        }
        let a = JointObservation::from_rows(&rows).unwrap();
        let b = JointObservation::from_rows(&permuted).unwrap();
        let mut manual = rows[agent].clone();
        manual.extend((0..n).map(|k| if k == agent { 1.0 } else { 0.0 }));
        let direct = p.forward(&manual).unwrap();
        prop_assert_eq!(&p.forward(&a.agent_input(agent)).unwrap(), &direct);
        prop_assert_eq!(&p.forward(&b.agent_input(agent)).unwrap(), &direct);
    }

    #[test]
    fn td_targets_bound_rewards_for_nonnegative_nets(seed: u64, gamma in 0.01f64..1.0) {
        let mut r = rng(seed);
        let (n, obs_dim, na) = (3, 2, 2);
        let obs = |r: &mut ChaCha8Rng| {
            JointObservation::new(n, obs_dim, (0..n * obs_dim).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
        };
        for kind in [ModelKind::PairVdn, ModelKind::Vdn, ModelKind::Iql] {
            let mut p = MlpParams::init(&kind.layer_sizes(obs_dim, n, na, &[5]), &mut r).unwrap();
            p.for_each_param_mut(|v| *v = v.abs());
            let batch: Vec<Transition> = (0..4)
                .map(|_| Transition {
                    obs: obs(&mut r),
                    actions: vec![0; n],
                    reward: r.gen_range(-1.0..1.0),
                    next_obs: obs(&mut r),
                    done: false,
                })
                .collect();
            let ys = td_targets(kind, &p, &batch, gamma).unwrap();
            let width = ys.len() / batch.len();
            for (k, t) in batch.iter().enumerate() {
                for y in &ys[k * width..(k + 1) * width] {
                    prop_assert!(*y >= t.reward);
                }
            }
        }
    }

    #[test]
    fn pair_fit_never_loses_to_additive_fit(seed: u64, n in 2usize..=4, na in 2usize..=3) {
        let mut r = rng(seed);
        let table: Vec<f64> = (0..na.pow(n as u32)).map(|_| r.gen_range(-1.0..1.0)).collect();
        let spec = MatrixGameSpec::new(n, na, Payoff::FullTable(table)).unwrap();
        let pair = fit_decomposition(ModelKind::PairVdn, &spec, 4000).unwrap();
        let vdn = fit_decomposition(ModelKind::Vdn, &spec, 4000).unwrap();
        prop_assert!(pair <= vdn + 1e-6, "pair {} vdn {}", pair, vdn);
    }

    #[test]
    fn epsilon_is_monotone_with_exact_endpoints(
        start in 0.0f64..=1.0, frac in 0.0f64..=1.0, total in 1usize..5000,
    ) {
        let end = start * frac;
        let s = EpsilonSchedule::new(start, end, total).unwrap();
        if total > 1 {
            prop_assert_eq!(s.value(0), start);
        }
        prop_assert_eq!(s.value(total - 1), end);
        prop_assert_eq!(s.value(total + 10), end);
        let mut prev = s.value(0);
        for step in 1..total {
            let v = s.value(step);
            prop_assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn replay_buffer_drops_the_oldest(capacity in 1usize..50, extra in 0usize..60) {
        let mut buf = ReplayBuffer::new(capacity).unwrap();
        let jo = JointObservation::new(1, 1, vec![0.0]).unwrap();
        for k in 0..capacity + extra {
            buf.push(Transition {
                obs: jo.clone(),
                actions: vec![0],
                reward: k as f64,
                next_obs: jo.clone(),
                done: true,
            });
        }
        prop_assert_eq!(buf.len(), capacity);
        let kept: Vec<f64> = buf.iter_oldest_first().map(|t| t.reward).collect();
        let want: Vec<f64> = (extra..capacity + extra).map(|k| k as f64).collect();
        prop_assert_eq!(kept, want);
    }

    #[test]
    fn same_seed_and_actions_replay_exactly(seed: u64, act_seed: u64) {
        let cfg = BoxJumpConfig::new(6, 120);
        let mut a = BoxWorldState::reset(&cfg, seed).unwrap();
        let mut b = BoxWorldState::reset(&cfg, seed).unwrap();
        let mut r = rng(act_seed);
        while !a.is_done() {
            let acts: Vec<usize> = (0..6).map(|_| r.gen_range(0..4)).collect();
            let ra = a.step(&acts).unwrap();
            let rb = b.step(&acts).unwrap();
            prop_assert_eq!(ra.reward.to_bits(), rb.reward.to_bits());
            prop_assert_eq!(&a, &b);
        }
    }
}

#[test]
fn unison_optimum_is_n_and_only_at_unison() {
    for (n, na) in [(2, 2), (3, 3), (4, 2), (5, 3)] {
        let spec = MatrixGameSpec::unison(n, na).unwrap();
        for a in all_joint(n, na) {
            let v = spec.payoff(&a).unwrap();
            let unison = a.iter().all(|&x| x == a[0]);
            assert!(v <= n as f64);
            assert_eq!(v == n as f64, unison, "{a:?} -> {v}");
        }
    }
}

#[test]
fn constants_rule_out_tunnelling() {
    let ph = Physics::default();
    assert!(ph.max_speed * ph.dt < ph.box_side / 2.0);
}

#[test]
fn observations_stay_in_range_and_best_height_is_monotone() {
    let cfg = BoxJumpConfig::new(8, 400);
    let ph = Physics::default();
    let mut r = rng(5);
    for episode in 0..100 {
        let mut s = BoxWorldState::reset(&cfg, episode).unwrap();
        let mut best = s.y_best();
        while !s.is_done() {
            let before: Vec<(f64, f64)> = (0..8).map(|i| s.position(i)).collect();
            let acts: Vec<usize> = (0..8).map(|_| r.gen_range(0..4)).collect();
            s.step(&acts).unwrap();
            assert!(s.y_best() >= best);
            best = s.y_best();
            let mut highest = f64::NEG_INFINITY;
            for i in 0..8 {
                let o = s.agent_observation(i);
                assert_eq!(o.len(), OBS_DIM);
                for k in [0, 1, 5, 6, 7, 8, 10, 11] {
                    assert!((0.0..=1.0).contains(&o[k]), "component {k} = {}", o[k]);
                }
                for k in [2, 3] {
                    assert!(o[k].abs() <= ph.max_speed);
                }
                assert_eq!(o[4], 0.0);
                assert!(o[9] == 0.0 || o[9] == 1.0);
                if !s.fallen(i) {
                    highest = highest.max(s.position(i).1);
                    let (x0, y0) = before[i];
                    let (x1, y1) = s.position(i);
                    assert!((x1 - x0).abs() <= ph.max_speed * ph.dt + 1e-12);
                    assert!(y1 - y0 <= ph.max_speed * ph.dt + 1e-12);
                }
            }
            if highest.is_finite() {
                assert!(s.y_best() >= highest);
            }
        }
    }
}

#[test]
fn training_takes_one_sgd_step_per_transition() {
    let cfg = TrainConfig {
        epochs: 2,
        explore_per_epoch: 25,
        hidden: vec![8],
        batch_size: 4,
        eval_episodes: 1,
        ..TrainConfig::default()
    };
    let spec = EnvSpec::Matrix(MatrixGameSpec::unison(3, 2).unwrap());
    let out = train(&cfg, &spec, ModelKind::Vdn).unwrap();
    assert_eq!(out.env_steps, 50);
    assert_eq!(out.sgd_steps, 50);
    assert_eq!(out.curve.len(), 2);
}

#[test]
fn longer_horizon_never_lowers_a_fall_free_greedy_score() {
    let n = 4;
    let mut r = rng(21);
    let params = MlpParams::init(&ModelKind::PairVdn.layer_sizes(OBS_DIM, n, 4, &[32, 32]), &mut r).unwrap();
    let model = QModel { kind: ModelKind::PairVdn, params };
    let mut env = EnvSpec::BoxJump(BoxJumpConfig::new(n, 400)).build().unwrap();
    let mut checked = 0;
    let mut seed = 0;
    while checked < 20 && seed < 500 {
        let (_, short) = evaluate(env.as_mut(), &mut Policy::Greedy(&model), 1, 400, seed).unwrap();
        let (_, long) = evaluate(env.as_mut(), &mut Policy::Greedy(&model), 1, 1000, seed).unwrap();
        seed += 1;
        // totals below the resting height mean someone fell
        if short[0] < 0.0 || long[0] < 0.0 {
            continue;
        }
        assert!(long[0] >= short[0], "seed {}: {} < {}", seed - 1, long[0], short[0]);
        checked += 1;
    }
    assert_eq!(checked, 20);
}
