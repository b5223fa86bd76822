//! Trace invariants of the continuous agent and REINFORCE on a bandit.

use ibp::diffcore::{AdamConfig, AdamState, Tape, Tensor};
use ibp::nn::{categorical_head, RelationalConfig};
use ibp::planner::{
    run_episode, tree_from_trace, AgentConfig, AgentParams, EpisodeLimits, EpisodeRngs, EpisodeSpec, ResourceSchedule,
    Strategy,
};
use ibp::rng::{SeedTree, Stream};
use ibp::spaceship::{apply_with_noise, sample_scene, TaskConfig, ThrustAction};
use ibp::trainer::{bandit_gradient_check, reinforce_manager, PolicyGradient};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_agent(seeds: &SeedTree) -> AgentParams {
    let config = AgentConfig {
        manager_hidden: vec![16],
        controller_hidden: vec![16],
        memory_hidden: 8,
        model: RelationalConfig {
            hidden: vec![16],
            effect_width: 4,
            reward_hidden: 4,
            ..Default::default()
        },
    };
    AgentParams::seeded(config, seeds)
}

fn spec(strategy: Strategy, schedule: ResourceSchedule) -> EpisodeSpec {
    EpisodeSpec {
        task: TaskConfig::default(),
        limits: EpisodeLimits::new(3, 4),
        strategy,
        schedule,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn traces_respect_their_strategy_and_limits(seed in any::<u64>(), which in 0usize..3, ramp in any::<bool>()) {
        let seeds = SeedTree::new(seed);
        let params = small_agent(&seeds);
        let strategy = [Strategy::OneStep, Strategy::NStep, Strategy::Tree][which];
        let schedule = if ramp { ResourceSchedule::ramp() } else { ResourceSchedule::Fixed { tau: 0.05 } };
        let s = spec(strategy, schedule);
        let scene = sample_scene(&mut seeds.rng(Stream::Env, 0), &s.task);
        let t = run_episode(&params, &scene, &s, &mut EpisodeRngs::for_episode(&seeds, 0)).unwrap();

        let forest = tree_from_trace(&t.records).unwrap();
        prop_assert_eq!(forest.len(), s.limits.max_real_steps);
        for tree in &forest {
            prop_assert!(tree.len() - 1 <= s.limits.max_imagined_steps);
            match strategy {
                Strategy::OneStep => prop_assert!(tree.is_star()),
                Strategy::NStep => prop_assert!(tree.is_path()),
                Strategy::Tree => {}
            }
        }
        for r in &t.records {
            prop_assert!(r.k <= s.limits.max_imagined_steps);
            prop_assert!(r.j < s.limits.max_real_steps);
        }

        // Resource cost is the schedule summed over imagination records.
        let expected: f64 = t.records.iter().filter(|r| !r.is_real()).map(|r| s.schedule.cost(r.j)).sum();
        prop_assert!((t.resource_cost - expected).abs() < 1e-12);

        // The real trajectory depends only on executed actions and noise.
        let mut world = scene.clone();
        let per_dv = scene.ship_mass / s.task.dt;
        for r in t.records.iter().filter(|r| r.is_real()) {
            let a = ThrustAction::new(r.action[0] * per_dv, r.action[1] * per_dv);
            world = apply_with_noise(&world, &a, r.noise.unwrap(), &s.task).next;
            prop_assert_eq!(world.observation(), r.result_state.clone());
        }
    }
}

#[test]
fn reinforce_matches_the_bandit_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for logits in [[0.0, 0.0], [0.7, -0.4], [-1.5, 0.5]] {
        let c = bandit_gradient_check(&logits, &[0.0, 1.0], 10_000, &mut rng).unwrap();
        assert!(c.max_z() < 3.0, "{c:?}");
    }
}

#[test]
fn dominant_route_probability_never_falls_without_entropy() {
    let mut theta = Tensor::row(vec![0.3, -0.2]);
    let mut opt = AdamState::new([&theta]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let prob = |t: &Tensor| {
        let d = t.data();
        1.0 / (1.0 + (d[0] - d[1]).exp())
    };
    let mut last = prob(&theta);
    for _ in 0..50 {
        let mut pg = PolicyGradient::new([&theta]);
        for _ in 0..16 {
            let mut tape = Tape::new();
            let id = tape.leaf(theta.clone());
            let pick = categorical_head(&mut tape, id, None, &mut rng).unwrap();
            let r = [0.0, 1.0][pick.index];
            pg.add_episode(&mut tape, &[(pick.log_prob, pick.entropy)], &[r], 0.0, &[id])
                .unwrap();
        }
        reinforce_manager(&pg, &mut [&mut theta], &mut opt, &AdamConfig::with_lr(0.05), 10.0).unwrap();
        let p = prob(&theta);
        assert!(p >= last, "{p} < {last}");
        last = p;
    }
    assert!(last > 0.9);
}
