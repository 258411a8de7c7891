mod common;

use std::sync::Arc;
use std::time::Instant;

use metaction_core::geometry::RoadMap;
use metaction_core::kinematics::{ctra_step, ActionGrid};
use metaction_core::labeler::{LabelThresholds, MetaAction};
use metaction_core::policy::{Policy, PolicyConfig};
use metaction_core::scene::Scene;
use metaction_core::sim::*;
use metaction_core::synth::{generate_scene, ScriptedManeuver};
use rand::Rng;

fn two_agent_scene() -> Scene {
    generate_scene(
        &[ScriptedManeuver::new(MetaAction::KeepLane), ScriptedManeuver::new(MetaAction::LeftLaneChange)],
        &ActionGrid::default(),
        &LabelThresholds::default(),
        3,
    )
    .unwrap()
    .scene
}

fn config() -> SimConfig {
    SimConfig {
        grid: ActionGrid::new(3, 3.0, 3, 0.3).unwrap(),
        ..SimConfig::default()
    }
}

/// Micro policy whose meta tables are non-zero, so injection matters.
fn policy(seed: u64) -> Arc<Policy> {
    let mut p = Policy::new(PolicyConfig::micro(), seed).unwrap();
    let mut r = common::rng(seed + 100);
    let names: Vec<String> = p
        .params
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| n.starts_with("meta.embed.") || n.starts_with("inject.embed."))
        .collect();
    for n in names {
        for v in &mut p.params.get_mut(&n).unwrap().data {
            *v = r.gen_range(-1.0..1.0);
        }
    }
    Arc::new(p)
}

fn session(seed: u64) -> RolloutSession {
    create_session(&two_agent_scene(), policy(1), config(), seed).unwrap()
}

#[test]
fn new_session_holds_the_labelled_warmup() {
    let s = session(0);
    assert_eq!(s.current_frame(), 0);
    assert_eq!(s.horizon(), 80);
    for (states, meta) in s.states().iter().zip(s.meta_history()) {
        assert_eq!(states.len(), 10);
        assert_eq!(meta.len(), 10);
    }
    assert_eq!(s.agent_ids(), vec![1, 2]);
}

#[test]
fn same_seed_gives_the_same_first_record() {
    let a = session(42).step().unwrap();
    let b = session(42).step().unwrap();
    assert_eq!(a, b);
}

#[test]
fn distributions_are_normalised_and_history_follows_kinematics() {
    let mut s = session(5);
    for _ in 0..20 {
        let prev: Vec<_> = s.states().iter().map(|h| *h.last().unwrap()).collect();
        let rec = s.step().unwrap();
        for (a, p) in rec.agents.iter().zip(prev) {
            assert!((a.meta_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((a.action_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(a.meta_probs.len(), MetaAction::COUNT);
            let expected = ctra_step(&p, s.config().grid.dequantize(a.action_bin).unwrap(), 0.1).unwrap();
            assert_eq!(a.state, expected);
        }
    }
    for (states, meta) in s.states().iter().zip(s.meta_history()) {
        assert_eq!(states.len(), 30);
        assert_eq!(meta.len(), 30);
    }
}

#[test]
fn argmax_mode_ignores_the_seed() {
    let run = |seed| {
        let mut s = create_session(&two_agent_scene(), policy(1), SimConfig { temperature: 0.0, ..config() }, seed).unwrap();
        s.run_to_horizon().unwrap();
        s.trajectories()
    };
    assert_eq!(run(1), run(2));
}

#[test]
fn override_forces_the_meta_action() {
    let mut s = session(9);
    let rec = s.step_with(&[(2, MetaAction::LeftLaneChange)]).unwrap();
    assert!(rec.agents[1].injected);
    assert_eq!(rec.agents[1].meta_action, MetaAction::LeftLaneChange);
    assert!(!rec.agents[0].injected);
    let rec = s.step().unwrap();
    assert!(rec.agents[1].injected, "overrides persist");
    s.release_override(2).unwrap();
    assert!(!s.step().unwrap().agents[1].injected);
    assert_eq!(s.override_log().len(), 2);
}

#[test]
fn forcing_a_different_meta_action_changes_the_action_distribution() {
    let mut a = session(3);
    let mut b = session(3);
    let ra = a.step_with(&[(1, MetaAction::KeepLane)]).unwrap();
    let rb = b.step_with(&[(1, MetaAction::TurnRight)]).unwrap();
    assert_eq!(ra.agents[0].meta_probs, rb.agents[0].meta_probs);
    assert_ne!(ra.agents[0].action_probs, rb.agents[0].action_probs);
}

#[test]
fn overriding_one_agent_leaves_the_other_untouched() {
    let mut plain = session(11);
    let mut forced = session(11);
    let a = plain.step().unwrap();
    let b = forced.step_with(&[(2, MetaAction::RightUTurn)]).unwrap();
    assert_eq!(a.agents[0], b.agents[0]);
    assert_eq!(a.agents[1].meta_probs, b.agents[1].meta_probs);
}

#[test]
fn full_rollout_replays_from_its_log() {
    let mut s = session(17);
    s.schedule(OverrideEvent {
        frame: 50,
        agent: 2,
        command: OverrideCommand::Release,
    })
    .unwrap();
    for f in 0..80 {
        match f {
            20 => {
                s.step_with(&[(2, MetaAction::LeftLaneChange)]).unwrap();
            }
            35 => {
                s.step_with(&[(1, MetaAction::Stationary)]).unwrap();
            }
            _ => {
                s.step().unwrap();
            }
        }
    }
    assert_eq!(s.step(), Err(SimError::HorizonReached(80)));
    let log = s.override_log().to_vec();
    assert_eq!(log.len(), 3);
    let replayed = replay(&two_agent_scene(), policy(1), config(), 17, &log, 80).unwrap();
    assert_eq!(replayed, s.records());
}

#[test]
fn reset_returns_to_frame_zero() {
    let mut s = session(4);
    let first = s.step().unwrap();
    s.set_override(1, MetaAction::TurnLeft).unwrap();
    s.step().unwrap();
    s.reset().unwrap();
    assert_eq!(s.current_frame(), 0);
    assert!(s.override_log().is_empty());
    assert_eq!(s.step().unwrap(), first);
}

#[test]
fn past_and_unknown_overrides_are_rejected() {
    let mut s = session(0);
    s.step().unwrap();
    let past = OverrideEvent {
        frame: 0,
        agent: 1,
        command: OverrideCommand::Release,
    };
    assert!(matches!(s.schedule(past), Err(SimError::PastOverride { .. })));
    assert!(s.set_override(99, MetaAction::KeepLane).is_err());
}

#[test]
fn batch_of_one_equals_a_single_session() {
    let scene = two_agent_scene();
    let batch = rollout_batch(&scene, policy(1), &config(), 1, 21, &[]).unwrap();
    let mut s = create_session(&scene, policy(1), config(), 21).unwrap();
    s.run_to_horizon().unwrap();
    assert_eq!(batch[0].records, s.records());
    assert_eq!(batch[0].trajectories, s.trajectories());
    assert!(rollout_batch(&scene, policy(1), &config(), 0, 0, &[]).is_err());
}

#[test]
fn distinct_seeds_diverge() {
    let scene = two_agent_scene();
    for pair in 0..10u64 {
        let run = |seed| {
            let mut s = create_session(&scene, policy(1), config(), seed).unwrap();
            s.run_to_horizon().unwrap();
            s.records().iter().map(|r| r.agents[0].action_bin).collect::<Vec<_>>()
        };
        assert_ne!(run(2 * pair), run(2 * pair + 1));
    }
}

#[test]
fn batch_of_ten_is_fast() {
    let scene = two_agent_scene();
    let start = Instant::now();
    let batch = rollout_batch(&scene, policy(1), &config(), 10, 0, &[]).unwrap();
    let took = start.elapsed();
    println!("10 x 80 frames in {took:?}");
    assert_eq!(batch.len(), 10);
    assert!(batch.iter().all(|b| b.trajectories[0].len() == 90));
    assert!(took.as_secs_f64() < 5.0);
}

#[test]
fn foundation_agents_ignore_meta_actions() {
    let cfg = SimConfig {
        foundation_agents: vec![1],
        ..config()
    };
    let scene = two_agent_scene();
    let mut a = create_session(&scene, policy(1), cfg.clone(), 8).unwrap();
    let mut b = create_session(&scene, policy(1), cfg, 8).unwrap();
    let ra = a.step_with(&[(1, MetaAction::KeepLane)]).unwrap();
    let rb = b.step_with(&[(1, MetaAction::LeftUTurn)]).unwrap();
    assert_eq!(ra.agents[0].action_probs, rb.agents[0].action_probs);
}

#[test]
fn bad_inputs_are_reported() {
    let mut scene = two_agent_scene();
    let err = create_session(&Scene { map: RoadMap::new(vec![]).unwrap(), ..scene.clone() }, policy(1), config(), 0).unwrap_err();
    assert_eq!(err.to_string(), "no lanes");
    let wide = SimConfig {
        grid: ActionGrid::default(),
        ..config()
    };
    assert!(matches!(create_session(&scene, policy(1), wide, 0), Err(SimError::GridMismatch { .. })));
    for a in &mut scene.agents {
        a.track.states.truncate(6);
    }
    assert!(matches!(create_session(&scene, policy(1), config(), 0), Err(SimError::Warmup { found: 6, needed: 10 })));
}
