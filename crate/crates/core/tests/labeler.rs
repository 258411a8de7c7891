mod common;

use metaction_core::control_fit::{fit_controls, FitConfig};
use metaction_core::kinematics::ActionGrid;
use metaction_core::labeler::{
    compare_to_truth, label_actions, label_trajectory, windowed_features, LabelConfig, LabelRule, LabelThresholds,
    MetaAction,
};
use metaction_core::synth::{generate_scene, sample_maneuver, scripted_corpus, GeneratedScene, ScriptedManeuver};
use rand::Rng;

fn labels_of(g: &GeneratedScene, cfg: &LabelConfig) -> Vec<MetaAction> {
    label_actions(&g.scene.agents[0].track, &g.scene.map, cfg).unwrap()
}

fn single(m: ScriptedManeuver) -> GeneratedScene {
    generate_scene(&[m], &ActionGrid::default(), &LabelThresholds::default(), 0).unwrap()
}

fn runs(labels: &[MetaAction]) -> Vec<(MetaAction, usize)> {
    let mut out: Vec<(MetaAction, usize)> = Vec::new();
    for &l in labels {
        match out.last_mut() {
            Some((a, n)) if *a == l => *n += 1,
            _ => out.push((l, 1)),
        }
    }
    out
}

#[test]
fn scripted_corpus_matches_ground_truth_per_class() {
    let cfg = LabelConfig::default();
    let corpus = scripted_corpus(20, &ActionGrid::default(), &cfg.thresholds, 5).unwrap();
    for class in corpus.chunks(20) {
        let kind = class[0].ground_truth[0].iter().copied().find(|&l| l != MetaAction::KeepLane);
        let total = class
            .iter()
            .map(|g| compare_to_truth(&labels_of(g, &cfg), &g.ground_truth[0], cfg.half_width))
            .reduce(|a, b| a.merge(b))
            .unwrap();
        assert!(total.rate() >= 0.95, "{kind:?}: {total:?}");
        assert_eq!(total.far_mismatches, 0, "{kind:?}: {total:?}");
    }
}

#[test]
fn mirroring_swaps_left_and_right_exactly() {
    let cfg = LabelConfig::default();
    for g in scripted_corpus(4, &ActionGrid::default(), &cfg.thresholds, 9).unwrap() {
        let labels = labels_of(&g, &cfg);
        let m = g.scene.mirrored();
        let mirrored = label_actions(&m.agents[0].track, &m.map, &cfg).unwrap();
        let expected: Vec<_> = labels.iter().map(|l| l.mirrored()).collect();
        assert_eq!(mirrored, expected);
    }
}

#[test]
fn raising_d_min_only_removes_lane_changes() {
    let mut rng = common::rng(21);
    for kind in [MetaAction::LeftLaneChange, MetaAction::RightLaneChange, MetaAction::LeftUTurn] {
        let g = single(sample_maneuver(kind, &mut rng));
        for smoothing in [false, true] {
            let mut previous: Option<Vec<MetaAction>> = None;
            for d_min in [1.0, 1.75, 2.5, 3.0, 3.4, 5.0] {
                let mut cfg = LabelConfig::default();
                cfg.smoothing = smoothing;
                cfg.thresholds.d_min = d_min;
                let labels = labels_of(&g, &cfg);
                if let Some(prev) = &previous {
                    for (now, before) in labels.iter().zip(prev) {
                        if now.is_lane_change() {
                            assert_eq!(now, before);
                        }
                    }
                }
                previous = Some(labels);
            }
        }
    }
}

#[test]
fn rigid_motion_leaves_labels_unchanged() {
    let cfg = LabelConfig::default();
    let mut rng = common::rng(4);
    for g in scripted_corpus(4, &ActionGrid::default(), &cfg.thresholds, 13).unwrap() {
        let labels = labels_of(&g, &cfg);
        let angle = rng.gen_range(-3.1..3.1);
        let moved = g.scene.transformed(angle, rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0));
        assert_eq!(label_actions(&moved.agents[0].track, &moved.map, &cfg).unwrap(), labels);
    }
}

#[test]
fn lane_change_scene_reads_keep_change_keep() {
    let g = single(ScriptedManeuver::new(MetaAction::LeftLaneChange));
    let r: Vec<MetaAction> = runs(&labels_of(&g, &LabelConfig::default())).into_iter().map(|r| r.0).collect();
    assert_eq!(r, [MetaAction::KeepLane, MetaAction::LeftLaneChange, MetaAction::KeepLane]);
}

#[test]
fn s_curve_curvature_changes_sign() {
    let g = single(ScriptedManeuver::new(MetaAction::LeftLaneChange));
    let first = g.ground_truth[0].iter().position(|l| l.is_lane_change()).unwrap();
    let last = g.ground_truth[0].iter().rposition(|l| l.is_lane_change()).unwrap();
    let cfg = LabelConfig::default();
    let mid = (first + last) / 2;
    let f = windowed_features(&g.scene.agents[0].track, &g.scene.map, mid, &cfg).unwrap();
    let lo = f.kappa_profile.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = f.kappa_profile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(lo < 0.0 && hi > 0.0, "{lo} {hi}");
    assert!(f.lane_changes >= 1);
}

#[test]
fn right_turn_run_covers_the_arc() {
    let cfg = LabelConfig::default();
    let g = single(ScriptedManeuver::new(MetaAction::TurnRight));
    let expected = g.ground_truth[0].iter().filter(|&&l| l == MetaAction::TurnRight).count();
    let longest = runs(&labels_of(&g, &cfg))
        .into_iter()
        .filter(|r| r.0 == MetaAction::TurnRight)
        .map(|r| r.1)
        .max()
        .unwrap_or(0);
    assert!(longest + 2 * cfg.half_width >= expected, "{longest} vs {expected}");
}

#[test]
fn u_turn_and_stop_scripts_are_recognised() {
    let cfg = LabelConfig::default();
    for kind in [MetaAction::LeftUTurn, MetaAction::RightUTurn, MetaAction::Stationary] {
        let g = single(ScriptedManeuver::new(kind));
        let labels = labels_of(&g, &cfg);
        assert!(labels.iter().filter(|&&l| l == kind).count() >= 10, "{kind}");
    }
}

#[test]
fn every_frame_gets_exactly_one_rule() {
    let g = single(ScriptedManeuver::new(MetaAction::LeftUTurn));
    let cfg = LabelConfig::default();
    let labels = label_trajectory(&g.scene.agents[0].track, &g.scene.map, &cfg).unwrap();
    assert_eq!(labels.len(), g.scene.frame_count());
    for l in &labels {
        let ok = match l.rule {
            LabelRule::Stationary => l.action == MetaAction::Stationary,
            LabelRule::UTurn => matches!(l.action, MetaAction::LeftUTurn | MetaAction::RightUTurn),
            LabelRule::Turn => matches!(l.action, MetaAction::TurnLeft | MetaAction::TurnRight),
            LabelRule::LaneChange => l.action.is_lane_change(),
            LabelRule::KeepLane | LabelRule::Fallback => l.action == MetaAction::KeepLane,
            LabelRule::Smoothed => true,
        };
        assert!(ok, "{l:?}");
    }
    assert_eq!(label_trajectory(&g.scene.agents[0].track, &g.scene.map, &cfg).unwrap(), labels);
}

#[test]
fn generated_tracks_round_trip_through_control_fit() {
    let grid = ActionGrid::default();
    let mut rng = common::rng(8);
    for kind in MetaAction::ALL {
        let g = single(sample_maneuver(kind, &mut rng));
        let fit = fit_controls(&g.scene.agents[0].track, &grid, &FitConfig::default()).unwrap();
        assert_eq!(fit.bin_indices, g.action_bins[0], "{kind}");
        assert!(fit.max_residual() <= 1e-6, "{kind}");
    }
}
