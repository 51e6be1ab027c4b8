// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::agent::tests::tiny_config;
use crate::agent::{sample_action, HeadPatch, PolicyConfig};
use crate::trace::record_rollout;
use crate::world::{build_scenario, ScenarioSpec};

fn toy(window: usize, seed: u64) -> Policy {
    Policy::new(PolicyConfig { window, ..tiny_config() }, seed).unwrap()
}

fn world() -> WorldState {
    build_scenario(&ScenarioSpec::preset("villager_tree", 0).unwrap()).unwrap()
}

fn dist(p: Vec<Vec<f32>>) -> ActionDistribution {
    ActionDistribution::from_probs(p)
}

#[test]
fn impact_metric_examples() {
    let a = dist(vec![vec![0.5, 0.5]]);
    let b = dist(vec![vec![0.7, 0.3]]);
    let m = impact_metrics(&a, &b).unwrap();
    assert!((m.dp[0][0] - 0.2).abs() < 1e-6);
    assert!((m.dlogp[0][0] - 1.4f64.ln()).abs() < 1e-6);
    assert!((m.dlogp[0][0] - 0.3365).abs() < 1e-4);
    let z = impact_metrics(&a, &a).unwrap();
    assert!(z.dp[0].iter().chain(&z.dlogp[0]).all(|&v| v == 0.0));
    let floor = impact_metrics(&dist(vec![vec![0.0, 1.0]]), &dist(vec![vec![0.5, 0.5]])).unwrap();
    assert!(floor.max_abs_dlogp.is_finite());
    assert!(impact_metrics(&a, &dist(vec![vec![1.0, 0.0, 0.0]])).is_err());
}

#[test]
fn sweep_equals_naive_replay() {
    let p = toy(8, 31);
    let steer = InterventionKind::Steer {
        site: SteerSite::Block0Mlp,
        vector: (0..p.config.mlp_hidden).map(|i| (i as f32 * 0.37).sin()).collect(),
        alpha: 0.5,
    };
    let patch = InterventionKind::AblateOutput {
        layer: 1,
        head: 1,
        position: 6,
        mode: AblationMode::Zero,
        mean: None,
    };
    for specs in [vec![], vec![steer.into(), patch.into()]] {
        let tr = record_rollout_with(world(), &p, &RecordingPlan::default(), 32, 0, specs).unwrap();
        let means = HeadMeans::from_trace(&tr).unwrap();
        let frames = tr.all_frames().unwrap();
        for t in [0, 3, 7, 20, 31] {
            for mode in [AblationMode::Zero, AblationMode::Mean] {
                let sw = sweep_frame(&p, &tr, t, mode, Some(&means)).unwrap();
                assert_eq!(sw.target_count(), 2 * 2 * (t + 1).min(8));
                assert_eq!(sw.baseline, tr.distribution(t).flat_probs());
                let start = tr.window_starts()[t];
                let entries = frame_entries(&p, &frames[start..=t]);
                let refs: Vec<&FrameEntry> = entries.iter().collect();
                let fc = resolve(&tr.manifest.interventions, t, &p).unwrap();
                for l in 0..2 {
                    for h in 0..2 {
                        for i in 0..sw.n {
                            let mut hooks = fc.hooks.clone();
                            hooks.patches.push(HeadPatch {
                                layer: l,
                                head: h,
                                slot: Some(sw.slot(i)),
                                value: (mode == AblationMode::Mean).then(|| means.get(l, h).unwrap().to_vec()),
                            });
                            let acts = p.forward_window(&refs, &hooks, false);
                            let m = impact_metrics(&tr.distribution(t), &p.distribution(&acts.logits)).unwrap();
                            let naive: Vec<f32> = m.dp.concat().into_iter().map(|v| v as f32).collect();
                            assert_eq!(sw.dp_at(l, h, i), naive.as_slice(), "t={t} ({l},{h},{i})");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn ablate_and_eval_leaves_baseline_intact() {
    let p = toy(8, 32);
    let tr = record_rollout(world(), &p, &RecordingPlan::default(), 12, 1).unwrap();
    let spec: InterventionSpec = InterventionKind::AblateHead {
        layer: 0,
        head: 1,
        mode: AblationMode::Zero,
        mean: None,
    }
    .into();
    let (b, m) = ablate_and_eval(&p, &tr, 9, &spec).unwrap();
    assert_eq!(b, tr.distribution(9));
    assert_ne!(b, m);
    let again = record_rollout(world(), &p, &RecordingPlan::default(), 12, 1).unwrap();
    assert_eq!(again, tr);
    let bad: InterventionSpec = InterventionKind::AblateHead {
        layer: 5,
        head: 0,
        mode: AblationMode::Zero,
        mean: None,
    }
    .into();
    assert!(matches!(ablate_and_eval(&p, &tr, 0, &bad), Err(Error::Usage(_))));
}

#[test]
fn zero_and_mean_ablations_of_silent_head_are_no_ops() {
    let mut p = toy(8, 33);
    // Head 0 of layer 0 gets zero value weights, so its outputs are exactly 0.
    let b = p.layout.blocks[0];
    let (d, dh) = (p.config.d_model, p.config.head_dim());
    let wv = p.params[b.wv].data_mut();
    for r in 0..d {
        wv[r * d..r * d + dh].fill(0.0);
    }
    let tr = record_rollout(world(), &p, &RecordingPlan::default(), 10, 2).unwrap();
    let means = HeadMeans::from_trace(&tr).unwrap();
    assert!(means.get(0, 0).unwrap().iter().all(|&v| v == 0.0));
    for mode in [AblationMode::Zero, AblationMode::Mean] {
        for pos in 0..8 {
            let spec: InterventionSpec = InterventionKind::AblateOutput {
                layer: 0,
                head: 0,
                position: pos,
                mode,
                mean: Some(means.get(0, 0).unwrap().to_vec()),
            }
            .into();
            let (b, m) = ablate_and_eval(&p, &tr, 9, &spec).unwrap();
            assert_eq!(b, m);
        }
    }
}

#[test]
fn mean_rollout_needs_stats_and_matches_constant_outputs() {
    let mut p = toy(8, 34);
    assert!(matches!(
        mean_ablate_head_rollout(&p, world(), 0, 0, None, &RecordingPlan::default(), 5, 0),
        Err(Error::Usage(_))
    ));
    let b = p.layout.blocks[1];
    let (d, dh) = (p.config.d_model, p.config.head_dim());
    let wv = p.params[b.wv].data_mut();
    for r in 0..d {
        wv[r * d + dh..r * d + 2 * dh].fill(0.0);
    }
    let base = record_rollout(world(), &p, &RecordingPlan::default(), 20, 3).unwrap();
    let stats = HeadMeans::from_trace(&base).unwrap();
    let abl = mean_ablate_head_rollout(&p, world(), 1, 1, Some(&stats), &RecordingPlan::default(), 20, 3).unwrap();
    assert_eq!(abl.actions, base.actions);
    assert_eq!(abl.logits, base.logits);
}

#[test]
fn memory_reset_sees_one_frame() {
    let p = toy(8, 35);
    let tr = memory_reset_rollout(&p, world(), &RecordingPlan::default(), 15, 4).unwrap();
    tr.check_attention(1e-5).unwrap();
    let w = p.config.window;
    for t in 0..tr.len() {
        for l in 0..2 {
            for h in 0..2 {
                let row = tr.attn_row(t, l, h);
                assert_eq!(row.iter().filter(|&&x| x != 0.0).count(), 1);
                assert_eq!(row[w - 1], 1.0);
            }
        }
        let f = tr.frame(t).unwrap();
        let (d, _, _) = crate::agent::policy_forward(&p, std::slice::from_ref(f), None, &Hooks::default(), false).unwrap();
        assert_eq!(d, tr.distribution(t));
    }
}

fn frames(n: usize) -> Vec<ObsFrame> {
    (0..n).map(|i| ObsFrame::solid(i as u32, [i as u8, 0, 0])).collect()
}

#[test]
fn frame_edit_examples() {
    let f = frames(400);
    let r = edit_frames(&f, &FrameEdit::RepeatFirst { n: 1000 }).unwrap();
    assert_eq!(r.len(), 1399);
    assert!(r[..1000].iter().all(|x| x.pixels == f[0].pixels));
    assert_eq!(r[1000].pixels, f[1].pixels);
    assert!(r.iter().enumerate().all(|(i, x)| x.t == i as u32));

    let r = edit_frames(&f, &FrameEdit::Replace { t_dst: 50, t_src: 316 }).unwrap();
    let diff: Vec<usize> = (0..400).filter(|&i| r[i].pixels != f[i].pixels).collect();
    assert_eq!(diff, vec![50]);
    assert_eq!(r[50].pixels, f[316].pixels);

    let r = edit_frames(&f, &FrameEdit::SolidColor { t_start: 150, length: 128, rgb: [255, 0, 0] }).unwrap();
    assert!(r[150..278].iter().all(|x| x.pixels.chunks(3).all(|p| p == [255, 0, 0])));
    assert_eq!(r[149].pixels, f[149].pixels);
    assert_eq!(r[278].pixels, f[278].pixels);

    assert!(edit_frames(&f, &FrameEdit::SolidColor { t_start: 390, length: 20, rgb: [0; 3] }).is_err());
    assert!(edit_frames(&f, &FrameEdit::Replace { t_dst: 400, t_src: 0 }).is_err());
}

#[test]
fn frame_edit_influence_stays_in_window() {
    let p = toy(8, 36);
    let tr = record_rollout(world(), &p, &RecordingPlan::default(), 30, 5).unwrap();
    let f = tr.all_frames().unwrap();
    let edited = edit_frames(f, &FrameEdit::Replace { t_dst: 10, t_src: 25 }).unwrap();
    let a = crate::trace::replay_with(&p, f, &[], false).unwrap();
    let b = crate::trace::replay_with(&p, &edited, &[], false).unwrap();
    for t in 0..30 {
        assert_eq!(a[t].1.logits != b[t].1.logits, (10..18).contains(&t), "t={t}");
    }
}

#[test]
fn steering_vector_is_antisymmetric() {
    let p = toy(8, 37);
    let tr = record_rollout(world(), &p, &RecordingPlan::default(), 12, 6).unwrap();
    let f = tr.all_frames().unwrap();
    let (a, b) = (&f[..5], &f[5..]);
    let z = compute_steering_vector(&p, a, a, SteerSite::Block0Mlp).unwrap();
    assert!(z.iter().all(|&v| v == 0.0));
    let v = compute_steering_vector(&p, a, b, SteerSite::Block0Mlp).unwrap();
    let w = compute_steering_vector(&p, b, a, SteerSite::Block0Mlp).unwrap();
    assert!(v.iter().zip(&w).all(|(x, y)| *x == -*y));
    assert!(compute_steering_vector(&p, &[], b, SteerSite::Block0Mlp).is_err());
}

#[test]
fn steering_is_linear_at_the_site_and_zero_alpha_is_identity() {
    let p = toy(8, 38);
    let plan = RecordingPlan::default();
    let v: Vec<f32> = (0..p.config.mlp_hidden).map(|i| (i as f32).cos()).collect();
    let base = record_rollout(world(), &p, &plan, 25, 7).unwrap();
    let zero = steer_rollout(&p, world(), &v, 0.0, &plan, 25, 7).unwrap();
    assert_eq!(zero.logits, base.logits);
    assert_eq!(zero.actions, base.actions);
    assert_eq!(zero.attn, base.attn);
    let steered = steer_rollout(&p, world(), &v, 1.5, &plan, 25, 7).unwrap();
    // Frame 0 sees the same observation in both runs.
    let h = p.config.mlp_hidden;
    for i in 0..h {
        assert_eq!(steered.mlp.as_ref().unwrap()[i], base.mlp.as_ref().unwrap()[i] + 1.5 * v[i]);
    }
    assert!(matches!(steer_rollout(&p, world(), &v[1..], 1.0, &plan, 5, 0), Err(Error::Usage(_))));
}

#[test]
fn gate_thresholds() {
    let p = toy(8, 39);
    let plan = RecordingPlan::default();
    let base = record_rollout(world(), &p, &plan, 40, 8).unwrap();
    let open = gate_rollout(&p, world(), 2, 0.0, &plan, 40, 8).unwrap();
    assert_eq!(open.actions, base.actions);
    assert_eq!(open.logits, base.logits);
    let shut = gate_rollout(&p, world(), 2, 1.0, &plan, 40, 8).unwrap();
    assert_eq!(shut.attack_count(), 0);
    assert!(matches!(gate_rollout(&p, world(), 2, 1.5, &plan, 4, 8), Err(Error::Usage(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gate_is_monotone(p_attack in 0.0f32..1.0, lo in 0.0f64..1.0, hi in 0.0f64..1.0, seed in 0u64..1000) {
        let (t1, t2) = if lo <= hi { (lo, hi) } else { (hi, lo) };
        let d = dist(vec![vec![0.2; 5], vec![0.2; 5], vec![1.0 - p_attack, p_attack], vec![0.25; 4]]);
        let mut r1 = ChaCha8Rng::seed_from_u64(seed);
        let mut r2 = ChaCha8Rng::seed_from_u64(seed);
        let mut r0 = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let a1 = gated_sample(&d, 2, t1, 1.0, &mut r1);
            let a2 = gated_sample(&d, 2, t2, 1.0, &mut r2);
            let a0 = sample_action(&d, 1.0, &mut r0);
            prop_assert!(!a2.attack || a1.attack);
            prop_assert!(!a1.attack || a0.attack);
            prop_assert_eq!(a1.movement, a0.movement);
            prop_assert_eq!(a2.turn, a0.turn);
        }
    }
}
