// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use crate::numerics::{finite_diff_grad, max_relative_error, GradTape, Tensor};
use crate::world::{build_scenario, generate_world, scripted_expert, Action, ObsFrame, ScenarioSpec};

pub(crate) fn tiny_config() -> PolicyConfig {
    PolicyConfig {
        layers: 2,
        heads: 2,
        window: 4,
        d_model: 8,
        mlp_hidden: 16,
        conv: vec![ConvSpec::new(8, 4, 0, 4), ConvSpec::new(4, 2, 0, 4)],
        ..PolicyConfig::default()
    }
}

fn expert_frames(n: usize, seed: u64) -> Vec<ObsFrame> {
    let mut w = generate_world(seed, (32, 32)).unwrap();
    let mut frames = vec![w.render()];
    while frames.len() < n {
        let a = scripted_expert(&w);
        frames.push(w.step(&a).unwrap().0);
    }
    frames
}

#[test]
fn config_validation() {
    assert!(PolicyConfig::default().validate().is_ok());
    let mut c = PolicyConfig::default();
    c.heads = 3;
    assert!(c.validate().is_err());
    c = PolicyConfig::default();
    c.window = 0;
    assert!(c.validate().is_err());
    c = PolicyConfig::default();
    c.conv.push(ConvSpec::new(9, 1, 0, 8));
    assert!(c.validate().is_err());
}

#[test]
fn single_frame_attends_only_to_itself() {
    let p = Policy::new(tiny_config(), 1).unwrap();
    let frames = expert_frames(1, 0);
    let (dist, rec, cache) = policy_forward(&p, &frames, None, &Hooks::default(), true).unwrap();
    assert_eq!(cache.len(), 1);
    let w = p.config.window;
    for row in rec.attn.chunks(w) {
        assert_eq!(row[w - 1], 1.0);
        assert!(row[..w - 1].iter().all(|&x| x == 0.0));
    }
    for probs in &dist.probs {
        assert!((probs.iter().sum::<f32>() - 1.0).abs() < 1e-5);
    }
}

#[test]
fn forward_is_deterministic() {
    let p = Policy::new(tiny_config(), 2).unwrap();
    let frames = expert_frames(6, 1);
    let a = policy_forward(&p, &frames, None, &Hooks::default(), true).unwrap();
    let b = policy_forward(&p, &frames, None, &Hooks::default(), true).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
}

#[test]
fn cache_matches_cacheless_recomputation() {
    let p = Policy::new(tiny_config(), 3).unwrap();
    let frames = expert_frames(12, 2);
    let mut cache: Option<WindowCache> = None;
    for t in 0..frames.len() {
        let (d1, r1, c) = policy_forward(&p, &frames[..=t], cache.take(), &Hooks::default(), true).unwrap();
        assert!(c.len() <= p.config.window);
        cache = Some(c);
        let (d2, r2, _) = policy_forward(&p, &frames[..=t], None, &Hooks::default(), true).unwrap();
        assert_eq!(d1, d2, "t={t}");
        assert_eq!(r1, r2, "t={t}");
        // Causality: empty slots carry no weight.
        let w = p.config.window;
        let valid = (t + 1).min(w);
        for row in r1.attn.chunks(w) {
            assert!(row[..w - valid].iter().all(|&x| x == 0.0));
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn ablating_an_already_zero_output_changes_nothing() {
    let mut p = Policy::new(tiny_config(), 4).unwrap();
    // Zero the value columns of head 1 in layer 0 so its outputs are exactly 0.
    let b = p.layout.blocks[0];
    let (d, dh) = (p.config.d_model, p.config.head_dim());
    let wv = p.params[b.wv].data_mut();
    for r in 0..d {
        for c in dh..2 * dh {
            wv[r * d + c] = 0.0;
        }
    }
    let frames = expert_frames(3, 3);
    let base = policy_forward(&p, &frames, None, &Hooks::default(), false).unwrap();
    for slot in 0..p.config.window {
        let hooks = Hooks {
            patches: vec![HeadPatch { layer: 0, head: 1, slot: Some(slot), value: None }],
            steer: None,
        };
        let abl = policy_forward(&p, &frames, None, &hooks, false).unwrap();
        assert_eq!(abl.0, base.0);
    }
}

#[test]
fn out_of_range_targets_are_usage_errors() {
    let p = Policy::new(tiny_config(), 5).unwrap();
    let frames = expert_frames(1, 0);
    for patch in [
        HeadPatch { layer: 2, head: 0, slot: None, value: None },
        HeadPatch { layer: 0, head: 2, slot: None, value: None },
        HeadPatch { layer: 0, head: 0, slot: Some(4), value: None },
    ] {
        let hooks = Hooks { patches: vec![patch], steer: None };
        assert!(matches!(policy_forward(&p, &frames, None, &hooks, false), Err(crate::Error::Usage(_))));
    }
}

#[test]
fn frame_edit_influence_is_bounded_by_the_window() {
    let p = Policy::new(tiny_config(), 6).unwrap();
    let frames = expert_frames(14, 4);
    let mut edited = frames.clone();
    edited[5] = ObsFrame::solid(5, [255, 0, 0]);
    let a = replay_forward(&p, &frames, &Hooks::default(), false).unwrap();
    let b = replay_forward(&p, &edited, &Hooks::default(), false).unwrap();
    let w = p.config.window;
    for t in 0..frames.len() {
        let inside = (5..5 + w).contains(&t);
        assert_eq!(a[t].0 != b[t].0, inside, "t={t}");
    }
}

#[test]
fn replay_matches_live_forward() {
    let p = Policy::new(tiny_config(), 7).unwrap();
    let frames = expert_frames(9, 5);
    let replay = replay_forward(&p, &frames, &Hooks::default(), true).unwrap();
    let mut cache = None;
    for t in 0..frames.len() {
        let (d, r, c) = policy_forward(&p, &frames[..=t], cache.take(), &Hooks::default(), true).unwrap();
        cache = Some(c);
        assert_eq!(replay[t].0, d);
        assert_eq!(replay[t].1, r);
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let p = Policy::new(tiny_config(), 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("policy.agln");
    p.save(&path).unwrap();
    let q = Policy::load(&path).unwrap();
    assert_eq!(p.params, q.params);
    assert_eq!(p.config, q.config);
    assert_eq!(p.digest(), q.digest());
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(matches!(Policy::from_bytes(&bytes, &path), Err(crate::Error::Corruption { .. })));
    assert!(Policy::from_bytes(&bytes[..10], &path).is_err());
}

#[test]
fn tape_forward_agrees_with_inference() {
    let p = Policy::new(tiny_config(), 9).unwrap();
    let frames = expert_frames(4, 6);
    let mut tape = GradTape::new();
    let pv = bind_params(&p, &mut tape, false);
    let inputs: Vec<FrameInput> = frames
        .iter()
        .map(|f| FrameInput::Pixels(tape.constant(Tensor::new(vec![3, 64, 64], f.to_chw()).unwrap())))
        .collect();
    let logits = tape_forward(&p, &mut tape, &pv, &inputs).unwrap();
    let replay = replay_forward(&p, &frames, &Hooks::default(), false).unwrap();
    let a = p.config.n_actions();
    let tl = tape.value(logits).data();
    for t in 0..frames.len() {
        let inf = &replay[t].1.logits;
        for j in 0..a {
            assert!((tl[t * a + j] - inf[j]).abs() < 1e-4, "t={t} j={j}");
        }
    }
}

#[test]
fn tape_gradient_matches_finite_differences() {
    let p = Policy::new(tiny_config(), 10).unwrap();
    let frames = expert_frames(2, 7);
    let x = Tensor::new(vec![3, 64, 64], frames[1].to_chw()).unwrap();
    let prev = p.embed(&frames[0].to_chw());
    let forward = |img: &Tensor| -> crate::Result<(f64, Option<Tensor>)> {
        let mut tape = GradTape::new();
        let pv = bind_params(&p, &mut tape, false);
        let e = tape.constant(Tensor::vector(prev.clone()));
        let xi = tape.leaf(img.clone());
        let logits = tape_forward(&p, &mut tape, &pv, &[FrameInput::Embedding(e), FrameInput::Pixels(xi)])?;
        let target = tape.select(logits, p.config.n_actions() + 10)?;
        let g = tape.backward(target)?;
        Ok((tape.value(target).item() as f64, g.wrt(xi).cloned()))
    };
    let analytic = forward(&x).unwrap().1.unwrap();
    // Restrict the oracle to a patch to keep the test fast.
    let patch: Vec<usize> = (0..3).flat_map(|c| (20..28).flat_map(move |y| (20..28).map(move |xx| c * 4096 + y * 64 + xx))).collect();
    let base = x.clone();
    let sub = Tensor::vector(patch.iter().map(|&i| base.data()[i]).collect());
    let fd = finite_diff_grad(
        |s: &Tensor| {
            let mut img = base.clone();
            for (k, &i) in patch.iter().enumerate() {
                img.data_mut()[i] = s.data()[k];
            }
            forward(&img).map(|r| r.0)
        },
        &sub,
        1e-2,
    )
    .unwrap();
    let an = Tensor::vector(patch.iter().map(|&i| analytic.data()[i]).collect());
    let err = max_relative_error(&an, &fd);
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn sampling_yields_legal_actions() {
    use rand::SeedableRng;
    let p = Policy::new(tiny_config(), 11).unwrap();
    let frames = expert_frames(1, 8);
    let (d, _, _) = policy_forward(&p, &frames, None, &Hooks::default(), false).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let a = sample_action(&d, 1.0, &mut rng);
        assert!(Action::from_indices(a.indices()).is_some());
    }
}

#[test]
fn empty_demo_is_a_data_error() {
    let mut p = Policy::new(tiny_config(), 12).unwrap();
    let demos = vec![Episode { frames: vec![], actions: vec![] }];
    assert!(matches!(train_bc(&mut p, &demos, &TrainConfig::default(), |_, _, _| {}), Err(crate::Error::Data(_))));
    assert!(matches!(train_bc(&mut p, &[], &TrainConfig::default(), |_, _, _| {}), Err(crate::Error::Data(_))));
}

#[test]
fn one_demo_is_memorized() {
    let cfg = PolicyConfig { d_model: 16, window: 16, ..tiny_config() };
    let mut p = Policy::new(cfg, 13).unwrap();
    let w = build_scenario(&ScenarioSpec::preset("tree_ahead", 0).unwrap()).unwrap();
    let mut world = w.clone();
    let mut frames = vec![world.render()];
    let mut actions = Vec::new();
    for _ in 0..12 {
        let a = scripted_expert(&world);
        actions.push(a);
        frames.push(world.step(&a).unwrap().0);
    }
    frames.truncate(actions.len());
    let demos = vec![Episode { frames, actions }];
    let cfg = TrainConfig { epochs: 300, lr: 0.05, batch: 4, holdout: 0.0, ..TrainConfig::default() };
    let m = train_bc(&mut p, &demos, &cfg, |_, _, _| {}).unwrap();
    let last = *m.epoch_loss.last().unwrap();
    assert!(last < 0.05, "final loss {last}");
}
