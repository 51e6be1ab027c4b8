// SPDX-License-Identifier: MIT OR Apache-2.0

use proptest::prelude::*;

use super::*;
use crate::agent::tests::tiny_config;
use crate::agent::Policy;
use crate::trace::{record_rollout, RecordingPlan};
use crate::world::{build_scenario, Event, ScenarioSpec};

fn recorded(steps: usize) -> Trace {
    let p = Policy::new(tiny_config(), 5).unwrap();
    let w = build_scenario(&ScenarioSpec::preset("villager_tree", 0).unwrap()).unwrap();
    record_rollout(w, &p, &RecordingPlan::default(), steps, 1).unwrap()
}

/// Overwrites every head's attention row with `f(t)`.
fn with_rows(mut tr: Trace, f: impl Fn(usize) -> Vec<f32>) -> Trace {
    let c = tr.config().clone();
    let per = c.layers * c.heads * c.window;
    for t in 0..tr.len() {
        let row = f(t);
        for k in 0..c.layers * c.heads {
            let o = t * per + k * c.window;
            tr.attn[o..o + c.window].copy_from_slice(&row);
        }
    }
    tr
}

#[test]
fn single_frame_map_has_one_row() {
    let tr = recorded(1);
    let m = attention_map(&tr, 0, 0).unwrap();
    assert_eq!((m.rows, m.cols), (1, 4));
    assert_eq!(m.row(0), &[0.0, 0.0, 0.0, 1.0]);
    assert!(attention_map(&tr, 2, 0).is_err());
    assert!(attention_map(&tr, 0, 2).is_err());
}

#[test]
fn max_map_takes_pointwise_maximum() {
    let mut tr = recorded(1);
    tr.manifest.policy.window = 2;
    tr.manifest.policy.heads = 2;
    tr.manifest.policy.layers = 1;
    tr.attn = vec![0.2, 0.8, 0.6, 0.4];
    let m = max_attention_map(&tr);
    assert_eq!(m.row(0), &[0.6, 0.8]);
}

#[test]
fn top_frame_prefers_newest_on_ties() {
    let tr = with_rows(recorded(10), |_| vec![0.25; 4]);
    let top = top_attended_frames(&tr, 9).unwrap();
    assert!(top.iter().all(|f| f.frame == 9 && f.slot == 3));
    let tr = with_rows(tr, |_| vec![0.1, 0.6, 0.2, 0.1]);
    let top = top_attended_frames(&tr, 9).unwrap();
    assert!(top.iter().all(|f| f.frame == 7 && f.slot == 1));
    assert!(top_attended_frames(&tr, 10).is_err());
}

#[test]
fn top_frame_ignores_empty_slots_early() {
    let tr = recorded(2);
    let top = top_attended_frames(&tr, 0).unwrap();
    assert!(top.iter().all(|f| f.frame == 0));
}

#[test]
fn zscore_example() {
    let z = zscore_rows(&[1.0, 3.0, 5.0, 5.0], 2, 2);
    assert_eq!(z.row(0), &[-1.0, 1.0]);
    assert_eq!(z.row(1), &[0.0, 0.0]);
    assert_eq!(z.degenerate, vec![false, true]);
    assert!(z.any_degenerate());
}

#[test]
fn zscores_require_outputs_and_two_frames() {
    let tr = recorded(6);
    let z = output_zscores(&tr, 1, 1).unwrap();
    assert_eq!((z.dims, z.frames), (4, 6));
    assert!(output_zscores(&recorded(1), 0, 0).is_err());
    let mut bare = tr.clone();
    bare.outputs = None;
    assert!(matches!(output_zscores(&bare, 0, 0), Err(Error::MissingData(_))));
}

#[test]
fn periodicity_scores() {
    let uniform = with_rows(recorded(8), |_| vec![0.25; 4]);
    let s = specialization_scan(&uniform);
    assert!(s.iter().all(|h| h.periodicity.abs() < 1e-6 && (h.newest_mass - 0.25).abs() < 1e-6));
    let mut tr = recorded(8);
    tr.manifest.policy.window = 8;
    tr.manifest.policy.layers = 1;
    tr.manifest.policy.heads = 1;
    tr.attn = (0..8).flat_map(|_| [0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.5]).collect();
    let s = specialization_scan(&tr);
    assert!((s[0].periodicity - 0.75).abs() < 1e-6);
}

#[test]
fn inventory_frames_follow_events() {
    let mut tr = recorded(8);
    tr.manifest.events = vec![
        Event { t: 2, kind: EventKind::InventoryOpen },
        Event { t: 4, kind: EventKind::InventoryClose },
    ];
    assert_eq!(inventory_open_frames(&tr), vec![3, 4]);
    let tr = with_rows(tr, |t| if t == 3 || t == 4 { vec![0.0, 0.0, 1.0, 0.0] } else { vec![0.0, 0.0, 0.0, 1.0] });
    let s = specialization_scan(&tr);
    assert!(s.iter().all(|h| h.inventory_prev_mass == Some(1.0)));
    assert_eq!(rank_heads(&s, |h| h.newest_mass)[0], (0, 0));
}

#[test]
fn grayscale_is_white_at_zero_and_black_at_max() {
    let m = Matrix { rows: 2, cols: 2, data: vec![0.0, 0.5, 1.0, 0.25] };
    assert_eq!(m.grayscale_time_major(), vec![255, 0, 128, 191]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn recorded_maps_are_causal_and_normalized(steps in 1usize..12) {
        let tr = recorded(steps);
        let m = max_attention_map(&tr);
        for t in 0..tr.len() {
            let n = (t + 1).min(4);
            prop_assert!(m.row(t)[..4 - n].iter().all(|&v| v == 0.0));
            let a = attention_map(&tr, 1, 0).unwrap();
            let s: f32 = a.row(t).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-5);
            prop_assert!(m.row(t).iter().zip(a.row(t)).all(|(x, y)| x >= y));
        }
    }
}
