// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite: every numbered criterion runs in sequence and prints one
//! PASS/FAIL line. The process exits non-zero when any criterion fails.
//!
//! Criteria 6 to 11 need a trained agent, which is trained here (about five
//! minutes on one core). Point `AGENTLENS_ACCEPTANCE_CACHE` at a directory to
//! keep the trained policies and their training record between runs.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use agentlens::agent::{
    bind_params, frame_entries, generate_demos, permute_labels, policy_forward, tape_forward, train_bc, ConvSpec,
    DemoConfig, FrameEntry, FrameInput, HeadPatch, Hooks, Policy, PolicyConfig, TrainConfig, TrainMetrics,
    DEFAULT_CONV_STACK,
};
use agentlens::intervention::{
    compute_steering_vector, gate_rollout, impact_metrics, memory_reset_rollout, resolve, steer_rollout, sweep_frame,
    AblationMode, SteerSite, SteeringRecipe,
};
use agentlens::numerics::stats::spearman;
use agentlens::numerics::{finite_diff_grad, max_relative_error, GradTape, Tensor};
use agentlens::trace::{load_trace, record_rollout, save_trace, RecordingPlan, Trace, MANIFEST_FILE};
use agentlens::vision::{
    gradient_saliency, input_saliency, receptive_field, sanity_param_randomization, saliency_agreement, smoothgrad,
    SaliencyMethod, SaliencyTarget,
};
use agentlens::world::{build_scenario, generate_world, EventKind, ObsFrame, Recipe, ScenarioSpec, WorldState};
use anyhow::{anyhow, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const ATTACK: SaliencyTarget = SaliencyTarget::Logit { factor: 2, index: 1 };
const ATTACK_FACTOR: usize = 2;
/// First procedural world seed used for evaluation; demos use seeds from 0.
const EVAL_SEED: u64 = 10_000;
const PERMUTED_EPOCHS: usize = 5;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn note(msg: &str) {
    eprintln!("  .. {msg}");
}

/// Every trace recorded by the suite passes through here for criterion 2.
#[derive(Default)]
struct AttentionScan {
    traces: usize,
    rows: usize,
    failures: Vec<String>,
}

impl AttentionScan {
    fn check(&mut self, label: &str, tr: &Trace) {
        let c = tr.config();
        self.traces += 1;
        self.rows += tr.len() * c.layers * c.heads;
        if let Err(e) = tr.check_attention(1e-5) {
            self.failures.push(format!("{label}: {e}"));
        }
    }
}

fn plan(label: &str, outputs: bool) -> RecordingPlan {
    RecordingPlan {
        store_outputs: outputs,
        store_mlp: true,
        frame_stride: 1,
        scenario: label.into(),
    }
}

fn preset(name: &str, seed: u64) -> WorldState {
    build_scenario(&ScenarioSpec::preset(name, seed).unwrap()).unwrap()
}

fn procedural(seed: u64) -> WorldState {
    generate_world(seed, (32, 32)).unwrap()
}

/// Same recorded behaviour, ignoring which interventions the manifest lists.
fn same_rollout(a: &Trace, b: &Trace) -> bool {
    a.frames == b.frames
        && a.attn == b.attn
        && a.logits == b.logits
        && a.actions == b.actions
        && a.positions == b.positions
        && a.mlp == b.mlp
        && a.manifest.events == b.manifest.events
}

fn attack_frequency(tr: &Trace) -> f64 {
    tr.attack_count() as f64 / tr.len().max(1) as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn c1_determinism(scan: &mut AttentionScan) -> Result<Verdict> {
    let tmp = tempfile::tempdir()?;
    let mut slowest = 0.0f64;
    let mut mismatched = Vec::new();
    let mut pairs = 0;
    for scenario in ["villager_tree", "tree_ahead"] {
        for seed in 1..=5u64 {
            let mut dirs = Vec::new();
            let mut digests = Vec::new();
            for run in 0..2 {
                let dir = tmp.path().join(format!("{scenario}-{seed}-{run}"));
                let t0 = Instant::now();
                let out = Command::new(env!("CARGO_BIN_EXE_agentlens"))
                    .args(["rollout", "--scenario", scenario, "--seed", &seed.to_string(), "--steps", "300", "--out"])
                    .arg(&dir)
                    .output()?;
                slowest = slowest.max(t0.elapsed().as_secs_f64());
                ensure!(out.status.success(), "rollout failed: {}", String::from_utf8_lossy(&out.stderr));
                let summary: serde_json::Value = serde_json::from_slice(&out.stdout)?;
                ensure!(summary["frames"] == 300, "{scenario}/{seed} recorded {} frames", summary["frames"]);
                digests.push(summary["digest"].as_str().unwrap_or_default().to_string());
                dirs.push(dir);
            }
            if digests[0] != digests[1] || dir_bytes(&dirs[0])? != dir_bytes(&dirs[1])? {
                mismatched.push(format!("{scenario}/{seed}"));
            }
            scan.check(&format!("cli {scenario}/{seed}"), &load_trace(&dirs[0])?);
            pairs += 1;
        }
    }
    Ok(verdict(
        mismatched.is_empty() && slowest < 60.0,
        format!(
            "{pairs} scenario/seed pairs, {} differing {mismatched:?}; slowest 300-frame rollout {slowest:.1} s",
            mismatched.len()
        ),
    ))
}

fn dir_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    for e in std::fs::read_dir(dir)? {
        let e = e?;
        out.insert(e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path())?);
    }
    Ok(out)
}

fn random_config(rng: &mut ChaCha8Rng) -> PolicyConfig {
    let heads = rng.gen_range(1..=2);
    let mut conv = vec![ConvSpec::new(rng.gen_range(2..=3), rng.gen_range(1..=2), rng.gen_range(0..=1), rng.gen_range(1..=3))];
    if rng.gen_bool(0.5) {
        conv.push(ConvSpec::new(2, 1, 0, rng.gen_range(1..=2)));
    }
    PolicyConfig {
        layers: rng.gen_range(1..=2),
        heads,
        window: rng.gen_range(2..=4),
        d_model: heads * [4, 8][rng.gen_range(0..2)],
        mlp_hidden: rng.gen_range(3..=8),
        conv,
        input_size: 8,
        ..PolicyConfig::default()
    }
}

/// Weighted sum of the newest frame's logits through the inference path.
fn inference_objective(p: &Policy, inputs: &[Vec<f32>], coef: &[f32]) -> f64 {
    let entries: Vec<FrameEntry> = inputs
        .iter()
        .enumerate()
        .map(|(i, x)| p.frame_entry_from_embedding(i as u32, p.embed(x)))
        .collect();
    let refs: Vec<&FrameEntry> = entries.iter().collect();
    let acts = p.forward_window(&refs, &Hooks::default(), false);
    acts.logits.iter().zip(coef).map(|(&l, &c)| l as f64 * c as f64).sum()
}

/// Central differences with the step chosen by self-consistency: for each
/// coordinate, estimates at `h = 0.08, 0.04, ...` are compared pairwise and
/// the pair that agrees best is combined to cancel the `h^2` term. Large steps suffer truncation,
/// small ones f32 rounding.
fn stable_fd<F>(mut f: F, x: &Tensor) -> agentlens::Result<Tensor>
where
    F: FnMut(&Tensor) -> agentlens::Result<f64>,
{
    let est: Vec<Tensor> = (0..5)
        .map(|i| finite_diff_grad(&mut f, x, 0.08 / (1 << i) as f32))
        .collect::<agentlens::Result<_>>()?;
    let data = (0..x.len())
        .map(|k| {
            let d: Vec<f32> = est.iter().map(|e| e.data()[k]).collect();
            let best = (0..d.len() - 1)
                .min_by(|&a, &b| (d[a] - d[a + 1]).abs().total_cmp(&(d[b] - d[b + 1]).abs()))
                .unwrap_or(0);
            (4.0 * d[best + 1] - d[best]) / 3.0
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Relative error of the tape gradient, with respect to every input pixel and
/// a sample of one parameter tensor, against central differences through the
/// inference path.
fn gradient_check(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = Policy::new(random_config(&mut rng), seed)?;
    let cfg = p.config.clone();
    let a = cfg.n_actions();
    let n = rng.gen_range(1..=cfg.window);
    let px = 3 * 8 * 8;
    let inputs: Vec<Vec<f32>> = (0..n).map(|_| (0..px).map(|_| rng.gen()).collect()).collect();
    let coef: Vec<f32> = (0..a).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let pi = rng.gen_range(0..p.params.len());

    let mut tape = GradTape::new();
    let pv = bind_params(&p, &mut tape, true);
    let xs: Vec<_> = inputs.iter().map(|x| tape.leaf(Tensor::new(vec![3, 8, 8], x.clone()).unwrap())).collect();
    let frames: Vec<FrameInput> = xs.iter().map(|&x| FrameInput::Pixels(x)).collect();
    let logits = tape_forward(&p, &mut tape, &pv, &frames)?;
    let mut weights = vec![0.0f32; n * a];
    weights[(n - 1) * a..].copy_from_slice(&coef);
    let w = tape.constant(Tensor::new(vec![n, a], weights)?);
    let prod = tape.mul(logits, w)?;
    let out = tape.sum(prod)?;
    let g = tape.backward(out)?;

    let pixels = Tensor::vector(inputs.concat());
    let analytic_px = Tensor::vector(xs.iter().flat_map(|&x| g.wrt(x).unwrap().data().to_vec()).collect());
    let fd_px = stable_fd(
        |v: &Tensor| {
            let split: Vec<Vec<f32>> = v.data().chunks(px).map(<[f32]>::to_vec).collect();
            Ok(inference_objective(&p, &split, &coef))
        },
        &pixels,
    )?;

    let len = p.params[pi].len();
    let coords: Vec<usize> = if len <= 48 {
        (0..len).collect()
    } else {
        rand::seq::index::sample(&mut rng, len, 48).into_vec()
    };
    let full = g.wrt(pv[pi]).ok_or_else(|| anyhow!("no gradient for {}", p.names[pi]))?;
    let analytic_p = Tensor::vector(coords.iter().map(|&i| full.data()[i]).collect());
    let sub = Tensor::vector(coords.iter().map(|&i| p.params[pi].data()[i]).collect());
    let fd_p = stable_fd(
        |v: &Tensor| {
            let mut q = p.clone();
            for (k, &i) in coords.iter().enumerate() {
                q.params[pi].data_mut()[i] = v.data()[k];
            }
            Ok(inference_objective(&q, &inputs, &coef))
        },
        &sub,
    )?;
    // One gradient vector per network: pixels followed by the parameter sample.
    let joined = |a: &Tensor, b: &Tensor| Tensor::vector(a.data().iter().chain(b.data()).copied().collect());
    Ok(max_relative_error(&joined(&analytic_px, &analytic_p), &joined(&fd_px, &fd_p)))
}

/// Full 8x8 saliency map against channel-summed absolute central differences.
fn toy_saliency_check(seed: u64) -> Result<f64> {
    let cfg = PolicyConfig {
        layers: 2,
        heads: 2,
        window: 4,
        d_model: 8,
        mlp_hidden: 16,
        conv: vec![ConvSpec::new(3, 1, 0, 2)],
        input_size: 8,
        ..PolicyConfig::default()
    };
    let p = Policy::new(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prev: Vec<f32> = (0..192).map(|_| rng.gen()).collect();
    let input = Tensor::new(vec![3, 8, 8], (0..192).map(|_| rng.gen()).collect())?;
    let prev_e = vec![p.embed(&prev)];
    let map = input_saliency(&p, &prev_e, input.data(), ATTACK)?;
    let col = p.config.factor_offsets()[2] + 1;
    let fd = stable_fd(
        |x: &Tensor| {
            let a = p.frame_entry_from_embedding(0, prev_e[0].clone());
            let b = p.frame_entry_from_embedding(1, p.embed(x.data()));
            Ok(p.forward_window(&[&a, &b], &Hooks::default(), false).logits[col] as f64)
        },
        &input,
    )?;
    let mut reference = vec![0.0f32; 64];
    for ch in fd.data().chunks(64) {
        for (r, &g) in reference.iter_mut().zip(ch) {
            *r += g.abs();
        }
    }
    Ok(max_relative_error(&Tensor::vector(map.values), &Tensor::vector(reference)))
}

fn c3_autodiff() -> Result<Verdict> {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        worst = worst.max(gradient_check(seed)?);
    }
    let mut worst_map = 0.0f64;
    for seed in 0..5 {
        worst_map = worst_map.max(toy_saliency_check(seed)?);
    }
    Ok(verdict(
        worst < 1e-3 && worst_map < 1e-3,
        format!("max relative error {worst:.2e} over 100 random networks; {worst_map:.2e} for 8x8 saliency maps"),
    ))
}

/// Bounding box of the input gradient of one central last-layer unit when
/// every kernel is all ones: `(height, width, top, left, unit row)`.
fn gradient_footprint(stack: &[ConvSpec], side: usize) -> Result<(usize, usize, isize, isize, usize)> {
    let mut tape = GradTape::new();
    let x = tape.leaf(Tensor::filled(&[1, side, side], 1.0));
    let mut cur = x;
    for c in stack {
        let k = tape.constant(Tensor::filled(&[1, 1, c.k, c.k], 1.0));
        cur = tape.conv2d(cur, k, c.s, c.p)?;
    }
    let sh = tape.value(cur).shape().to_vec();
    let (oh, ow) = (sh[1], sh[2]);
    let cy = oh / 2;
    let unit = tape.select(cur, cy * ow + ow / 2)?;
    let g = tape.backward(unit)?;
    let g = g.wrt(x).ok_or_else(|| anyhow!("no input gradient"))?.data().to_vec();
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..side {
        for xx in 0..side {
            if g[y * side + xx] != 0.0 {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(xx);
                x1 = x1.max(xx);
            }
        }
    }
    ensure!(y0 != usize::MAX, "empty footprint");
    Ok((y1 + 1 - y0, x1 + 1 - x0, y0 as isize, x0 as isize, cy))
}

fn stack_matches(stack: &[ConvSpec]) -> Result<bool> {
    let rf = receptive_field(stack, stack.len() - 1)?;
    let side = 3 * rf.size + 4 * rf.jump + 8;
    let (h, w, top, left, cy) = gradient_footprint(stack, side)?;
    let (t, l, _, _) = rf.rect_unclipped(cy, cy);
    Ok((h, w, top, left) == (rf.size, rf.size, t, l))
}

fn c4_receptive_field() -> Result<Verdict> {
    let sizes: Vec<usize> = (0..3)
        .map(|l| receptive_field(&DEFAULT_CONV_STACK, l).map(|r| r.size))
        .collect::<agentlens::Result<_>>()?;
    let mut ok = sizes == [8, 20, 36];
    for l in 1..=3 {
        ok &= stack_matches(&DEFAULT_CONV_STACK[..l])?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut matched = 0;
    for _ in 0..50 {
        let layers = rng.gen_range(1..=4);
        let stack: Vec<ConvSpec> = (0..layers)
            .map(|_| ConvSpec::new(rng.gen_range(1..=6), rng.gen_range(1..=3), rng.gen_range(0..=2), 1))
            .collect();
        matched += stack_matches(&stack)? as usize;
    }
    Ok(verdict(
        ok && matched == 50,
        format!("default stack R = {sizes:?}; {matched}/50 random stacks equal the gradient footprint"),
    ))
}

/// Naive replay of every single-output ablation at frame `t`.
fn naive_sweep_matches(p: &Policy, tr: &Trace, t: usize) -> Result<bool> {
    let sw = sweep_frame(p, tr, t, AblationMode::Zero, None)?;
    let frames = tr.all_frames()?;
    let start = tr.window_starts()[t];
    let entries = frame_entries(p, &frames[start..=t]);
    let refs: Vec<&FrameEntry> = entries.iter().collect();
    let fc = resolve(&tr.manifest.interventions, t, p)?;
    let base = tr.distribution(t);
    for l in 0..p.config.layers {
        for h in 0..p.config.heads {
            for i in 0..sw.n {
                let mut hooks = fc.hooks.clone();
                hooks.patches.push(HeadPatch {
                    layer: l,
                    head: h,
                    slot: Some(sw.slot(i)),
                    value: None,
                });
                let acts = p.forward_window(&refs, &hooks, false);
                let m = impact_metrics(&base, &p.distribution(&acts.logits))?;
                let dp: Vec<f32> = m.dp.concat().into_iter().map(|v| v as f32).collect();
                let dlogp: Vec<f32> = m.dlogp.concat().into_iter().map(|v| v as f32).collect();
                if sw.dp_at(l, h, i) != dp.as_slice() || sw.dlogp_at(l, h, i) != dlogp.as_slice() {
                    return Ok(false);
                }
            }
        }
    }
    Ok(true)
}

fn c5_sweep(scan: &mut AttentionScan) -> Result<Verdict> {
    let p = Policy::new(PolicyConfig::default(), 0)?;
    let tr = record_rollout(preset("villager_tree", 1), &p, &plan("villager_tree", false), 200, 1)?;
    scan.check("sweep default", &tr);
    let t0 = Instant::now();
    let sw = sweep_frame(&p, &tr, 199, AblationMode::Zero, None)?;
    let secs = t0.elapsed().as_secs_f64();
    let counts: Vec<usize> = [127, 150]
        .iter()
        .map(|&t| sweep_frame(&p, &tr, t, AblationMode::Zero, None).map(|s| s.target_count()))
        .collect::<agentlens::Result<_>>()?;
    let short = record_rollout(preset("villager_tree", 2), &p, &plan("villager_tree", false), 32, 2)?;
    scan.check("sweep short", &short);
    let naive = naive_sweep_matches(&p, &short, 31)? && naive_sweep_matches(&p, &short, 9)?;
    Ok(verdict(
        sw.target_count() == 8192 && counts.iter().all(|&c| c == 8192) && naive && secs < 60.0,
        format!(
            "{} targets at t=199 (t=127,150: {counts:?}); naive replay identical on 32 frames: {naive}; full sweep {secs:.1} s",
            sw.target_count()
        ),
    ))
}

#[derive(Serialize, Deserialize)]
struct TrainingRecord {
    metrics: TrainMetrics,
    seconds: f64,
    permuted_epochs: usize,
}

struct Trained {
    policy: Policy,
    permuted: Policy,
    record: TrainingRecord,
}

fn train_agents() -> Result<Trained> {
    let cache = std::env::var_os("AGENTLENS_ACCEPTANCE_CACHE").map(PathBuf::from);
    if let Some(dir) = &cache {
        let (a, b, r) = (dir.join("trained.agln"), dir.join("permuted.agln"), dir.join("training.json"));
        if a.is_file() && b.is_file() && r.is_file() {
            note(&format!("using trained policies cached in {}", dir.display()));
            return Ok(Trained {
                policy: Policy::load(&a)?,
                permuted: Policy::load(&b)?,
                record: serde_json::from_slice(&std::fs::read(r)?)?,
            });
        }
    }
    note("generating 200 expert demonstrations");
    let t0 = Instant::now();
    let demos = generate_demos(&DemoConfig::default())?;
    let mut policy = Policy::new(PolicyConfig::desk(), 0)?;
    let metrics = train_bc(&mut policy, &demos, &TrainConfig::default(), |e, loss, acc| {
        note(&format!("epoch {e}: loss {loss:.3}, held-out accuracy {:.3}", acc.unwrap_or(f64::NAN)));
    })?;
    let seconds = t0.elapsed().as_secs_f64();
    note("training the permuted-label policy");
    let shuffled = permute_labels(&demos, 1);
    let mut permuted = Policy::new(PolicyConfig::desk(), 1)?;
    let cfg = TrainConfig {
        epochs: PERMUTED_EPOCHS,
        ..TrainConfig::default()
    };
    train_bc(&mut permuted, &shuffled, &cfg, |_, _, _| {})?;
    let record = TrainingRecord {
        metrics,
        seconds,
        permuted_epochs: PERMUTED_EPOCHS,
    };
    if let Some(dir) = &cache {
        std::fs::create_dir_all(dir)?;
        policy.save(&dir.join("trained.agln"))?;
        permuted.save(&dir.join("permuted.agln"))?;
        std::fs::write(dir.join("training.json"), serde_json::to_vec_pretty(&record)?)?;
    }
    Ok(Trained {
        policy,
        permuted,
        record,
    })
}

/// 300-frame trained-agent episode shared by criteria 6, 7 and 10.
fn reference_episode(p: &Policy, scan: &mut AttentionScan) -> Result<Trace> {
    let tr = record_rollout(procedural(EVAL_SEED), p, &plan("procedural", false), 300, 0)?;
    scan.check("reference episode", &tr);
    Ok(tr)
}

fn c6_certainty(p: &Policy, tr: &Trace) -> Result<Verdict> {
    let mut impact = Vec::with_capacity(tr.len());
    let mut certainty = Vec::with_capacity(tr.len());
    let mut confident = 0;
    let mut confident_bad = 0;
    for t in 0..tr.len() {
        let sw = sweep_frame(p, tr, t, AblationMode::Zero, None)?;
        let m = sw.max_attack_impact() as f64;
        let pa = tr.distribution(t).p_active(ATTACK_FACTOR);
        impact.push(m);
        certainty.push(pa.min(1.0 - pa));
        if pa > 0.9999 {
            confident += 1;
            confident_bad += (m >= 1e-3) as usize;
        }
    }
    let rho = spearman(&impact, &certainty);
    Ok(verdict(
        rho > 0.3 && confident_bad == 0 && tr.len() == 300,
        format!(
            "Spearman {rho:.3} over {} frames; {confident} frames with p(attack) > 0.9999, {confident_bad} of them with impact >= 1e-3",
            tr.len()
        ),
    ))
}

fn c7_memory_reset(p: &Policy, scan: &mut AttentionScan) -> Result<Verdict> {
    let tr = memory_reset_rollout(p, procedural(EVAL_SEED), &plan("procedural", false), 300, 0)?;
    scan.check("memory reset", &tr);
    let mut identical = true;
    for t in 0..tr.len() {
        let f = tr.frame(t).ok_or_else(|| anyhow!("frame {t} missing"))?;
        let (d, _, _) = policy_forward(p, std::slice::from_ref(f), None, &Hooks::default(), false)?;
        identical &= d == tr.distribution(t);
    }
    let (mut base, mut reset) = (0, 0);
    for i in 0..20 {
        let b = record_rollout(procedural(EVAL_SEED + i), p, &plan("procedural", false), 300, i)?;
        let r = memory_reset_rollout(p, procedural(EVAL_SEED + i), &plan("procedural", false), 300, i)?;
        scan.check("memory baseline", &b);
        scan.check("memory reset", &r);
        base += b.craft_count();
        reset += r.craft_count();
    }
    Ok(verdict(
        identical && reset < base,
        format!("single-frame forward identical on {} frames: {identical}; crafts over 20 seeds: reset {reset} vs baseline {base}", tr.len()),
    ))
}

fn c8_gate(p: &Policy, scan: &mut AttentionScan) -> Result<Verdict> {
    let mut same = 0;
    for i in 0..5 {
        let b = record_rollout(procedural(EVAL_SEED + i), p, &plan("procedural", false), 300, i)?;
        let g = gate_rollout(p, procedural(EVAL_SEED + i), ATTACK_FACTOR, 0.0, &plan("procedural", false), 300, i)?;
        scan.check("gate 0", &g);
        same += same_rollout(&b, &g) as usize;
    }
    let mut attacks = 0;
    let mut baseline_attacks = 0;
    for i in 0..20 {
        let g = gate_rollout(p, preset("tree_ahead", i), ATTACK_FACTOR, 1.0, &plan("tree_ahead", false), 300, i)?;
        let b = record_rollout(preset("tree_ahead", i), p, &plan("tree_ahead", false), 300, i)?;
        scan.check("gate 1", &g);
        attacks += g.attack_count();
        baseline_attacks += b.attack_count();
    }
    Ok(verdict(
        same == 5 && attacks == 0,
        format!("threshold 0 identical to ungated on {same}/5 seeds; threshold 1 attacks over 20 rollouts: {attacks} (ungated {baseline_attacks})"),
    ))
}

fn c9_steering(p: &Policy, scan: &mut AttentionScan) -> Result<Verdict> {
    let (pos, neg) = SteeringRecipe::default().frames()?;
    let v = compute_steering_vector(p, &pos, &neg, SteerSite::Block0Mlp)?;
    let mut identical = true;
    let mut freq: BTreeMap<i32, Vec<f64>> = BTreeMap::new();
    for i in 0..20 {
        let base = record_rollout(preset("tree_ahead", i), p, &plan("tree_ahead", false), 200, i)?;
        freq.entry(0).or_default().push(attack_frequency(&base));
        for alpha in [-3.0f32, 0.0, 3.0] {
            let tr = steer_rollout(p, preset("tree_ahead", i), &v, alpha, &plan("tree_ahead", false), 200, i)?;
            scan.check("steer", &tr);
            if alpha == 0.0 {
                identical &= same_rollout(&base, &tr);
            } else {
                freq.entry(alpha as i32).or_default().push(attack_frequency(&tr));
            }
        }
    }
    let (lo, mid, hi) = (mean(&freq[&-3]), mean(&freq[&0]), mean(&freq[&3]));
    Ok(verdict(
        identical && hi > mid && lo < mid,
        format!("alpha 0 identical: {identical}; attack frequency alpha -3 {lo:.3}, baseline {mid:.3}, alpha +3 {hi:.3}"),
    ))
}

fn c10_saliency_sanity(p: &Policy, permuted: &Policy, tr: &Trace) -> Result<Verdict> {
    let frames: &[ObsFrame] = tr.all_frames()?;
    let ts: Vec<usize> = (0..10).map(|k| 25 + 27 * k).collect();
    let mut bit_equal = true;
    for &t in &ts {
        let g = gradient_saliency(p, frames, t, ATTACK)?;
        let s = smoothgrad(p, frames, t, ATTACK, 8, 0.0, 3)?;
        bit_equal &= g.values == s.values;
    }
    let mut randomized = Vec::new();
    for &t in &ts {
        let stages = sanity_param_randomization(p, frames, t, ATTACK, SaliencyMethod::Gradient, 7)?;
        randomized.push(stages.last().map_or(1.0, |s| s.spearman));
    }
    let agreement = saliency_agreement(p, permuted, frames, &ts, ATTACK, SaliencyMethod::Gradient)?;
    let (r, a) = (mean(&randomized), mean(&agreement));
    Ok(verdict(
        bit_equal && r < 0.2 && a < 0.3,
        format!("smoothgrad(0) == gradient: {bit_equal}; fully randomized Spearman {r:.3} (need < 0.2); permuted-label agreement {a:.3} (need < 0.3)"),
    ))
}

fn c11_competence(p: &Policy, record: &TrainingRecord, scan: &mut AttentionScan) -> Result<Verdict> {
    let acc = record.metrics.heldout_accuracy.last().copied().unwrap_or(0.0);
    let mut reached = 0;
    for i in 0..20 {
        let tr = record_rollout(procedural(EVAL_SEED + i), p, &plan("procedural", false), 600, i)?;
        scan.check("competence", &tr);
        reached += tr
            .manifest
            .events
            .iter()
            .any(|e| matches!(e.kind, EventKind::Craft { recipe: Recipe::WoodenPickaxe })) as usize;
    }
    Ok(verdict(
        acc >= 0.8 && reached >= 10 && record.seconds < 1800.0,
        format!(
            "held-out accuracy {acc:.3}; {reached}/20 seeds craft the wooden pickaxe within 600 steps; training took {:.0} s",
            record.seconds
        ),
    ))
}

fn c12_persistence(scan: &mut AttentionScan) -> Result<Verdict> {
    let desk = Policy::new(PolicyConfig::desk(), 3)?;
    let tmp = tempfile::tempdir()?;
    let mut traces = Vec::new();
    for i in 0..4 {
        traces.push(record_rollout(procedural(i), &desk, &plan("procedural", true), 40, i)?);
    }
    for (i, name) in ["villager_tree", "tree_ahead", "empty_field"].iter().enumerate() {
        traces.push(record_rollout(preset(name, i as u64), &desk, &plan(name, i != 1), 30, i as u64)?);
    }
    traces.push(gate_rollout(&desk, preset("tree_ahead", 0), ATTACK_FACTOR, 0.5, &plan("tree_ahead", true), 25, 0)?);
    traces.push(memory_reset_rollout(&desk, procedural(9), &plan("procedural", false), 25, 9)?);
    let strided = RecordingPlan {
        frame_stride: 3,
        ..plan("procedural", true)
    };
    traces.push(record_rollout(procedural(10), &desk, &strided, 31, 10)?);
    let mut equal = 0;
    for (i, tr) in traces.iter().enumerate() {
        scan.check("persistence", tr);
        let dir = tmp.path().join(format!("t{i}"));
        save_trace(tr, &dir)?;
        equal += (&load_trace(&dir)? == tr) as usize;
    }

    let src = tmp.path().join("t0");
    let corrupt = |name: &str, f: &dyn Fn(&Path)| -> Result<bool> {
        let dir = tmp.path().join(name);
        std::fs::create_dir_all(&dir)?;
        for e in std::fs::read_dir(&src)? {
            let e = e?;
            std::fs::copy(e.path(), dir.join(e.file_name()))?;
        }
        f(&dir);
        Ok(load_trace(&dir).is_err())
    };
    let flip = |file: &'static str, at: usize| {
        move |d: &Path| {
            let p = d.join(file);
            let mut b = std::fs::read(&p).unwrap();
            let i = at.min(b.len() - 1);
            b[i] ^= 0x40;
            std::fs::write(p, b).unwrap();
        }
    };
    let cases: Vec<(&str, Box<dyn Fn(&Path)>)> = vec![
        ("payload bit flip", Box::new(flip("logits.bin", 200))),
        ("bad magic", Box::new(flip("attn.bin", 0))),
        ("truncated array", Box::new(|d: &Path| {
            let p = d.join("attn.bin");
            let b = std::fs::read(&p).unwrap();
            std::fs::write(p, &b[..b.len() / 2]).unwrap();
        })),
        ("missing array", Box::new(|d: &Path| std::fs::remove_file(d.join("actions.bin")).unwrap())),
        ("garbled manifest", Box::new(|d: &Path| std::fs::write(d.join(MANIFEST_FILE), b"{ not json").unwrap())),
        ("future version", Box::new(|d: &Path| {
            let p = d.join(MANIFEST_FILE);
            let s = std::fs::read_to_string(&p).unwrap().replacen("\"format_version\": 1", "\"format_version\": 99", 1);
            std::fs::write(p, s).unwrap();
        })),
    ];
    let mut rejected = Vec::new();
    let mut accepted = Vec::new();
    for (i, (name, f)) in cases.iter().enumerate() {
        if corrupt(&format!("bad{i}"), f.as_ref())? {
            rejected.push(*name);
        } else {
            accepted.push(*name);
        }
    }
    Ok(verdict(
        equal == traces.len() && traces.len() == 10 && accepted.is_empty(),
        format!("{equal}/{} traces round-trip equal; {}/{} corruptions rejected {accepted:?}", traces.len(), rejected.len(), cases.len()),
    ))
}

const TITLES: [&str; 12] = [
    "determinism",
    "attention normalization and causality",
    "autodiff",
    "receptive field",
    "sweep",
    "certainty and impact",
    "memory reset",
    "gate",
    "steering",
    "saliency sanity",
    "behavior cloning competence",
    "persistence",
];

/// Criteria named on the command line (`-- 3 4`), or all of them.
fn selected(n: usize) -> bool {
    let picked: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    picked.is_empty() || picked.contains(&n)
}

fn run(results: &mut BTreeMap<usize, Verdict>, n: usize, f: impl FnOnce() -> Result<Verdict>) {
    if !selected(n) {
        return;
    }
    eprintln!("criterion {n}: {}", TITLES[n - 1]);
    let t0 = Instant::now();
    let v = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => verdict(false, format!("error: {e:#}")),
        Err(_) => verdict(false, "panicked"),
    };
    eprintln!("  .. {} in {:.1} s", if v.pass { "passed" } else { "failed" }, t0.elapsed().as_secs_f64());
    results.insert(n, v);
}

fn main() {
    // `cargo test -- --list` and filters are not meaningful for this suite.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut scan = AttentionScan::default();
    let mut results = BTreeMap::new();
    run(&mut results, 1, || c1_determinism(&mut scan));
    run(&mut results, 3, c3_autodiff);
    run(&mut results, 4, c4_receptive_field);
    run(&mut results, 5, || c5_sweep(&mut scan));
    run(&mut results, 12, || c12_persistence(&mut scan));

    if (6..=11).any(selected) {
        trained_criteria(&mut results, &mut scan);
    }

    if selected(2) {
        let detail = if scan.failures.is_empty() {
            format!("{} traces, {} weight rows, all normalized within 1e-5 with empty slots exactly 0", scan.traces, scan.rows)
        } else {
            format!("{} of {} traces fail: {:?}", scan.failures.len(), scan.traces, scan.failures)
        };
        results.insert(2, verdict(scan.failures.is_empty() && scan.traces > 0, detail));
    }

    println!();
    for (n, v) in &results {
        println!("criterion {n:>2} {} {}: {}", if v.pass { "PASS" } else { "FAIL" }, TITLES[n - 1], v.detail);
    }
    let failed = results.values().filter(|v| !v.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn trained_criteria(results: &mut BTreeMap<usize, Verdict>, scan: &mut AttentionScan) {
    match catch_unwind(AssertUnwindSafe(train_agents)).map_err(|_| anyhow!("training panicked")).and_then(|r| r) {
        Ok(trained) => {
            let p = &trained.policy;
            match reference_episode(p, scan).context("reference episode") {
                Ok(tr) => {
                    run(results, 6, || c6_certainty(p, &tr));
                    run(results, 10, || c10_saliency_sanity(p, &trained.permuted, &tr));
                }
                Err(e) => {
                    for n in [6, 10] {
                        results.insert(n, verdict(false, format!("error: {e:#}")));
                    }
                }
            }
            run(results, 7, || c7_memory_reset(p, scan));
            run(results, 8, || c8_gate(p, scan));
            run(results, 9, || c9_steering(p, scan));
            run(results, 11, || c11_competence(p, &trained.record, scan));
        }
        Err(e) => {
            for n in 6..=11 {
                results.insert(n, verdict(false, format!("training failed: {e:#}")));
            }
        }
    }
}
