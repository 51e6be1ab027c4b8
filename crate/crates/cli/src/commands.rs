// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use agentlens::agent::{
    generate_demos, train_bc, ConvSpec, DemoConfig, Policy, PolicyConfig, TrainConfig,
};
use agentlens::intervention::{
    compute_steering_vector, gate_rollout, steer_rollout, sweep_frame, AblationMode, HeadMeans,
    InterventionSpec, SteerSite, SteeringRecipe,
};
use agentlens::trace::{
    load_demos, load_trace, record_rollout_with, replay_with, save_demos, save_trace, NdArray,
    RecordingPlan, Trace,
};
use agentlens::vision::{
    activation_overlay, feature_viz, kernel_pca_rgb, receptive_field_table, saliency,
    sanity_param_randomization, OptimizationConfig, SaliencyMethod, SaliencyTarget,
};
use agentlens::world::{build_scenario, generate_world, ScenarioSpec, WorldState, FRAME_SIZE};

use crate::output::{dir_digest, emit, enlarge, gray_png, rgb_png, write_file, write_json};
use crate::{Command, Method, Mode, Model, PolicyArgs, TraceCommand, WorldArgs};

/// A request that cannot be satisfied as written.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn model_config(m: Model) -> PolicyConfig {
    match m {
        Model::Default => PolicyConfig::default(),
        Model::Desk => PolicyConfig::desk(),
    }
}

pub fn load_policy(a: &PolicyArgs) -> Result<Policy> {
    let mut p = match &a.policy {
        Some(path) => Policy::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => Policy::new(model_config(a.model), a.init_seed)?,
    };
    if let Some(t) = a.temperature {
        p.config.temperature = t;
        p.config.validate()?;
    }
    Ok(p)
}

/// World plus the label written to trace manifests.
pub fn build_world(w: &WorldArgs, seed: u64) -> Result<(WorldState, String)> {
    if let Some(s) = w.procedural {
        return Ok((generate_world(s, (w.size, w.size))?, format!("procedural:{s}")));
    }
    if let Some(path) = &w.scenario_file {
        let spec: ScenarioSpec = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| usage(format!("scenario file: {e}")))?;
        let name = spec.name.clone();
        return Ok((build_scenario(&spec)?, name));
    }
    let spec = ScenarioSpec::preset(&w.scenario, seed)?;
    Ok((build_scenario(&spec)?, w.scenario.clone()))
}

fn read_interventions(path: &Option<PathBuf>) -> Result<Vec<InterventionSpec>> {
    match path {
        None => Ok(Vec::new()),
        Some(p) => serde_json::from_slice(&std::fs::read(p)?).map_err(|e| usage(format!("interventions: {e}"))),
    }
}

fn trace_for(policy: &Policy, dir: &Path) -> Result<Trace> {
    let tr = load_trace(dir)?;
    if tr.manifest.policy_digest != policy.digest() {
        bail!(usage(format!(
            "policy {} did not record this trace (recorded by {})",
            policy.digest(),
            tr.manifest.policy_digest
        )));
    }
    Ok(tr)
}

pub fn parse_target(s: &str) -> Result<SaliencyTarget> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |i: usize| -> Result<usize> {
        parts
            .get(i)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| usage(format!("bad target '{s}'")))
    };
    match parts[0] {
        "attack" if parts.len() == 1 => Ok(SaliencyTarget::Logit { factor: 2, index: 1 }),
        "logit" if parts.len() == 3 => Ok(SaliencyTarget::Logit { factor: num(1)?, index: num(2)? }),
        "channel" if parts.len() == 3 => Ok(SaliencyTarget::Channel { layer: num(1)?, channel: num(2)? }),
        _ => Err(usage(format!("bad target '{s}'"))),
    }
}

pub fn parse_stack(s: &str) -> Result<Vec<ConvSpec>> {
    s.split(':')
        .map(|layer| {
            let v: Vec<usize> = layer
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| usage(format!("bad layer '{layer}'")))?;
            match v[..] {
                [k, s, p] if k > 0 && s > 0 => Ok(ConvSpec::new(k, s, p, 1)),
                _ => Err(usage(format!("layer '{layer}' must be K,S,P with K,S >= 1"))),
            }
        })
        .collect()
}

/// Aligned `layer K S P R` table.
pub fn rf_table_text(stack: &[ConvSpec]) -> String {
    let mut s = format!("{:>5} {:>4} {:>4} {:>4} {:>5}\n", "layer", "K", "S", "P", "R");
    for r in receptive_field_table(stack) {
        s.push_str(&format!("{:>5} {:>4} {:>4} {:>4} {:>5}\n", r.layer, r.k, r.s, r.p, r.r));
    }
    s
}

fn mode(m: Mode) -> AblationMode {
    match m {
        Mode::Zero => AblationMode::Zero,
        Mode::Mean => AblationMode::Mean,
    }
}

/// Gray PNG of a `[rows, cols]` map, enlarged for visibility.
fn heatmap_png(rows: usize, cols: usize, values: &[f32], invert: bool) -> Result<Vec<u8>> {
    let g = agentlens::vision::normalize_u8(values, invert);
    let k = (256 / cols.max(rows).max(1)).clamp(1, 16);
    gray_png(cols * k, rows * k, &enlarge(cols, rows, &g, k))
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenDemos {
            common,
            episodes,
            world_size,
            noise,
            max_steps,
        } => {
            let cfg = DemoConfig {
                episodes,
                seed: common.seed,
                world_size,
                noise,
                max_steps,
                ..DemoConfig::default()
            };
            let demos = generate_demos(&cfg)?;
            save_demos(&demos, &common.out)?;
            let frames: usize = demos.iter().map(|e| e.frames.len()).sum();
            let summary = json!({ "episodes": demos.len(), "frames": frames, "config": cfg, "out": common.out });
            write_json(&common.out.join("summary.json"), &summary)?;
            emit(&summary)
        }
        Command::Train {
            common,
            policy,
            demos,
            epochs,
            lr,
            batch,
            holdout,
        } => {
            let episodes = load_demos(&demos)?;
            let mut p = match &policy.policy {
                Some(_) => load_policy(&policy)?,
                None => Policy::new(model_config(policy.model), common.seed)?,
            };
            let cfg = TrainConfig {
                epochs,
                lr,
                batch,
                holdout,
                seed: common.seed,
                ..TrainConfig::default()
            };
            let t0 = Instant::now();
            let metrics = train_bc(&mut p, &episodes, &cfg, |e, loss, acc| {
                eprintln!("epoch {e}: loss {loss:.4} held-out accuracy {}", acc.map_or("-".into(), |a| format!("{a:.3}")));
            })?;
            std::fs::create_dir_all(&common.out)?;
            p.save(&common.out.join("policy.agln"))?;
            let summary = json!({
                "policy": common.out.join("policy.agln"),
                "digest": p.digest(),
                "seconds": t0.elapsed().as_secs_f64(),
                "metrics": metrics,
            });
            write_json(&common.out.join("metrics.json"), &summary)?;
            emit(&summary)
        }
        Command::Rollout {
            common,
            policy,
            world,
            steps,
            outputs,
            frame_stride,
            interventions,
        } => {
            let p = load_policy(&policy)?;
            let (w, label) = build_world(&world, common.seed)?;
            let plan = RecordingPlan {
                store_outputs: outputs,
                store_mlp: true,
                frame_stride,
                scenario: label,
            };
            let specs = read_interventions(&interventions)?;
            let t0 = Instant::now();
            let tr = record_rollout_with(w, &p, &plan, steps, common.seed, specs)?;
            let secs = t0.elapsed().as_secs_f64();
            save_trace(&tr, &common.out)?;
            emit(&trace_summary(&tr, &common.out, Some(secs))?)
        }
        Command::Replay {
            common,
            policy,
            trace,
            interventions,
        } => {
            let p = load_policy(&policy)?;
            let tr = trace_for(&p, &trace)?;
            let specs = match interventions {
                Some(_) => read_interventions(&interventions)?,
                None => tr.manifest.interventions.clone(),
            };
            let steps = replay_with(&p, tr.all_frames()?, &specs, false)?;
            let a = p.config.n_actions();
            let mut logits = Vec::with_capacity(steps.len() * a);
            let mut max_dp = 0.0f32;
            let mut probs = Vec::with_capacity(steps.len());
            for (t, (dist, _)) in steps.iter().enumerate() {
                let flat = dist.flat_probs();
                let stored = tr.distribution(t).flat_probs();
                for (x, y) in flat.iter().zip(&stored) {
                    max_dp = max_dp.max((x - y).abs());
                }
                logits.extend(dist.flat_logits());
                probs.push(flat);
            }
            std::fs::create_dir_all(&common.out)?;
            NdArray::f32(vec![steps.len(), a], logits)?.save(&common.out.join("logits.bin"))?;
            let summary = json!({
                "frames": steps.len(),
                "interventions": specs.len(),
                "max_abs_dp_vs_recorded": max_dp,
                "probabilities": probs,
            });
            write_json(&common.out.join("replay.json"), &summary)?;
            emit(&json!({ "frames": steps.len(), "max_abs_dp_vs_recorded": max_dp, "out": common.out }))
        }
        Command::Sweep {
            common,
            policy,
            trace,
            frame,
            mode: m,
        } => {
            let p = load_policy(&policy)?;
            let tr = trace_for(&p, &trace)?;
            let means = match m {
                Mode::Mean => Some(HeadMeans::from_trace(&tr)?),
                Mode::Zero => None,
            };
            let t0 = Instant::now();
            let r = sweep_frame(&p, &tr, frame, mode(m), means.as_ref())?;
            let secs = t0.elapsed().as_secs_f64();
            std::fs::create_dir_all(&common.out)?;
            for (name, arr) in r.arrays()? {
                arr.save(&common.out.join(format!("{name}.bin")))?;
            }
            for l in 0..r.layers {
                let png = heatmap_png(r.heads, r.n, &r.attack_heatmap(l), true)?;
                write_file(&common.out.join(format!("attack_layer{l}.png")), &png)?;
            }
            let summary = json!({
                "t": r.t,
                "targets": r.target_count(),
                "max_abs_dp_attack": r.max_attack_impact(),
                "max_abs_dp": r.max_impact(),
                "seconds": secs,
                "result": r,
            });
            write_json(&common.out.join("sweep.json"), &summary)?;
            emit(&json!({ "t": r.t, "targets": r.target_count(), "max_abs_dp_attack": r.max_attack_impact(), "seconds": secs }))
        }
        Command::Saliency {
            common,
            policy,
            trace,
            frame,
            target,
            method,
            n,
            sigma,
            invert,
            sanity,
        } => {
            let p = load_policy(&policy)?;
            let tr = trace_for(&p, &trace)?;
            let target = parse_target(&target)?;
            let method = match method {
                Method::Gradient => SaliencyMethod::Gradient,
                Method::Smoothgrad => SaliencyMethod::Smoothgrad { n, sigma, seed: common.seed },
            };
            let m = saliency(&p, tr.all_frames()?, frame, target, method)?;
            std::fs::create_dir_all(&common.out)?;
            write_file(&common.out.join("saliency.png"), &gray_png(m.width, m.height, &m.to_gray(invert))?)?;
            NdArray::f32(vec![m.height, m.width], m.values.clone())?.save(&common.out.join("saliency.bin"))?;
            let stages = if sanity {
                Some(sanity_param_randomization(&p, tr.all_frames()?, frame, target, method, common.seed)?)
            } else {
                None
            };
            let summary = json!({ "frame": frame, "target": target, "method": method, "max": m.max(), "randomization": stages });
            write_json(&common.out.join("saliency.json"), &summary)?;
            emit(&summary)
        }
        Command::Featviz {
            common,
            policy,
            layer,
            channel,
            steps,
            step_size,
            jitter,
            weight_decay,
        } => {
            let p = load_policy(&policy)?;
            let cfg = OptimizationConfig {
                steps,
                step_size,
                jitter,
                weight_decay,
                seed: common.seed,
                ..OptimizationConfig::default()
            };
            let fv = feature_viz(&p, layer, channel, &cfg)?;
            let side = p.config.input_size;
            write_file(&common.out.join("featviz.png"), &rgb_png(side, side, &fv.to_rgb(side))?)?;
            let summary = json!({ "layer": layer, "channel": channel, "config": cfg, "objective": fv.objective, "history": fv.history });
            write_json(&common.out.join("featviz.json"), &summary)?;
            emit(&summary)
        }
        Command::Rfmap { common, stack, model } => {
            let stack = match stack {
                Some(s) => parse_stack(&s)?,
                None => model_config(model).conv,
            };
            crate::output::print_text(&rf_table_text(&stack))?;
            write_json(&common.out.join("rf.json"), &receptive_field_table(&stack))
        }
        Command::Overlay {
            common,
            policy,
            trace,
            frame,
            layer,
        } => {
            let p = load_policy(&policy)?;
            let tr = trace_for(&p, &trace)?;
            let f = tr
                .frame(frame)
                .ok_or_else(|| usage(format!("frame {frame} is not stored in the trace")))?;
            let ov = activation_overlay(&p, f, layer)?;
            for o in &ov {
                write_file(
                    &common.out.join(format!("filter{:03}.png", o.filter)),
                    &rgb_png(FRAME_SIZE, FRAME_SIZE, &o.pixels)?,
                )?;
            }
            let pc = kernel_pca_rgb(&p, f, layer)?;
            write_file(&common.out.join("pca.png"), &rgb_png(pc.side, pc.side, &pc.pixels)?)?;
            let constant: Vec<usize> = ov.iter().filter(|o| o.constant).map(|o| o.filter).collect();
            let summary = json!({
                "frame": frame,
                "layer": layer,
                "filters": ov.len(),
                "constant_filters": constant,
                "pca_explained_variance": pc.explained_variance,
                "pca_degenerate": pc.degenerate,
            });
            write_json(&common.out.join("overlay.json"), &summary)?;
            emit(&summary)
        }
        Command::Steer {
            common,
            policy,
            world,
            alphas,
            rollouts,
            steps,
            vector,
        } => {
            let p = load_policy(&policy)?;
            let v = match &vector {
                Some(path) => NdArray::load(path)?.into_f32(path)?,
                None => {
                    let (pos, neg) = SteeringRecipe::default().frames()?;
                    compute_steering_vector(&p, &pos, &neg, SteerSite::Block0Mlp)?
                }
            };
            std::fs::create_dir_all(&common.out)?;
            NdArray::f32(vec![v.len()], v.clone())?.save(&common.out.join("vector.bin"))?;
            let plan = RecordingPlan {
                store_outputs: false,
                store_mlp: false,
                ..RecordingPlan::default()
            };
            let mut rows = Vec::new();
            for &alpha in &alphas {
                let mut attacks = 0usize;
                let mut frames = 0usize;
                for i in 0..rollouts as u64 {
                    let (w, _) = build_world(&world, common.seed + i)?;
                    let tr = steer_rollout(&p, w, &v, alpha, &plan, steps, common.seed + i)?;
                    attacks += tr.actions.iter().filter(|a| a.attack).count();
                    frames += tr.len();
                }
                rows.push(json!({
                    "alpha": alpha,
                    "attacks": attacks,
                    "frames": frames,
                    "attack_frequency": attacks as f64 / frames.max(1) as f64,
                }));
            }
            let summary = json!({ "rollouts": rollouts, "steps": steps, "results": rows });
            write_json(&common.out.join("steer.json"), &summary)?;
            emit(&summary)
        }
        Command::GateRollout {
            common,
            policy,
            world,
            factor,
            threshold,
            steps,
        } => {
            let p = load_policy(&policy)?;
            let (w, label) = build_world(&world, common.seed)?;
            let plan = RecordingPlan {
                store_outputs: false,
                scenario: label,
                ..RecordingPlan::default()
            };
            let tr = gate_rollout(&p, w, factor, threshold, &plan, steps, common.seed)?;
            save_trace(&tr, &common.out)?;
            emit(&trace_summary(&tr, &common.out, None)?)
        }
        Command::Trace {
            command: TraceCommand::Inspect { common, trace },
        } => {
            let tr = load_trace(&trace)?;
            let attention = tr.check_attention(1e-5);
            let mut s = trace_summary(&tr, &trace, None)?;
            s.attention_ok = Some(attention.is_ok());
            s.attention_error = attention.err();
            write_json(&common.out.join("inspect.json"), &s)?;
            emit(&s)
        }
        Command::Serve {
            common,
            config,
            listen,
            data,
            policy,
            model,
            workers,
        } => {
            let mut cfg = match &config {
                Some(path) => crate::server::LabConfig::from_file(path)?,
                None => crate::server::LabConfig::default(),
            };
            if let Ok(d) = std::env::var(crate::server::DATA_ENV) {
                cfg.data_dir = d.into();
            }
            if let Some(l) = listen {
                cfg.listen = l;
            }
            if let Some(d) = data {
                cfg.data_dir = d;
            }
            if policy.is_some() {
                cfg.policy = policy;
            }
            if let Some(m) = model {
                cfg.model = m;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            cfg.init_seed = common.seed;
            crate::server::serve_blocking(cfg)
        }
    }
}

#[derive(Serialize)]
struct TraceSummary {
    dir: PathBuf,
    frames: usize,
    scenario: String,
    seed: u64,
    policy_digest: String,
    digest: String,
    attacks: usize,
    crafts: usize,
    events: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    seconds: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attention_ok: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    attention_error: Option<String>,
}

fn trace_summary(tr: &Trace, dir: &Path, seconds: Option<f64>) -> Result<TraceSummary> {
    Ok(TraceSummary {
        dir: dir.to_path_buf(),
        frames: tr.len(),
        scenario: tr.manifest.scenario.clone(),
        seed: tr.manifest.seed,
        policy_digest: tr.manifest.policy_digest.clone(),
        digest: dir_digest(dir)?,
        attacks: tr.actions.iter().filter(|a| a.attack).count(),
        crafts: tr.craft_count(),
        events: tr.manifest.events.len(),
        seconds,
        attention_ok: None,
        attention_error: None,
    })
}
