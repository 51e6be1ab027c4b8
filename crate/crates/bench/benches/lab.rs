// SPDX-License-Identifier: MIT OR Apache-2.0

use std::time::Duration;

use agentlens::agent::{frame_entries, generate_demos, train_bc, DemoConfig, Hooks, Policy, PolicyConfig, TrainConfig};
use agentlens::intervention::{sweep_frame, AblationMode};
use agentlens::trace::{record_rollout, RecordingPlan, Trace};
use agentlens::vision::{gradient_saliency, SaliencyTarget};
use agentlens::world::{build_scenario, ScenarioSpec};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn rollout(policy: &Policy, steps: usize) -> Trace {
    let world = build_scenario(&ScenarioSpec::preset("villager_tree", 1).unwrap()).unwrap();
    let plan = RecordingPlan {
        store_outputs: false,
        store_mlp: false,
        frame_stride: 1,
        scenario: "villager_tree".into(),
    };
    record_rollout(world, policy, &plan, steps, 1).unwrap()
}

fn forward(c: &mut Criterion) {
    let policy = Policy::new(PolicyConfig::default(), 0).unwrap();
    let trace = rollout(&policy, 128);
    let entries = frame_entries(&policy, &trace.frames);
    let refs: Vec<_> = entries.iter().collect();
    let hooks = Hooks::default();
    c.bench_function("forward_full_window_default", |b| {
        b.iter(|| black_box(policy.forward_window(&refs, &hooks, false)))
    });
    c.bench_function("encode_frame_default", |b| b.iter(|| black_box(policy.frame_entry(&trace.frames[0]))));
}

fn sweep(c: &mut Criterion) {
    let policy = Policy::new(PolicyConfig::desk(), 0).unwrap();
    let trace = rollout(&policy, 40);
    c.bench_function("sweep_frame_desk", |b| {
        b.iter(|| black_box(sweep_frame(&policy, &trace, 39, AblationMode::Zero, None).unwrap()))
    });
}

fn saliency(c: &mut Criterion) {
    let policy = Policy::new(PolicyConfig::desk(), 0).unwrap();
    let trace = rollout(&policy, 40);
    let target = SaliencyTarget::Logit { factor: 2, index: 1 };
    c.bench_function("gradient_saliency_desk", |b| {
        b.iter(|| black_box(gradient_saliency(&policy, &trace.frames, 39, target).unwrap()))
    });
}

fn train(c: &mut Criterion) {
    let demos = generate_demos(&DemoConfig {
        episodes: 2,
        max_steps: 64,
        ..DemoConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        holdout: 0.0,
        ..TrainConfig::default()
    };
    let init = Policy::new(PolicyConfig::desk(), 0).unwrap();
    c.bench_function("train_epoch_desk_2_episodes", |b| {
        b.iter(|| {
            let mut p = init.clone();
            black_box(train_bc(&mut p, &demos, &cfg, |_, _, _| {}).unwrap())
        })
    });
}

criterion_group! {
    name = lab;
    config = Criterion::default().sample_size(10).measurement_time(Duration::from_secs(5));
    targets = forward, sweep, saliency, train
}
criterion_main!(lab);
