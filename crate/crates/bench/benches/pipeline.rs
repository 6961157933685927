use criterion::{black_box, criterion_group, criterion_main, Criterion};
use zdgait_bench::fixture;
use zdgait_core::barriers::{barrier_loss, barrier_loss_grad, FlowModel};
use zdgait_core::simulator::rollout;
use zdgait_core::verification::certify;

/// One optimizer epoch evaluates the loss and its gradient over every
/// region; this is where training time goes.
fn bench_loss_and_grad(c: &mut Criterion) {
    let fx = fixture();
    let specs = fx.cfg.build_training_specs().unwrap();
    let flow = FlowModel { model: &fx.cfg.model, policy: &fx.policy, residual: None };
    let n = fx.cfg.train.samples_per_region;
    let mut grad = vec![0.0; fx.policy.w.len()];

    c.bench_function("barrier_loss_mc", |b| {
        b.iter(|| barrier_loss(&specs, &flow, black_box(n), black_box(7)).unwrap())
    });
    c.bench_function("barrier_loss_grad", |b| {
        b.iter(|| barrier_loss_grad(&specs, &flow, black_box(n), black_box(7), &mut grad).unwrap())
    });
}

/// Policy forward pass with the phase jacobian, the per-tick cost of the
/// control loop.
fn bench_policy_eval(c: &mut Criterion) {
    let fx = fixture();
    c.bench_function("policy_jacobian", |b| {
        b.iter(|| fx.policy.eval_with_jacobian(black_box([0.1, 30.0])))
    });
}

/// A single closed-loop footstep from the manifold start state, including
/// guard detection and the impact map.
fn bench_closed_loop_step(c: &mut Criterion) {
    let fx = fixture();
    let mut sim = fx.cfg.sim.clone();
    sim.max_steps = 1;
    sim.max_time = 5.0;
    c.bench_function("closed_loop_step", |b| {
        b.iter(|| rollout(black_box(&fx.x0), &fx.cfg.model, &fx.policy, &sim).unwrap())
    });
}

/// Sampled certification at the configured floor of one thousand points
/// per barrier.
fn bench_certify(c: &mut Criterion) {
    let fx = fixture();
    let specs = fx.cfg.build_specs().unwrap();
    let flow = FlowModel { model: &fx.cfg.model, policy: &fx.policy, residual: None };
    c.bench_function("certify_1k", |b| {
        b.iter(|| certify(&specs, &flow, black_box(1000), 1e-3, black_box(11)).unwrap())
    });
}

criterion_group!(
    benches,
    bench_loss_and_grad,
    bench_policy_eval,
    bench_closed_loop_step,
    bench_certify
);
criterion_main!(benches);
