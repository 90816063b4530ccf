use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use prior_bench::{default_ckpt, packed_job};
use prior_core::model::{forward_backward_with_ctx, forward_job, BackwardCtx};

fn bench_forward(c: &mut Criterion) {
    let ckpt = default_ckpt(3);
    let job = packed_job(8, 18);
    c.bench_function("forward_8x18_tokens", |b| {
        b.iter(|| forward_job(&ckpt.config, &ckpt.params, black_box(&job), false).unwrap())
    });
}

fn bench_forward_backward(c: &mut Criterion) {
    let ckpt = default_ckpt(4);
    let job = packed_job(8, 18);
    let ctx = BackwardCtx::new(&ckpt.config, &ckpt.params);
    let mut grads = vec![0.0; ckpt.params.len()];
    c.bench_function("forward_backward_8x18_tokens", |b| {
        b.iter(|| {
            grads.fill(0.0);
            forward_backward_with_ctx(&ckpt.config, &ckpt.params, &ctx, black_box(&job), &mut grads)
                .unwrap()
        })
    });
}

criterion_group!(benches, bench_forward, bench_forward_backward);
criterion_main!(benches);
