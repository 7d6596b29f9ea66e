use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ovxd_bench::random;
use ovxd_core::encoders::encoder_forward;
use ovxd_core::{AdapterConfig, EncoderConfig, EncoderStack, Modality, ParamStore, Tape};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul_fwd_bwd");
    for n in [16usize, 32, 64] {
        let (a, b) = (random(&[n, n], 1), random(&[n, n], 2));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let x = t.input(a.clone());
                let y = t.input(b.clone());
                let z = t.matmul(x, y).unwrap();
                let s = t.sum(z);
                t.backward(s).unwrap();
                black_box(t.grad(x).map(|g| g[0]))
            })
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let (q, k, v) = (random(&[64, 32], 3), random(&[64, 32], 4), random(&[64, 32], 5));
    c.bench_function("attention_8x8_tokens_fwd_bwd", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let (q, k, v) = (t.input(q.clone()), t.input(k.clone()), t.input(v.clone()));
            let o = t.attention(q, k, v, 8, 4).unwrap();
            let s = t.sum(o);
            t.backward(s).unwrap();
            black_box(t.grad(q).map(|g| g[0]))
        })
    });
}

fn encoders(c: &mut Criterion) {
    let cfg = EncoderConfig::default();
    let tokens = random(&[8, cfg.width], 6);
    let mut g = c.benchmark_group("encoder_forward");
    for (label, adapters) in [("vanilla", AdapterConfig::none()), ("adapters", AdapterConfig::default())] {
        for modality in [Modality::Text, Modality::Image] {
            let mut store = ParamStore::new();
            let stack = EncoderStack::new(&mut store, "enc", modality, &cfg, &adapters, 1, 0).unwrap();
            g.bench_function(format!("{modality:?}/{label}"), |b| {
                b.iter(|| {
                    let mut t = Tape::new();
                    let x = t.input(tokens.clone());
                    let y = encoder_forward(&mut t, &store, &stack, x).unwrap();
                    black_box(t.value(y).data()[0])
                })
            });
        }
    }
    g.finish();
}

criterion_group!(benches, matmul, attention, encoders);
criterion_main!(benches);
