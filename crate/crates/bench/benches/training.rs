use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use ovxd_bench::default_setup;
use ovxd_core::gradsuite::find_case;
use ovxd_core::harness::Trainer;
use ovxd_core::toybench::{evaluate, EvalSplit};
use ovxd_core::OvxdModel;

fn train_step(c: &mut Criterion) {
    let (cfg, bench) = default_setup();
    let mut trainer = Trainer::new(&cfg, &bench).unwrap();
    c.bench_function("train_step_default", |b| b.iter(|| black_box(trainer.step().unwrap().total)));
}

fn eval(c: &mut Criterion) {
    let (cfg, bench) = default_setup();
    let model = OvxdModel::new(&cfg).unwrap();
    c.bench_function("evaluate_default", |b| b.iter(|| black_box(evaluate(&model, &bench, EvalSplit::All).unwrap().acc_all)));
}

fn gradcheck(c: &mut Criterion) {
    let case = find_case("text_block").unwrap();
    c.bench_function("gradcheck_text_block_one_seed", |b| b.iter(|| black_box(case.run(0, None).unwrap())));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = train_step, eval, gradcheck
}
criterion_main!(benches);
