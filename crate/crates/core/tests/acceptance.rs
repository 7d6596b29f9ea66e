//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Built with `harness = false` so the report
//! is always visible.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use rayon::prelude::*;

use ovxd_core::encoders::encoder_forward;
use ovxd_core::gradsuite::{self, DEFAULT_SEEDS, TOLERANCE};
use ovxd_core::harness::{run_ablation, run_eval, run_training, Trainer};
use ovxd_core::ovod::{class_logits, info_nce};
use ovxd_core::toybench::gen_benchmark;
use ovxd_core::{
    init_gaussian, AdapterConfig, Checkpoint, EncoderConfig, EncoderStack, Modality, ParamStore,
    Rng, RunConfig, Tape, Tensor, ToyBenchmark,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("gradient suite", gradient_suite),
        ("identity at init", identity_at_init),
        ("freeze policy", freeze_policy),
        ("classifier contract", classifier_contract),
        ("InfoNCE oracle", info_nce_oracle),
        ("alpha containment", alpha_containment),
        ("toy open-vocabulary gain", open_vocabulary_gain),
        ("ablation shapes", ablation_shapes),
        ("round trip", round_trip),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = run();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {}: {} {name} ({:.1}s): {}",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let r = gradsuite::run_suite(DEFAULT_SEEDS, None);
    let secs = t.elapsed().as_secs_f64();
    let pass = r.passed() && DEFAULT_SEEDS >= 20 && secs < 300.0;
    let mut detail = format!(
        "{} cases x {} seeds, worst rel err {:.2e} (tol {TOLERANCE:e})",
        r.cases.len(),
        r.seeds,
        r.worst()
    );
    if !r.passed() {
        detail.push_str(&format!(", failing: {}", r.failures().join(", ")));
    }
    outcome(pass, detail)
}

fn identity_at_init() -> Outcome {
    let cfg = EncoderConfig::default();
    let mut mismatches = Vec::new();
    for seed in 0..10u64 {
        for modality in [Modality::Text, Modality::Image] {
            let mut a = ParamStore::new();
            let mut v = ParamStore::new();
            let with = EncoderStack::new(&mut a, "enc", modality, &cfg, &AdapterConfig::default(), 1, seed).unwrap();
            let without = EncoderStack::new(&mut v, "enc", modality, &cfg, &AdapterConfig::none(), 1, seed).unwrap();
            let tokens = init_gaussian(&[8, cfg.width], 1.0, &mut Rng::derive(seed, "tokens")).unwrap();
            let run = |stack: &EncoderStack, store: &ParamStore| {
                let mut tape = Tape::new();
                let x = tape.input(tokens.clone());
                let y = encoder_forward(&mut tape, store, stack, x).unwrap();
                tape.value(y).clone()
            };
            if !run(&with, &a).bitwise_eq(&run(&without, &v)) {
                mismatches.push(format!("{modality:?}/{seed}"));
            }
        }
    }
    outcome(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "10 seeds x {text, image}: outputs bitwise equal".to_string()
        } else {
            format!("mismatch at {}", mismatches.join(" "))
        },
    )
}

fn freeze_policy() -> Outcome {
    let cfg = RunConfig::default();
    let bench = gen_benchmark(&cfg.bench, cfg.seed).unwrap();
    let mut t = Trainer::new(&cfg, &bench).unwrap();
    let before = t.model.store.clone();
    for _ in 0..100 {
        t.step().unwrap();
    }
    let last = cfg.model.encoder.layers - 1;
    let allowed = |name: &str| {
        name.starts_with(&format!("text.block{last}."))
            || name.starts_with(&format!("image.block{last}."))
            || [".xsa.", ".xaa.", ".xia."].iter().any(|k| name.contains(k))
            || name.starts_with("head.")
    };
    let (mut frozen, mut changed_frozen, mut moved) = (0, Vec::new(), 0);
    for ((_, name, old), (_, _, new)) in before.iter().zip(t.model.store.iter()) {
        if allowed(name) {
            moved += usize::from(!old.bitwise_eq(new));
        } else {
            frozen += 1;
            if !old.bitwise_eq(new) {
                changed_frozen.push(name.to_string());
            }
        }
    }
    outcome(
        changed_frozen.is_empty() && moved > 0,
        if changed_frozen.is_empty() {
            format!("{frozen} tensors outside the trainable set bitwise unchanged after 100 steps; {moved} trainable tensors moved")
        } else {
            format!("changed: {}", changed_frozen.join(", "))
        },
    )
}

fn classifier_contract() -> Outcome {
    let mut rng = Rng::new(7);
    let (mut worst_sum, mut flips) = (0.0f64, 0);
    for _ in 0..100 {
        let d = 2 + rng.below(31);
        let n = 2 + rng.below(15);
        let e = init_gaussian(&[1, d], 1.0, &mut rng).unwrap();
        let f = init_gaussian(&[n, d], 1.0, &mut rng).unwrap();
        let c = libm::exp(rng.uniform_in(-6.0, 6.0));
        let scaled = Tensor::new(&[1, d], e.data().iter().map(|v| v * c).collect()).unwrap();
        let probs = |e: &Tensor| {
            let mut tape = Tape::new();
            let ev = tape.input(e.clone());
            let fv = tape.input(f.clone());
            let p = class_logits(&mut tape, ev, fv, 100.0).unwrap();
            tape.value(p).data().to_vec()
        };
        let (p, q) = (probs(&e), probs(&scaled));
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        if argmax(&p) != argmax(&q) {
            flips += 1;
        }
    }
    outcome(
        worst_sum <= 1e-9 && flips == 0,
        format!("100 trials: max |sum p - 1| = {worst_sum:.1e}, argmax changes under scaling: {flips}"),
    )
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn nce(s: &Tensor, t: &Tensor, tau: f64) -> f64 {
    let mut tape = Tape::new();
    let sv = tape.input(s.clone());
    let tv = tape.input(t.clone());
    let l = info_nce(&mut tape, sv, tv, tau).unwrap();
    tape.value(l).item()
}

fn info_nce_oracle() -> Outcome {
    let mut rng = Rng::new(11);
    let mut worst_dev = 0.0f64;
    for b in [2usize, 4, 8] {
        let row = init_gaussian(&[1, 16], 1.0, &mut rng).unwrap();
        let other = init_gaussian(&[1, 16], 1.0, &mut rng).unwrap();
        let rep = |r: &Tensor| Tensor::new(&[b, 16], r.data().repeat(b)).unwrap();
        let loss = nce(&rep(&row), &rep(&other), 100.0);
        worst_dev = worst_dev.max((loss - (b as f64).ln()).abs());
    }
    let mut min_loss = f64::INFINITY;
    for _ in 0..200 {
        let b = 2 + rng.below(7);
        let s = init_gaussian(&[b, 8], 1.0, &mut rng).unwrap();
        let t = if rng.uniform() < 0.5 { s.clone() } else { init_gaussian(&[b, 8], 1.0, &mut rng).unwrap() };
        min_loss = min_loss.min(nce(&s, &t, rng.uniform_in(0.1, 100.0)));
    }
    outcome(
        worst_dev <= 1e-6 && min_loss >= 0.0,
        format!("max |L - ln B| over B in {{2,4,8}} = {worst_dev:.1e}; min loss over 200 random draws = {min_loss:.3e}"),
    )
}

fn alpha_containment() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.train.iterations = 500;
    let bench = gen_benchmark(&cfg.bench, cfg.seed).unwrap();
    let mut t = Trainer::new(&cfg, &bench).unwrap();
    let raw = |t: &Trainer| -> Vec<f64> {
        t.model
            .store
            .iter()
            .filter(|(_, n, _)| n.ends_with("alpha_raw"))
            .map(|(_, _, v)| v.item())
            .collect()
    };
    let start = raw(&t);
    let starts_at_zero = !start.is_empty() && start.iter().all(|&a| a == 0.0);
    let (mut violations, mut max_alpha) = (0, 0.0f64);
    for _ in 0..500 {
        t.step().unwrap();
        for a in raw(&t).into_iter().chain(t.model.alphas()) {
            if !(0.0..=1.0).contains(&a) {
                violations += 1;
            }
            max_alpha = max_alpha.max(a);
        }
    }
    outcome(
        starts_at_zero && violations == 0,
        format!(
            "{} alphas start at exactly 0: {starts_at_zero}; out-of-range values over 500 steps: {violations}; max alpha {max_alpha:.3}",
            start.len()
        ),
    )
}

struct Paired {
    adapted: f64,
    zero_shot: f64,
    trained_head: f64,
}

fn open_vocabulary_gain() -> Outcome {
    let base = RunConfig::default();
    let runs: Vec<Paired> = (0..5u64)
        .into_par_iter()
        .map(|seed| {
            let mut cfg = base.clone();
            cfg.seed = seed;
            let bench = gen_benchmark(&cfg.bench, seed).unwrap();
            let train = |c: &RunConfig| {
                let mut t = Trainer::new(c, &bench).unwrap();
                while t.iteration < c.train.iterations {
                    t.step().unwrap();
                }
                t.metrics().unwrap().acc_novel
            };
            let mut frozen = cfg.clone();
            frozen.adapter.enabled = Vec::new();
            frozen.train.unfrozen_tail = 0;
            let zero_shot = Trainer::new(&frozen, &bench).unwrap().metrics().unwrap().acc_novel;
            Paired {
                adapted: train(&cfg),
                zero_shot,
                trained_head: train(&frozen),
            }
        })
        .collect();
    let gains: Vec<f64> = runs.iter().map(|r| r.adapted - r.zero_shot).collect();
    let wins = gains.iter().filter(|g| **g > 0.0).count();
    let med = median(&gains);
    let head_gains: Vec<f64> = runs.iter().map(|r| r.adapted - r.trained_head).collect();
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("{:.3}/{:.3}", r.adapted, r.zero_shot))
        .collect();
    outcome(
        wins >= 4 && med >= 0.10,
        format!(
            "acc_novel adapted/frozen per seed [{}]; wins {wins}/5, median gain {:+.1} pts \
             (for reference, vs a frozen-encoder model with a trained head: median {:+.1} pts, wins {}/5)",
            per_seed.join(" "),
            100.0 * med,
            100.0 * median(&head_gains),
            head_gains.iter().filter(|g| **g > 0.0).count()
        ),
    )
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s[s.len() / 2]
}

fn ablation_shapes() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.train.iterations = 100;
    let grids = [
        ("adapters", vec!["none", "xaa", "xsa", "xia", "xaa+xsa", "xaa+xia", "xsa+xia", "xaa+xsa+xia"]),
        ("adapter.ratio_xia", vec!["1", "2", "4", "8"]),
        ("adapter.ratio_text", vec!["1", "2", "4", "8"]),
        ("adapter.scale_s", vec!["0.25", "0.5", "0.75", "1.0"]),
    ];
    let mut problems = Vec::new();
    let mut shapes = Vec::new();
    for (knob, want) in &grids {
        let a = run_ablation(&cfg, knob).unwrap();
        let b = run_ablation(&cfg, knob).unwrap();
        let labels: Vec<&str> = a.rows.iter().map(|r| r.label.as_str()).collect();
        if labels != *want {
            problems.push(format!("{knob} rows {labels:?}"));
        }
        if a.to_csv() != b.to_csv() {
            problems.push(format!("{knob} not deterministic"));
        }
        shapes.push(format!("{knob}:{}", a.rows.len()));
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("rows {} (100 iterations per cell), repeat runs identical", shapes.join(" "))
        } else {
            problems.join("; ")
        },
    )
}

fn round_trip() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.train.iterations = 60;
    cfg.train.eval_interval = 20;
    let mut problems = Vec::new();

    cfg.output.dir = "a".into();
    let rep_a = run_training(&cfg, dir.path()).unwrap();
    cfg.output.dir = "b".into();
    let rep_b = run_training(&cfg, dir.path()).unwrap();
    let csv = |d: &std::path::Path| fs::read(d.join(&cfg.output.metrics)).unwrap();
    if csv(&rep_a.dir) != csv(&rep_b.dir) {
        problems.push("metrics.csv differs across identical runs".to_string());
    }

    let bench = gen_benchmark(&cfg.bench, cfg.seed).unwrap();
    let stored = ToyBenchmark::load(&rep_a.dir.join(&cfg.output.benchmark)).unwrap();
    if stored != bench {
        problems.push("benchmark changed on save/load".into());
    }
    let mut t = Trainer::new(&cfg, &bench).unwrap();
    while t.iteration < cfg.train.iterations {
        t.step().unwrap();
    }
    let ck_path = dir.path().join("mem.ckpt");
    t.checkpoint().save(&ck_path).unwrap();
    let loaded = Checkpoint::load(&ck_path).unwrap();
    let disk = Checkpoint::load(&rep_a.dir.join(&cfg.output.checkpoint)).unwrap();
    let feats = &bench.eval[0].features;
    let classes = bench.vocab.embeddings();
    let fwd = |m: &ovxd_core::OvxdModel| m.class_probs(feats, classes).unwrap();
    let reference = fwd(&t.model);
    if !fwd(&loaded.model).bitwise_eq(&reference) || !fwd(&disk.model).bitwise_eq(&reference) {
        problems.push("forward outputs differ after checkpoint load".into());
    }
    for (id, name, v) in t.model.store.iter() {
        let (a, b) = (t.optimizer.velocity(id.index()), loaded.optimizer.velocity(id.index()));
        let same = match (a, b) {
            (Some(a), Some(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()) && a.len() == b.len(),
            (a, b) => a.is_none() && b.is_none(),
        };
        if !same || !v.bitwise_eq(loaded.model.store.get(id)) {
            problems.push(format!("state of {name} differs after load"));
        }
    }
    if loaded.iteration != t.iteration {
        problems.push("iteration count lost".into());
    }

    let eval_csv = dir.path().join("eval.csv");
    let ck = rep_a.dir.join(&cfg.output.checkpoint);
    let bp = rep_a.dir.join(&cfg.output.benchmark);
    let (_, r1) = run_eval(&ck, &bp, Some(&eval_csv)).unwrap();
    let (_, r2) = run_eval(&ck, &bp, Some(&eval_csv)).unwrap();
    let lines: Vec<String> = fs::read_to_string(&eval_csv).unwrap().lines().map(String::from).collect();
    if r1 != r2 || lines.len() != 3 || lines[1] != lines[2] {
        problems.push("repeated eval rows differ".into());
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            "checkpoint weights, optimizer state and forward outputs bitwise equal; benchmark archive exact; metrics.csv identical across runs; eval rows identical".to_string()
        } else {
            problems.join("; ")
        },
    )
}
