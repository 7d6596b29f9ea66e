//! Named finite-difference checks over every op family and every composed
//! block, swept across seeds. Backs `ovxd gradcheck`.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::adapters::{adapter_init, adapter_forward, AdapterConfig, AdapterKind, AdapterParams};
use crate::encoders::{
    image_block_forward, text_block_forward, vit_block_forward, EncoderConfig, EncoderStack, Modality, XaaMode,
    XiaMode,
};
use crate::error::{Error, Result};
use crate::gradcheck::check_param_gradients;
use crate::ovod::{bag_embed, class_logits, detection_loss, info_nce, project_region, RegionBag};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::{init_gaussian, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: u64 = 20;
/// Instances with a piecewise-op input closer than this to a kink are
/// redrawn.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: u64 = 64;

type LossFn = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var> + Send + Sync>;

/// One randomized instance of a case: parameters, which of them to check,
/// and the scalar function of them.
pub struct Problem {
    pub store: ParamStore,
    pub ids: Vec<ParamId>,
    pub loss: LossFn,
}

#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    build: fn(u64) -> Result<Problem>,
}

impl GradCase {
    /// Instance for `seed`, redrawn deterministically while it sits too
    /// close to a kink.
    pub fn problem(&self, seed: u64) -> Result<Problem> {
        for attempt in 0..MAX_REDRAWS {
            let p = (self.build)(seed ^ (attempt << 32))?;
            let mut tape = Tape::new();
            (p.loss)(&mut tape, &p.store)?;
            if tape.kink_margin() > KINK_MARGIN {
                return Ok(p);
            }
        }
        Err(Error::contract(format!("{}: no kink-free instance for seed {seed}", self.name)))
    }

    pub fn run(&self, seed: u64, fault: Option<OpKind>) -> Result<f64> {
        let p = self.problem(seed)?;
        check_param_gradients(&p.store, &p.ids, STEP, fault, p.loss)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub worst_seed: u64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub seeds: u64,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.cases.iter().filter(|c| !c.passed()).map(|c| c.name).collect()
    }

    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    /// One line per case, then a summary line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            let _ = writeln!(
                s,
                "{:<4} {:<22} max_rel_err {:.3e}  worst seed {}",
                if c.passed() { "ok" } else { "FAIL" },
                c.name,
                c.max_rel_err,
                c.worst_seed
            );
        }
        let _ = match self.failures().as_slice() {
            [] => writeln!(s, "all {} cases passed over {} seeds (tol {TOLERANCE:e})", self.cases.len(), self.seeds),
            f => writeln!(s, "{} of {} cases failed: {}", f.len(), self.cases.len(), f.join(", ")),
        };
        s
    }
}

/// Runs every case for seeds `0..seeds`. Errors raised while building or
/// evaluating a case count as an infinite error for that seed.
pub fn run_suite(seeds: u64, fault: Option<OpKind>) -> SuiteReport {
    let cases = cases();
    let results = cases
        .par_iter()
        .map(|case| {
            let (worst_seed, max_rel_err) = (0..seeds)
                .into_par_iter()
                .map(|seed| (seed, case.run(seed, fault).unwrap_or(f64::INFINITY)))
                .reduce(|| (0, 0.0), |a, b| if b.1 > a.1 || (b.1 == a.1 && b.0 < a.0) { b } else { a });
            CaseResult { name: case.name, max_rel_err, worst_seed }
        })
        .collect();
    SuiteReport { seeds, cases: results }
}

pub fn cases() -> Vec<GradCase> {
    macro_rules! case {
        ($name:literal, $f:expr) => {
            GradCase { name: $name, build: $f }
        };
    }
    vec![
        case!("matmul", op_matmul),
        case!("linear", op_linear),
        case!("add", |s| binary(s, Tape::add)),
        case!("sub", |s| binary(s, Tape::sub)),
        case!("mul", |s| binary(s, Tape::mul)),
        case!("scale", op_scale),
        case!("mul_scalar", op_mul_scalar),
        case!("affine_scalar", op_affine),
        case!("clamp", op_clamp),
        case!("add_row", op_add_row),
        case!("gelu", op_gelu),
        case!("relu", op_relu),
        case!("layer_norm", op_layer_norm),
        case!("softmax_rows", |s| op_softmax(s, 1)),
        case!("softmax_cols", |s| op_softmax(s, 0)),
        case!("transpose", op_transpose),
        case!("attention", op_attention),
        case!("gather_rows", op_gather),
        case!("concat_rows", op_concat),
        case!("l2_normalize_rows", op_l2),
        case!("sum", |s| reduce(s, Tape::sum)),
        case!("mean", |s| reduce(s, Tape::mean)),
        case!("cross_entropy", op_cross_entropy),
        case!("smooth_l1", op_smooth_l1),
        case!("xsa", |s| adapter_case(s, AdapterKind::Xsa)),
        case!("xaa", |s| adapter_case(s, AdapterKind::Xaa)),
        case!("xia", |s| adapter_case(s, AdapterKind::Xia)),
        case!("vit_block", block_vanilla),
        case!("text_block", |s| block_text(s, XaaMode::Parallel)),
        case!("text_block_sequential", |s| block_text(s, XaaMode::Sequential)),
        case!("image_block", |s| block_image(s, XiaMode::Branch)),
        case!("image_block_post", |s| block_image(s, XiaMode::PostBlock)),
        case!("text_encoder", |s| encoder_case(s, Modality::Text)),
        case!("image_encoder", |s| encoder_case(s, Modality::Image)),
        case!("ov_head", head_case),
        case!("bag_embed", bag_case),
        case!("info_nce", nce_case),
        case!("detection_loss", detection_case),
    ]
}

pub fn find_case(name: &str) -> Option<GradCase> {
    cases().into_iter().find(|c| c.name == name)
}

// ---- helpers ---------------------------------------------------------------

const WIDTH: usize = 8;
const HEADS: usize = 2;
const TOKENS: usize = 3;

fn randn(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    init_gaussian(shape, std, rng).expect("valid shape")
}

/// Uniform in `±[lo, hi]`, random sign; keeps samples away from kinks at 0.
fn away_from_zero(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform_in(lo, hi);
            if rng.uniform() < 0.5 {
                -m
            } else {
                m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// `Σ out ⊙ R` with a fixed random `R`, so every output element matters
/// with a distinct weight.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = randn(&mut Rng::derive(seed, "projection"), &shape, 1.0);
    let r = tape.constant(r);
    let y = tape.mul(out, r)?;
    Ok(tape.sum(y))
}

struct Builder {
    store: ParamStore,
    ids: Vec<ParamId>,
    rng: Rng,
}

impl Builder {
    fn new(seed: u64, label: &str) -> Self {
        Self {
            store: ParamStore::new(),
            ids: Vec::new(),
            rng: Rng::derive(seed, label),
        }
    }

    fn add(&mut self, name: &str, t: Tensor) -> Result<ParamId> {
        let id = self.store.insert(name, t)?;
        self.ids.push(id);
        Ok(id)
    }

    fn randn(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let t = randn(&mut self.rng, shape, 1.0);
        self.add(name, t)
    }

    fn finish(self, loss: impl Fn(&mut Tape, &ParamStore) -> Result<Var> + Send + Sync + 'static) -> Problem {
        Problem {
            store: self.store,
            ids: self.ids,
            loss: Box::new(loss),
        }
    }
}

// ---- single ops ------------------------------------------------------------

fn op_matmul(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "matmul");
    let x = b.randn("a", &[3, 4])?;
    let y = b.randn("b", &[4, 2])?;
    Ok(b.finish(move |t, s| {
        let (x, y) = (t.param(s, x), t.param(s, y));
        let o = t.matmul(x, y)?;
        project(t, o, seed)
    }))
}

fn op_linear(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "linear");
    let x = b.randn("x", &[3, 4])?;
    let w = b.randn("w", &[4, 5])?;
    let bias = b.randn("b", &[5])?;
    Ok(b.finish(move |t, s| {
        let (x, w, bias) = (t.param(s, x), t.param(s, w), t.param(s, bias));
        let o = t.linear(x, w, Some(bias))?;
        project(t, o, seed)
    }))
}

fn binary(seed: u64, op: fn(&mut Tape, Var, Var) -> Result<Var>) -> Result<Problem> {
    let mut b = Builder::new(seed, "binary");
    let x = b.randn("x", &[3, 4])?;
    let y = b.randn("y", &[3, 4])?;
    Ok(b.finish(move |t, s| {
        let (x, y) = (t.param(s, x), t.param(s, y));
        let o = op(t, x, y)?;
        project(t, o, seed)
    }))
}

fn op_scale(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "scale");
    let x = b.randn("x", &[3, 4])?;
    Ok(b.finish(move |t, s| {
        let x = t.param(s, x);
        let o = t.scale(x, -1.7);
        project(t, o, seed)
    }))
}

fn op_mul_scalar(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "mul_scalar");
    let x = b.randn("x", &[3, 4])?;
    let c = b.randn("s", &[1])?;
    Ok(b.finish(move |t, s| {
        let (x, c) = (t.param(s, x), t.param(s, c));
        let o = t.mul_scalar(x, c)?;
        project(t, o, seed)
    }))
}

fn op_affine(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "affine");
    let x = b.randn("x", &[2, 3])?;
    let c = b.randn("s", &[1])?;
    Ok(b.finish(move |t, s| {
        let (x, c) = (t.param(s, x), t.param(s, c));
        let a = t.affine(c, -1.3, 0.4);
        let o = t.mul_scalar(x, a)?;
        project(t, o, seed)
    }))
}

fn op_clamp(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "clamp");
    // Values in [-1, 2] kept at least 0.05 away from the clamp bounds.
    let data: Vec<f64> = (0..12)
        .map(|_| loop {
            let v = b.rng.uniform_in(-1.0, 2.0);
            if v.abs() > 0.05 && (v - 1.0).abs() > 0.05 {
                break v;
            }
        })
        .collect();
    let x = b.add("x", Tensor::new(&[3, 4], data)?)?;
    Ok(b.finish(move |t, s| {
        let x = t.param(s, x);
        let o = t.clamp(x, 0.0, 1.0);
        project(t, o, seed)
    }))
}

fn op_add_row(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "add_row");
    let x = b.randn("x", &[3, 4])?;
    let r = b.randn("b", &[4])?;
    Ok(b.finish(move |t, s| {
        let (x, r) = (t.param(s, x), t.param(s, r));
        let o = t.add_row(x, r)?;
        project(t, o, seed)
    }))
}

fn op_gelu(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "gelu");
    let x = b.randn("x", &[4, 4])?;
    Ok(b.finish(move |t, s| {
        let x = t.param(s, x);
        let o = t.gelu(x);
        project(t, o, seed)
    }))
}

fn op_relu(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "relu");
    let v = away_from_zero(&mut b.rng, &[4, 4], 0.05, 2.0);
    let x = b.add("x", v)?;
    Ok(b.finish(move |t, s| {
        let x = t.param(s, x);
        let o = t.relu(x);
        project(t, o, seed)
    }))
}

fn op_layer_norm(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "layer_norm");
    let x = b.randn("x", &[3, 6])?;
    let g = b.randn("gamma", &[6])?;
    let be = b.randn("beta", &[6])?;
    Ok(b.finish(move |t, s| {
        let (x, g, be) = (t.param(s, x), t.param(s, g), t.param(s, be));
        let o = t.layer_norm(x, g, be, 1e-5)?;
        project(t, o, seed)
    }))
}

fn op_softmax(seed: u64, axis: usize) -> Result<Problem> {
    let mut b = Builder::new(seed, "softmax");
    let x = b.randn("x", &[3, 5])?;
    Ok(b.finish(move |t, s| {
        let x = t.param(s, x);
        let o = t.softmax(x, axis)?;
        project(t, o, seed)
    }))
}

fn op_transpose(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "transpose");
    let x = b.randn("x", &[3, 5])?;
    Ok(b.finish(move |t, s| {
        let x = t.param(s, x);
        let o = t.transpose(x)?;
        project(t, o, seed)
    }))
}

fn op_attention(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "attention");
    let shape = [2 * TOKENS, WIDTH];
    let q = b.randn("q", &shape)?;
    let k = b.randn("k", &shape)?;
    let v = b.randn("v", &shape)?;
    Ok(b.finish(move |t, s| {
        let (q, k, v) = (t.param(s, q), t.param(s, k), t.param(s, v));
        let o = t.attention(q, k, v, TOKENS, HEADS)?;
        project(t, o, seed)
    }))
}

fn op_gather(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "gather_rows");
    let x = b.randn("x", &[4, 3])?;
    Ok(b.finish(move |t, s| {
        let x = t.param(s, x);
        let o = t.gather_rows(x, &[2, 0, 2, 3])?;
        project(t, o, seed)
    }))
}

fn op_concat(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "concat_rows");
    let x = b.randn("x", &[2, 3])?;
    let y = b.randn("y", &[1, 3])?;
    Ok(b.finish(move |t, s| {
        let (x, y) = (t.param(s, x), t.param(s, y));
        let o = t.concat_rows(&[x, y, x])?;
        project(t, o, seed)
    }))
}

fn op_l2(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "l2_normalize_rows");
    let x = b.randn("x", &[3, 4])?;
    Ok(b.finish(move |t, s| {
        let x = t.param(s, x);
        let o = t.l2_normalize_rows(x)?;
        project(t, o, seed)
    }))
}

fn reduce(seed: u64, op: fn(&mut Tape, Var) -> Var) -> Result<Problem> {
    let mut b = Builder::new(seed, "reduce");
    let x = b.randn("x", &[3, 4])?;
    let w = randn(&mut b.rng, &[3, 4], 1.0);
    Ok(b.finish(move |t, s| {
        let x = t.param(s, x);
        // Square first so the gradient depends on x.
        let w = t.constant(w.clone());
        let y = t.mul(x, x)?;
        let y = t.mul(y, w)?;
        Ok(op(t, y))
    }))
}

fn op_cross_entropy(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "cross_entropy");
    let x = b.randn("logits", &[4, 5])?;
    let labels: Vec<usize> = (0..4).map(|_| b.rng.below(5)).collect();
    Ok(b.finish(move |t, s| {
        let x = t.param(s, x);
        t.cross_entropy(x, &labels)
    }))
}

fn op_smooth_l1(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "smooth_l1");
    let target = randn(&mut b.rng, &[4, 4], 1.0);
    // Differences on both sides of the quadratic/linear switch, never at it.
    let diff = away_from_zero(&mut b.rng, &[4, 4], 0.05, 2.5);
    let pred: Vec<f64> = target
        .data()
        .iter()
        .zip(diff.data())
        .map(|(tv, d)| if (d.abs() - 1.0).abs() < 0.05 { tv + d * 1.2 } else { tv + d })
        .collect();
    let p = b.add("pred", Tensor::new(&[4, 4], pred)?)?;
    let tg = b.add("target", target)?;
    let mask = vec![true, false, true, true];
    Ok(b.finish(move |t, s| {
        let (p, tg) = (t.param(s, p), t.param(s, tg));
        t.smooth_l1(p, tg, &mask)
    }))
}

// ---- composed blocks -------------------------------------------------------

/// Replaces every parameter with random values of a scale that makes all
/// paths contribute: weights N(0, 0.3²), layer-norm gains near 1, blend
/// weights inside (0.2, 0.8).
fn randomize(store: &mut ParamStore, seed: u64) {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let mut rng = Rng::derive(seed, &format!("randomize/{name}"));
        let shape = store.get(id).shape().to_vec();
        let t = if name.ends_with("alpha_raw") {
            Tensor::new(&shape, vec![rng.uniform_in(0.2, 0.8)]).expect("scalar")
        } else if name.ends_with("gamma") {
            let mut t = randn(&mut rng, &shape, 0.2);
            t.data_mut().iter_mut().for_each(|v| *v += 1.0);
            t
        } else {
            randn(&mut rng, &shape, 0.3)
        };
        store.get_mut(id).data_mut().copy_from_slice(t.data());
    }
}

fn adapter_case(seed: u64, kind: AdapterKind) -> Result<Problem> {
    let mut store = ParamStore::new();
    let p: AdapterParams = adapter_init(&mut store, kind.name(), WIDTH, &AdapterConfig::default(), kind, seed)?;
    randomize(&mut store, seed);
    let mut ids = p.ids();
    let x = store.insert("input", randn(&mut Rng::derive(seed, "input"), &[TOKENS, WIDTH], 1.0))?;
    ids.push(x);
    Ok(Problem {
        store,
        ids,
        loss: Box::new(move |t, s| {
            let x = t.param(s, x);
            let o = adapter_forward(t, s, x, &p)?;
            project(t, o, seed)
        }),
    })
}

fn tiny_encoder(layers: usize, xaa_mode: XaaMode, xia_mode: XiaMode) -> EncoderConfig {
    EncoderConfig {
        layers,
        width: WIDTH,
        heads: HEADS,
        mlp_ratio: 2,
        init_std: 0.02,
        xaa_mode,
        xia_mode,
    }
}

/// Random stack plus a random `[2·TOKENS, WIDTH]` input (two sequences);
/// every parameter is checked.
fn stack_problem(
    seed: u64,
    modality: Modality,
    layers: usize,
    adapters: &AdapterConfig,
    xaa_mode: XaaMode,
    xia_mode: XiaMode,
) -> Result<(ParamStore, EncoderStack, ParamId)> {
    let mut store = ParamStore::new();
    let stack = EncoderStack::new(
        &mut store,
        "enc",
        modality,
        &tiny_encoder(layers, xaa_mode, xia_mode),
        adapters,
        0,
        seed,
    )?;
    randomize(&mut store, seed);
    let x = store.insert("input", randn(&mut Rng::derive(seed, "input"), &[2 * TOKENS, WIDTH], 1.0))?;
    Ok((store, stack, x))
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.ids().collect()
}

fn block_vanilla(seed: u64) -> Result<Problem> {
    let (store, stack, x) = stack_problem(seed, Modality::Text, 1, &AdapterConfig::none(), XaaMode::Parallel, XiaMode::Branch)?;
    let ids = all_ids(&store);
    Ok(Problem {
        store,
        ids,
        loss: Box::new(move |t, s| {
            let x = t.param(s, x);
            let o = vit_block_forward(t, s, x, &stack.blocks[0], TOKENS)?;
            project(t, o, seed)
        }),
    })
}

fn block_text(seed: u64, mode: XaaMode) -> Result<Problem> {
    let (store, stack, x) = stack_problem(seed, Modality::Text, 1, &AdapterConfig::default(), mode, XiaMode::Branch)?;
    let ids = all_ids(&store);
    Ok(Problem {
        store,
        ids,
        loss: Box::new(move |t, s| {
            let x = t.param(s, x);
            let o = text_block_forward(t, s, x, &stack.blocks[0], TOKENS, mode)?;
            project(t, o, seed)
        }),
    })
}

fn block_image(seed: u64, mode: XiaMode) -> Result<Problem> {
    let (store, stack, x) = stack_problem(seed, Modality::Image, 1, &AdapterConfig::default(), XaaMode::Parallel, mode)?;
    let ids = all_ids(&store);
    Ok(Problem {
        store,
        ids,
        loss: Box::new(move |t, s| {
            let x = t.param(s, x);
            let o = image_block_forward(t, s, x, &stack.blocks[0], TOKENS, mode)?;
            project(t, o, seed)
        }),
    })
}

fn encoder_case(seed: u64, modality: Modality) -> Result<Problem> {
    let (store, stack, x) = stack_problem(seed, modality, 2, &AdapterConfig::default(), XaaMode::Parallel, XiaMode::Branch)?;
    let ids = all_ids(&store);
    Ok(Problem {
        store,
        ids,
        loss: Box::new(move |t, s| {
            let x = t.param(s, x);
            let o = stack.encode(t, s, x, TOKENS)?;
            project(t, o, seed)
        }),
    })
}

/// Projection, text-encoder pass and cosine-softmax classifier, scored
/// with a log-probability so the check sees the whole distribution.
fn head_case(seed: u64) -> Result<Problem> {
    let (mut store, stack, _) = stack_problem(seed, Modality::Text, 1, &AdapterConfig::default(), XaaMode::Parallel, XiaMode::Branch)?;
    let mut rng = Rng::derive(seed, "head");
    let feats = store.insert("features", randn(&mut rng, &[3, WIDTH], 1.0))?;
    let w = store.insert("w_proj", randn(&mut rng, &[WIDTH, WIDTH], 0.5))?;
    let classes = store.insert("classes", randn(&mut rng, &[4, WIDTH], 1.0))?;
    let ids = all_ids(&store);
    Ok(Problem {
        store,
        ids,
        loss: Box::new(move |t, s| {
            let (x, w, f) = (t.param(s, feats), t.param(s, w), t.param(s, classes));
            let e = project_region(t, x, w)?;
            let e = stack.encode(t, s, e, 1)?;
            let p = class_logits(t, e, f, 100.0)?;
            project(t, p, seed)
        }),
    })
}

fn bag_case(seed: u64) -> Result<Problem> {
    let (mut store, stack, _) = stack_problem(seed, Modality::Text, 1, &AdapterConfig::default(), XaaMode::Parallel, XiaMode::Branch)?;
    let mut rng = Rng::derive(seed, "bag");
    let w = store.insert("w_proj", randn(&mut rng, &[WIDTH, WIDTH], 0.5))?;
    let boxes = (0..3)
        .map(|_| {
            [
                rng.uniform_in(0.2, 0.8),
                rng.uniform_in(0.2, 0.8),
                rng.uniform_in(0.05, 0.3),
                rng.uniform_in(0.05, 0.3),
            ]
        })
        .collect();
    let bag = RegionBag::new(randn(&mut rng, &[3, WIDTH], 1.0), boxes, vec![0, 1, 2])?;
    let ids = all_ids(&store);
    Ok(Problem {
        store,
        ids,
        loss: Box::new(move |t, s| {
            let o = bag_embed(t, s, &bag, w, &stack, 0.5)?;
            project(t, o, seed)
        }),
    })
}

fn nce_case(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "info_nce");
    let st = b.randn("students", &[4, WIDTH])?;
    let te = b.randn("teachers", &[4, WIDTH])?;
    Ok(b.finish(move |t, s| {
        let (st, te) = (t.param(s, st), t.param(s, te));
        info_nce(t, st, te, 100.0)
    }))
}

fn detection_case(seed: u64) -> Result<Problem> {
    let mut b = Builder::new(seed, "detection_loss");
    let logits = b.randn("logits", &[5, 4])?;
    let target = randn(&mut b.rng, &[5, 4], 0.5);
    let diff = away_from_zero(&mut b.rng, &[5, 4], 0.05, 0.9);
    let pred: Vec<f64> = target.data().iter().zip(diff.data()).map(|(a, d)| a + d).collect();
    let p = b.add("pred", Tensor::new(&[5, 4], pred)?)?;
    let tg = b.add("target", target)?;
    let labels = vec![0, 3, 1, 3, 2];
    Ok(b.finish(move |t, s| {
        let (l, p, tg) = (t.param(s, logits), t.param(s, p), t.param(s, tg));
        detection_loss(t, l, &labels, p, tg)
    }))
}
