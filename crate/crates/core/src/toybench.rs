//! Synthetic open-vocabulary benchmark: class prototypes on the unit sphere,
//! scenes of region features observed through a fixed domain shift, base
//! classes for training and novel classes held out for evaluation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::Archive;
use crate::ovod::{validate_box, BoxCoords, ClassVocabulary, RegionBag, Split};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub n_base: usize,
    pub n_novel: usize,
    pub d_region: usize,
    pub regions_per_scene: usize,
    /// Regions per scene that belong to no vocabulary class.
    pub background_per_scene: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub noise_std: f64,
    /// Blend between identity (0) and a fully random orthogonal map (large).
    pub shift_rotation: f64,
    pub shift_bias: f64,
    /// Same knobs for the map applied to the teacher-side crop tokens.
    pub teacher_rotation: f64,
    pub teacher_bias: f64,
    /// Per-dimension gains of the teacher-side map are `exp(u)`,
    /// `u ~ U(−teacher_gain, teacher_gain)`.
    pub teacher_gain: f64,
    /// Number of clutter appearances background regions are drawn from;
    /// 0 draws a fresh random direction per background region.
    pub background_modes: usize,
    /// Std of the proposal-to-ground-truth box offsets.
    pub box_jitter: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_base: 11,
            n_novel: 4,
            d_region: 32,
            regions_per_scene: 8,
            background_per_scene: 2,
            train_scenes: 256,
            eval_scenes: 128,
            noise_std: 0.1,
            shift_rotation: 8.0,
            shift_bias: 0.5,
            teacher_rotation: 0.0,
            teacher_bias: 0.0,
            teacher_gain: 0.0,
            background_modes: 0,
            box_jitter: 0.02,
        }
    }
}

impl BenchConfig {
    pub fn n_classes(&self) -> usize {
        self.n_base + self.n_novel
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.n_base == 0 || self.n_novel == 0 {
            return bad("need at least one base and one novel class".into());
        }
        if self.d_region < 2 {
            return bad(format!("d_region {} too small", self.d_region));
        }
        if self.regions_per_scene == 0 || self.background_per_scene >= self.regions_per_scene {
            return bad(format!(
                "{} background regions in scenes of {}",
                self.background_per_scene, self.regions_per_scene
            ));
        }
        if self.train_scenes == 0 || self.eval_scenes == 0 {
            return bad("scene counts must be positive".into());
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("shift_rotation", self.shift_rotation),
            ("shift_bias", self.shift_bias),
            ("teacher_rotation", self.teacher_rotation),
            ("teacher_bias", self.teacher_bias),
            ("teacher_gain", self.teacher_gain),
            ("box_jitter", self.box_jitter),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// Affine map `z ↦ (z ⊙ g)·Q + b` with orthogonal `Q` and positive gains.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainShift {
    pub gain: Vec<f64>,
    pub rotation: Tensor,
    pub bias: Vec<f64>,
}

impl DomainShift {
    pub fn identity(d: usize) -> Result<Self> {
        Ok(Self {
            gain: vec![1.0; d],
            rotation: Tensor::eye(d)?,
            bias: vec![0.0; d],
        })
    }

    pub fn with_gain_spread(mut self, spread: f64, rng: &mut Rng) -> Self {
        if spread > 0.0 {
            for g in &mut self.gain {
                *g = rng.uniform_in(-spread, spread).exp();
            }
        }
        self
    }

    /// `Q` is the Gram–Schmidt orthonormalization of `I + strength·G`, `G`
    /// Gaussian with entry std `1/√d`; `b` has norm `bias_norm` in a random
    /// direction.
    pub fn random(d: usize, strength: f64, bias_norm: f64, rng: &mut Rng) -> Result<Self> {
        let s = strength / (d as f64).sqrt();
        let mut m: Vec<Vec<f64>> = (0..d)
            .map(|i| (0..d).map(|j| f64::from(u8::from(i == j)) + s * rng.normal()).collect())
            .collect();
        gram_schmidt(&mut m)?;
        let dir = unit_vector(d, rng)?;
        Ok(Self {
            gain: vec![1.0; d],
            rotation: Tensor::from_rows(&m)?,
            bias: dir.iter().map(|v| v * bias_norm).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = self.bias.clone();
        for (i, (zi, g)) in z.iter().zip(&self.gain).enumerate() {
            let zi = zi * g;
            for (o, q) in out.iter_mut().zip(&self.rotation.data()[i * d..(i + 1) * d]) {
                *o += zi * q;
            }
        }
        out
    }

    pub fn invert(&self, x: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = x.iter().zip(&self.bias).map(|(a, b)| a - b).collect();
        (0..self.dim())
            .map(|i| self.rotation.row(i).iter().zip(&centered).map(|(q, c)| q * c).sum::<f64>() / self.gain[i])
            .collect()
    }
}

fn gram_schmidt(rows: &mut [Vec<f64>]) -> Result<()> {
    for i in 0..rows.len() {
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = rows.split_at_mut(i);
            tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-8 {
            return Err(Error::Degenerate("rank-deficient rotation draw".into()));
        }
        rows[i].iter_mut().for_each(|v| *v /= norm);
    }
    Ok(())
}

fn unit_vector(d: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::Degenerate("zero direction".into()));
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

/// One synthetic image. Row `i` of every tensor describes region `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// Shifted region features, `[R, d_region]`.
    pub features: Tensor,
    /// Proposal boxes the model sees.
    pub boxes: Vec<BoxCoords>,
    /// Ground-truth box minus proposal box, `[R, 4]`.
    pub box_targets: Tensor,
    /// Vocabulary index, or `vocab.len()` for background.
    pub labels: Vec<usize>,
    /// Crop tokens for the image-side teacher, `[R, d_region]`.
    pub teacher_tokens: Tensor,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyBenchmark {
    pub cfg: BenchConfig,
    pub seed: u64,
    pub vocab: ClassVocabulary,
    pub shift: DomainShift,
    pub teacher_shift: DomainShift,
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
}

impl ToyBenchmark {
    pub fn background_label(&self) -> usize {
        self.vocab.len()
    }

    /// Nearest-prototype accuracy on un-shifted eval features.
    pub fn oracle_accuracy(&self) -> f64 {
        let mut correct = 0usize;
        let mut total = 0usize;
        for s in &self.eval {
            for (i, &l) in s.labels.iter().enumerate() {
                if l == self.background_label() {
                    continue;
                }
                let z = self.shift.invert(s.features.row(i));
                total += 1;
                correct += usize::from(nearest(&z, self.vocab.embeddings()) == l);
            }
        }
        correct as f64 / total.max(1) as f64
    }
}

fn nearest(z: &[f64], protos: &Tensor) -> usize {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let mut best = (f64::NEG_INFINITY, 0);
    for c in 0..protos.rows() {
        let cos = protos.row(c).iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / norm;
        if cos > best.0 {
            best = (cos, c);
        }
    }
    best.1
}

pub fn class_name(i: usize, split: Split) -> String {
    match split {
        Split::Base => format!("base{i:02}"),
        Split::Novel => format!("novel{i:02}"),
    }
}

#[allow(clippy::too_many_arguments)]
fn gen_scene(
    cfg: &BenchConfig,
    bench_seed: u64,
    label: &str,
    classes: &[usize],
    protos: &Tensor,
    clutter: &[Vec<f64>],
    shift: &DomainShift,
    teacher_shift: &DomainShift,
) -> Result<Scene> {
    let mut rng = Rng::derive(bench_seed, label);
    let d = cfg.d_region;
    let r = cfg.regions_per_scene;
    let background = protos.rows();
    let mut labels: Vec<usize> = (0..r - cfg.background_per_scene)
        .map(|_| classes[rng.below(classes.len())])
        .collect();
    labels.extend(std::iter::repeat_n(background, cfg.background_per_scene));
    rng.shuffle(&mut labels);

    let mut features = Vec::with_capacity(r * d);
    let mut teacher = Vec::with_capacity(r * d);
    let mut boxes = Vec::with_capacity(r);
    let mut targets = Vec::with_capacity(r * 4);
    for &l in &labels {
        let clean = if l == background {
            if clutter.is_empty() {
                unit_vector(d, &mut rng)?
            } else {
                clutter[rng.below(clutter.len())].clone()
            }
        } else {
            protos.row(l).to_vec()
        };
        let z: Vec<f64> = clean.iter().map(|v| v + cfg.noise_std * rng.normal()).collect();
        features.extend(shift.apply(&z));
        teacher.extend(teacher_shift.apply(&z));

        let w = rng.uniform_in(0.05, 0.3);
        let h = rng.uniform_in(0.05, 0.3);
        let gt = [rng.uniform_in(w / 2.0, 1.0 - w / 2.0), rng.uniform_in(h / 2.0, 1.0 - h / 2.0), w, h];
        let mut prop = gt;
        for (k, v) in prop.iter_mut().enumerate() {
            let lo = if k < 2 { 0.0 } else { 0.01 };
            *v = (*v + cfg.box_jitter * rng.normal()).clamp(lo, 1.0);
        }
        validate_box(&prop)?;
        targets.extend(gt.iter().zip(&prop).map(|(g, p)| g - p));
        boxes.push(prop);
    }
    Ok(Scene {
        features: Tensor::new(&[r, d], features)?,
        boxes,
        box_targets: Tensor::new(&[r, 4], targets)?,
        labels,
        teacher_tokens: Tensor::new(&[r, d], teacher)?,
    })
}

/// Pure function of `(cfg, seed)`. Training scenes only contain base
/// classes; eval scenes draw from the whole vocabulary.
pub fn gen_benchmark(cfg: &BenchConfig, seed: u64) -> Result<ToyBenchmark> {
    cfg.validate()?;
    let d = cfg.d_region;
    let n = cfg.n_classes();
    let mut rng = Rng::derive(seed, "prototypes");
    let mut rows = Vec::with_capacity(n);
    let mut names = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    for c in 0..n {
        rows.push(unit_vector(d, &mut rng)?);
        let s = if c < cfg.n_base { Split::Base } else { Split::Novel };
        names.push(class_name(if c < cfg.n_base { c } else { c - cfg.n_base }, s));
        split.push(s);
    }
    let vocab = ClassVocabulary::from_raw(names, &Tensor::from_rows(&rows)?, split)?;
    let protos = vocab.embeddings().clone();
    let shift = DomainShift::random(d, cfg.shift_rotation, cfg.shift_bias, &mut Rng::derive(seed, "shift"))?;
    let mut trng = Rng::derive(seed, "teacher_shift");
    let teacher_shift =
        DomainShift::random(d, cfg.teacher_rotation, cfg.teacher_bias, &mut trng)?.with_gain_spread(cfg.teacher_gain, &mut trng);
    let mut crng = Rng::derive(seed, "clutter");
    let clutter = (0..cfg.background_modes)
        .map(|_| unit_vector(d, &mut crng))
        .collect::<Result<Vec<_>>>()?;

    let base = vocab.indices(Split::Base);
    let all: Vec<usize> = (0..n).collect();
    let train = (0..cfg.train_scenes)
        .map(|i| gen_scene(cfg, seed, &format!("train/{i}"), &base, &protos, &clutter, &shift, &teacher_shift))
        .collect::<Result<Vec<_>>>()?;
    let eval = (0..cfg.eval_scenes)
        .map(|i| gen_scene(cfg, seed, &format!("eval/{i}"), &all, &protos, &clutter, &shift, &teacher_shift))
        .collect::<Result<Vec<_>>>()?;
    let bench = ToyBenchmark {
        cfg: cfg.clone(),
        seed,
        vocab,
        shift,
        teacher_shift,
        train,
        eval,
    };
    let oracle = bench.oracle_accuracy();
    if oracle < 0.99 {
        return Err(Error::config(format!(
            "classes not separable at this noise level (oracle accuracy {oracle:.4})"
        )));
    }
    Ok(bench)
}

/// Groups regions into bags of at most `k` neighbours. Repeatedly takes the
/// remaining region with the smallest `(cx, cy, index)` as a seed and adds
/// the `k − 1` remaining regions whose centers are closest to it.
pub fn group_regions(scene: &Scene, k: usize) -> Result<Vec<RegionBag>> {
    if k == 0 {
        return Err(Error::config("bag size must be at least 1"));
    }
    let key = |i: usize| (scene.boxes[i][0], scene.boxes[i][1], i);
    let mut remaining: Vec<usize> = (0..scene.len()).collect();
    let mut bags = Vec::new();
    while !remaining.is_empty() {
        remaining.sort_by(|&a, &b| key(a).partial_cmp(&key(b)).expect("finite box centers"));
        let seed = remaining[0];
        let [sx, sy, _, _] = scene.boxes[seed];
        let mut rest = remaining[1..].to_vec();
        rest.sort_by(|&a, &b| {
            let da = (scene.boxes[a][0] - sx).powi(2) + (scene.boxes[a][1] - sy).powi(2);
            let db = (scene.boxes[b][0] - sx).powi(2) + (scene.boxes[b][1] - sy).powi(2);
            (da, key(a)).partial_cmp(&(db, key(b))).expect("finite box centers")
        });
        let mut members = vec![seed];
        members.extend(rest.iter().take(k - 1));
        remaining.retain(|i| !members.contains(i));

        let rows: Vec<Vec<f64>> = members.iter().map(|&i| scene.features.row(i).to_vec()).collect();
        bags.push(RegionBag::new(
            Tensor::from_rows(&rows)?,
            members.iter().map(|&i| scene.boxes[i]).collect(),
            members,
        )?);
    }
    Ok(bags)
}

/// Which slice of the vocabulary an evaluation covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Base,
    Novel,
    All,
}

/// Anything that turns region features into class probabilities.
pub trait RegionClassifier {
    /// `features` is `[m, d_region]`, `classes` is `[c, d]` with unit rows.
    /// Returns `[m, c]` probabilities.
    fn classify(&self, features: &Tensor, classes: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub name: String,
    pub split: Split,
    pub correct: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc_base: f64,
    pub acc_novel: f64,
    pub acc_all: f64,
    /// Mean `−ln p(label)` over the scored regions.
    pub mean_loss: f64,
    pub n_base: usize,
    pub n_novel: usize,
    pub per_class: Vec<ClassAccuracy>,
}

/// Scores foreground eval regions. Base regions are classified among base
/// names and novel regions among novel names; `All` runs both and weights
/// them by instance count. A split that is not run reports zero regions.
pub fn evaluate<M: RegionClassifier + ?Sized>(model: &M, bench: &ToyBenchmark, split: EvalSplit) -> Result<Metrics> {
    let vocab = &bench.vocab;
    let mut per_class: Vec<ClassAccuracy> = (0..vocab.len())
        .map(|c| ClassAccuracy {
            name: vocab.names()[c].clone(),
            split: vocab.split_of(c),
            correct: 0,
            total: 0,
        })
        .collect();
    let mut loss = 0.0;
    let mut counts = [(0usize, 0usize); 2];
    let runs: &[Split] = match split {
        EvalSplit::Base => &[Split::Base],
        EvalSplit::Novel => &[Split::Novel],
        EvalSplit::All => &[Split::Base, Split::Novel],
    };
    for &part in runs {
        let classes = vocab.indices(part);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for s in &bench.eval {
            for (i, &l) in s.labels.iter().enumerate() {
                if l < vocab.len() && vocab.split_of(l) == part {
                    rows.push(s.features.row(i).to_vec());
                    labels.push(l);
                }
            }
        }
        if rows.is_empty() {
            continue;
        }
        let probs = model.classify(&Tensor::from_rows(&rows)?, &vocab.subset(&classes)?)?;
        let slot = &mut counts[usize::from(part == Split::Novel)];
        for (r, &l) in labels.iter().enumerate() {
            let p = probs.row(r);
            let pick = argmax(p);
            let target = classes.iter().position(|&c| c == l).expect("label in split");
            let hit = pick == target;
            loss -= p[target].max(f64::MIN_POSITIVE).ln();
            per_class[l].total += 1;
            per_class[l].correct += usize::from(hit);
            slot.0 += usize::from(hit);
            slot.1 += 1;
        }
    }
    let acc = |(c, t): (usize, usize)| if t == 0 { 0.0 } else { c as f64 / t as f64 };
    let total = counts[0].1 + counts[1].1;
    Ok(Metrics {
        acc_base: acc(counts[0]),
        acc_novel: acc(counts[1]),
        acc_all: acc((counts[0].0 + counts[1].0, total)),
        mean_loss: if total == 0 { 0.0 } else { loss / total as f64 },
        n_base: counts[0].1,
        n_novel: counts[1].1,
        per_class,
    })
}

/// First index of the largest entry.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Cosine classifier applied to raw features, optionally after undoing a
/// known shift. Without the inverse this is the frozen-surrogate reference.
pub struct CosineClassifier<'a> {
    pub unshift: Option<&'a DomainShift>,
    pub tau: f64,
}

impl RegionClassifier for CosineClassifier<'_> {
    fn classify(&self, features: &Tensor, classes: &Tensor) -> Result<Tensor> {
        let mut out = Vec::with_capacity(features.rows() * classes.rows());
        for r in 0..features.rows() {
            let z = match self.unshift {
                Some(s) => s.invert(features.row(r)),
                None => features.row(r).to_vec(),
            };
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(Error::Degenerate("zero region feature".into()));
            }
            let logits: Vec<f64> = (0..classes.rows())
                .map(|c| self.tau * classes.row(c).iter().zip(&z).map(|(a, b)| a * b).sum::<f64>() / norm)
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| e / sum));
        }
        Tensor::new(&[features.rows(), classes.rows()], out)
    }
}

const BENCH_KIND: &str = "benchmark";

fn scene_to_archive(a: &mut Archive, prefix: &str, s: &Scene) -> Result<()> {
    a.push(format!("{prefix}/features"), s.features.clone());
    a.push(format!("{prefix}/boxes"), Tensor::new(&[s.len(), 4], s.boxes.concat())?);
    a.push(format!("{prefix}/box_targets"), s.box_targets.clone());
    a.push(format!("{prefix}/labels"), Tensor::new(&[s.len()], s.labels.iter().map(|&l| l as f64).collect())?);
    a.push(format!("{prefix}/teacher_tokens"), s.teacher_tokens.clone());
    Ok(())
}

fn scene_from_archive(a: &Archive, prefix: &str, n_labels: usize) -> Result<Scene> {
    let boxes = a.get(&format!("{prefix}/boxes"))?;
    let labels = a.get(&format!("{prefix}/labels"))?;
    let labels: Vec<usize> = labels
        .data()
        .iter()
        .map(|&v| {
            if v.fract() == 0.0 && v >= 0.0 && (v as usize) < n_labels {
                Ok(v as usize)
            } else {
                Err(Error::Format(format!("{prefix}: bad label {v}")))
            }
        })
        .collect::<Result<_>>()?;
    let boxes: Vec<BoxCoords> = boxes
        .data()
        .chunks_exact(4)
        .map(|c| [c[0], c[1], c[2], c[3]])
        .collect();
    let s = Scene {
        features: a.get(&format!("{prefix}/features"))?.clone(),
        boxes,
        box_targets: a.get(&format!("{prefix}/box_targets"))?.clone(),
        labels,
        teacher_tokens: a.get(&format!("{prefix}/teacher_tokens"))?.clone(),
    };
    let r = s.len();
    if s.boxes.len() != r || s.features.rows() != r || s.box_targets.rows() != r || s.teacher_tokens.rows() != r {
        return Err(Error::Format(format!("{prefix}: inconsistent region counts")));
    }
    Ok(s)
}

impl ToyBenchmark {
    pub fn to_archive(&self) -> Result<Archive> {
        let meta = serde_json::json!({
            "config": self.cfg,
            "seed": self.seed,
            "names": self.vocab.names(),
            "splits": self.vocab.splits(),
        });
        let mut a = Archive::new(BENCH_KIND, meta);
        a.push("vocab", self.vocab.embeddings().clone());
        for (name, s) in [("shift", &self.shift), ("teacher_shift", &self.teacher_shift)] {
            a.push(format!("{name}/gain"), Tensor::new(&[s.dim()], s.gain.clone())?);
            a.push(format!("{name}/rotation"), s.rotation.clone());
            a.push(format!("{name}/bias"), Tensor::new(&[s.dim()], s.bias.clone())?);
        }
        for (i, s) in self.train.iter().enumerate() {
            scene_to_archive(&mut a, &format!("train/{i}"), s)?;
        }
        for (i, s) in self.eval.iter().enumerate() {
            scene_to_archive(&mut a, &format!("eval/{i}"), s)?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind(BENCH_KIND)?;
        let field = |k: &str| a.meta.get(k).cloned().ok_or_else(|| Error::Format(format!("benchmark meta lacks {k}")));
        let cfg: BenchConfig = serde_json::from_value(field("config")?)?;
        let seed: u64 = serde_json::from_value(field("seed")?)?;
        let names: Vec<String> = serde_json::from_value(field("names")?)?;
        let splits: Vec<Split> = serde_json::from_value(field("splits")?)?;
        let vocab = ClassVocabulary::new(names, a.get("vocab")?.clone(), splits)?;
        let shift_of = |name: &str| -> Result<DomainShift> {
            Ok(DomainShift {
                gain: a.get(&format!("{name}/gain"))?.data().to_vec(),
                rotation: a.get(&format!("{name}/rotation"))?.clone(),
                bias: a.get(&format!("{name}/bias"))?.data().to_vec(),
            })
        };
        let n_labels = vocab.len() + 1;
        let train = (0..cfg.train_scenes)
            .map(|i| scene_from_archive(a, &format!("train/{i}"), n_labels))
            .collect::<Result<Vec<_>>>()?;
        let eval = (0..cfg.eval_scenes)
            .map(|i| scene_from_archive(a, &format!("eval/{i}"), n_labels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            seed,
            vocab,
            shift: shift_of("shift")?,
            teacher_shift: shift_of("teacher_shift")?,
            train,
            eval,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchConfig {
        BenchConfig {
            train_scenes: 16,
            eval_scenes: 16,
            ..BenchConfig::default()
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_benchmark(&small(), 5).unwrap();
        let b = gen_benchmark(&small(), 5).unwrap();
        assert_eq!(a, b);
        let c = gen_benchmark(&small(), 6).unwrap();
        assert_ne!(a.train[0].features, c.train[0].features);
    }

    #[test]
    fn noiseless_features_invert_to_prototypes() {
        let cfg = BenchConfig {
            noise_std: 0.0,
            ..small()
        };
        let b = gen_benchmark(&cfg, 1).unwrap();
        for s in b.train.iter().chain(&b.eval) {
            for (i, &l) in s.labels.iter().enumerate() {
                if l == b.background_label() {
                    continue;
                }
                let z = b.shift.invert(s.features.row(i));
                for (a, p) in z.iter().zip(b.vocab.embeddings().row(l)) {
                    assert!((a - p).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gained_shift_inverts() {
        let mut rng = Rng::new(9);
        let s = DomainShift::random(8, 4.0, 0.5, &mut rng).unwrap().with_gain_spread(1.0, &mut rng);
        assert!(s.gain.iter().all(|g| (g.ln()).abs() <= 1.0) && s.gain.iter().any(|g| *g != 1.0));
        let z: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        for (a, b) in s.invert(&s.apply(&z)).iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clutter_modes_limit_background_appearance() {
        let cfg = BenchConfig {
            noise_std: 0.0,
            background_modes: 3,
            ..small()
        };
        let b = gen_benchmark(&cfg, 4).unwrap();
        let mut seen: Vec<Vec<f64>> = Vec::new();
        for s in &b.train {
            for (i, &l) in s.labels.iter().enumerate() {
                if l == b.background_label() {
                    let z = b.shift.invert(s.features.row(i));
                    if !seen.iter().any(|v| v.iter().zip(&z).all(|(a, c)| (a - c).abs() < 1e-9)) {
                        seen.push(z);
                    }
                }
            }
        }
        assert!(!seen.is_empty() && seen.len() <= 3);
    }

    #[test]
    fn rotation_is_orthogonal() {
        let s = DomainShift::random(16, 8.0, 1.0, &mut Rng::new(3)).unwrap();
        let q = &s.rotation;
        for i in 0..16 {
            for j in 0..16 {
                let dot: f64 = q.row(i).iter().zip(q.row(j)).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
        let bias: f64 = s.bias.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((bias - 1.0).abs() < 1e-12);
        let id = DomainShift::random(4, 0.0, 0.0, &mut Rng::new(1)).unwrap();
        assert!(id.rotation.bitwise_eq(&Tensor::eye(4).unwrap()));
    }

    #[test]
    fn training_stream_has_no_novel_classes() {
        let b = gen_benchmark(&BenchConfig::default(), 11).unwrap();
        for s in &b.train {
            for &l in &s.labels {
                assert!(l == b.background_label() || b.vocab.split_of(l) == Split::Base);
            }
        }
        assert!(b
            .eval
            .iter()
            .flat_map(|s| &s.labels)
            .any(|&l| l < b.vocab.len() && b.vocab.split_of(l) == Split::Novel));
    }

    #[test]
    fn shift_is_harmful_to_frozen_surrogate() {
        let b = gen_benchmark(&BenchConfig::default(), 2).unwrap();
        let raw = CosineClassifier { unshift: None, tau: 100.0 };
        let oracle = CosineClassifier {
            unshift: Some(&b.shift),
            tau: 100.0,
        };
        let frozen = evaluate(&raw, &b, EvalSplit::Novel).unwrap().acc_novel;
        let best = evaluate(&oracle, &b, EvalSplit::Novel).unwrap().acc_novel;
        assert!(best >= 0.99);
        assert!(best - frozen >= 0.2, "oracle {best} frozen {frozen}");
    }

    #[test]
    fn inseparable_config_rejected() {
        let cfg = BenchConfig {
            noise_std: 3.0,
            ..small()
        };
        assert!(matches!(gen_benchmark(&cfg, 0), Err(Error::Config(_))));
        let cfg = BenchConfig { n_novel: 0, ..small() };
        assert!(matches!(gen_benchmark(&cfg, 0), Err(Error::Config(_))));
    }

    fn scene_with_centers(centers: &[(f64, f64)]) -> Scene {
        let r = centers.len();
        Scene {
            features: Tensor::new(&[r, 2], (0..2 * r).map(|v| v as f64).collect()).unwrap(),
            boxes: centers.iter().map(|&(x, y)| [x, y, 0.1, 0.1]).collect(),
            box_targets: Tensor::zeros(&[r, 4]).unwrap(),
            labels: vec![0; r],
            teacher_tokens: Tensor::zeros(&[r, 2]).unwrap(),
        }
    }

    #[test]
    fn grouping_sizes() {
        let s = scene_with_centers(&[(0.1, 0.1), (0.5, 0.5), (0.9, 0.2), (0.3, 0.8), (0.6, 0.1)]);
        let ones = group_regions(&s, 1).unwrap();
        assert_eq!(ones.len(), 5);
        let all = group_regions(&s, 9).unwrap();
        assert_eq!(all.len(), 1);
        let mut idx = all[0].indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        assert!(group_regions(&s, 0).is_err());
        let empty = Scene {
            boxes: vec![],
            labels: vec![],
            ..s
        };
        assert!(group_regions(&empty, 2).unwrap().is_empty());
    }

    #[test]
    fn far_clusters_form_their_own_bags() {
        let s = scene_with_centers(&[(0.1, 0.1), (0.9, 0.9), (0.12, 0.11), (0.88, 0.87)]);
        let bags = group_regions(&s, 2).unwrap();
        assert_eq!(bags.len(), 2);
        // brute-force: each bag member's nearest other region is its bagmate
        for b in &bags {
            let [a, c] = [b.indices[0], b.indices[1]];
            let nearest_to = |i: usize| {
                (0..4)
                    .filter(|&j| j != i)
                    .min_by(|&x, &y| {
                        let dx = (s.boxes[x][0] - s.boxes[i][0]).hypot(s.boxes[x][1] - s.boxes[i][1]);
                        let dy = (s.boxes[y][0] - s.boxes[i][0]).hypot(s.boxes[y][1] - s.boxes[i][1]);
                        dx.partial_cmp(&dy).unwrap()
                    })
                    .unwrap()
            };
            assert_eq!(nearest_to(a), c);
            assert_eq!(nearest_to(c), a);
        }
    }

    #[test]
    fn grouping_ties_break_on_index() {
        let s = scene_with_centers(&[(0.5, 0.5), (0.5, 0.5), (0.5, 0.5)]);
        let bags = group_regions(&s, 2).unwrap();
        assert_eq!(bags[0].indices, vec![0, 1]);
        assert_eq!(bags[1].indices, vec![2]);
    }

    struct Uniformish(u64);

    impl RegionClassifier for Uniformish {
        fn classify(&self, features: &Tensor, classes: &Tensor) -> Result<Tensor> {
            let mut rng = Rng::new(self.0);
            let n = features.rows() * classes.rows();
            Tensor::new(&[features.rows(), classes.rows()], (0..n).map(|_| rng.uniform()).collect())
        }
    }

    #[test]
    fn metrics_weighting_and_chance() {
        let cfg = BenchConfig {
            eval_scenes: 400,
            train_scenes: 1,
            ..BenchConfig::default()
        };
        let b = gen_benchmark(&cfg, 9).unwrap();
        let m = evaluate(&Uniformish(4), &b, EvalSplit::All).unwrap();
        assert!(m.n_base >= 500 && m.n_novel >= 500);
        let weighted = (m.acc_base * m.n_base as f64 + m.acc_novel * m.n_novel as f64) / (m.n_base + m.n_novel) as f64;
        assert!((m.acc_all - weighted).abs() < 1e-12);
        assert!((m.acc_base - 1.0 / 11.0).abs() < 0.05, "{}", m.acc_base);
        assert!((m.acc_novel - 0.25).abs() < 0.05, "{}", m.acc_novel);
        let per: usize = m.per_class.iter().map(|c| c.total).sum();
        assert_eq!(per, m.n_base + m.n_novel);
        let base_only = evaluate(&Uniformish(4), &b, EvalSplit::Base).unwrap();
        assert_eq!(base_only.n_novel, 0);
        assert_eq!(base_only.acc_all, base_only.acc_base);
    }
    #[test]
    fn archive_round_trip_is_exact() {
        let b = gen_benchmark(&small(), 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bench.bin");
        b.save(&p).unwrap();
        let c = ToyBenchmark::load(&p).unwrap();
        assert_eq!(b, c);
        for (x, y) in b.eval.iter().zip(&c.eval) {
            assert!(x.features.bitwise_eq(&y.features));
        }
    }
}
