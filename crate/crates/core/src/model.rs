//! The full detector head: text and image encoders, region projection,
//! background embedding and box regressor.

use std::path::Path;

use crate::config::{ProjInit, RunConfig};
use crate::encoders::{EncoderStack, Modality};
use crate::error::{Error, Result};
use crate::format::Archive;
use crate::layers::{gaussian_param, LinearParams};
use crate::optim::Sgd;
use crate::ovod::{bag_positions, cosine_logits, detection_loss, info_nce, RegionBag};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::toybench::{group_regions, RegionClassifier, Scene, ToyBenchmark};

/// Std of the box regressor weights.
const BOX_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct OvxdModel {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub text: EncoderStack,
    pub image: EncoderStack,
    pub w_proj: ParamId,
    pub background: ParamId,
    pub box_head: LinearParams,
}

/// Loss terms of one training batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub detection: f64,
    pub distill: f64,
}

impl OvxdModel {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let enc = &cfg.model.encoder;
        let d = enc.width;
        let dr = cfg.bench.d_region;
        let tail = cfg.train.unfrozen_tail;
        let mut store = ParamStore::new();
        let text = EncoderStack::new(&mut store, "text", Modality::Text, enc, &cfg.adapter, tail, seed)?;
        let image = EncoderStack::new(&mut store, "image", Modality::Image, enc, &cfg.adapter, tail, seed)?;
        let w_proj = match cfg.model.proj_init {
            ProjInit::Identity => {
                let mut w = Tensor::zeros(&[dr, d])?;
                for i in 0..dr.min(d) {
                    w.data_mut()[i * d + i] = 1.0;
                }
                store.insert("head.proj", w)?
            }
            ProjInit::Gaussian => gaussian_param(&mut store, "head.proj".into(), &[dr, d], 1.0 / (dr as f64).sqrt(), seed)?,
        };
        let background = gaussian_param(&mut store, "head.background".into(), &[1, d], 1.0 / (d as f64).sqrt(), seed)?;
        let box_head = LinearParams::new(&mut store, "head.box", dr, 4, BOX_INIT_STD, seed)?;
        for id in [w_proj, background].into_iter().chain(box_head.ids()) {
            store.set_trainable(id, true);
        }
        Ok(Self {
            cfg: cfg.clone(),
            store,
            text,
            image,
            w_proj,
            background,
            box_head,
        })
    }

    /// Projection, background embedding and box regressor.
    pub fn head_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_proj, self.background];
        ids.extend(self.box_head.ids());
        ids
    }

    pub fn clamp_alphas(&mut self) {
        self.text.clamp_alphas(&mut self.store);
        self.image.clamp_alphas(&mut self.store);
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.image
            .adapter_params()
            .chain(self.text.adapter_params())
            .filter(|p| p.alpha_raw.is_some())
            .map(|p| p.alpha(&self.store))
            .collect()
    }

    /// Each row of `features` projected and encoded by the text encoder as
    /// a one-token sequence, `[m, d]`.
    pub fn region_embeddings(&self, tape: &mut Tape, features: &Tensor) -> Result<Var> {
        let x = tape.constant(features.clone());
        let w = tape.param(&self.store, self.w_proj);
        let e = tape.matmul(x, w)?;
        self.text.encode(tape, &self.store, e, 1)
    }

    /// Student and teacher embeddings for a set of bags, paired row by row.
    /// Bags of equal size share one batched encoder pass.
    pub fn bag_pairs(&self, tape: &mut Tape, bags: &[(&RegionBag, Tensor)]) -> Result<(Var, Var)> {
        let d = self.text.width;
        let mut sizes: Vec<usize> = bags.iter().map(|(b, _)| b.len()).collect();
        sizes.sort_unstable();
        sizes.dedup();
        let mut students = Vec::new();
        let mut teachers = Vec::new();
        for k in sizes {
            let group: Vec<_> = bags.iter().filter(|(b, _)| b.len() == k).collect();
            let feats: Vec<f64> = group.iter().flat_map(|(b, _)| b.features.data().to_vec()).collect();
            let mut pos = Vec::new();
            for (b, _) in &group {
                pos.extend_from_slice(bag_positions(&b.boxes, d, self.cfg.model.pos_scale)?.data());
            }
            let rows = group.len() * k;
            let x = tape.constant(Tensor::new(&[rows, self.cfg.bench.d_region], feats)?);
            let w = tape.param(&self.store, self.w_proj);
            let e = tape.matmul(x, w)?;
            let p = tape.constant(Tensor::new(&[rows, d], pos)?);
            let tokens = tape.add(e, p)?;
            students.push(self.text.encode(tape, &self.store, tokens, k)?);

            let crops: Vec<f64> = group.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
            let c = tape.constant(Tensor::new(&[rows, d], crops)?);
            teachers.push(self.image.encode(tape, &self.store, c, k)?);
        }
        Ok((tape.concat_rows(&students)?, tape.concat_rows(&teachers)?))
    }

    /// Classification and box losses plus the weighted distillation term
    /// over `scenes`. Labels are restricted to base classes and background.
    pub fn training_loss(&self, tape: &mut Tape, scenes: &[&Scene], bench: &ToyBenchmark) -> Result<(Var, LossParts)> {
        let vocab = &bench.vocab;
        let base = vocab.indices(crate::ovod::Split::Base);
        let bg_label = base.len();
        let mut feats = Vec::new();
        let mut targets = Vec::new();
        let mut labels = Vec::new();
        let mut bags = Vec::new();
        for s in scenes {
            feats.extend_from_slice(s.features.data());
            targets.extend_from_slice(s.box_targets.data());
            for &l in &s.labels {
                let mapped = if l == bench.background_label() {
                    bg_label
                } else {
                    base.iter().position(|&b| b == l).ok_or_else(|| {
                        Error::contract(format!("training scene contains non-base class {l}"))
                    })?
                };
                labels.push(mapped);
            }
            for bag in group_regions(s, self.cfg.model.bag_size)? {
                let rows: Vec<Vec<f64>> = bag.indices.iter().map(|&i| s.teacher_tokens.row(i).to_vec()).collect();
                bags.push((bag, Tensor::from_rows(&rows)?));
            }
        }
        let m = labels.len();
        let features = Tensor::new(&[m, self.cfg.bench.d_region], feats)?;
        let z = self.region_embeddings(tape, &features)?;
        let base_emb = tape.constant(vocab.subset(&base)?);
        let bg = tape.param(&self.store, self.background);
        let classes = tape.concat_rows(&[base_emb, bg])?;
        let logits = cosine_logits(tape, z, classes, self.cfg.model.tau)?;
        let x = tape.constant(features);
        let pred = self.box_head.forward(tape, &self.store, x)?;
        let target = tape.constant(Tensor::new(&[m, 4], targets)?);
        let det = detection_loss(tape, logits, &labels, pred, target)?;

        let mut parts = LossParts {
            detection: tape.value(det).item(),
            ..LossParts::default()
        };
        let lambda = self.cfg.train.distill_weight;
        let total = if bags.len() >= 2 && lambda > 0.0 {
            let refs: Vec<(&RegionBag, Tensor)> = bags.iter().map(|(b, t)| (b, t.clone())).collect();
            let (s, t) = self.bag_pairs(tape, &refs)?;
            let nce = info_nce(tape, s, t, self.cfg.model.distill_tau)?;
            parts.distill = tape.value(nce).item();
            let w = tape.scale(nce, lambda);
            tape.add(det, w)?
        } else {
            det
        };
        parts.total = tape.value(total).item();
        Ok((total, parts))
    }

    /// Class probabilities for region features against the given class
    /// embeddings.
    pub fn class_probs(&self, features: &Tensor, classes: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let z = self.region_embeddings(&mut tape, features)?;
        let f = tape.constant(classes.clone());
        let p = crate::ovod::class_logits(&mut tape, z, f, self.cfg.model.tau)?;
        Ok(tape.value(p).clone())
    }

    pub fn check_compatible(&self, bench: &ToyBenchmark) -> Result<()> {
        let d = self.text.width;
        if bench.cfg.d_region != self.cfg.bench.d_region || bench.vocab.dim() != d {
            return Err(Error::Format(format!(
                "benchmark has d_region {} and word width {}, model expects {} and {d}",
                bench.cfg.d_region,
                bench.vocab.dim(),
                self.cfg.bench.d_region
            )));
        }
        Ok(())
    }
}

impl RegionClassifier for OvxdModel {
    fn classify(&self, features: &Tensor, classes: &Tensor) -> Result<Tensor> {
        self.class_probs(features, classes)
    }
}

const CKPT_KIND: &str = "checkpoint";
const VELOCITY_PREFIX: &str = "velocity/";

/// Model weights, optimizer state and the config that built them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: OvxdModel,
    pub optimizer: Sgd,
    pub iteration: usize,
}

impl Checkpoint {
    pub fn to_archive(&self) -> Archive {
        let meta = serde_json::json!({
            "config": serde_json::Value::Object(self.model.cfg.to_flat()),
            "iteration": self.iteration,
        });
        let mut a = Archive::new(CKPT_KIND, meta);
        for (_, name, t) in self.model.store.iter() {
            let mut t = t.clone();
            t.zero_grad();
            a.push(name, t);
        }
        for (id, name, t) in self.model.store.iter() {
            if let Some(v) = self.optimizer.velocity(id.index()) {
                a.push(format!("{VELOCITY_PREFIX}{name}"), Tensor::new(t.shape(), v.to_vec()).expect("velocity matches tensor"));
            }
        }
        a
    }

    /// Rebuilds the model from the stored config, then overwrites every
    /// tensor by name. Missing or mis-shaped tensors are load errors.
    pub fn from_archive(a: &Archive) -> Result<Self> {
        a.expect_kind(CKPT_KIND)?;
        let flat = a
            .meta
            .get("config")
            .and_then(|v| v.as_object())
            .ok_or_else(|| Error::Format("checkpoint lacks its config".into()))?;
        let cfg = RunConfig::from_flat(flat)?;
        let iteration = a
            .meta
            .get("iteration")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Format("checkpoint lacks its iteration".into()))? as usize;
        let mut model = OvxdModel::new(&cfg)?;
        let mut optimizer = Sgd::new(cfg.train.lr, cfg.train.momentum, cfg.train.weight_decay)?;
        let mut seen = 0;
        for (name, t) in &a.tensors {
            if let Some(param) = name.strip_prefix(VELOCITY_PREFIX) {
                let id = model
                    .store
                    .find(param)
                    .ok_or_else(|| Error::Format(format!("velocity for unknown tensor {param}")))?;
                if t.shape() != model.store.get(id).shape() {
                    return Err(Error::Format(format!("velocity {param} has shape {:?}", t.shape())));
                }
                optimizer.set_velocity(id.index(), t.data().to_vec());
                continue;
            }
            let id = model
                .store
                .find(name)
                .ok_or_else(|| Error::Format(format!("unknown tensor {name}")))?;
            let slot = model.store.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name}: stored {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(t.data());
            if slot.trainable() != t.trainable() {
                return Err(Error::Format(format!("tensor {name}: trainable flag disagrees with config")));
            }
            seen += 1;
        }
        if seen != model.store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {seen} of {} tensors",
                model.store.len()
            )));
        }
        Ok(Self {
            model,
            optimizer,
            iteration,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toybench::{gen_benchmark, BenchConfig};

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.encoder.layers = 2;
        c.model.encoder.width = 16;
        c.model.encoder.heads = 2;
        c.bench = BenchConfig {
            d_region: 16,
            train_scenes: 4,
            eval_scenes: 4,
            n_base: 5,
            n_novel: 2,
            ..BenchConfig::default()
        };
        c
    }

    #[test]
    fn freeze_layout() {
        let m = OvxdModel::new(&tiny()).unwrap();
        let trainable: Vec<&str> = m
            .store
            .iter()
            .filter(|(_, _, t)| t.trainable())
            .map(|(_, n, _)| n)
            .collect();
        assert!(trainable.iter().all(|n| n.starts_with("head.")
            || n.contains(".block1.")
            || n.contains(".xsa.")
            || n.contains(".xaa.")
            || n.contains(".xia.")));
        assert!(trainable.contains(&"head.proj"));
        assert!(!trainable.iter().any(|n| n.contains("ln_final")));
        assert!(m.alphas().iter().all(|&a| a == 0.0));
    }

    #[test]
    fn loss_is_finite_and_positive() {
        let cfg = tiny();
        let bench = gen_benchmark(&cfg.bench, 1).unwrap();
        let m = OvxdModel::new(&cfg).unwrap();
        let mut tape = Tape::new();
        let scenes: Vec<&Scene> = bench.train.iter().take(2).collect();
        let (l, parts) = m.training_loss(&mut tape, &scenes, &bench).unwrap();
        assert!(parts.detection > 0.0 && parts.distill > 0.0);
        assert!((tape.value(l).item() - parts.detection - parts.distill).abs() < 1e-12);
    }

    #[test]
    fn eval_scenes_rejected_for_training() {
        let cfg = tiny();
        let bench = gen_benchmark(&cfg.bench, 1).unwrap();
        let m = OvxdModel::new(&cfg).unwrap();
        let novel_scene = bench
            .eval
            .iter()
            .find(|s| s.labels.iter().any(|&l| l < bench.vocab.len() && l >= cfg.bench.n_base))
            .unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            m.training_loss(&mut tape, &[novel_scene], &bench),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = tiny();
        let mut m = OvxdModel::new(&cfg).unwrap();
        m.store.get_mut(m.w_proj).data_mut()[3] = 0.123;
        let mut opt = Sgd::new(0.1, 0.9, 0.0).unwrap();
        opt.set_velocity(m.w_proj.index(), vec![0.5; 16 * 16]);
        let ck = Checkpoint {
            model: m,
            optimizer: opt,
            iteration: 17,
        };
        let mut buf = Vec::new();
        ck.to_archive().write_to(&mut buf).unwrap();
        let back = Checkpoint::from_archive(&Archive::read_from(&mut buf.as_slice()).unwrap()).unwrap();
        assert_eq!(back.iteration, 17);
        for ((_, n1, a), (_, n2, b)) in ck.model.store.iter().zip(back.model.store.iter()) {
            assert_eq!(n1, n2);
            assert!(a.bitwise_eq(b));
        }
        assert_eq!(back.optimizer.velocity(ck.model.w_proj.index()), Some(&[0.5; 256][..]));
    }

    #[test]
    fn incompatible_checkpoint_rejected() {
        let ck = Checkpoint {
            model: OvxdModel::new(&tiny()).unwrap(),
            optimizer: Sgd::new(0.1, 0.0, 0.0).unwrap(),
            iteration: 0,
        };
        let mut a = ck.to_archive();
        let pos = a.tensors.iter().position(|(n, _)| n == "head.proj").unwrap();
        a.tensors[pos].1 = Tensor::zeros(&[3, 3]).unwrap();
        assert!(matches!(Checkpoint::from_archive(&a), Err(Error::Format(_))));
        a.tensors.remove(pos);
        assert!(matches!(Checkpoint::from_archive(&a), Err(Error::Format(_))));
    }
}
