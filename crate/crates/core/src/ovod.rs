//! Open-vocabulary head: region projection into the word-embedding space,
//! temperature-scaled cosine classification, bag-of-regions student
//! embeddings and the training losses.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderStack, Modality};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Box as `(cx, cy, w, h)` in normalized image coordinates.
pub type BoxCoords = [f64; 4];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassVocabulary {
    names: Vec<String>,
    embeddings: Tensor,
    split: Vec<Split>,
}

impl ClassVocabulary {
    /// Rows of `embeddings` must already be unit length.
    pub fn new(names: Vec<String>, embeddings: Tensor, split: Vec<Split>) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.rows() != names.len() || split.len() != names.len() {
            return Err(Error::shape(format!(
                "{} names, {} splits, embeddings {:?}",
                names.len(),
                split.len(),
                embeddings.shape()
            )));
        }
        for (i, name) in names.iter().enumerate() {
            let norm = embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::contract(format!("class {name} has norm {norm}")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(Error::contract(format!("class {dup} listed twice")));
        }
        Ok(Self { names, embeddings, split })
    }

    /// Normalizes the rows of `raw` first.
    pub fn from_raw(names: Vec<String>, raw: &Tensor, split: Vec<Split>) -> Result<Self> {
        let d = raw.cols();
        let mut data = raw.data().to_vec();
        for row in data.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(Error::Degenerate("zero class embedding".into()));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Self::new(names, Tensor::new(raw.shape(), data)?, split)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn split_of(&self, class: usize) -> Split {
        self.split[class]
    }

    pub fn splits(&self) -> &[Split] {
        &self.split
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Embedding rows of the listed classes, in order.
    pub fn subset(&self, classes: &[usize]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = classes.iter().map(|&c| self.embeddings.row(c).to_vec()).collect();
        Tensor::from_rows(&rows)
    }
}

/// A group of neighbouring regions from one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionBag {
    pub features: Tensor,
    pub boxes: Vec<BoxCoords>,
    /// Region indices within the source scene.
    pub indices: Vec<usize>,
}

impl RegionBag {
    pub fn new(features: Tensor, boxes: Vec<BoxCoords>, indices: Vec<usize>) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::contract("empty bag"));
        }
        if features.rows() != boxes.len() || indices.len() != boxes.len() {
            return Err(Error::shape(format!(
                "bag with {} feature rows, {} boxes, {} indices",
                features.rows(),
                boxes.len(),
                indices.len()
            )));
        }
        boxes.iter().try_for_each(validate_box)?;
        Ok(Self { features, boxes, indices })
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

pub fn validate_box(b: &BoxCoords) -> Result<()> {
    let [cx, cy, w, h] = *b;
    let inside = |v: f64| (0.0..=1.0).contains(&v);
    if !(inside(cx) && inside(cy) && w > 0.0 && h > 0.0 && w <= 1.0 && h <= 1.0) {
        return Err(Error::contract(format!("box {b:?} outside the unit square")));
    }
    Ok(())
}

/// `features · W_proj` with no bias.
pub fn project_region(tape: &mut Tape, features: Var, w_proj: Var) -> Result<Var> {
    tape.matmul(features, w_proj)
}

/// `τ · cos(e_i, f_n)` for every row of `e` against every row of `f`.
pub fn cosine_logits(tape: &mut Tape, e: Var, f: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature {tau} must be positive")));
    }
    let en = tape.l2_normalize_rows(e)?;
    let fn_ = tape.l2_normalize_rows(f)?;
    let ft = tape.transpose(fn_)?;
    let s = tape.matmul(en, ft)?;
    Ok(tape.scale(s, tau))
}

/// Class probabilities: softmax over `τ · cos(e, f_n)`. `e` is expected to
/// have passed through the text encoder already.
pub fn class_logits(tape: &mut Tape, e: Var, f: Var, tau: f64) -> Result<Var> {
    let z = cosine_logits(tape, e, f, tau)?;
    tape.softmax(z, 1)
}

/// Sinusoidal box encoding. Each of `cx, cy, w, h` gets `d/4` dimensions of
/// interleaved `sin, cos` at frequencies `10000^(-2j/(d/4))`, with the
/// coordinate first scaled by 2π.
pub fn box_positional_embedding(b: &BoxCoords, d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(8) {
        return Err(Error::config(format!("positional width {d} must be a multiple of 8")));
    }
    let block = d / 4;
    let mut out = Vec::with_capacity(d);
    for &coord in b {
        for j in 0..block / 2 {
            let freq = libm::pow(10000.0, -((2 * j) as f64) / block as f64);
            let a = TAU * coord * freq;
            out.push(libm::sin(a));
            out.push(libm::cos(a));
        }
    }
    Tensor::new(&[1, d], out)
}

/// Positional embeddings for all boxes of a bag, scaled, as `[k, d]`.
pub fn bag_positions(boxes: &[BoxCoords], d: usize, scale: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(boxes.len() * d);
    for b in boxes {
        data.extend(box_positional_embedding(b, d)?.data().iter().map(|v| v * scale));
    }
    Tensor::new(&[boxes.len(), d], data)
}

/// Student embedding of a bag: each region is projected, its positional
/// embedding (times `pos_scale`) is added, and the `k` tokens go through the
/// text encoder jointly. Returns `[1, d]`.
pub fn bag_embed(
    tape: &mut Tape,
    store: &ParamStore,
    bag: &RegionBag,
    w_proj: ParamId,
    text: &EncoderStack,
    pos_scale: f64,
) -> Result<Var> {
    if text.modality != Modality::Text {
        return Err(Error::config("bag_embed needs the text encoder"));
    }
    if bag.is_empty() {
        return Err(Error::contract("empty bag"));
    }
    let x = tape.constant(bag.features.clone());
    let w = tape.param(store, w_proj);
    let e = project_region(tape, x, w)?;
    let pos = tape.constant(bag_positions(&bag.boxes, text.width, pos_scale)?);
    let tokens = tape.add(e, pos)?;
    text.encode(tape, store, tokens, bag.len())
}

/// Symmetric InfoNCE over `S_ij = τ · cos(student_i, teacher_j)`: the mean
/// of the row-wise and column-wise cross-entropies with diagonal targets.
pub fn info_nce(tape: &mut Tape, students: Var, teachers: Var, tau: f64) -> Result<Var> {
    let b = tape.value(students).rows();
    if b < 2 {
        return Err(Error::contract(format!("InfoNCE needs at least 2 pairs, got {b}")));
    }
    if tape.value(teachers).shape() != tape.value(students).shape() {
        return Err(Error::shape(format!(
            "students {:?} vs teachers {:?}",
            tape.value(students).shape(),
            tape.value(teachers).shape()
        )));
    }
    let s = cosine_logits(tape, students, teachers, tau)?;
    let st = tape.transpose(s)?;
    let diag: Vec<usize> = (0..b).collect();
    let rows = tape.cross_entropy(s, &diag)?;
    let cols = tape.cross_entropy(st, &diag)?;
    let both = tape.add(rows, cols)?;
    Ok(tape.scale(both, 0.5))
}

/// Classification cross-entropy over `N + 1` classes (background last) plus
/// smooth-L1 box regression on foreground rows, unit weights.
pub fn detection_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    pred_boxes: Var,
    target_boxes: Var,
) -> Result<Var> {
    let background = tape.value(logits).cols() - 1;
    let cls = tape.cross_entropy(logits, labels)?;
    let fg: Vec<bool> = labels.iter().map(|&l| l != background).collect();
    let reg = tape.smooth_l1(pred_boxes, target_boxes, &fg)?;
    tape.add(cls, reg)
}
