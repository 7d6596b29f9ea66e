//! Pre-norm transformer blocks and encoder stacks, with the adapters wired
//! in at their host positions.
//!
//! Vanilla block:
//!
//! ```text
//! x_att = MHSA(LN(x)) + x
//! x_out = MLP(LN(x_att)) + x_att
//! ```
//!
//! Text blocks put XSA on the attention output before the residual add and
//! run XAA in parallel with the MLP on `LN(x_att)`. Image blocks pass the
//! MLP branch through XIA before it rejoins the residual.

use serde::{Deserialize, Serialize};

use crate::adapters::{
    adapter_init, clamp_alpha, xaa_forward, xia_forward, xsa_forward, AdapterConfig,
    AdapterKind, AdapterParams,
};
use crate::error::{Error, Result};
use crate::layers::{mhsa, AttentionParams, LayerNormParams, MlpParams};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

/// Where XAA attaches inside a text block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XaaMode {
    /// `x_out = MLP(LN(x_att)) + XAA(LN(x_att)) + x_att`
    #[default]
    Parallel,
    /// `x_out = m + XAA(m) + x_att` with `m = MLP(LN(x_att))`
    Sequential,
}

/// Where XIA attaches inside an image block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XiaMode {
    /// `x_out = XIA(MLP(LN(x_att))) + x_att`
    #[default]
    Branch,
    /// `x_out = XIA(MLP(LN(x_att)) + x_att)`
    PostBlock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Std of the stand-in "pretrained" weights.
    pub init_std: f64,
    pub xaa_mode: XaaMode,
    pub xia_mode: XiaMode,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            width: 32,
            heads: 4,
            mlp_ratio: 4,
            init_std: 0.02,
            xaa_mode: XaaMode::Parallel,
            xia_mode: XiaMode::Branch,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        if !(self.init_std >= 0.0) {
            return Err(Error::config("init_std must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VitBlock {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
    pub xsa: Option<AdapterParams>,
    pub xaa: Option<AdapterParams>,
    pub xia: Option<AdapterParams>,
    pub frozen: bool,
}

impl VitBlock {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &EncoderConfig,
        seed: u64,
    ) -> Result<Self> {
        let d = cfg.width;
        Ok(Self {
            ln1: LayerNormParams::new(store, &format!("{prefix}.ln1"), d)?,
            attn: AttentionParams::new(store, &format!("{prefix}.attn"), d, cfg.heads, cfg.init_std, seed)?,
            ln2: LayerNormParams::new(store, &format!("{prefix}.ln2"), d)?,
            mlp: MlpParams::new(store, &format!("{prefix}.mlp"), d, d * cfg.mlp_ratio, cfg.init_std, seed)?,
            xsa: None,
            xaa: None,
            xia: None,
            frozen: true,
        })
    }

    /// Weights of the host block, adapters excluded.
    pub fn base_ids(&self) -> Vec<ParamId> {
        let mut ids = self.ln1.ids();
        ids.extend(self.attn.ids());
        ids.extend(self.ln2.ids());
        ids.extend(self.mlp.ids());
        ids
    }

    pub fn adapters(&self) -> impl Iterator<Item = &AdapterParams> {
        self.xsa.iter().chain(&self.xaa).chain(&self.xia)
    }

    pub fn adapter_ids(&self) -> Vec<ParamId> {
        self.adapters().flat_map(AdapterParams::ids).collect()
    }

    pub fn has_adapters(&self) -> bool {
        self.adapters().next().is_some()
    }
}

fn attention_half(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    b: &VitBlock,
    seq_len: usize,
    xsa: Option<&AdapterParams>,
) -> Result<Var> {
    let h = b.ln1.forward(tape, store, x)?;
    let mut a = mhsa(tape, store, h, &b.attn, seq_len)?;
    if let Some(p) = xsa {
        a = xsa_forward(tape, store, a, p)?;
    }
    tape.add(a, x)
}

fn check_width(tape: &Tape, store: &ParamStore, x: Var, b: &VitBlock) -> Result<()> {
    let d = store.get(b.ln1.gamma).numel();
    if tape.value(x).cols() != d {
        return Err(Error::shape(format!(
            "block of width {d} got tokens of width {}",
            tape.value(x).cols()
        )));
    }
    Ok(())
}

/// Vanilla block on the host weights; attached adapters are ignored.
pub fn vit_block_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    b: &VitBlock,
    seq_len: usize,
) -> Result<Var> {
    check_width(tape, store, x, b)?;
    let x_att = attention_half(tape, store, x, b, seq_len, None)?;
    let h = b.ln2.forward(tape, store, x_att)?;
    let m = b.mlp.forward(tape, store, h)?;
    tape.add(m, x_att)
}

/// Text block with XSA after attention and XAA on the MLP residual path.
/// Either adapter may be absent (adapter-subset ablations), not both.
pub fn text_block_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    b: &VitBlock,
    seq_len: usize,
    mode: XaaMode,
) -> Result<Var> {
    if b.xsa.is_none() && b.xaa.is_none() {
        return Err(Error::config("text block has no XSA/XAA attached"));
    }
    if b.xia.is_some() {
        return Err(Error::config("text block carries an image adapter"));
    }
    check_width(tape, store, x, b)?;
    let x_att = attention_half(tape, store, x, b, seq_len, b.xsa.as_ref())?;
    let h = b.ln2.forward(tape, store, x_att)?;
    let m = b.mlp.forward(tape, store, h)?;
    let branch = match &b.xaa {
        Some(p) => {
            let input = match mode {
                XaaMode::Parallel => h,
                XaaMode::Sequential => m,
            };
            let a = xaa_forward(tape, store, input, p)?;
            tape.add(m, a)?
        }
        None => m,
    };
    tape.add(branch, x_att)
}

/// Image block with XIA transforming the MLP branch.
pub fn image_block_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    b: &VitBlock,
    seq_len: usize,
    mode: XiaMode,
) -> Result<Var> {
    let p = b
        .xia
        .as_ref()
        .ok_or_else(|| Error::config("image block has no XIA attached"))?;
    if b.xsa.is_some() || b.xaa.is_some() {
        return Err(Error::config("image block carries a text adapter"));
    }
    check_width(tape, store, x, b)?;
    let x_att = attention_half(tape, store, x, b, seq_len, None)?;
    let h = b.ln2.forward(tape, store, x_att)?;
    let m = b.mlp.forward(tape, store, h)?;
    match mode {
        XiaMode::Branch => {
            let a = xia_forward(tape, store, m, p)?;
            tape.add(a, x_att)
        }
        XiaMode::PostBlock => {
            let out = tape.add(m, x_att)?;
            xia_forward(tape, store, out, p)
        }
    }
}

/// Ordered blocks of one modality plus the final layer norm.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub modality: Modality,
    pub width: usize,
    pub blocks: Vec<VitBlock>,
    pub ln_final: LayerNormParams,
    pub unfrozen_tail: usize,
    pub xaa_mode: XaaMode,
    pub xia_mode: XiaMode,
}

impl EncoderStack {
    /// Builds the host weights (deterministic per parameter name), attaches
    /// the adapters that `adapters` enables for this modality, and applies
    /// the freeze policy.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        modality: Modality,
        cfg: &EncoderConfig,
        adapters: &AdapterConfig,
        unfrozen_tail: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        adapters.validate(cfg.width)?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let bp = format!("{prefix}.block{i}");
            let mut b = VitBlock::new(store, &bp, cfg, seed)?;
            let mut attach = |kind: AdapterKind| -> Result<Option<AdapterParams>> {
                if !adapters.is_enabled(kind) {
                    return Ok(None);
                }
                let p = adapter_init(store, &format!("{bp}.{kind}"), cfg.width, adapters, kind, seed)?;
                Ok(Some(p))
            };
            match modality {
                Modality::Text => {
                    b.xsa = attach(AdapterKind::Xsa)?;
                    b.xaa = attach(AdapterKind::Xaa)?;
                }
                Modality::Image => b.xia = attach(AdapterKind::Xia)?,
            }
            blocks.push(b);
        }
        let mut stack = Self {
            modality,
            width: cfg.width,
            blocks,
            ln_final: LayerNormParams::new(store, &format!("{prefix}.ln_final"), cfg.width)?,
            unfrozen_tail: 0,
            xaa_mode: cfg.xaa_mode,
            xia_mode: cfg.xia_mode,
        };
        stack.apply_freeze_policy(store, unfrozen_tail)?;
        Ok(stack)
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    /// Makes the host weights of the last `unfrozen_tail` blocks trainable
    /// and freezes every other host weight, including the final layer norm.
    /// Attached adapters are always trainable.
    pub fn apply_freeze_policy(&mut self, store: &mut ParamStore, unfrozen_tail: usize) -> Result<()> {
        let l = self.blocks.len();
        if unfrozen_tail > l {
            return Err(Error::config(format!(
                "unfrozen_tail {unfrozen_tail} exceeds {l} layers"
            )));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.frozen = i < l - unfrozen_tail;
            for id in b.base_ids() {
                store.set_trainable(id, !b.frozen);
            }
            for id in b.adapter_ids() {
                store.set_trainable(id, true);
            }
        }
        for id in self.ln_final.ids() {
            store.set_trainable(id, false);
        }
        self.unfrozen_tail = unfrozen_tail;
        Ok(())
    }

    pub fn adapter_params(&self) -> impl Iterator<Item = &AdapterParams> {
        self.blocks.iter().flat_map(VitBlock::adapters)
    }

    pub fn clamp_alphas(&self, store: &mut ParamStore) {
        for p in self.adapter_params() {
            clamp_alpha(store, p);
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .blocks
            .iter()
            .flat_map(|b| b.base_ids().into_iter().chain(b.adapter_ids()))
            .collect();
        ids.extend(self.ln_final.ids());
        ids
    }

    fn block(&self, tape: &mut Tape, store: &ParamStore, x: Var, b: &VitBlock, seq_len: usize) -> Result<Var> {
        if !b.has_adapters() {
            return vit_block_forward(tape, store, x, b, seq_len);
        }
        match self.modality {
            Modality::Text => text_block_forward(tape, store, x, b, seq_len, self.xaa_mode),
            Modality::Image => image_block_forward(tape, store, x, b, seq_len, self.xia_mode),
        }
    }

    /// Encodes a stack of independent sequences (`[n_seq · seq_len, d]`) and
    /// returns the layer-normalized final state of each sequence's first
    /// token, `[n_seq, d]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, tokens: Var, seq_len: usize) -> Result<Var> {
        let (rows, d) = (tape.value(tokens).rows(), tape.value(tokens).cols());
        if d != self.width {
            return Err(Error::shape(format!(
                "encoder of width {} got tokens of width {d}",
                self.width
            )));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape(format!(
                "{rows} tokens do not split into sequences of {seq_len}"
            )));
        }
        let mut x = tokens;
        for b in &self.blocks {
            x = self.block(tape, store, x, b, seq_len)?;
        }
        let summary: Vec<usize> = (0..rows / seq_len).map(|s| s * seq_len).collect();
        let first = tape.gather_rows(x, &summary)?;
        self.ln_final.forward(tape, store, first)
    }
}

/// Single-sequence encoding: `tokens` is `[t, d]`, result is `[1, d]`.
pub fn encoder_forward(
    tape: &mut Tape,
    store: &ParamStore,
    stack: &EncoderStack,
    tokens: Var,
) -> Result<Var> {
    let t = tape.value(tokens).rows();
    stack.encode(tape, store, tokens, t)
}
