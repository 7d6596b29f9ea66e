//! The three bottleneck adapters.
//!
//! All share `down (d → d/r) → hidden (d/r → d/r) → up (d/r → d)` with an
//! activation after each projection:
//!
//! - space adapter (XSA): `GeLU(GeLU(GeLU(e·W_d)·W_h)·W_u) + e`
//! - aggregation adapter (XAA): `s · GeLU(GeLU(GeLU(e·W_d)·W_h)·W_u)`, with a
//!   constant scale `s`
//! - image adapter (XIA): `α·e* + (1 − α)·e` where
//!   `e* = ReLU(ReLU(ReLU(e·W_d)·W_h)·W_u)` and `α = clamp(α_raw, 0, 1)` is
//!   learned
//!
//! Fresh adapters have `W_u = 0` and `α_raw = 0`, which makes XSA and XIA
//! exact identities and XAA an exact zero map.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{const_param, gaussian_param};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Std of the down and hidden projections at init.
pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Xsa,
    Xaa,
    Xia,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 3] = [AdapterKind::Xsa, AdapterKind::Xaa, AdapterKind::Xia];

    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Xsa => "xsa",
            AdapterKind::Xaa => "xaa",
            AdapterKind::Xia => "xia",
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "xsa" => Ok(AdapterKind::Xsa),
            "xaa" => Ok(AdapterKind::Xaa),
            "xia" => Ok(AdapterKind::Xia),
            other => Err(Error::config(format!("unknown adapter {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub ratio_xsa: usize,
    pub ratio_xaa: usize,
    pub ratio_xia: usize,
    pub scale_s: f64,
    pub alpha_init: f64,
    pub enabled: Vec<AdapterKind>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            ratio_xsa: 4,
            ratio_xaa: 4,
            ratio_xia: 2,
            scale_s: 0.5,
            alpha_init: 0.0,
            enabled: AdapterKind::ALL.to_vec(),
        }
    }
}

impl AdapterConfig {
    pub fn none() -> Self {
        Self {
            enabled: Vec::new(),
            ..Self::default()
        }
    }

    pub fn is_enabled(&self, kind: AdapterKind) -> bool {
        self.enabled.contains(&kind)
    }

    pub fn ratio(&self, kind: AdapterKind) -> usize {
        match kind {
            AdapterKind::Xsa => self.ratio_xsa,
            AdapterKind::Xaa => self.ratio_xaa,
            AdapterKind::Xia => self.ratio_xia,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        for kind in AdapterKind::ALL {
            let r = self.ratio(kind);
            if r == 0 || !d.is_multiple_of(r) {
                return Err(Error::config(format!(
                    "{kind} reduction ratio {r} does not divide width {d}"
                )));
            }
        }
        if !self.scale_s.is_finite() {
            return Err(Error::config("scale_s must be finite"));
        }
        if !(0.0..=1.0).contains(&self.alpha_init) {
            return Err(Error::config("alpha_init must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Weights of one adapter instance.
#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub kind: AdapterKind,
    pub w_down: ParamId,
    pub w_hidden: ParamId,
    pub w_up: ParamId,
    /// Constant output scale (XAA only; 1 otherwise). Never trained.
    pub scale: f64,
    /// Raw blend weight (XIA only).
    pub alpha_raw: Option<ParamId>,
    pub ratio: usize,
}

impl AdapterParams {
    pub fn ids(&self) -> Vec<ParamId> {
        [self.w_down, self.w_hidden, self.w_up]
            .into_iter()
            .chain(self.alpha_raw)
            .collect()
    }

    /// `clamp(α_raw, 0, 1)`; zero for adapters without a blend weight.
    pub fn alpha(&self, store: &ParamStore) -> f64 {
        self.alpha_raw
            .map_or(0.0, |id| store.get(id).item().clamp(0.0, 1.0))
    }
}

/// Fresh adapter for width `d`: down/hidden Gaussian(0.02), up-projection
/// zero, `α_raw = cfg.alpha_init`, `s = cfg.scale_s`. All tensors trainable.
pub fn adapter_init(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    cfg: &AdapterConfig,
    kind: AdapterKind,
    seed: u64,
) -> Result<AdapterParams> {
    let ratio = cfg.ratio(kind);
    if ratio == 0 || !d.is_multiple_of(ratio) {
        return Err(Error::config(format!(
            "{kind} reduction ratio {ratio} does not divide width {d}"
        )));
    }
    let h = d / ratio;
    let w_down = gaussian_param(store, format!("{prefix}.w_down"), &[d, h], ADAPTER_INIT_STD, seed)?;
    let w_hidden = gaussian_param(store, format!("{prefix}.w_hidden"), &[h, h], ADAPTER_INIT_STD, seed)?;
    let w_up = const_param(store, format!("{prefix}.w_up"), &[h, d], 0.0)?;
    let alpha_raw = match kind {
        AdapterKind::Xia => Some(const_param(store, format!("{prefix}.alpha_raw"), &[1], cfg.alpha_init)?),
        _ => None,
    };
    let p = AdapterParams {
        kind,
        w_down,
        w_hidden,
        w_up,
        scale: if kind == AdapterKind::Xaa { cfg.scale_s } else { 1.0 },
        alpha_raw,
        ratio,
    };
    for id in p.ids() {
        store.set_trainable(id, true);
    }
    Ok(p)
}

fn bottleneck(
    tape: &mut Tape,
    store: &ParamStore,
    e: Var,
    p: &AdapterParams,
    act: fn(&mut Tape, Var) -> Var,
) -> Result<Var> {
    let d = tape.value(e).cols();
    let rows = store.get(p.w_down).shape()[0];
    if d != rows {
        return Err(Error::shape(format!("{} adapter built for width {rows}, got {d}", p.kind)));
    }
    let wd = tape.param(store, p.w_down);
    let wh = tape.param(store, p.w_hidden);
    let wu = tape.param(store, p.w_up);
    let h = tape.matmul(e, wd)?;
    let h = act(tape, h);
    let h = tape.matmul(h, wh)?;
    let h = act(tape, h);
    let h = tape.matmul(h, wu)?;
    Ok(act(tape, h))
}

fn expect_kind(p: &AdapterParams, kind: AdapterKind) -> Result<()> {
    if p.kind != kind {
        return Err(Error::config(format!("expected {kind} params, got {}", p.kind)));
    }
    Ok(())
}

pub fn xsa_forward(tape: &mut Tape, store: &ParamStore, e1: Var, p: &AdapterParams) -> Result<Var> {
    expect_kind(p, AdapterKind::Xsa)?;
    let branch = bottleneck(tape, store, e1, p, Tape::gelu)?;
    tape.add(branch, e1)
}

pub fn xaa_forward(tape: &mut Tape, store: &ParamStore, e2: Var, p: &AdapterParams) -> Result<Var> {
    expect_kind(p, AdapterKind::Xaa)?;
    let branch = bottleneck(tape, store, e2, p, Tape::gelu)?;
    Ok(tape.scale(branch, p.scale))
}

pub fn xia_forward(tape: &mut Tape, store: &ParamStore, e3: Var, p: &AdapterParams) -> Result<Var> {
    expect_kind(p, AdapterKind::Xia)?;
    let alpha_id = p
        .alpha_raw
        .ok_or_else(|| Error::config("image adapter without alpha"))?;
    let e_star = bottleneck(tape, store, e3, p, Tape::relu)?;
    let raw = tape.param(store, alpha_id);
    let alpha = tape.clamp(raw, 0.0, 1.0);
    let keep = tape.affine(alpha, -1.0, 1.0);
    let learned = tape.mul_scalar(e_star, alpha)?;
    let original = tape.mul_scalar(e3, keep)?;
    tape.add(learned, original)
}

pub fn adapter_forward(tape: &mut Tape, store: &ParamStore, e: Var, p: &AdapterParams) -> Result<Var> {
    match p.kind {
        AdapterKind::Xsa => xsa_forward(tape, store, e, p),
        AdapterKind::Xaa => xaa_forward(tape, store, e, p),
        AdapterKind::Xia => xia_forward(tape, store, e, p),
    }
}

/// Projects `α_raw` back into `[0, 1]`. Run after every optimizer step.
pub fn clamp_alpha(store: &mut ParamStore, p: &AdapterParams) {
    if let Some(id) = p.alpha_raw {
        let v = &mut store.get_mut(id).data_mut()[0];
        *v = v.clamp(0.0, 1.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use crate::rng::Rng;
    use crate::tensor::{init_gaussian, Tensor};

    fn fresh(kind: AdapterKind, d: usize, cfg: &AdapterConfig, seed: u64) -> (ParamStore, AdapterParams) {
        let mut store = ParamStore::new();
        let p = adapter_init(&mut store, "a", d, cfg, kind, seed).unwrap();
        (store, p)
    }

    fn randomize(store: &mut ParamStore, p: &AdapterParams, seed: u64) {
        let mut rng = Rng::new(seed);
        for id in [p.w_down, p.w_hidden, p.w_up] {
            let t = init_gaussian(store.get(id).shape(), 0.7, &mut rng).unwrap();
            store.get_mut(id).data_mut().copy_from_slice(t.data());
        }
    }

    fn run(store: &ParamStore, p: &AdapterParams, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let e = tape.constant(x.clone());
        let y = adapter_forward(&mut tape, store, e, p).unwrap();
        tape.value(y).clone()
    }

    #[test]
    fn shapes_follow_ratio() {
        let (store, p) = fresh(AdapterKind::Xsa, 8, &AdapterConfig::default(), 1);
        assert_eq!(store.get(p.w_down).shape(), &[8, 2]);
        assert_eq!(store.get(p.w_hidden).shape(), &[2, 2]);
        assert_eq!(store.get(p.w_up).shape(), &[2, 8]);
    }

    #[test]
    fn ratio_must_divide_width() {
        let cfg = AdapterConfig {
            ratio_xia: 3,
            ..AdapterConfig::default()
        };
        let mut store = ParamStore::new();
        assert!(matches!(
            adapter_init(&mut store, "a", 8, &cfg, AdapterKind::Xia, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fresh_adapters_are_identity_or_zero() {
        let x = init_gaussian(&[3, 8], 1.0, &mut Rng::new(9)).unwrap();
        let cfg = AdapterConfig::default();
        for kind in AdapterKind::ALL {
            let (store, p) = fresh(kind, 8, &cfg, 4);
            let y = run(&store, &p, &x);
            match kind {
                AdapterKind::Xaa => assert!(y.data().iter().all(|v| *v == 0.0)),
                _ => assert!(y.bitwise_eq(&x), "{kind}"),
            }
        }
    }

    #[test]
    fn same_seed_same_init() {
        let cfg = AdapterConfig::default();
        let (s1, p1) = fresh(AdapterKind::Xaa, 8, &cfg, 77);
        let (s2, _) = fresh(AdapterKind::Xaa, 8, &cfg, 77);
        for id in p1.ids() {
            assert!(s1.get(id).bitwise_eq(s2.get(id)));
        }
    }

    #[test]
    fn xsa_zero_input_zero_weights() {
        let (mut store, p) = fresh(AdapterKind::Xsa, 8, &AdapterConfig::default(), 2);
        for id in [p.w_down, p.w_hidden] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let y = run(&store, &p, &Tensor::zeros(&[2, 8]).unwrap());
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn xaa_scale_behaviour() {
        let x = init_gaussian(&[2, 8], 1.0, &mut Rng::new(3)).unwrap();
        let cfg = AdapterConfig {
            scale_s: 1.0,
            ..AdapterConfig::default()
        };
        let (mut store, mut p) = fresh(AdapterKind::Xaa, 8, &cfg, 5);
        randomize(&mut store, &p, 6);
        let unit = run(&store, &p, &x);
        assert!(unit.l2_norm() > 0.0);
        p.scale = 0.0;
        assert!(run(&store, &p, &x).data().iter().all(|v| *v == 0.0));
        p.scale = 2.0;
        let doubled = run(&store, &p, &x);
        for (a, b) in doubled.data().iter().zip(unit.data()) {
            assert_eq!(a.to_bits(), (2.0 * b).to_bits());
        }
        store.get_mut(p.w_up).data_mut().fill(0.0);
        assert!(run(&store, &p, &x).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn xia_blend() {
        let cfg = AdapterConfig {
            ratio_xia: 1,
            ..AdapterConfig::default()
        };
        let (mut store, p) = fresh(AdapterKind::Xia, 1, &cfg, 0);
        let alpha = p.alpha_raw.unwrap();
        // e* = ReLU(ReLU(ReLU(2·1)·1)·2) = 4
        store.get_mut(p.w_down).data_mut()[0] = 1.0;
        store.get_mut(p.w_hidden).data_mut()[0] = 1.0;
        store.get_mut(p.w_up).data_mut()[0] = 2.0;
        store.get_mut(alpha).data_mut()[0] = 0.5;
        let x = Tensor::new(&[1, 1], vec![2.0]).unwrap();
        assert_eq!(run(&store, &p, &x).data(), &[3.0]);

        store.get_mut(alpha).data_mut()[0] = 1.0;
        store.get_mut(p.w_up).data_mut()[0] = 0.0;
        assert_eq!(run(&store, &p, &x).data(), &[0.0]);

        store.get_mut(alpha).data_mut()[0] = 7.0;
        assert_eq!(p.alpha(&store), 1.0);
        clamp_alpha(&mut store, &p);
        assert_eq!(store.get(alpha).item(), 1.0);
    }

    #[test]
    fn kind_and_shape_errors() {
        let (store, p) = fresh(AdapterKind::Xsa, 8, &AdapterConfig::default(), 2);
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::zeros(&[1, 8]).unwrap());
        assert!(matches!(xaa_forward(&mut tape, &store, e, &p), Err(Error::Config(_))));
        let bad = tape.constant(Tensor::zeros(&[1, 4]).unwrap());
        assert!(matches!(xsa_forward(&mut tape, &store, bad, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = AdapterConfig::default();
        for kind in AdapterKind::ALL {
            let (mut store, p) = fresh(kind, 8, &cfg, 10);
            randomize(&mut store, &p, 11);
            if let Some(a) = p.alpha_raw {
                store.get_mut(a).data_mut()[0] = 0.4;
            }
            let x = init_gaussian(&[3, 8], 1.0, &mut Rng::new(12)).unwrap();
            let w = init_gaussian(&[3, 8], 1.0, &mut Rng::new(13)).unwrap();
            let err = check_param_gradients(&store, &p.ids(), 1e-5, None, |tape, s| {
                let e = tape.constant(x.clone());
                let y = adapter_forward(tape, s, e, &p)?;
                let wv = tape.constant(w.clone());
                let z = tape.mul(y, wv)?;
                Ok(tape.sum(z))
            })
            .unwrap();
            assert!(err < 1e-4, "{kind}: {err}");
        }
    }

    #[test]
    fn every_weight_receives_gradient() {
        let cfg = AdapterConfig::default();
        for kind in AdapterKind::ALL {
            let (mut store, p) = fresh(kind, 8, &cfg, 30);
            randomize(&mut store, &p, 31);
            if let Some(a) = p.alpha_raw {
                store.get_mut(a).data_mut()[0] = 0.3;
            }
            let x = init_gaussian(&[4, 8], 1.0, &mut Rng::new(32)).unwrap();
            let mut tape = Tape::new();
            let e = tape.constant(x);
            let y = adapter_forward(&mut tape, &store, e, &p).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let l = tape.sum(sq);
            tape.backward_into(l, &mut store).unwrap();
            for id in p.ids() {
                let g = store.get(id).grad().expect("gradient present");
                assert!(g.iter().any(|v| *v != 0.0), "{kind} {}", store.name(id));
            }
        }
    }
}
