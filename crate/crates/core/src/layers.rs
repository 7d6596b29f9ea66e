//! Parameter bundles for the building blocks shared by both encoders.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{init_gaussian, Tensor};

pub(crate) fn gaussian_param(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    std: f64,
    seed: u64,
) -> Result<ParamId> {
    let mut rng = Rng::derive(seed, &name);
    let t = init_gaussian(shape, std, &mut rng)?;
    store.insert(name, t)
}

pub(crate) fn const_param(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    value: f64,
) -> Result<ParamId> {
    store.insert(name, Tensor::filled(shape, value)?)
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: const_param(store, format!("{prefix}.gamma"), &[d], 1.0)?,
            beta: const_param(store, format!("{prefix}.beta"), &[d], 0.0)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

#[derive(Clone, Debug)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl LinearParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            weight: gaussian_param(store, format!("{prefix}.weight"), &[fan_in, fan_out], std, seed)?,
            bias: Some(const_param(store, format!("{prefix}.bias"), &[fan_out], 0.0)?),
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Query/key/value/output projections of a multi-head self-attention layer.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub o: LinearParams,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::config(format!("width {d} not divisible by {heads} heads")));
        }
        Ok(Self {
            q: LinearParams::new(store, &format!("{prefix}.q"), d, d, std, seed)?,
            k: LinearParams::new(store, &format!("{prefix}.k"), d, d, std, seed)?,
            v: LinearParams::new(store, &format!("{prefix}.v"), d, d, std, seed)?,
            o: LinearParams::new(store, &format!("{prefix}.o"), d, d, std, seed)?,
            heads,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o]
            .iter()
            .flat_map(|l| l.ids())
            .collect()
    }
}

/// Multi-head self-attention over `x`, a stack of independent sequences of
/// `seq_len` tokens each: `softmax(QKᵀ/√d_h)V` per head, heads concatenated,
/// then the output projection.
pub fn mhsa(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    p: &AttentionParams,
    seq_len: usize,
) -> Result<Var> {
    let d = tape.value(x).cols();
    if !d.is_multiple_of(p.heads) {
        return Err(Error::config(format!("width {d} not divisible by {} heads", p.heads)));
    }
    let q = p.q.forward(tape, store, x)?;
    let k = p.k.forward(tape, store, x)?;
    let v = p.v.forward(tape, store, x)?;
    let a = tape.attention(q, k, v, seq_len, p.heads)?;
    p.o.forward(tape, store, a)
}

/// Two-layer feed-forward `d → hidden → d` with GeLU in between.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl MlpParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        std: f64,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            fc1: LinearParams::new(store, &format!("{prefix}.fc1"), d, hidden, std, seed)?,
            fc2: LinearParams::new(store, &format!("{prefix}.fc2"), hidden, d, std, seed)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.fc1.ids().into_iter().chain(self.fc2.ids()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, rel_error};

    fn attention_store(d: usize, heads: usize, std: f64, seed: u64) -> (ParamStore, AttentionParams) {
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "attn", d, heads, std, seed).unwrap();
        (store, p)
    }

    #[test]
    fn single_token_is_projection_of_value() {
        let (store, p) = attention_store(4, 2, 0.5, 3);
        let x0 = init_gaussian(&[1, 4], 1.0, &mut Rng::new(8)).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let y = mhsa(&mut tape, &store, x, &p, 1).unwrap();
        let mut t2 = Tape::new();
        let x2 = t2.constant(x0);
        let v = p.v.forward(&mut t2, &store, x2).unwrap();
        let o = p.o.forward(&mut t2, &store, v).unwrap();
        assert!(tape.value(y).max_abs_diff(t2.value(o)) < 1e-15);
    }

    #[test]
    fn zero_weights_zero_output() {
        let (store, p) = attention_store(4, 2, 0.0, 3);
        let mut tape = Tape::new();
        let x = tape.constant(init_gaussian(&[3, 4], 1.0, &mut Rng::new(1)).unwrap());
        let y = mhsa(&mut tape, &store, x, &p, 3).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new();
        assert!(matches!(
            AttentionParams::new(&mut store, "a", 6, 4, 0.1, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mhsa_gradcheck_two_tokens() {
        let (mut store, p) = attention_store(4, 1, 0.5, 21);
        for id in p.ids() {
            store.set_trainable(id, true);
        }
        let x0 = init_gaussian(&[2, 4], 1.0, &mut Rng::new(4)).unwrap();
        let w = init_gaussian(&[2, 4], 1.0, &mut Rng::new(5)).unwrap();
        let eval = |store: &ParamStore, x0: &Tensor| {
            let mut tape = Tape::new();
            let x = tape.input(x0.clone());
            let y = mhsa(&mut tape, store, x, &p, 2).unwrap();
            let wv = tape.constant(w.clone());
            let z = tape.mul(y, wv).unwrap();
            let l = tape.sum(z);
            (tape, x, l)
        };
        let (mut tape, x, l) = eval(&store, &x0);
        tape.backward_into(l, &mut store).unwrap();
        let gx = Tensor::new(&[2, 4], tape.grad(x).unwrap().to_vec()).unwrap();
        let nx = finite_diff_grad(|x| { let (t, _, l) = eval(&store, x); t.value(l).item() }, &x0, 1e-5).unwrap();
        assert!(rel_error(&gx, &nx) < 1e-5);
        for id in p.ids() {
            let analytic = Tensor::new(store.get(id).shape(), store.get(id).grad().unwrap().to_vec()).unwrap();
            let base = store.get(id).clone();
            let numeric = finite_diff_grad(
                |w| {
                    let mut s = store.clone();
                    s.get_mut(id).data_mut().copy_from_slice(w.data());
                    let (t, _, l) = eval(&s, &x0);
                    t.value(l).item()
                },
                &base,
                1e-5,
            )
            .unwrap();
            assert!(rel_error(&analytic, &numeric) < 1e-5, "{}", store.name(id));
        }
    }
}
