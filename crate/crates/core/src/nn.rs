//! Small layer helpers on top of the tape: affine maps, two-layer MLPs and
//! dropout.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::{NumericsError, ParamId, ParamStore, Tape, Tensor, Var};

/// Epsilon used by every layer normalization in the model.
pub const LN_EPS: f64 = 1e-5;

/// Per-pass settings: dropout is active only when an RNG is supplied.
pub struct Pass<'r> {
    pub dropout: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl Pass<'_> {
    pub fn eval() -> Self {
        Pass {
            dropout: 0.0,
            rng: None,
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some() && self.dropout > 0.0
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - p)`.
    pub fn dropout(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var, NumericsError> {
        let p = self.dropout;
        let Some(rng) = self.rng.as_deref_mut().filter(|_| p > 0.0) else {
            return Ok(x);
        };
        let shape = tape.value(x).shape().to_vec();
        let n = tape.value(x).len();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        tape.mul_const(x, &Tensor::new(shape, mask)?)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_glorot(format!("{name}.w"), fan_in, fan_out, rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.b"), 1, fan_out));
        Self { w, b }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var, NumericsError> {
        let w = tape.param(self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// `relu(x W1 + b1) -> dropout -> W2 + b2`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        hidden: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.0"), fan_in, hidden, true, rng),
            l2: Linear::new(store, &format!("{name}.1"), hidden, fan_out, true, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, pass: &mut Pass<'_>) -> Result<Var, NumericsError> {
        let h = self.l1.forward(tape, x)?;
        let h = tape.relu(h);
        let h = pass.dropout(tape, h)?;
        self.l2.forward(tape, h)
    }
}

/// Query/key/value/output projections of one attention block. The output
/// projection has no bias so an empty neighborhood contributes exactly zero.
#[derive(Clone, Copy, Debug)]
pub struct AttentionProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttentionProj {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_query: usize,
        d_kv: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_query, d, false, rng),
            k: Linear::new(store, &format!("{name}.k"), d_kv, d, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d_kv, d, false, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, false, rng),
        }
    }

    /// Attention of `queries` over `kv` rows along `neighbors`, projected
    /// by the output matrix. `None` when no query has any neighbor, in which
    /// case the block contributes nothing.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        queries: Var,
        kv: Var,
        neighbors: Vec<Vec<usize>>,
        heads: usize,
    ) -> Result<Option<Var>, NumericsError> {
        if neighbors.iter().all(Vec::is_empty) {
            return Ok(None);
        }
        let q = self.q.forward(tape, queries)?;
        let k = self.k.forward(tape, kv)?;
        let v = self.v.forward(tape, kv)?;
        let a = tape.attention(q, k, v, neighbors, heads)?;
        self.o.forward(tape, a).map(Some)
    }
}
