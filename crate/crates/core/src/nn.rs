//! Transformer building blocks shared by the temporal and spatial encoders.

use rand::Rng;

use hemulab_tensor::{Bound, ParamId, ParamSet, Result, Scalar, Tape, TensorError, Var};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weight stored as `[d_in, d_out]` so that `y = x·W + b`.
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let weight = ps.trunc_normal(format!("{name}.weight"), &[d_in, d_out], INIT_STD, rng);
        let bias = bias.then(|| ps.zeros(format!("{name}.bias"), &[d_out]));
        Linear { weight, bias, d_in, d_out }
    }

    pub fn num_params(d_in: usize, d_out: usize, bias: bool) -> usize {
        d_in * d_out + if bias { d_out } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.weight])?;
        match self.bias {
            Some(b) => tape.add_broadcast(y, p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        LayerNorm {
            gamma: ps.ones(format!("{name}.gamma"), &[d]),
            beta: ps.zeros(format!("{name}.beta"), &[d]),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p[self.gamma], p[self.beta], LN_EPS)
    }
}

/// Multi-head self-attention parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

impl Attention {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, d: usize, heads: usize, bias: bool, rng: &mut R) -> Self {
        assert!(heads > 0 && d.is_multiple_of(heads), "d={d} not divisible by heads={heads}");
        Attention {
            q: Linear::new(ps, &format!("{name}.q"), d, d, bias, rng),
            k: Linear::new(ps, &format!("{name}.k"), d, d, bias, rng),
            v: Linear::new(ps, &format!("{name}.v"), d, d, bias, rng),
            o: Linear::new(ps, &format!("{name}.o"), d, d, bias, rng),
            heads,
            d,
        }
    }

    pub fn num_params(d: usize, bias: bool) -> usize {
        4 * Linear::num_params(d, d, bias)
    }
}

/// Per-head attention weights `softmax(QKᵀ/√dh)`, shape `[B, heads, S, S]`.
pub fn attention_weights<T: Scalar>(tape: &mut Tape<T>, p: &Bound, a: &Attention, z: Var) -> Result<(Var, Var)> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 3 || shape[2] != a.d {
        return Err(TensorError::ShapeMismatch { op: "msa", lhs: shape, rhs: vec![a.d] });
    }
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    if s == 0 {
        return Err(TensorError::InvalidArgument { op: "msa", reason: "empty sequence".into() });
    }
    let dh = d / a.heads;
    let split = |tape: &mut Tape<T>, x: Var, perm: &[usize]| -> Result<Var> {
        let x = tape.reshape(x, &[b, s, a.heads, dh])?;
        tape.permute(x, perm)
    };
    let q = a.q.forward(tape, p, z)?;
    let k = a.k.forward(tape, p, z)?;
    let v = a.v.forward(tape, p, z)?;
    let q = split(tape, q, &[0, 2, 1, 3])?;
    let kt = split(tape, k, &[0, 2, 3, 1])?;
    let v = split(tape, v, &[0, 2, 1, 3])?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let w = tape.softmax(scores, 3)?;
    Ok((w, v))
}

/// `z: [B, S, d] -> [B, S, d]`.
pub fn msa<T: Scalar>(tape: &mut Tape<T>, p: &Bound, a: &Attention, z: Var) -> Result<Var> {
    let (b, s) = (tape.shape(z)[0], tape.shape(z)[1]);
    let (w, v) = attention_weights(tape, p, a, z)?;
    let ctx = tape.matmul(w, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, s, a.d])?;
    a.o.forward(tape, p, ctx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, d: usize, hidden: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::new(ps, &format!("{name}.fc1"), d, hidden, bias, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, d_out, bias, rng),
        }
    }

    pub fn num_params(d: usize, hidden: usize, d_out: usize, bias: bool) -> usize {
        Linear::num_params(d, hidden, bias) + Linear::num_params(hidden, d_out, bias)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, p, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, p, h)
    }
}

/// Pre-norm encoder block: `u = z + MSA(LN(z))`, `z' = u + MLP(LN(u))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new<R: Rng>(ps: &mut ParamSet, name: &str, d: usize, heads: usize, mlp_hidden: usize, bias: bool, rng: &mut R) -> Self {
        EncoderBlock {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), d),
            attn: Attention::new(ps, &format!("{name}.attn"), d, heads, bias, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), d),
            mlp: Mlp::new(ps, &format!("{name}.mlp"), d, mlp_hidden, d, bias, rng),
        }
    }

    pub fn num_params(d: usize, mlp_hidden: usize, bias: bool) -> usize {
        4 * d + Attention::num_params(d, bias) + Mlp::num_params(d, mlp_hidden, d, bias)
    }

    /// Output projections of both residual branches; zeroing them makes the
    /// block the identity.
    pub fn branch_outputs(&self) -> Vec<ParamId> {
        let mut v = vec![self.attn.o.weight, self.mlp.fc2.weight];
        v.extend(self.attn.o.bias);
        v.extend(self.mlp.fc2.bias);
        v
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, p, z)?;
        let h = msa(tape, p, &self.attn, h)?;
        let u = tape.add(z, h)?;
        let h = self.ln2.forward(tape, p, u)?;
        let h = self.mlp.forward(tape, p, h)?;
        tape.add(u, h)
    }
}

/// Zeroes every listed parameter in place.
pub fn zero_params(ps: &mut ParamSet, ids: &[ParamId]) {
    for &id in ids {
        ps.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}
