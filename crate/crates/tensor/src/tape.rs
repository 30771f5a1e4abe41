//! Reverse-mode gradient tape.
//!
//! Every differentiable op appends a node holding its output value and the
//! indices of its inputs. Node indices are therefore a topological order and
//! `backward` is a single reverse sweep.

use crate::error::{invalid, Result, TensorError};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::{inverse_perm, permute_data, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// `(lhs batch, rhs batch)` for each output batch entry.
    pairs: Vec<(usize, usize)>,
    /// rhs has no batch dims and lhs batches are contiguous: one big gemm.
    shared_rhs: bool,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, plan: MatmulPlan },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddSuffix { a: usize, b: usize },
    Scale { a: usize, c: T },
    Square { a: usize },
    Gelu { a: usize },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<T>, rstd: Vec<T> },
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Concat { parts: Vec<usize>, outer: usize },
    Narrow { a: usize, outer: usize, len: usize, start: usize, count: usize, inner: usize },
    BroadcastLeading { a: usize, reps: usize },
    Sum { a: usize },
    Mean { a: usize },
    MeanAxis { a: usize, outer: usize, len: usize, inner: usize },
    Mse { pred: usize, target: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered record of executed operations.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf; gradients flow into it iff `requires_grad`.
    pub fn leaf(&mut self, mut value: Tensor<T>, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, i: usize) -> &[T] {
        self.nodes[i].value.data()
    }

    // ------------------------------------------------------------------ ops

    /// Batched matrix product `[..., m, k] · [..., k, n] -> [..., m, n]`.
    /// Leading batch extents broadcast.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut out_batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(mismatch());
            }
            out_batch.push(x.max(y));
        }
        let nbatch: usize = out_batch.iter().product();
        let stride_of = |p: &[usize]| {
            let st = crate::tensor::strides(p);
            st.iter()
                .zip(p)
                .map(|(&s, &e)| if e == 1 { 0 } else { s })
                .collect::<Vec<_>>()
        };
        let (sta, stb) = (stride_of(&pa), stride_of(&pb));
        let out_strides = crate::tensor::strides(&out_batch);
        let pairs: Vec<(usize, usize)> = (0..nbatch)
            .map(|o| {
                let (mut ia, mut ib, mut rem) = (0, 0, o);
                for d in 0..rank {
                    let idx = rem / out_strides[d];
                    rem %= out_strides[d];
                    ia += idx * sta[d];
                    ib += idx * stb[d];
                }
                (ia, ib)
            })
            .collect();
        let shared_rhs = bb.iter().product::<usize>() == 1 && pa == out_batch;
        let plan = MatmulPlan {
            m,
            k,
            n,
            pairs,
            shared_rhs,
        };
        let mut out = vec![T::zero(); nbatch * m * n];
        {
            let (ad, bd) = (self.data(a.0), self.data(b.0));
            if plan.shared_rhs {
                gemm(
                    nbatch * m,
                    k,
                    n,
                    ad,
                    MatView::row_major(0, k),
                    bd,
                    MatView::row_major(0, n),
                    T::zero(),
                    &mut out,
                    MatView::row_major(0, n),
                );
            } else {
                for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
                    gemm(
                        m,
                        k,
                        n,
                        ad,
                        MatView::row_major(ia * m * k, k),
                        bd,
                        MatView::row_major(ib * k * n, n),
                        T::zero(),
                        &mut out,
                        MatView::row_major(o * m * n, n),
                    );
                }
            }
        }
        let mut shape = out_batch;
        shape.extend([m, n]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, plan }, &[a.0, b.0]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let data = self.data(a.0).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape
    /// (bias vectors, positional embeddings).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bn = self.value(b).numel().max(1);
        let bd = self.data(b.0);
        let data = self
            .data(a.0)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % bn])
            .collect();
        let v = Tensor::new(self.shape(a), data)?;
        Ok(self.push(v, Op::AddSuffix { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale { a: a.0, c }, &[a.0])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x * x);
        self.push(v, Op::Square { a: a.0 }, &[a.0])
    }

    /// Exact erf-based GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.map(a, gelu_scalar);
        self.push(v, Op::Gelu { a: a.0 }, &[a.0])
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(invalid("softmax", format!("axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.data(a.0);
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(x[base + l * inner]);
                }
                let mut s = T::zero();
                for l in 0..len {
                    let e = (x[base + l * inner] - mx).exp();
                    y[base + l * inner] = e;
                    s += e;
                }
                let inv = T::one() / s;
                for l in 0..len {
                    y[base + l * inner] *= inv;
                }
            }
        }
        let v = Tensor::new(&shape, y)?;
        Ok(self.push(v, Op::Softmax { a: a.0, outer, len, inner }, &[a.0]))
    }

    /// Layer normalization over the last axis followed by `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(invalid("layer_norm", "normalized extent must be positive"));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::of(eps);
        let dn = T::of(d as f64);
        let xd = self.data(x.0);
        let (g, b) = (self.data(gamma.0), self.data(beta.0));
        let rows = xd.len() / d;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = g[j] * h + b[j];
            }
        }
        let v = Tensor::new(&shape, y)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape { a: a.0 }, &[a.0]))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let data = permute_data(self.data(a.0), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            v,
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
            &[a.0],
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p.0)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::new(&shape, out)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            v,
            Op::Concat {
                parts: idx.clone(),
                outer,
            },
            &idx,
        ))
    }

    /// Slice `start..start+count` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, count: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + count > shape[axis] {
            return Err(invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + count),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(a.0);
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            let s = (o * len + start) * inner;
            out.extend_from_slice(&src[s..s + count * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = count;
        let v = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            v,
            Op::Narrow {
                a: a.0,
                outer,
                len,
                start,
                count,
                inner,
            },
            &[a.0],
        ))
    }

    /// Repeats `a` along new leading axes: shape `lead ++ a.shape`.
    pub fn broadcast_leading(&mut self, a: Var, lead: &[usize]) -> Var {
        let reps: usize = lead.iter().product();
        let src = self.data(a.0);
        let mut out = Vec::with_capacity(src.len() * reps);
        for _ in 0..reps {
            out.extend_from_slice(src);
        }
        let mut shape = lead.to_vec();
        shape.extend_from_slice(self.shape(a));
        let v = Tensor::new(&shape, out).expect("broadcast shape");
        self.push(v, Op::BroadcastLeading { a: a.0, reps }, &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a.0).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.data(a.0).iter().copied().sum::<T>() / T::of(n as f64);
        self.push(Tensor::scalar(s), Op::Mean { a: a.0 }, &[a.0])
    }

    /// Mean over one axis; the axis is removed from the output shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(invalid("mean_axis", format!("axis {axis} invalid for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(a.0);
        let inv = T::one() / T::of(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let v = Tensor::new(&out_shape, out)?;
        Ok(self.push(v, Op::MeanAxis { a: a.0, outer, len, inner }, &[a.0]))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let n = self.value(pred).numel().max(1);
        let s = self
            .data(pred.0)
            .iter()
            .zip(self.data(target.0))
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / T::of(n as f64);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Mse {
                pred: pred.0,
                target: target.0,
            },
            &[pred.0, target.0],
        ))
    }

    /// 2-D convolution, stride 1, zero padding `pad` on every side.
    /// `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (batch, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(invalid("conv2d", "kernel larger than padded input"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeom {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            pad,
            ho: h + 2 * pad - kh + 1,
            wo: wd + 2 * pad - kw + 1,
        };
        let hw = geom.ho * geom.wo;
        let kk = cin * kh * kw;
        let mut out = vec![T::zero(); batch * cout * hw];
        let mut cols = vec![T::zero(); kk * hw];
        {
            let xd = self.data(x.0);
            let wdata = self.data(w.0);
            for bi in 0..batch {
                im2col(&xd[bi * cin * h * wd..(bi + 1) * cin * h * wd], &geom, &mut cols);
                gemm(
                    cout,
                    kk,
                    hw,
                    wdata,
                    MatView::row_major(0, kk),
                    &cols,
                    MatView::row_major(0, hw),
                    T::zero(),
                    &mut out,
                    MatView::row_major(bi * cout * hw, hw),
                );
                if let Some(b) = b {
                    let bd = self.data(b.0);
                    for c in 0..cout {
                        for v in &mut out[(bi * cout + c) * hw..(bi * cout + c + 1) * hw] {
                            *v += bd[c];
                        }
                    }
                }
            }
        }
        let v = Tensor::new(&[batch, cout, geom.ho, geom.wo], out)?;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        Ok(self.push(
            v,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                geom,
            },
            &inputs,
        ))
    }

    // ------------------------------------------------------------ backward

    /// Reverse sweep from a scalar `loss`. Gradients accumulate (`+=`) where
    /// a value fans out to several consumers.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |j: usize| self.nodes[j].needs_grad;
        let numel = |j: usize| self.nodes[j].value.numel();
        fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], j: usize, len: usize) -> &mut Vec<T> {
            grads[j].get_or_insert_with(|| vec![T::zero(); len])
        }
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, plan } => {
                let (a, b) = (*a, *b);
                let MatmulPlan { m, k, n, .. } = *plan;
                let (ad, bd) = (self.data(a), self.data(b));
                if needs(a) {
                    let ga = slot(grads, a, numel(a));
                    if plan.shared_rhs {
                        let rows = plan.pairs.len() * m;
                        gemm(rows, n, k, g, MatView::row_major(0, n), bd, MatView::transposed(0, n), T::one(), ga, MatView::row_major(0, k));
                    } else {
                        for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
                            gemm(
                                m,
                                n,
                                k,
                                g,
                                MatView::row_major(o * m * n, n),
                                bd,
                                MatView::transposed(ib * k * n, n),
                                T::one(),
                                ga,
                                MatView::row_major(ia * m * k, k),
                            );
                        }
                    }
                }
                if needs(b) {
                    let gb = slot(grads, b, numel(b));
                    if plan.shared_rhs {
                        let rows = plan.pairs.len() * m;
                        gemm(k, rows, n, ad, MatView::transposed(0, k), g, MatView::row_major(0, n), T::one(), gb, MatView::row_major(0, n));
                    } else {
                        for (o, &(ia, ib)) in plan.pairs.iter().enumerate() {
                            gemm(
                                k,
                                m,
                                n,
                                ad,
                                MatView::transposed(ia * m * k, k),
                                g,
                                MatView::row_major(o * m * n, n),
                                T::one(),
                                gb,
                                MatView::row_major(ib * k * n, n),
                            );
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for j in [*a, *b] {
                    if needs(j) {
                        add_into(slot(grads, j, g.len()), g);
                    }
                }
            }
            Op::Sub { a, b } => {
                if needs(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if needs(*b) {
                    let gb = slot(grads, *b, g.len());
                    for (d, &v) in gb.iter_mut().zip(g) {
                        *d -= v;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if needs(a) {
                    let bd = self.data(b);
                    let ga = slot(grads, a, g.len());
                    for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if needs(b) {
                    let ad = self.data(a);
                    let gb = slot(grads, b, g.len());
                    for ((d, &gv), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::AddSuffix { a, b } => {
                if needs(*a) {
                    add_into(slot(grads, *a, g.len()), g);
                }
                if needs(*b) {
                    let bn = numel(*b).max(1);
                    let gb = slot(grads, *b, bn);
                    for chunk in g.chunks(bn) {
                        add_into(gb, chunk);
                    }
                }
            }
            Op::Scale { a, c } => {
                let ga = slot(grads, *a, g.len());
                for (d, &v) in ga.iter_mut().zip(g) {
                    *d += v * *c;
                }
            }
            Op::Square { a } => {
                let ad = self.data(*a);
                let ga = slot(grads, *a, g.len());
                let two = T::of(2.0);
                for ((d, &v), &x) in ga.iter_mut().zip(g).zip(ad) {
                    *d += two * x * v;
                }
            }
            Op::Gelu { a } => {
                let ad = self.data(*a);
                let ga = slot(grads, *a, g.len());
                for ((d, &v), &x) in ga.iter_mut().zip(g).zip(ad) {
                    *d += v * gelu_grad(x);
                }
            }
            Op::Softmax { a, outer, len, inner } => {
                let y = self.nodes[i].value.data();
                let ga = slot(grads, *a, g.len());
                for o in 0..*outer {
                    for q in 0..*inner {
                        let base = o * len * inner + q;
                        let mut dot = T::zero();
                        for l in 0..*len {
                            dot += g[base + l * inner] * y[base + l * inner];
                        }
                        for l in 0..*len {
                            let idx = base + l * inner;
                            ga[idx] += y[idx] * (g[idx] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.nodes[*gamma].value.numel();
                let rows = g.len() / d;
                let gd = self.data(*gamma);
                if needs(*gamma) {
                    let gg = slot(grads, *gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if needs(*beta) {
                    let gb = slot(grads, *beta, d);
                    for r in 0..rows {
                        add_into(gb, &g[r * d..(r + 1) * d]);
                    }
                }
                if needs(*x) {
                    let gx = slot(grads, *x, g.len());
                    let dn = T::of(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let v = g[r * d + j] * gd[j];
                            dxhat[j] = v;
                            s1 += v;
                            s2 += v * xhat[r * d + j];
                        }
                        let (m1, m2) = (s1 / dn, s2 / dn);
                        for j in 0..d {
                            gx[r * d + j] += rstd[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::Reshape { a } => add_into(slot(grads, *a, g.len()), g),
            Op::Permute { a, perm } => {
                let out_shape = self.nodes[i].value.shape();
                let back = permute_data(g, out_shape, &inverse_perm(perm));
                add_into(slot(grads, *a, g.len()), &back);
            }
            Op::Concat { parts, outer } => {
                let mut offset = 0;
                let lens: Vec<usize> = parts.iter().map(|&p| numel(p) / outer).collect();
                let total: usize = lens.iter().sum();
                for (&p, &chunk) in parts.iter().zip(&lens) {
                    if needs(p) {
                        let gp = slot(grads, p, chunk * outer);
                        for o in 0..*outer {
                            add_into(&mut gp[o * chunk..(o + 1) * chunk], &g[o * total + offset..o * total + offset + chunk]);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Narrow { a, outer, len, start, count, inner } => {
                let ga = slot(grads, *a, outer * len * inner);
                for o in 0..*outer {
                    let s = (o * len + start) * inner;
                    add_into(&mut ga[s..s + count * inner], &g[o * count * inner..(o + 1) * count * inner]);
                }
            }
            Op::BroadcastLeading { a, reps } => {
                let n = numel(*a);
                let ga = slot(grads, *a, n);
                for r in 0..*reps {
                    add_into(ga, &g[r * n..(r + 1) * n]);
                }
            }
            Op::Sum { a } => {
                let ga = slot(grads, *a, numel(*a));
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
            Op::Mean { a } => {
                let n = numel(*a);
                let v = g[0] / T::of(n.max(1) as f64);
                for d in slot(grads, *a, n).iter_mut() {
                    *d += v;
                }
            }
            Op::MeanAxis { a, outer, len, inner } => {
                let inv = T::one() / T::of(*len as f64);
                let ga = slot(grads, *a, outer * len * inner);
                for o in 0..*outer {
                    for l in 0..*len {
                        let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, &v) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += v * inv;
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                let n = numel(*pred);
                let c = T::of(2.0) * g[0] / T::of(n.max(1) as f64);
                let diff: Vec<T> = self
                    .data(*pred)
                    .iter()
                    .zip(self.data(*target))
                    .map(|(&p, &t)| c * (p - t))
                    .collect();
                if needs(*pred) {
                    add_into(slot(grads, *pred, n), &diff);
                }
                if needs(*target) {
                    let gt = slot(grads, *target, n);
                    for (d, &v) in gt.iter_mut().zip(&diff) {
                        *d -= v;
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let hw = geom.ho * geom.wo;
                let kk = geom.cin * geom.kh * geom.kw;
                let xlen = geom.cin * geom.h * geom.w;
                let xd = self.data(*x);
                let wd = self.data(*w);
                let mut cols = vec![T::zero(); kk * hw];
                let mut dcols = vec![T::zero(); kk * hw];
                for bi in 0..geom.batch {
                    let gout = &g[bi * geom.cout * hw..(bi + 1) * geom.cout * hw];
                    if needs(*w) {
                        im2col(&xd[bi * xlen..(bi + 1) * xlen], geom, &mut cols);
                        let gw = slot(grads, *w, geom.cout * kk);
                        gemm(geom.cout, hw, kk, gout, MatView::row_major(0, hw), &cols, MatView::transposed(0, hw), T::one(), gw, MatView::row_major(0, kk));
                    }
                    if needs(*x) {
                        gemm(kk, geom.cout, hw, wd, MatView::transposed(0, kk), gout, MatView::row_major(0, hw), T::zero(), &mut dcols, MatView::row_major(0, hw));
                        let gx = slot(grads, *x, geom.batch * xlen);
                        col2im_add(&dcols, geom, &mut gx[bi * xlen..(bi + 1) * xlen]);
                    }
                    if let Some(b) = b {
                        if needs(*b) {
                            let gb = slot(grads, *b, geom.cout);
                            for c in 0..geom.cout {
                                gb[c] += gout[c * hw..(c + 1) * hw].iter().copied().sum::<T>();
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            x[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
