//! Temporo-spatial vision transformer for per-pixel regression.
//!
//! Input windows `[B, T, H, W, C]` are cut into non-overlapping
//! `patch_t × patch_h × patch_w` patches. Each spatial location's token
//! sequence runs through the temporal encoder behind a learnable class
//! token; the class outputs of all locations form the spatial sequence, and a
//! small MLP head expands every spatial token back into its pixel patch.

use serde::{Deserialize, Serialize};

use hemulab_tensor::rng::substream;
use hemulab_tensor::{Bound, ParamId, ParamSet, Result as TResult, Scalar, Tape, Tensor, TensorError, Var};

use crate::nn::{EncoderBlock, Linear, Mlp, INIT_STD};
use crate::{parallel, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsvitConfig {
    /// Context length in time steps.
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub d: usize,
    pub l_t: usize,
    pub l_s: usize,
    pub patch_t: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Class tokens; only 1 is supported.
    pub k: usize,
    pub heads: usize,
    /// Encoder MLP hidden width as a multiple of `d`.
    pub mlp_ratio: usize,
    pub bias: bool,
}

impl Default for TsvitConfig {
    fn default() -> Self {
        TsvitConfig {
            t: 8,
            h: 48,
            w: 48,
            c: 10,
            d: 128,
            l_t: 8,
            l_s: 4,
            patch_t: 1,
            patch_h: 3,
            patch_w: 3,
            k: 1,
            heads: 4,
            mlp_ratio: 4,
            bias: true,
        }
    }
}

impl TsvitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let dims = [self.t, self.h, self.w, self.c, self.d, self.patch_t, self.patch_h, self.patch_w, self.heads, self.mlp_ratio];
        if dims.contains(&0) {
            return bad(format!("all tsvit extents must be positive: {self:?}"));
        }
        if self.k != 1 {
            return bad(format!("k={} unsupported; exactly one class token", self.k));
        }
        if !self.t.is_multiple_of(self.patch_t) || !self.h.is_multiple_of(self.patch_h) || !self.w.is_multiple_of(self.patch_w) {
            return bad(format!(
                "window {}x{}x{} not divisible by patch {}x{}x{}",
                self.t, self.h, self.w, self.patch_t, self.patch_h, self.patch_w
            ));
        }
        if !self.d.is_multiple_of(self.heads) {
            return bad(format!("d={} not divisible by heads={}", self.d, self.heads));
        }
        Ok(())
    }

    pub fn n_t(&self) -> usize {
        self.t / self.patch_t
    }
    pub fn n_h(&self) -> usize {
        self.h / self.patch_h
    }
    pub fn n_w(&self) -> usize {
        self.w / self.patch_w
    }
    pub fn n_spatial(&self) -> usize {
        self.n_h() * self.n_w()
    }
    pub fn patch_volume(&self) -> usize {
        self.patch_t * self.patch_h * self.patch_w * self.c
    }
    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.d
    }
}

/// Closed-form number of learnable scalars.
pub fn param_count(cfg: &TsvitConfig) -> usize {
    let d = cfg.d;
    let block = EncoderBlock::num_params(d, cfg.mlp_hidden(), cfg.bias);
    Linear::num_params(cfg.patch_volume(), d, cfg.bias)
        + cfg.k * d
        + cfg.n_t() * d
        + cfg.l_t * block
        + cfg.n_spatial() * d
        + cfg.l_s * block
        + Mlp::num_params(d, d, cfg.patch_h * cfg.patch_w, cfg.bias)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TsvitLayout {
    pub proj: Linear,
    pub cls: ParamId,
    pub pos_t: ParamId,
    pub temporal: Vec<EncoderBlock>,
    pub pos_s: ParamId,
    pub spatial: Vec<EncoderBlock>,
    pub head: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tsvit {
    pub cfg: TsvitConfig,
    pub params: ParamSet,
    pub layout: TsvitLayout,
}

impl Tsvit {
    pub fn new(cfg: TsvitConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(seed, "tsvit/init");
        let mut ps = ParamSet::new();
        let d = cfg.d;
        let proj = Linear::new(&mut ps, "token_proj", cfg.patch_volume(), d, cfg.bias, &mut rng);
        let cls = ps.trunc_normal("temporal.cls", &[cfg.k, d], INIT_STD, &mut rng);
        let pos_t = ps.trunc_normal("temporal.pos", &[cfg.n_t(), d], INIT_STD, &mut rng);
        let temporal = (0..cfg.l_t)
            .map(|i| EncoderBlock::new(&mut ps, &format!("temporal.block{i}"), d, cfg.heads, cfg.mlp_hidden(), cfg.bias, &mut rng))
            .collect();
        let pos_s = ps.trunc_normal("spatial.pos", &[cfg.n_spatial(), d], INIT_STD, &mut rng);
        let spatial = (0..cfg.l_s)
            .map(|i| EncoderBlock::new(&mut ps, &format!("spatial.block{i}"), d, cfg.heads, cfg.mlp_hidden(), cfg.bias, &mut rng))
            .collect();
        let head = Mlp::new(&mut ps, "head", d, d, cfg.patch_h * cfg.patch_w, cfg.bias, &mut rng);
        let layout = TsvitLayout { proj, cls, pos_t, temporal, pos_s, spatial, head };
        Ok(Tsvit { cfg, params: ps, layout })
    }

    /// `[B, T, H, W, C] -> [B·N_H·N_W, N_T, d]`, spatial locations row-major.
    pub fn tokenize<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> TResult<Var> {
        let c = &self.cfg;
        let s = tape.shape(x).to_vec();
        if s.len() != 5 || s[1..] != [c.t, c.h, c.w, c.c] {
            return Err(TensorError::ShapeMismatch { op: "tokenize", lhs: s, rhs: vec![c.t, c.h, c.w, c.c] });
        }
        let b = s[0];
        let x = tape.reshape(x, &[b, c.n_t(), c.patch_t, c.n_h(), c.patch_h, c.n_w(), c.patch_w, c.c])?;
        let x = tape.permute(x, &[0, 3, 5, 1, 2, 4, 6, 7])?;
        let x = tape.reshape(x, &[b * c.n_spatial(), c.n_t(), c.patch_volume()])?;
        self.layout.proj.forward(tape, p, x)
    }

    /// `[N, N_T, d] -> [N, 1, d]`: class-token read-out of the temporal encoder.
    pub fn temporal_encode<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, tokens: Var) -> TResult<Var> {
        let s = tape.shape(tokens).to_vec();
        let (n_t, d) = (self.cfg.n_t(), self.cfg.d);
        if s.len() != 3 || s[1] != n_t || s[2] != d || s[0] == 0 {
            return Err(TensorError::ShapeMismatch { op: "temporal_encode", lhs: s, rhs: vec![n_t, d] });
        }
        let z = tape.add_broadcast(tokens, p[self.layout.pos_t])?;
        let cls = tape.broadcast_leading(p[self.layout.cls], &[s[0]]);
        let mut z = tape.concat(&[cls, z], 1)?;
        for block in &self.layout.temporal {
            z = block.forward(tape, p, z)?;
        }
        tape.narrow(z, 1, 0, self.cfg.k)
    }

    /// `[B, N_H·N_W, d] -> [B, N_H·N_W, d]`; no extra token.
    pub fn spatial_encode<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, grid: Var) -> TResult<Var> {
        let s = tape.shape(grid).to_vec();
        let (n, d) = (self.cfg.n_spatial(), self.cfg.d);
        if s.len() != 3 || s[1] != n || s[2] != d {
            return Err(TensorError::ShapeMismatch { op: "spatial_encode", lhs: s, rhs: vec![n, d] });
        }
        let mut z = tape.add_broadcast(grid, p[self.layout.pos_s])?;
        for block in &self.layout.spatial {
            z = block.forward(tape, p, z)?;
        }
        Ok(z)
    }

    /// `[B, N_H·N_W, d] -> [B, H, W]`; patch (i, j) fills rows
    /// `i·patch_h..` and columns `j·patch_w..`.
    pub fn regression_head<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, z: Var) -> TResult<Var> {
        let c = &self.cfg;
        let b = tape.shape(z)[0];
        let y = self.layout.head.forward(tape, p, z)?;
        let y = tape.reshape(y, &[b, c.n_h(), c.n_w(), c.patch_h, c.patch_w])?;
        let y = tape.permute(y, &[0, 1, 3, 2, 4])?;
        tape.reshape(y, &[b, c.h, c.w])
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> TResult<Var> {
        let b = tape.shape(x).first().copied().unwrap_or(0);
        let tokens = self.tokenize(tape, p, x)?;
        let cls = self.temporal_encode(tape, p, tokens)?;
        let grid = tape.reshape(cls, &[b, self.cfg.n_spatial(), self.cfg.d])?;
        let z = self.spatial_encode(tape, p, grid)?;
        self.regression_head(tape, p, z)
    }

    /// Inference on `[B, T, H, W, C]` or a single `[T, H, W, C]` window.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let single = x.ndim() == 4;
        let x = if single {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            x.clone().reshape(&s)?
        } else {
            x.clone()
        };
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape);
        let xv = tape.constant(x);
        let y = self.forward(&mut tape, &p, xv)?;
        let out = tape.value(y).clone();
        Ok(if single { out.reshape(&[self.cfg.h, self.cfg.w])? } else { out })
    }
}

/// Tile origins along one axis: stride `tile`, plus an edge-aligned last tile
/// when `full` is not a multiple of `tile`.
pub fn tile_origins(full: usize, tile: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..full / tile).map(|i| i * tile).collect();
    if !full.is_multiple_of(tile) {
        v.push(full - tile);
    }
    v
}

/// For every pixel of a `full_h × full_w` image, the index of the tile whose
/// prediction it takes. Later (edge-aligned) tiles win overlaps.
pub fn tile_ownership(full_h: usize, full_w: usize, tile_h: usize, tile_w: usize) -> (Vec<(usize, usize)>, Vec<usize>) {
    let (rs, cs) = (tile_origins(full_h, tile_h), tile_origins(full_w, tile_w));
    let tiles: Vec<(usize, usize)> = rs.iter().flat_map(|&r| cs.iter().map(move |&c| (r, c))).collect();
    let mut owner = vec![usize::MAX; full_h * full_w];
    for (i, &(r0, c0)) in tiles.iter().enumerate() {
        for r in r0..r0 + tile_h {
            owner[r * full_w + c0..r * full_w + c0 + tile_w].fill(i);
        }
    }
    (tiles, owner)
}

/// Cuts `[T, H_full, W_full, C]` into tiles, maps batches of tiles
/// `[n, T, tile_h, tile_w, C] -> [n, tile_h, tile_w]` and stitches the result.
pub fn tile_apply<F>(x_full: &Tensor, tile_h: usize, tile_w: usize, batch: usize, f: F) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    let s = x_full.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("tile input must be [T,H,W,C], got {s:?}")));
    }
    let (t, hf, wf, c) = (s[0], s[1], s[2], s[3]);
    if hf < tile_h || wf < tile_w {
        return Err(Error::Shape(format!("input {hf}x{wf} smaller than tile {tile_h}x{tile_w}")));
    }
    let (tiles, owner) = tile_ownership(hf, wf, tile_h, tile_w);
    let src = x_full.data();
    let cut = |&(r0, c0): &(usize, usize), out: &mut Vec<f32>| {
        for ti in 0..t {
            for r in r0..r0 + tile_h {
                let base = ((ti * hf + r) * wf + c0) * c;
                out.extend_from_slice(&src[base..base + tile_w * c]);
            }
        }
    };
    let chunks: Vec<&[(usize, usize)]> = tiles.chunks(batch.max(1)).collect();
    let outputs = parallel::map(&chunks, |chunk| -> Result<Tensor> {
        let mut buf = Vec::with_capacity(chunk.len() * t * tile_h * tile_w * c);
        chunk.iter().for_each(|o| cut(o, &mut buf));
        let xb = Tensor::new(&[chunk.len(), t, tile_h, tile_w, c], buf)?;
        let y = f(&xb)?;
        if y.shape() != [chunk.len(), tile_h, tile_w] {
            return Err(Error::Shape(format!("tile model returned {:?}", y.shape())));
        }
        Ok(y)
    });
    let mut preds = Vec::with_capacity(tiles.len() * tile_h * tile_w);
    for o in outputs {
        preds.extend_from_slice(o?.data());
    }
    let mut out = vec![0.0f32; hf * wf];
    for r in 0..hf {
        for col in 0..wf {
            let i = owner[r * wf + col];
            let (r0, c0) = tiles[i];
            out[r * wf + col] = preds[(i * tile_h + (r - r0)) * tile_w + (col - c0)];
        }
    }
    Ok(Tensor::new(&[hf, wf], out)?)
}

/// Whole-image inference by tiling with the model's window size.
pub fn tile_infer(model: &Tsvit, x_full: &Tensor) -> Result<Tensor> {
    tile_apply(x_full, model.cfg.h, model.cfg.w, 16, |xb| model.predict(xb))
}

/// Result of searching `(C, T)` for a published total parameter count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub target: usize,
    pub best_c: usize,
    pub best_t: usize,
    pub best_count: usize,
    pub distance: usize,
    pub exact_matches: Vec<(usize, usize)>,
}

pub fn probe_param_count(base: &TsvitConfig, target: usize, cs: impl Iterator<Item = usize> + Clone, ts: impl Iterator<Item = usize> + Clone) -> ProbeResult {
    let mut best = ProbeResult { target, best_c: 0, best_t: 0, best_count: 0, distance: usize::MAX, exact_matches: vec![] };
    for c in cs {
        for t in ts.clone() {
            let cfg = TsvitConfig { c, t, ..base.clone() };
            let n = param_count(&cfg);
            let dist = n.abs_diff(target);
            if dist == 0 {
                best.exact_matches.push((c, t));
            }
            if dist < best.distance {
                best = ProbeResult { best_c: c, best_t: t, best_count: n, distance: dist, ..best };
            }
        }
    }
    best
}
