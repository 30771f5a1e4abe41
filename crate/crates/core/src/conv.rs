//! Context-free convolutional baseline predicting the centre pixel of a
//! square multi-channel patch.

use serde::{Deserialize, Serialize};

use hemulab_tensor::rng::substream;
use hemulab_tensor::{Bound, ParamId, ParamSet, Result as TResult, Scalar, Tape, Tensor, TensorError, Var};

use crate::nn::{Linear, INIT_STD};
use crate::{parallel, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvResNetConfig {
    pub patch_size: usize,
    pub channels_in: usize,
    pub width: usize,
    pub n_blocks: usize,
}

impl Default for ConvResNetConfig {
    fn default() -> Self {
        ConvResNetConfig { patch_size: 15, channels_in: 10, width: 64, n_blocks: 4 }
    }
}

impl ConvResNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size.is_multiple_of(2) || self.patch_size < 3 {
            return Err(Error::Config(format!("patch_size {} must be odd and >= 3", self.patch_size)));
        }
        if self.channels_in == 0 || self.width == 0 {
            return Err(Error::Config("conv channels must be positive".into()));
        }
        Ok(())
    }

    pub fn half(&self) -> usize {
        self.patch_size / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvResNet {
    pub cfg: ConvResNetConfig,
    pub params: ParamSet,
    pub stem: ConvLayer,
    pub blocks: Vec<ConvLayer>,
    pub head: Linear,
}

impl ConvResNet {
    pub fn new(cfg: ConvResNetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(seed, "convresnet/init");
        let mut ps = ParamSet::new();
        let (cin, w) = (cfg.channels_in, cfg.width);
        let stem_std = (2.0 / (9 * cin) as f64).sqrt();
        let block_std = INIT_STD.max((1.0 / (9 * w) as f64).sqrt() * 0.5);
        let stem = ConvLayer {
            weight: ps.trunc_normal("stem.weight", &[w, cin, 3, 3], stem_std, &mut rng),
            bias: ps.zeros("stem.bias", &[w]),
        };
        let blocks = (0..cfg.n_blocks)
            .map(|i| ConvLayer {
                weight: ps.trunc_normal(format!("block{i}.weight"), &[w, w, 3, 3], block_std, &mut rng),
                bias: ps.zeros(format!("block{i}.bias"), &[w]),
            })
            .collect();
        let head = Linear::new(&mut ps, "head", w, 1, true, &mut rng);
        Ok(ConvResNet { cfg, params: ps, stem, blocks, head })
    }

    /// `[B, C, P, P] -> [B]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> TResult<Var> {
        let s = tape.shape(x).to_vec();
        let ps = self.cfg.patch_size;
        if s.len() != 4 || s[1..] != [self.cfg.channels_in, ps, ps] {
            return Err(TensorError::ShapeMismatch { op: "convresnet", lhs: s, rhs: vec![self.cfg.channels_in, ps, ps] });
        }
        let b = s[0];
        let h = tape.conv2d(x, p[self.stem.weight], Some(p[self.stem.bias]), 1)?;
        let mut h = tape.gelu(h);
        for blk in &self.blocks {
            let r = tape.conv2d(h, p[blk.weight], Some(p[blk.bias]), 1)?;
            let r = tape.gelu(r);
            h = tape.add(h, r)?;
        }
        let h = tape.reshape(h, &[b, self.cfg.width, ps * ps])?;
        let pooled = tape.mean_axis(h, 2)?;
        let y = self.head.forward(tape, p, pooled)?;
        tape.reshape(y, &[b])
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::<f32>::new();
        let p = self.params.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Single `[C, P, P]` patch to a scalar.
    pub fn forward_patch(&self, x: &Tensor) -> Result<f32> {
        let mut s = vec![1];
        s.extend_from_slice(x.shape());
        Ok(self.predict(&x.clone().reshape(&s)?)?.data()[0])
    }

    /// Sliding window over `[C, H, W]` with reflect padding; one value per pixel.
    pub fn infer_map(&self, x_full: &Tensor) -> Result<Tensor> {
        let s = x_full.shape();
        if s.len() != 3 || s[0] != self.cfg.channels_in {
            return Err(Error::Shape(format!("infer_map expects [{}, H, W], got {s:?}", self.cfg.channels_in)));
        }
        let (h, w) = (s[1], s[2]);
        let pixels: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
        let vals = self.infer_pixels(x_full, &pixels)?;
        Ok(Tensor::new(&[h, w], vals)?)
    }

    /// Predictions at selected pixels of `[C, H, W]`.
    pub fn infer_pixels(&self, x_full: &Tensor, pixels: &[(usize, usize)]) -> Result<Vec<f32>> {
        let chunks: Vec<&[(usize, usize)]> = pixels.chunks(64).collect();
        let out = parallel::map(&chunks, |chunk| -> Result<Vec<f32>> {
            let (c, ps) = (self.cfg.channels_in, self.cfg.patch_size);
            let mut buf = Vec::with_capacity(chunk.len() * c * ps * ps);
            for &(r, col) in chunk.iter() {
                extract_reflect(x_full, r, col, ps, &mut buf);
            }
            let xb = Tensor::new(&[chunk.len(), c, ps, ps], buf)?;
            Ok(self.predict(&xb)?.into_data())
        });
        let mut v = Vec::with_capacity(pixels.len());
        for o in out {
            v.extend(o?);
        }
        Ok(v)
    }
}

/// Mirror index without repeating the edge sample (`-1 -> 1`).
pub fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Appends the `[C, size, size]` window centred on (r, c), reflect-padded.
pub fn extract_reflect(x: &Tensor, r: usize, c: usize, size: usize, out: &mut Vec<f32>) {
    let s = x.shape();
    let (ch, h, w) = (s[0], s[1], s[2]);
    let half = (size / 2) as isize;
    let d = x.data();
    for k in 0..ch {
        for dr in -half..=half {
            let rr = reflect(r as isize + dr, h);
            for dc in -half..=half {
                let cc = reflect(c as isize + dc, w);
                out.push(d[(k * h + rr) * w + cc]);
            }
        }
    }
}
