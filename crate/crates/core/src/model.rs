use serde::{Deserialize, Serialize};

use hemulab_tensor::{ParamSet, Tensor};

use crate::conv::{ConvResNet, ConvResNetConfig};
use crate::tsvit::{Tsvit, TsvitConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Tsvit,
    Convresnet,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Tsvit => "tsvit",
            ModelKind::Convresnet => "convresnet",
        }
    }
}

/// Architecture choice plus its hyperparameters. Channel count and context
/// length are filled in from the dataset at build time.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelConfig {
    Tsvit(TsvitConfig),
    Convresnet(ConvResNetConfig),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::Tsvit(TsvitConfig::default())
    }
}

impl ModelConfig {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Tsvit(_) => ModelKind::Tsvit,
            ModelConfig::Convresnet(_) => ModelKind::Convresnet,
        }
    }

    /// Context length the model consumes (1 for the baseline).
    pub fn context(&self) -> usize {
        match self {
            ModelConfig::Tsvit(c) => c.t,
            ModelConfig::Convresnet(_) => 1,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            ModelConfig::Tsvit(c) => c.c,
            ModelConfig::Convresnet(c) => c.channels_in,
        }
    }

    pub fn with_channels(&self, c: usize) -> Self {
        match self {
            ModelConfig::Tsvit(t) => ModelConfig::Tsvit(TsvitConfig { c, ..t.clone() }),
            ModelConfig::Convresnet(k) => ModelConfig::Convresnet(ConvResNetConfig { channels_in: c, ..k.clone() }),
        }
    }

    pub fn with_context(&self, t: usize) -> Self {
        match self {
            ModelConfig::Tsvit(cfg) => ModelConfig::Tsvit(TsvitConfig { t, ..cfg.clone() }),
            other => other.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Tsvit(Tsvit),
    Convresnet(ConvResNet),
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match cfg {
            ModelConfig::Tsvit(c) => Model::Tsvit(Tsvit::new(c.clone(), seed)?),
            ModelConfig::Convresnet(c) => Model::Convresnet(ConvResNet::new(c.clone(), seed)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Tsvit(m) => ModelConfig::Tsvit(m.cfg.clone()),
            Model::Convresnet(m) => ModelConfig::Convresnet(m.cfg.clone()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        self.config().kind()
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Model::Tsvit(m) => &m.params,
            Model::Convresnet(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Model::Tsvit(m) => &mut m.params,
            Model::Convresnet(m) => &mut m.params,
        }
    }
}

impl Model {
    /// `[B, T, h, w, C]` crops to `[B, h, w]` predictions. The baseline
    /// slides over each single-step crop with reflect padding.
    pub fn predict_tiles(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape().to_vec();
        if s.len() != 5 {
            return Err(Error::Shape(format!("expected [B, T, h, w, C], got {s:?}")));
        }
        match self {
            Model::Tsvit(m) => m.predict(x),
            Model::Convresnet(m) => {
                let (b, t, h, w, c) = (s[0], s[1], s[2], s[3], s[4]);
                if t != 1 {
                    return Err(Error::Shape("the baseline consumes single-step windows".into()));
                }
                let mut out = Vec::with_capacity(b * h * w);
                for sample in x.data().chunks(h * w * c) {
                    let mut chw = vec![0.0; c * h * w];
                    for (j, v) in sample.iter().enumerate() {
                        chw[(j % c) * h * w + j / c] = *v;
                    }
                    let map = m.infer_map(&Tensor::new(&[c, h, w], chw)?)?;
                    out.extend_from_slice(map.data());
                }
                Ok(Tensor::new(&[b, h, w], out)?)
            }
        }
    }

    /// The same network without input channel `ch`: every parameter is
    /// copied except the input rows that read that channel.
    pub fn drop_input_channel(&self, ch: usize) -> Result<Model> {
        let cfg = self.config();
        let c = cfg.channels();
        if ch >= c || c < 2 {
            return Err(Error::Config(format!("cannot drop channel {ch} of {c}")));
        }
        let mut out = Model::new(&cfg.with_channels(c - 1), 0)?;
        let (input_name, keep): (&str, Box<dyn Fn(usize, &[usize]) -> bool>) = match self {
            Model::Tsvit(_) => ("token_proj.weight", Box::new(move |i, s: &[usize]| (i / s[1]) % c != ch)),
            Model::Convresnet(_) => ("stem.weight", Box::new(move |i, s: &[usize]| (i / (s[2] * s[3])) % c != ch)),
        };
        let src = self.params();
        let dst = out.params_mut();
        for (id, name, t) in src.iter() {
            let target = dst.find(name).ok_or_else(|| Error::Config(format!("parameter {name} missing after channel drop")))?;
            let values: Vec<f32> = if name == input_name {
                t.data().iter().enumerate().filter(|(i, _)| keep(*i, t.shape())).map(|(_, v)| *v).collect()
            } else {
                t.data().to_vec()
            };
            let slot = dst.get_mut(target);
            if slot.numel() != values.len() {
                return Err(Error::Shape(format!("parameter {} has {} values, expected {}", src.name(id), values.len(), slot.numel())));
            }
            slot.data_mut().copy_from_slice(&values);
        }
        Ok(out)
    }
}
