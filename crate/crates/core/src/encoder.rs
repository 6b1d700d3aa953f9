//! The toy convolutional encoder and its checkpoint format.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor};
use crate::nn::{
    conv3x3, conv3x3_backward, deconv3x3s2, deconv3x3s2_backward, leaky_relu, leaky_relu_backward,
    ClassifierParams, Conv, LEAKY_SLOPE,
};
use crate::rng::Rng;
use crate::similarity::ProjectionParams;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output channels of every convolution except the last.
    pub hidden: Vec<usize>,
    pub d_in: usize,
    /// Append two stride-2 transposed convolutions (×4 output grid).
    pub super_res: bool,
    pub slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 4,
            hidden: vec![16, 32],
            d_in: 32,
            super_res: false,
            slope: LEAKY_SLOPE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T> {
    pub convs: Vec<Conv<T>>,
    pub ups: Vec<Conv<T>>,
    pub slope: f64,
}

impl<T: Real> EncoderParams<T> {
    pub fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.d_in == 0 || cfg.hidden.contains(&0) {
            return Err(Error::Invalid("encoder channel counts must be positive".into()));
        }
        let mut chans = vec![cfg.in_channels];
        chans.extend(&cfg.hidden);
        chans.push(cfg.d_in);
        let convs = chans.windows(2).map(|c| Conv::init_he(c[0], c[1], cfg.slope, rng)).collect();
        let ups = if cfg.super_res {
            (0..2).map(|_| nearest_copy_init(cfg.d_in)).collect()
        } else {
            Vec::new()
        };
        Ok(EncoderParams {
            convs,
            ups,
            slope: cfg.slope,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].cin()
    }

    pub fn d_in(&self) -> usize {
        self.ups.last().unwrap_or_else(|| self.convs.last().expect("non-empty encoder")).cout()
    }

    pub fn super_res(&self) -> bool {
        !self.ups.is_empty()
    }

    /// Output grid size relative to the input.
    pub fn scale(&self) -> usize {
        1 << self.ups.len()
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            convs: self.convs.iter().map(Conv::zeros_like).collect(),
            ups: self.ups.iter().map(Conv::zeros_like).collect(),
            slope: self.slope,
        }
    }

    /// Parameter tensors with their checkpoint names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (prefix, layers) in [("conv", &self.convs), ("up", &self.ups)] {
            for (i, l) in layers.iter().enumerate() {
                out.push((format!("{prefix}{i}.kernel"), &l.kernel));
                out.push((format!("{prefix}{i}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.convs
            .iter_mut()
            .chain(self.ups.iter_mut())
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
            .collect()
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        let c = |l: &Conv<T>| Conv {
            kernel: l.kernel.cast(),
            bias: l.bias.cast(),
        };
        EncoderParams {
            convs: self.convs.iter().map(c).collect(),
            ups: self.ups.iter().map(c).collect(),
            slope: self.slope,
        }
    }
}

/// Kernel that makes the transposed convolution an exact nearest-neighbour
/// ×2 copy (taps 1 and 2 on each axis map channel `c` to itself), so the
/// upsampled embedding starts as the base one.
fn nearest_copy_init<T: Real>(d: usize) -> Conv<T> {
    let mut l = Conv {
        kernel: Tensor::zeros(&[3, 3, d, d]),
        bias: Tensor::zeros(&[d]),
    };
    for a in 1..3 {
        for b in 1..3 {
            for c in 0..d {
                l.kernel.set(&[a, b, c, c], T::one());
            }
        }
    }
    l
}

/// Activations of every layer; `acts[0]` is the input and the last entry
/// is the embedding.
#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    pub acts: Vec<Tensor<T>>,
}

impl<T: Real> EncoderTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        self.acts.last().expect("trace holds the input")
    }
}

pub fn encode_trace<T: Real>(x: &Tensor<T>, p: &EncoderParams<T>) -> Result<EncoderTrace<T>> {
    let mut acts = vec![x.clone()];
    for l in &p.convs {
        let mut a = conv3x3(acts.last().unwrap(), l)?;
        leaky_relu(&mut a, p.slope);
        acts.push(a);
    }
    for l in &p.ups {
        let mut a = deconv3x3s2(acts.last().unwrap(), l)?;
        leaky_relu(&mut a, p.slope);
        acts.push(a);
    }
    Ok(EncoderTrace { acts })
}

/// `H×W×channels` image to `H×W×D_in` (or `4H×4W×D_in` with the upsampling
/// blocks).
pub fn encode<T: Real>(x: &Tensor<T>, p: &EncoderParams<T>) -> Result<Tensor<T>> {
    Ok(encode_trace(x, p)?.acts.pop().expect("non-empty trace"))
}

/// Adds the parameter gradients for output gradient `dy` into `grads` and
/// returns `dL/dx`.
pub fn encoder_backward<T: Real>(
    trace: &EncoderTrace<T>,
    p: &EncoderParams<T>,
    dy: &Tensor<T>,
    grads: &mut EncoderParams<T>,
) -> Result<Tensor<T>> {
    dy.expect_shape(trace.output().shape(), "embedding gradient")?;
    let nc = p.convs.len();
    let mut g = dy.clone();
    for k in (0..nc + p.ups.len()).rev() {
        leaky_relu_backward(&trace.acts[k + 1], &mut g, p.slope);
        g = if k >= nc {
            deconv3x3s2_backward(&trace.acts[k], &p.ups[k - nc], &g, &mut grads.ups[k - nc])?
        } else {
            conv3x3_backward(&trace.acts[k], &p.convs[k], &g, &mut grads.convs[k])?
        };
    }
    Ok(g)
}

/// Encoder plus the optional heads a training stage produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderParams<f32>,
    pub projections: Option<ProjectionParams<f32>>,
    pub classifier: Option<ClassifierParams<f32>>,
}

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.tsv";

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut tensors: Vec<(String, &Tensor<f32>)> = self.encoder.named();
        if let Some(p) = &self.projections {
            for (name, t) in ProjectionParams::<f32>::NAMES.iter().zip(p.tensors()) {
                tensors.push((name.to_string(), t));
            }
        }
        if let Some(c) = &self.classifier {
            tensors.push(("classifier.weight".into(), &c.weight));
            tensors.push(("classifier.bias".into(), &c.bias));
        }
        let mut manifest = format!("slope\t{}\n", self.encoder.slope);
        for (name, t) in tensors {
            let file = format!("{name}.tsr");
            write_tensor(&dir.join(&file), t)?;
            manifest.push_str(&format!("tensor\t{name}\t{file}\n"));
        }
        fs::write(dir.join(CHECKPOINT_MANIFEST), manifest)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut slope = None;
        let mut tensors = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["slope", v] => {
                    slope = Some(v.parse::<f64>().map_err(|_| {
                        Error::Checkpoint(format!("line {}: bad slope {v:?}", n + 1))
                    })?)
                }
                ["tensor", name, file] => {
                    tensors.insert(name.to_string(), read_tensor::<f32>(&dir.join(file))?);
                }
                _ => return Err(Error::Checkpoint(format!("line {}: malformed entry", n + 1))),
            }
        }
        let slope = slope.ok_or_else(|| Error::Checkpoint("missing slope".into()))?;
        let convs = take_layers("conv", &mut tensors)?;
        let ups = take_layers("up", &mut tensors)?;
        let mut take = |name: &str| tensors.remove(name);
        if convs.is_empty() {
            return Err(Error::Checkpoint("no encoder layers".into()));
        }
        let encoder = EncoderParams { convs, ups, slope };
        let chain = encoder.convs.iter().chain(&encoder.ups).collect::<Vec<_>>();
        if chain.windows(2).any(|w| w[0].cout() != w[1].cin()) {
            return Err(Error::Checkpoint("encoder layer channels do not chain".into()));
        }
        let projections = match (take("wq"), take("wk"), take("rh"), take("rw")) {
            (Some(wq), Some(wk), Some(rh), Some(rw)) => {
                let p = ProjectionParams { wq, wk, rh, rw };
                p.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
                Some(p)
            }
            (None, None, None, None) => None,
            _ => return Err(Error::Checkpoint("incomplete projection parameters".into())),
        };
        let classifier = match (take("classifier.weight"), take("classifier.bias")) {
            (Some(weight), Some(bias)) => Some(ClassifierParams { weight, bias }),
            (None, None) => None,
            _ => return Err(Error::Checkpoint("incomplete classifier".into())),
        };
        if let Some(name) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
        }
        let ck = Checkpoint {
            encoder,
            projections,
            classifier,
        };
        let d = ck.encoder.d_in();
        if ck.projections.as_ref().is_some_and(|p| p.d_in() != d) || ck.classifier.as_ref().is_some_and(|c| c.d_in() != d) {
            return Err(Error::Checkpoint("head width does not match the encoder".into()));
        }
        Ok(ck)
    }
}

fn take_layers(prefix: &str, tensors: &mut BTreeMap<String, Tensor<f32>>) -> Result<Vec<Conv<f32>>> {
    let mut out = Vec::new();
    while let Some(kernel) = tensors.remove(&format!("{prefix}{}.kernel", out.len())) {
        let bias = tensors
            .remove(&format!("{prefix}{}.bias", out.len()))
            .ok_or_else(|| Error::Checkpoint(format!("{prefix}{} has no bias", out.len())))?;
        if kernel.ndim() != 4 || kernel.shape()[..2] != [3, 3] || bias.shape() != [kernel.shape()[3]] {
            return Err(Error::Checkpoint(format!("{prefix}{} has inconsistent shapes", out.len())));
        }
        out.push(Conv { kernel, bias });
    }
    Ok(out)
}
