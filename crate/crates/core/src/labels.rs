//! Class-agnostic pair labels and the supervision mask.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{decode_tensor, encode_tensor};
use crate::tensor::Tensor;
use crate::window::{window_gather, PadFlags, WindowConfig};

/// Class index used for excluded (background, doubly assigned) pixels.
pub const EXCLUDED: i32 = -1;

/// Dense class annotation, `H×W`, with `-1` marking excluded pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub classes: Tensor<i32>,
    pub num_classes: usize,
}

impl LabelMap {
    pub fn new(classes: Tensor<i32>, num_classes: usize) -> Result<Self> {
        classes.expect_ndim(2, "label map")?;
        if let Some(&bad) = classes
            .data()
            .iter()
            .find(|&&c| c < EXCLUDED || c >= num_classes as i32)
        {
            return Err(Error::Invalid(format!(
                "class {bad} outside [-1, {num_classes})"
            )));
        }
        Ok(LabelMap {
            classes,
            num_classes,
        })
    }

    pub fn height(&self) -> usize {
        self.classes.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.classes.shape()[1]
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> i32 {
        self.classes.data()[i * self.width() + j]
    }

    /// One-hot view, `H×W×C`; excluded pixels map to the zero vector.
    pub fn one_hot(&self) -> Tensor<i32> {
        let c = self.num_classes;
        let mut t = Tensor::zeros(&[self.height(), self.width(), c]);
        for (p, &k) in self.classes.data().iter().enumerate() {
            if k >= 0 {
                t.data_mut()[p * c + k as usize] = 1;
            }
        }
        t
    }

    /// Serialised form: `u32` class count followed by the `i32` grid tensor.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = (self.num_classes as u32).to_le_bytes().to_vec();
        out.extend(encode_tensor(&self.classes));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Format("label map header truncated".into()));
        }
        let c = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let (t, used) = decode_tensor::<i32>(&bytes[4..])?;
        if 4 + used != bytes.len() {
            return Err(Error::Format("trailing bytes after label map".into()));
        }
        LabelMap::new(t, c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    fn as_column(&self) -> Tensor<i32> {
        self.classes
            .clone()
            .reshape(&[self.height(), self.width(), 1])
            .expect("same element count")
    }
}

/// `H'×W'×w_d×w_d` booleans; `true` where centre and neighbour share a class.
pub type PairLabelTensor = Tensor<bool>;

/// `H'×W'×w_d×w_d` booleans; `true` where the pair participates in the loss.
pub type PairMask = Tensor<bool>;

/// Pair labels through the one-hot contraction: the gathered one-hot
/// neighbourhood dotted with the centre's one-hot vector.
pub fn build_pair_labels(labels: &LabelMap, cfg: &WindowConfig) -> Result<PairLabelTensor> {
    cfg.validate()?;
    let onehot = labels.one_hot();
    let c = labels.num_classes;
    let (nb, _) = window_gather(&onehot, cfg)?;
    let (ho, wo) = cfg.out_hw(labels.height(), labels.width());
    let wd = cfg.wd;
    let ctr = cfg.center();
    let nbd = nb.data();
    let mut out = Tensor::full(&[ho, wo, wd, wd], false);
    let od = out.data_mut();
    for i in 0..ho {
        for j in 0..wo {
            let base = (i * wo + j) * wd * wd;
            let centre = &nbd[(base + ctr * wd + ctr) * c..(base + ctr * wd + ctr + 1) * c];
            for e in 0..wd * wd {
                let n = &nbd[(base + e) * c..(base + e + 1) * c];
                let agree: i32 = n.iter().zip(centre).map(|(a, b)| a * b).sum();
                od[base + e] = agree == 1;
            }
        }
    }
    Ok(out)
}

/// Independent scalar-loop construction of the pair labels, used as a test
/// oracle for [`build_pair_labels`].
pub fn pair_labels_bruteforce(labels: &LabelMap, cfg: &WindowConfig) -> Result<PairLabelTensor> {
    cfg.validate()?;
    let h = labels.height() as isize;
    let w = labels.width() as isize;
    let (wd, wr, ws) = (cfg.wd as isize, cfg.wr as isize, cfg.ws as isize);
    let c = wd / 2;
    let ho = (h - 1) / ws + 1;
    let wo = (w - 1) / ws + 1;
    let mut vals = Vec::with_capacity((ho * wo * wd * wd) as usize);
    for i in 0..ho {
        for j in 0..wo {
            let ci = ws * i;
            let cj = ws * j;
            let centre = labels.classes.get(&[ci as usize, cj as usize]);
            for k in 0..wd {
                for m in 0..wd {
                    let ni = ws * i - wr * (c - k);
                    let nj = ws * j - wr * (c - m);
                    let v = if ni < 0 || nj < 0 || ni >= h || nj >= w {
                        false
                    } else {
                        let other = labels.classes.get(&[ni as usize, nj as usize]);
                        centre >= 0 && other == centre
                    };
                    vals.push(v);
                }
            }
        }
    }
    Tensor::from_vec(&[ho as usize, wo as usize, wd as usize, wd as usize], vals)
}

/// Supervision mask: drops padded neighbours, pairs touching an excluded
/// pixel, and (when `exclude_self`) the window centre.
pub fn build_pair_mask(
    labels: &LabelMap,
    padflags: &PadFlags,
    cfg: &WindowConfig,
    exclude_self: bool,
) -> Result<PairMask> {
    cfg.validate()?;
    let (ho, wo) = cfg.out_hw(labels.height(), labels.width());
    let wd = cfg.wd;
    padflags.expect_shape(&[ho, wo, wd, wd], "pad flags")?;
    let (nb, _) = window_gather(&labels.as_column(), cfg)?;
    let ctr = cfg.center();
    let nbd = nb.data();
    let pd = padflags.data();
    let mut out = Tensor::full(&[ho, wo, wd, wd], false);
    let mut any = false;
    {
        let od = out.data_mut();
        for i in 0..ho {
            for j in 0..wo {
                let base = (i * wo + j) * wd * wd;
                let centre = nbd[base + ctr * wd + ctr];
                for e in 0..wd * wd {
                    let is_centre = e == ctr * wd + ctr;
                    let v = !pd[base + e]
                        && !(exclude_self && is_centre)
                        && centre >= 0
                        && nbd[base + e] >= 0;
                    od[base + e] = v;
                    any |= v;
                }
            }
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    Ok(out)
}

/// Pad flags for an `H×W` grid without materialising a gather.
pub fn pad_flags(h: usize, w: usize, cfg: &WindowConfig) -> Result<PadFlags> {
    cfg.validate()?;
    let (ho, wo) = cfg.out_hw(h, w);
    let wd = cfg.wd;
    Ok(Tensor::from_fn(&[ho, wo, wd, wd], |f| {
        let m = f % wd;
        let k = (f / wd) % wd;
        let j = (f / (wd * wd)) % wo;
        let i = f / (wd * wd * wo);
        cfg.source(i, k, h).is_none() || cfg.source(j, m, w).is_none()
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStatistics {
    pub num_pos: usize,
    pub num_neg: usize,
    /// `+inf` when there are no positive pairs.
    pub neg_over_pos: f64,
}

pub fn pair_statistics(l: &PairLabelTensor, m: &PairMask) -> Result<PairStatistics> {
    m.expect_shape(l.shape(), "pair mask")?;
    let mut pos = 0;
    let mut neg = 0;
    for (&lv, &mv) in l.data().iter().zip(m.data()) {
        if mv {
            if lv {
                pos += 1;
            } else {
                neg += 1;
            }
        }
    }
    let ratio = if pos == 0 {
        f64::INFINITY
    } else {
        neg as f64 / pos as f64
    };
    Ok(PairStatistics {
        num_pos: pos,
        num_neg: neg,
        neg_over_pos: ratio,
    })
}
