//! Segmentation metrics with a boundary/interior split.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::labels::{LabelMap, PairLabelTensor, PairMask};
use crate::tensor::{Real, Tensor};

pub use crate::window::effective_window;

/// Pixel subset a metric is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    All,
    Boundary,
    Interior,
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Region::All => "all",
            Region::Boundary => "boundary",
            Region::Interior => "interior",
        })
    }
}

impl FromStr for Region {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Region::All),
            "boundary" => Ok(Region::Boundary),
            "interior" => Ok(Region::Interior),
            _ => Err(Error::Invalid(format!("unknown region {s:?}"))),
        }
    }
}

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.num_classes + pred] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for t in 0..self.num_classes {
            let row: Vec<String> = (0..self.num_classes).map(|p| self.get(t, p).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// A pixel is on a boundary when its 3×3 neighbourhood, clipped at the image
/// edge, holds at least two distinct non-excluded classes. Excluded
/// neighbours are ignored.
pub fn boundary_mask(labels: &LabelMap) -> Tensor<bool> {
    let (h, w) = (labels.height(), labels.width());
    Tensor::from_fn(&[h, w], |f| {
        let (i, j) = (f / w, f % w);
        let mut first = None;
        for a in i.saturating_sub(1)..(i + 2).min(h) {
            for b in j.saturating_sub(1)..(j + 2).min(w) {
                let c = labels.at(a, b);
                if c < 0 {
                    continue;
                }
                match first {
                    None => first = Some(c),
                    Some(f) if f != c => return true,
                    _ => {}
                }
            }
        }
        false
    })
}

pub fn confusion(pred: &Tensor<i32>, labels: &LabelMap, region: Region) -> Result<ConfusionMatrix> {
    pred.expect_shape(labels.classes.shape(), "prediction")?;
    let c = labels.num_classes;
    let boundary = match region {
        Region::All => None,
        _ => Some(boundary_mask(labels)),
    };
    let mut cm = ConfusionMatrix::new(c);
    for (f, (&t, &p)) in labels.classes.data().iter().zip(pred.data()).enumerate() {
        if t < 0 {
            continue;
        }
        if let Some(b) = &boundary {
            let on = b.data()[f];
            if on != (region == Region::Boundary) {
                continue;
            }
        }
        if p < 0 || p as usize >= c {
            return Err(Error::Invalid(format!("predicted class {p} outside [0, {c})")));
        }
        cm.add(t as usize, p as usize);
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub overall_acc: f64,
    pub miou: f64,
    pub macro_f1: f64,
}

/// Overall accuracy, mean IoU and macro F1. Classes absent from both truth
/// and prediction are left out of the class averages.
pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::NoPixels);
    }
    let c = cm.num_classes;
    let mut trace = 0;
    let (mut iou, mut f1, mut n) = (0.0, 0.0, 0usize);
    for k in 0..c {
        let tp = cm.get(k, k);
        trace += tp;
        let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| cm.get(k, p)).sum();
        let fp: u64 = (0..c).filter(|&t| t != k).map(|t| cm.get(t, k)).sum();
        if tp + fn_ + fp == 0 {
            continue;
        }
        iou += tp as f64 / (tp + fp + fn_) as f64;
        f1 += 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64;
        n += 1;
    }
    Ok(Metrics {
        overall_acc: trace as f64 / total as f64,
        miou: iou / n as f64,
        macro_f1: f1 / n as f64,
    })
}

/// For each window offset: fraction of masked-in positive pairs with
/// `S > threshold` and of negative pairs with `S <= threshold`. Offsets
/// without pairs hold NaN.
pub fn per_position_accuracy<T: Real>(
    s: &Tensor<T>,
    l: &PairLabelTensor,
    m: &PairMask,
    threshold: f64,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    l.expect_shape(s.shape(), "pair labels")?;
    m.expect_shape(s.shape(), "pair mask")?;
    s.expect_ndim(4, "affinity")?;
    let wd = s.shape()[2];
    let ww = wd * wd;
    let mut hits = [vec![0usize; ww], vec![0usize; ww]];
    let mut counts = [vec![0usize; ww], vec![0usize; ww]];
    for (f, ((&sv, &lv), &mv)) in s.data().iter().zip(l.data()).zip(m.data()).enumerate() {
        if !mv {
            continue;
        }
        let e = f % ww;
        let above = sv.as_f64() > threshold;
        let k = if lv { 0 } else { 1 };
        counts[k][e] += 1;
        if above == lv {
            hits[k][e] += 1;
        }
    }
    let frac = |k: usize| {
        Tensor::from_fn(&[wd, wd], |e| {
            if counts[k][e] == 0 {
                f64::NAN
            } else {
                hits[k][e] as f64 / counts[k][e] as f64
            }
        })
    };
    Ok((frac(0), frac(1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HistogramRegion {
    Whole,
    Interior,
}

pub const HISTOGRAM_BINS: usize = 64;

/// Per-channel 64-bin histograms of a parcel's pixels, with bins spanning
/// each channel's min/max over the selected pixels. Interior pixels are
/// parcel pixels that are not on a class boundary.
pub fn region_histogram<T: Real>(
    image: &Tensor<T>,
    parcel_ids: &Tensor<i32>,
    labels: &LabelMap,
    parcel: i32,
    region: HistogramRegion,
) -> Result<Vec<Vec<u64>>> {
    image.expect_ndim(3, "image")?;
    let (h, w, ch) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    parcel_ids.expect_shape(&[h, w], "parcel ids")?;
    labels.classes.expect_shape(&[h, w], "labels")?;
    let boundary = boundary_mask(labels);
    let pixels: Vec<usize> = (0..h * w)
        .filter(|&f| parcel_ids.data()[f] == parcel)
        .filter(|&f| region == HistogramRegion::Whole || !boundary.data()[f])
        .collect();
    if pixels.is_empty() {
        return Err(Error::Invalid(format!("parcel {parcel} has no pixels in the region")));
    }
    let mut out = Vec::with_capacity(ch);
    for c in 0..ch {
        let vals: Vec<f64> = pixels.iter().map(|&f| image.data()[f * ch + c].as_f64()).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut bins = vec![0u64; HISTOGRAM_BINS];
        for v in vals {
            let b = if hi > lo {
                (((v - lo) / (hi - lo)) * HISTOGRAM_BINS as f64).floor() as usize
            } else {
                0
            };
            bins[b.min(HISTOGRAM_BINS - 1)] += 1;
        }
        out.push(bins);
    }
    Ok(out)
}

/// Replicates each pixel into a `factor×factor` block.
pub fn upscale_nearest(pred: &Tensor<i32>, factor: usize) -> Result<Tensor<i32>> {
    pred.expect_ndim(2, "prediction")?;
    if factor == 0 {
        return Err(Error::Invalid("upscale factor must be >= 1".into()));
    }
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    let (fh, fw) = (h * factor, w * factor);
    Ok(Tensor::from_fn(&[fh, fw], |f| {
        let (i, j) = (f / fw, f % fw);
        pred.data()[(i / factor) * w + j / factor]
    }))
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}
