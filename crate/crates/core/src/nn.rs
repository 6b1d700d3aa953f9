//! Encoder layers with hand-written reverse passes, the per-pixel linear
//! classifier and the masked cross-entropy objectives.
//!
//! Feature maps are `H×W×C` row-major; kernels are `3×3×Cin×Cout`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::metrics::boundary_mask;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Conv<T> {
    /// Uniform fan-in initialisation in `±sqrt(1/(9·cin))`.
    pub fn init(cin: usize, cout: usize, rng: &mut Rng) -> Self {
        Self::uniform(cin, cout, (1.0 / (9.0 * cin as f64)).sqrt(), rng)
    }

    /// He-uniform initialisation for a layer followed by a leaky rectifier,
    /// preserving activation variance through the stack.
    pub fn init_he(cin: usize, cout: usize, slope: f64, rng: &mut Rng) -> Self {
        Self::uniform(cin, cout, (6.0 / ((1.0 + slope * slope) * 9.0 * cin as f64)).sqrt(), rng)
    }

    pub fn uniform(cin: usize, cout: usize, a: f64, rng: &mut Rng) -> Self {
        Conv {
            kernel: Tensor::from_fn(&[3, 3, cin, cout], |_| rng.uniform(-a, a)),
            bias: Tensor::zeros(&[cout]),
        }
    }

    pub fn cin(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn cout(&self) -> usize {
        self.kernel.shape()[3]
    }

    pub fn zeros_like(&self) -> Self {
        Conv {
            kernel: Tensor::zeros(self.kernel.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize)> {
        x.expect_ndim(3, "feature map")?;
        if x.shape()[2] != self.cin() {
            return Err(Error::Shape(format!(
                "layer expects {} input channels, got {}",
                self.cin(),
                x.shape()[2]
            )));
        }
        Ok((x.shape()[0], x.shape()[1]))
    }
}

#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with eight independent partial sums so the loop vectorises.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a[..n].chunks_exact(8), b[..n].chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

/// Same-padded 3×3 convolution (cross-correlation), no activation.
pub fn conv3x3<T: Real>(x: &Tensor<T>, layer: &Conv<T>) -> Result<Tensor<T>> {
    let (h, w) = layer.check_input(x)?;
    let (cin, cout) = (layer.cin(), layer.cout());
    let k = layer.kernel.data();
    let mut out = Tensor::zeros(&[h, w, cout]);
    let od = out.data_mut();
    for i in 0..h {
        for j in 0..w {
            let o = &mut od[(i * w + j) * cout..][..cout];
            o.copy_from_slice(layer.bias.data());
            for a in 0..3 {
                let Some(si) = (i + a).checked_sub(1).filter(|&v| v < h) else { continue };
                for b in 0..3 {
                    let Some(sj) = (j + b).checked_sub(1).filter(|&v| v < w) else { continue };
                    let xin = &x.data()[(si * w + sj) * cin..][..cin];
                    let kt = &k[(a * 3 + b) * cin * cout..][..cin * cout];
                    for (ci, &xv) in xin.iter().enumerate() {
                        axpy(xv, &kt[ci * cout..][..cout], o);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Reverse of [`conv3x3`]: accumulates parameter gradients into `grads` and
/// returns `dL/dx`.
pub fn conv3x3_backward<T: Real>(x: &Tensor<T>, layer: &Conv<T>, dout: &Tensor<T>, grads: &mut Conv<T>) -> Result<Tensor<T>> {
    let (h, w) = layer.check_input(x)?;
    let (cin, cout) = (layer.cin(), layer.cout());
    dout.expect_shape(&[h, w, cout], "conv output gradient")?;
    let k = layer.kernel.data();
    let mut dx = Tensor::zeros(x.shape());
    let dxd = dx.data_mut();
    let gk = grads.kernel.data_mut();
    let gb = grads.bias.data_mut();
    for i in 0..h {
        for j in 0..w {
            let g = &dout.data()[(i * w + j) * cout..][..cout];
            for (b, &gv) in gb.iter_mut().zip(g) {
                *b += gv;
            }
            for a in 0..3 {
                let Some(si) = (i + a).checked_sub(1).filter(|&v| v < h) else { continue };
                for b in 0..3 {
                    let Some(sj) = (j + b).checked_sub(1).filter(|&v| v < w) else { continue };
                    let base = (si * w + sj) * cin;
                    let tap = (a * 3 + b) * cin * cout;
                    for ci in 0..cin {
                        let row = tap + ci * cout;
                        dxd[base + ci] += dot(&k[row..row + cout], g);
                        axpy(x.data()[base + ci], g, &mut gk[row..row + cout]);
                    }
                }
            }
        }
    }
    Ok(dx)
}

/// Stride-2 transposed 3×3 convolution doubling both extents: input pixel
/// `i` contributes through tap `a` to output row `2i + a − 1`.
pub fn deconv3x3s2<T: Real>(x: &Tensor<T>, layer: &Conv<T>) -> Result<Tensor<T>> {
    let (h, w) = layer.check_input(x)?;
    let (cin, cout) = (layer.cin(), layer.cout());
    let (oh, ow) = (2 * h, 2 * w);
    let k = layer.kernel.data();
    let mut out = Tensor::zeros(&[oh, ow, cout]);
    let od = out.data_mut();
    for o in od.chunks_mut(cout) {
        o.copy_from_slice(layer.bias.data());
    }
    for i in 0..h {
        for j in 0..w {
            let xin = &x.data()[(i * w + j) * cin..][..cin];
            for a in 0..3 {
                let Some(oi) = (2 * i + a).checked_sub(1).filter(|&v| v < oh) else { continue };
                for b in 0..3 {
                    let Some(oj) = (2 * j + b).checked_sub(1).filter(|&v| v < ow) else { continue };
                    let o = &mut od[(oi * ow + oj) * cout..][..cout];
                    let kt = &k[(a * 3 + b) * cin * cout..][..cin * cout];
                    for (ci, &xv) in xin.iter().enumerate() {
                        axpy(xv, &kt[ci * cout..][..cout], o);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn deconv3x3s2_backward<T: Real>(
    x: &Tensor<T>,
    layer: &Conv<T>,
    dout: &Tensor<T>,
    grads: &mut Conv<T>,
) -> Result<Tensor<T>> {
    let (h, w) = layer.check_input(x)?;
    let (cin, cout) = (layer.cin(), layer.cout());
    let (oh, ow) = (2 * h, 2 * w);
    dout.expect_shape(&[oh, ow, cout], "deconv output gradient")?;
    let k = layer.kernel.data();
    let mut dx = Tensor::zeros(x.shape());
    let dxd = dx.data_mut();
    let gk = grads.kernel.data_mut();
    for g in dout.data().chunks(cout) {
        for (b, &gv) in grads.bias.data_mut().iter_mut().zip(g) {
            *b += gv;
        }
    }
    for i in 0..h {
        for j in 0..w {
            let base = (i * w + j) * cin;
            for a in 0..3 {
                let Some(oi) = (2 * i + a).checked_sub(1).filter(|&v| v < oh) else { continue };
                for b in 0..3 {
                    let Some(oj) = (2 * j + b).checked_sub(1).filter(|&v| v < ow) else { continue };
                    let g = &dout.data()[(oi * ow + oj) * cout..][..cout];
                    let tap = (a * 3 + b) * cin * cout;
                    for ci in 0..cin {
                        let row = tap + ci * cout;
                        dxd[base + ci] += dot(&k[row..row + cout], g);
                        axpy(x.data()[base + ci], g, &mut gk[row..row + cout]);
                    }
                }
            }
        }
    }
    Ok(dx)
}

pub fn leaky_relu<T: Real>(x: &mut Tensor<T>, slope: f64) {
    let s = T::lit(slope);
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v *= s;
        }
    });
}

/// Multiplies `g` by the activation derivative, read off the activated
/// output (valid for any positive slope).
pub fn leaky_relu_backward<T: Real>(activated: &Tensor<T>, g: &mut Tensor<T>, slope: f64) {
    let s = T::lit(slope);
    for (gv, &a) in g.data_mut().iter_mut().zip(activated.data()) {
        if a < T::zero() {
            *gv *= s;
        }
    }
}

/// Per-pixel linear map from embeddings to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T> {
    /// `C×D_in`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ClassifierParams<T> {
    pub fn init(num_classes: usize, d_in: usize, rng: &mut Rng) -> Self {
        let a = (1.0 / d_in as f64).sqrt();
        ClassifierParams {
            weight: Tensor::from_fn(&[num_classes, d_in], |_| rng.uniform(-a, a)),
            bias: Tensor::zeros(&[num_classes]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn zeros_like(&self) -> Self {
        ClassifierParams {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
        }
    }

    pub fn forward(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        y.expect_ndim(3, "embedding")?;
        let d = self.d_in();
        if y.last_dim() != d {
            return Err(Error::Shape(format!("classifier expects {d} features, got {}", y.last_dim())));
        }
        let c = self.num_classes();
        let (h, w) = (y.shape()[0], y.shape()[1]);
        let wd = self.weight.data();
        let mut out = Tensor::zeros(&[h, w, c]);
        for (o, v) in out.data_mut().chunks_mut(c).zip(y.data().chunks(d)) {
            for k in 0..c {
                o[k] = self.bias.data()[k] + dot(&wd[k * d..(k + 1) * d], v);
            }
        }
        Ok(out)
    }

    pub fn backward(&self, y: &Tensor<T>, dlogits: &Tensor<T>, grads: &mut Self) -> Tensor<T> {
        let (c, d) = (self.num_classes(), self.d_in());
        let wd = self.weight.data();
        let mut dy = Tensor::zeros(y.shape());
        for ((g, v), dv) in dlogits.data().chunks(c).zip(y.data().chunks(d)).zip(dy.data_mut().chunks_mut(d)) {
            for k in 0..c {
                if g[k] == T::zero() {
                    continue;
                }
                grads.bias.data_mut()[k] += g[k];
                axpy(g[k], v, &mut grads.weight.data_mut()[k * d..(k + 1) * d]);
                axpy(g[k], &wd[k * d..(k + 1) * d], dv);
            }
        }
        dy
    }
}

/// Per-pixel arg-max class.
pub fn argmax_classes<T: Real>(logits: &Tensor<T>) -> Tensor<i32> {
    let c = logits.last_dim();
    let (h, w) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Tensor::zeros(&[h, w]);
    for (o, l) in out.data_mut().iter_mut().zip(logits.data().chunks(c)) {
        let mut best = 0;
        for k in 1..c {
            if l[k] > l[best] {
                best = k;
            }
        }
        *o = best as i32;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CeVariant {
    Plain,
    /// Interior pixels scaled by `#boundary / #interior` per sample.
    Gamma,
    /// The larger of the interior/boundary sets subsampled to the smaller's
    /// size.
    Balanced,
}

impl fmt::Display for CeVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CeVariant::Plain => "plain",
            CeVariant::Gamma => "gamma",
            CeVariant::Balanced => "balanced",
        })
    }
}

impl FromStr for CeVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(CeVariant::Plain),
            "gamma" => Ok(CeVariant::Gamma),
            "balanced" => Ok(CeVariant::Balanced),
            _ => Err(Error::Invalid(format!("unknown variant {s:?} (plain|gamma|balanced)"))),
        }
    }
}

/// Per-pixel loss weights for a variant. Falls back to uniform weights when
/// either region is empty.
pub fn ce_weights(labels: &LabelMap, variant: CeVariant, rng: Option<&mut Rng>) -> Result<Vec<f64>> {
    let valid: Vec<bool> = labels.classes.data().iter().map(|&c| c >= 0).collect();
    if !valid.iter().any(|&v| v) {
        return Err(Error::NoPixels);
    }
    let uniform: Vec<f64> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    if variant == CeVariant::Plain {
        return Ok(uniform);
    }
    let bmask = boundary_mask(labels);
    let boundary: Vec<usize> = (0..valid.len()).filter(|&p| valid[p] && bmask.data()[p]).collect();
    let interior: Vec<usize> = (0..valid.len()).filter(|&p| valid[p] && !bmask.data()[p]).collect();
    if boundary.is_empty() || interior.is_empty() {
        return Ok(uniform);
    }
    let mut w = vec![0.0; valid.len()];
    match variant {
        CeVariant::Plain => unreachable!(),
        CeVariant::Gamma => {
            let gamma = boundary.len() as f64 / interior.len() as f64;
            boundary.iter().for_each(|&p| w[p] = 1.0);
            interior.iter().for_each(|&p| w[p] = gamma);
        }
        CeVariant::Balanced => {
            let rng = rng.ok_or_else(|| Error::Invalid("balanced masking needs an rng".into()))?;
            let (mut large, small) = if boundary.len() >= interior.len() {
                (boundary, interior)
            } else {
                (interior, boundary)
            };
            rng.shuffle(&mut large);
            small.iter().chain(&large[..small.len()]).for_each(|&p| w[p] = 1.0);
        }
    }
    Ok(w)
}

/// Weighted mean negative log-likelihood and its gradient w.r.t. the logits.
pub fn weighted_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &LabelMap, weights: &[f64]) -> Result<(T, Tensor<T>)> {
    let c = logits.last_dim();
    logits.expect_shape(&[labels.height(), labels.width(), c], "logits")?;
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::NoPixels);
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    let mut p = vec![0.0f64; c];
    for (idx, (l, g)) in logits.data().chunks(c).zip(grad.data_mut().chunks_mut(c)).enumerate() {
        let wgt = weights[idx];
        if wgt == 0.0 {
            continue;
        }
        let y = labels.classes.data()[idx] as usize;
        let mx = l.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let mut z = 0.0;
        for k in 0..c {
            p[k] = (l[k].as_f64() - mx).exp();
            z += p[k];
        }
        loss += wgt * (z.ln() - (l[y].as_f64() - mx));
        let scale = wgt / total;
        for k in 0..c {
            let target = if k == y { 1.0 } else { 0.0 };
            g[k] = T::lit(scale * (p[k] / z - target));
        }
    }
    Ok((T::lit(loss / total), grad))
}

/// Masked cross-entropy over non-excluded pixels with the selected
/// boundary/interior weighting.
pub fn masked_cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &LabelMap,
    variant: CeVariant,
    rng: Option<&mut Rng>,
) -> Result<(T, Tensor<T>)> {
    let w = ce_weights(labels, variant, rng)?;
    weighted_cross_entropy(logits, labels, &w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_tensor(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    fn conv_oracle(x: &Tensor<f64>, l: &Conv<f64>) -> Tensor<f64> {
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let cout = l.cout();
        Tensor::from_fn(&[h, w, cout], |f| {
            let (i, j, co) = (f / (w * cout), f / cout % w, f % cout);
            let mut s = l.bias.data()[co];
            for a in 0..3i64 {
                for b in 0..3i64 {
                    let (si, sj) = (i as i64 + a - 1, j as i64 + b - 1);
                    if si < 0 || sj < 0 || si >= h as i64 || sj >= w as i64 {
                        continue;
                    }
                    for ci in 0..cin {
                        s += x.get(&[si as usize, sj as usize, ci]) * l.kernel.get(&[a as usize, b as usize, ci, co]);
                    }
                }
            }
            s
        })
    }

    fn deconv_oracle(x: &Tensor<f64>, l: &Conv<f64>) -> Tensor<f64> {
        let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let cout = l.cout();
        Tensor::from_fn(&[2 * h, 2 * w, cout], |f| {
            let (oi, oj, co) = (f / (2 * w * cout), f / cout % (2 * w), f % cout);
            let mut s = l.bias.data()[co];
            for i in 0..h {
                for j in 0..w {
                    let (a, b) = (oi as i64 + 1 - 2 * i as i64, oj as i64 + 1 - 2 * j as i64);
                    if (0..3).contains(&a) && (0..3).contains(&b) {
                        for ci in 0..cin {
                            s += x.get(&[i, j, ci]) * l.kernel.get(&[a as usize, b as usize, ci, co]);
                        }
                    }
                }
            }
            s
        })
    }

    fn random_conv(cin: usize, cout: usize, rng: &mut Rng) -> Conv<f64> {
        Conv {
            kernel: rand_tensor(&[3, 3, cin, cout], rng),
            bias: rand_tensor(&[cout], rng),
        }
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = Rng::new(1, 0);
        let x = rand_tensor(&[5, 7, 3], &mut rng);
        let l = random_conv(3, 4, &mut rng);
        let got = conv3x3(&x, &l).unwrap();
        let want = conv_oracle(&x, &l);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn deconv_matches_loop_oracle() {
        let mut rng = Rng::new(2, 0);
        let x = rand_tensor(&[3, 4, 2], &mut rng);
        let l = random_conv(2, 3, &mut rng);
        let got = deconv3x3s2(&x, &l).unwrap();
        assert_eq!(got.shape(), &[6, 8, 3]);
        let want = deconv_oracle(&x, &l);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_impulse_kernel_passes_through() {
        let mut l = Conv::<f64> {
            kernel: Tensor::zeros(&[3, 3, 2, 2]),
            bias: Tensor::zeros(&[2]),
        };
        l.kernel.set(&[1, 1, 0, 0], 1.0);
        l.kernel.set(&[1, 1, 1, 1], 1.0);
        let mut rng = Rng::new(3, 0);
        let x = Tensor::from_fn(&[4, 4, 2], |_| rng.uniform(-1.0, 1.0));
        let mut y = conv3x3(&x, &l).unwrap();
        leaky_relu(&mut y, LEAKY_SLOPE);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(*a, if *b >= 0.0 { *b } else { b * LEAKY_SLOPE });
        }
    }

    fn fd_check_layer(deconv: bool) {
        let mut rng = Rng::new(if deconv { 5 } else { 4 }, 0);
        let x = rand_tensor(&[4, 3, 2], &mut rng);
        let l = random_conv(2, 3, &mut rng);
        let fwd = |x: &Tensor<f64>, l: &Conv<f64>| if deconv { deconv3x3s2(x, l) } else { conv3x3(x, l) }.unwrap();
        let probe = rand_tensor(fwd(&x, &l).shape(), &mut rng);
        let f = |x: &Tensor<f64>, l: &Conv<f64>| dot(fwd(x, l).data(), probe.data());
        let mut g = l.zeros_like();
        let dx = if deconv {
            deconv3x3s2_backward(&x, &l, &probe, &mut g)
        } else {
            conv3x3_backward(&x, &l, &probe, &mut g)
        }
        .unwrap();
        let h = 1e-5;
        for idx in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[idx] += h;
            xm.data_mut()[idx] -= h;
            let fd = (f(&xp, &l) - f(&xm, &l)) / (2.0 * h);
            assert!((fd - dx.data()[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
        for idx in 0..l.kernel.len() {
            let (mut lp, mut lm) = (l.clone(), l.clone());
            lp.kernel.data_mut()[idx] += h;
            lm.kernel.data_mut()[idx] -= h;
            let fd = (f(&x, &lp) - f(&x, &lm)) / (2.0 * h);
            assert!((fd - g.kernel.data()[idx]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        fd_check_layer(false);
    }

    #[test]
    fn deconv_backward_matches_finite_differences() {
        fd_check_layer(true);
    }

    fn labels(classes: Vec<i32>, h: usize, w: usize, c: usize) -> LabelMap {
        LabelMap::new(Tensor::from_vec(&[h, w], classes).unwrap(), c).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let l = labels(vec![0, 1, 2, 1, -1, 0], 2, 3, 4);
        let logits = Tensor::<f64>::full(&[2, 3, 4], 0.7);
        let (loss, _) = masked_cross_entropy(&logits, &l, CeVariant::Plain, None).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero_loss() {
        let l = labels(vec![0, 1, 2, 1], 2, 2, 3);
        let logits = Tensor::<f64>::from_fn(&[2, 2, 3], |f| {
            if f % 3 == l.classes.data()[f / 3] as usize { 100.0 } else { 0.0 }
        });
        let (loss, _) = masked_cross_entropy(&logits, &l, CeVariant::Plain, None).unwrap();
        assert!(loss < 1e-40);
    }

    #[test]
    fn all_excluded_is_an_error() {
        let l = labels(vec![-1; 4], 2, 2, 2);
        let logits = Tensor::<f64>::zeros(&[2, 2, 2]);
        assert!(matches!(masked_cross_entropy(&logits, &l, CeVariant::Plain, None), Err(Error::NoPixels)));
    }

    fn half_planes() -> LabelMap {
        labels((0..64).map(|f| if f % 8 < 3 { 0 } else { 1 }).collect(), 8, 8, 2)
    }

    #[test]
    fn gamma_total_weight_is_twice_boundary_count() {
        let l = half_planes();
        let w = ce_weights(&l, CeVariant::Gamma, None).unwrap();
        let b = boundary_mask(&l).data().iter().filter(|&&v| v).count() as f64;
        let total: f64 = w.iter().sum();
        assert!((total - 2.0 * b).abs() < 1e-12);
    }

    #[test]
    fn balanced_keeps_equal_counts() {
        let l = half_planes();
        let mut rng = Rng::new(0, 0);
        let w = ce_weights(&l, CeVariant::Balanced, Some(&mut rng)).unwrap();
        let bm = boundary_mask(&l);
        let nb = w.iter().zip(bm.data()).filter(|(&w, &b)| w > 0.0 && b).count();
        let ni = w.iter().zip(bm.data()).filter(|(&w, &b)| w > 0.0 && !b).count();
        assert_eq!(nb, 16);
        assert_eq!(ni, 16);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = Rng::new(9, 0);
        let l = labels((0..12).map(|f| [0, 1, 2, -1][f % 4]).collect(), 3, 4, 3);
        let logits = rand_tensor(&[3, 4, 3], &mut rng);
        let w = ce_weights(&l, CeVariant::Gamma, None).unwrap();
        let (_, g) = weighted_cross_entropy(&logits, &l, &w).unwrap();
        for idx in 0..logits.len() {
            let (mut p, mut m) = (logits.clone(), logits.clone());
            p.data_mut()[idx] += 1e-5;
            m.data_mut()[idx] -= 1e-5;
            let fd = (weighted_cross_entropy(&p, &l, &w).unwrap().0 - weighted_cross_entropy(&m, &l, &w).unwrap().0) / 2e-5;
            assert!((fd - g.data()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn classifier_backward_matches_finite_differences() {
        let mut rng = Rng::new(10, 0);
        let cls = ClassifierParams::<f64> {
            weight: rand_tensor(&[3, 4], &mut rng),
            bias: rand_tensor(&[3], &mut rng),
        };
        let y = rand_tensor(&[2, 2, 4], &mut rng);
        let probe = rand_tensor(&[2, 2, 3], &mut rng);
        let f = |c: &ClassifierParams<f64>, y: &Tensor<f64>| dot(c.forward(y).unwrap().data(), probe.data());
        let mut g = cls.zeros_like();
        let dy = cls.backward(&y, &probe, &mut g);
        for idx in 0..y.len() {
            let (mut p, mut m) = (y.clone(), y.clone());
            p.data_mut()[idx] += 1e-5;
            m.data_mut()[idx] -= 1e-5;
            assert!(((f(&cls, &p) - f(&cls, &m)) / 2e-5 - dy.data()[idx]).abs() < 1e-8);
        }
        for idx in 0..cls.weight.len() {
            let (mut p, mut m) = (cls.clone(), cls.clone());
            p.weight.data_mut()[idx] += 1e-5;
            m.weight.data_mut()[idx] -= 1e-5;
            assert!(((f(&p, &y) - f(&m, &y)) / 2e-5 - g.weight.data()[idx]).abs() < 1e-8);
        }
    }
}
