//! Query/key projections, relative positional encodings and the local
//! cosine-affinity tensor, plus a reference local self-attention operator.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{dot, norm, Real, Tensor, NORM_EPS};
use crate::window::{PadFlags, WindowConfig};

/// Learnable parameters of the similarity head.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams<T> {
    /// `D_q × D_in`
    pub wq: Tensor<T>,
    /// `D_q × D_in`
    pub wk: Tensor<T>,
    /// Relative height encodings, `w_d × D_q/2`.
    pub rh: Tensor<T>,
    /// Relative width encodings, `w_d × D_q/2`.
    pub rw: Tensor<T>,
}

impl<T: Real> ProjectionParams<T> {
    /// Projections uniform in `±sqrt(1/D_in)`, positional tables zero.
    pub fn init(d_in: usize, d_q: usize, wd: usize, rng: &mut Rng) -> Result<Self> {
        if d_q % 2 != 0 {
            return Err(Error::Invalid(format!("D_q must be even, got {d_q}")));
        }
        let a = (1.0 / d_in as f64).sqrt();
        let wq = Tensor::from_fn(&[d_q, d_in], |_| rng.uniform(-a, a));
        let wk = Tensor::from_fn(&[d_q, d_in], |_| rng.uniform(-a, a));
        Ok(ProjectionParams {
            wq,
            wk,
            rh: Tensor::zeros(&[wd, d_q / 2]),
            rw: Tensor::zeros(&[wd, d_q / 2]),
        })
    }

    pub fn d_q(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.wq.shape()[1]
    }

    pub fn wd(&self) -> usize {
        self.rh.shape()[0]
    }

    pub fn validate(&self) -> Result<()> {
        let (dq, din) = (self.d_q(), self.d_in());
        if dq % 2 != 0 {
            return Err(Error::Shape(format!("D_q must be even, got {dq}")));
        }
        self.wk.expect_shape(&[dq, din], "W_k")?;
        let wd = self.wd();
        self.rh.expect_shape(&[wd, dq / 2], "R^H")?;
        self.rw.expect_shape(&[wd, dq / 2], "R^W")?;
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        ProjectionParams {
            wq: Tensor::zeros(self.wq.shape()),
            wk: Tensor::zeros(self.wk.shape()),
            rh: Tensor::zeros(self.rh.shape()),
            rw: Tensor::zeros(self.rw.shape()),
        }
    }

    pub fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.wq, &self.wk, &self.rh, &self.rw]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.wq, &mut self.wk, &mut self.rh, &mut self.rw]
    }

    pub const NAMES: [&'static str; 4] = ["wq", "wk", "rh", "rw"];
}

/// `out[p] = W · y[p]` for every location of an `H×W×D_in` map.
pub(crate) fn project<T: Real>(y: &Tensor<T>, w: &Tensor<T>) -> Tensor<T> {
    let (dq, din) = (w.shape()[0], w.shape()[1]);
    let n = y.len() / din;
    let mut out = Vec::with_capacity(n * dq);
    let wd = w.data();
    for v in y.data().chunks_exact(din) {
        for r in 0..dq {
            out.push(dot(&wd[r * din..(r + 1) * din], v));
        }
    }
    let mut shape = y.shape().to_vec();
    *shape.last_mut().unwrap() = dq;
    Tensor::from_vec(&shape, out).expect("consistent projection shape")
}

/// Queries and keys, `H×W×D_q` each. No normalisation.
pub fn project_qk<T: Real>(y: &Tensor<T>, p: &ProjectionParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    p.validate()?;
    check_embedding(y, p)?;
    Ok((project(y, &p.wq), project(y, &p.wk)))
}

fn check_embedding<T: Real>(y: &Tensor<T>, p: &ProjectionParams<T>) -> Result<()> {
    y.expect_ndim(3, "embedding")?;
    if y.shape()[2] != p.d_in() {
        return Err(Error::Shape(format!(
            "embedding has {} features, projections expect {}",
            y.shape()[2],
            p.d_in()
        )));
    }
    Ok(())
}

/// `w_d×w_d×D_q` grid with entry `(a, b)` = `[R^H[a], R^W[b]]`.
pub fn positional_grid<T: Real>(p: &ProjectionParams<T>) -> Result<Tensor<T>> {
    p.validate()?;
    let wd = p.wd();
    let half = p.d_q() / 2;
    let mut data = Vec::with_capacity(wd * wd * 2 * half);
    for a in 0..wd {
        for b in 0..wd {
            data.extend_from_slice(&p.rh.data()[a * half..(a + 1) * half]);
            data.extend_from_slice(&p.rw.data()[b * half..(b + 1) * half]);
        }
    }
    Tensor::from_vec(&[wd, wd, 2 * half], data)
}

/// Marker for padded window entries in [`AffinityTrace::neighbour`].
pub const PADDED: usize = usize::MAX;

/// Forward intermediates of the affinity computation, kept for the backward
/// pass.
#[derive(Debug, Clone)]
pub struct AffinityTrace<T> {
    pub ho: usize,
    pub wo: usize,
    pub wd: usize,
    pub dq: usize,
    pub use_pos: bool,
    /// Flat source location of each centre.
    pub centre: Vec<usize>,
    /// Flat source location of each window entry, or [`PADDED`].
    pub neighbour: Vec<usize>,
    pub qhat: Vec<T>,
    pub qnorm: Vec<T>,
    pub khat: Vec<T>,
    pub knorm: Vec<T>,
    pub s: Tensor<T>,
    pub pad: PadFlags,
}

/// Cosine between a unit query and the positionally shifted key. Writes the
/// normalised key into `khat` and returns `(|k + r|, cosine)`.
#[inline]
pub(crate) fn pair_cosine<T: Real>(qhat: &[T], key: &[T], r: Option<&[T]>, khat: &mut [T]) -> (T, T) {
    match r {
        Some(r) => {
            for ((o, &k), &rv) in khat.iter_mut().zip(key).zip(r) {
                *o = k + rv;
            }
        }
        None => khat.copy_from_slice(key),
    }
    let n = norm(khat);
    let d = n.max(T::lit(NORM_EPS));
    khat.iter_mut().for_each(|v| *v /= d);
    (n, dot(qhat, khat))
}

/// Unit query and its raw norm.
#[inline]
pub(crate) fn unit_query<T: Real>(q: &[T], out: &mut [T]) -> T {
    let n = norm(q);
    let d = n.max(T::lit(NORM_EPS));
    for (o, &v) in out.iter_mut().zip(q) {
        *o = v / d;
    }
    n
}

/// Builds a trace from keys available at every location of an `h×w` grid
/// (`keys_at(flat)` returns the key vector) and projected queries for every
/// centre.
pub(crate) fn trace_from_parts<'a, T: Real>(
    h: usize,
    w: usize,
    cfg: &WindowConfig,
    dq: usize,
    queries: &[T],
    keys_at: impl Fn(usize, usize) -> &'a [T],
    grid: Option<&Tensor<T>>,
) -> AffinityTrace<T>
where
    T: 'a,
{
    let (ho, wo) = cfg.out_hw(h, w);
    let wd = cfg.wd;
    let entries = ho * wo * wd * wd;
    let mut tr = AffinityTrace {
        ho,
        wo,
        wd,
        dq,
        use_pos: grid.is_some(),
        centre: Vec::with_capacity(ho * wo),
        neighbour: vec![PADDED; entries],
        qhat: vec![T::zero(); ho * wo * dq],
        qnorm: vec![T::zero(); ho * wo],
        khat: vec![T::zero(); entries * dq],
        knorm: vec![T::zero(); entries],
        s: Tensor::zeros(&[ho, wo, wd, wd]),
        pad: Tensor::full(&[ho, wo, wd, wd], false),
    };
    let sd = tr.s.data_mut();
    let pd = tr.pad.data_mut();
    for i in 0..ho {
        for j in 0..wo {
            let c = i * wo + j;
            tr.centre.push((i * cfg.ws) * w + j * cfg.ws);
            let qh = &mut tr.qhat[c * dq..(c + 1) * dq];
            tr.qnorm[c] = unit_query(&queries[c * dq..(c + 1) * dq], qh);
            let qh = &tr.qhat[c * dq..(c + 1) * dq];
            for k in 0..wd {
                let si = cfg.source(i, k, h);
                for m in 0..wd {
                    let e = c * wd * wd + k * wd + m;
                    let (a, b) = match (si, cfg.source(j, m, w)) {
                        (Some(a), Some(b)) => (a, b),
                        _ => {
                            pd[e] = true;
                            continue;
                        }
                    };
                    tr.neighbour[e] = a * w + b;
                    let r = grid.map(|g| &g.data()[(k * wd + m) * dq..(k * wd + m + 1) * dq]);
                    let (n, s) = pair_cosine(qh, keys_at(a, b), r, &mut tr.khat[e * dq..(e + 1) * dq]);
                    tr.knorm[e] = n;
                    sd[e] = s;
                }
            }
        }
    }
    tr
}

/// Full forward trace of the affinity tensor.
pub fn affinity_trace<T: Real>(
    y: &Tensor<T>,
    p: &ProjectionParams<T>,
    cfg: &WindowConfig,
    use_pos: bool,
) -> Result<AffinityTrace<T>> {
    cfg.validate()?;
    p.validate()?;
    check_embedding(y, p)?;
    if p.wd() != cfg.wd {
        return Err(Error::Shape(format!(
            "positional tables sized for w_d={}, window has w_d={}",
            p.wd(),
            cfg.wd
        )));
    }
    let (h, w) = (y.shape()[0], y.shape()[1]);
    let dq = p.d_q();
    let keys = project(y, &p.wk);
    // Queries are only needed at the strided centres.
    let (ho, wo) = cfg.out_hw(h, w);
    let centres = crate::window::prestride(y, cfg.ws)?;
    debug_assert_eq!(centres.shape()[..2], [ho, wo]);
    let queries = project(&centres, &p.wq);
    let grid = if use_pos { Some(positional_grid(p)?) } else { None };
    let kd = keys.data();
    Ok(trace_from_parts(
        h,
        w,
        cfg,
        dq,
        queries.data(),
        |a, b| &kd[(a * w + b) * dq..(a * w + b + 1) * dq],
        grid.as_ref(),
    ))
}

/// Local affinity tensor `S` (`H'×W'×w_d×w_d`) and its pad flags. Padded
/// entries hold 0. With `use_pos = false` the positional term is dropped.
pub fn affinity<T: Real>(
    y: &Tensor<T>,
    p: &ProjectionParams<T>,
    cfg: &WindowConfig,
    use_pos: bool,
) -> Result<(Tensor<T>, PadFlags)> {
    let tr = affinity_trace(y, p, cfg, use_pos)?;
    Ok((tr.s, tr.pad))
}

#[inline]
pub(crate) fn unit_backward<T: Real>(g: &[T], unit: &[T], raw_norm: T, out: &mut [T]) {
    let eps = T::lit(NORM_EPS);
    if raw_norm >= eps {
        let gu = dot(g, unit);
        for ((o, &gv), &u) in out.iter_mut().zip(g).zip(unit) {
            *o = (gv - gu * u) / raw_norm;
        }
    } else {
        for (o, &gv) in out.iter_mut().zip(g) {
            *o = gv / eps;
        }
    }
}

/// Gradients flowing out of the affinity head.
#[derive(Debug, Clone)]
pub struct AffinityGrads<T> {
    pub dy: Tensor<T>,
    pub params: ProjectionParams<T>,
}

/// Reverse pass of [`affinity_trace`] given `dL/dS`.
pub fn affinity_backward<T: Real>(
    tr: &AffinityTrace<T>,
    y: &Tensor<T>,
    p: &ProjectionParams<T>,
    ds: &Tensor<T>,
) -> Result<AffinityGrads<T>> {
    ds.expect_shape(tr.s.shape(), "dL/dS")?;
    let (h, w, din) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let dq = tr.dq;
    let wd = tr.wd;
    let half = dq / 2;
    let nc = tr.ho * tr.wo;
    let mut gq = vec![T::zero(); nc * dq];
    let mut gk = vec![T::zero(); h * w * dq];
    let mut grads = p.zeros_like();
    let mut gqhat = vec![T::zero(); dq];
    let mut gkhat = vec![T::zero(); dq];
    let mut gkr = vec![T::zero(); dq];
    let dsd = ds.data();
    for c in 0..nc {
        gqhat.iter_mut().for_each(|v| *v = T::zero());
        let qh = &tr.qhat[c * dq..(c + 1) * dq];
        for e in c * wd * wd..(c + 1) * wd * wd {
            let src = tr.neighbour[e];
            let g = dsd[e];
            if src == PADDED || g == T::zero() {
                continue;
            }
            let kh = &tr.khat[e * dq..(e + 1) * dq];
            for t in 0..dq {
                gqhat[t] += g * kh[t];
                gkhat[t] = g * qh[t];
            }
            unit_backward(&gkhat, kh, tr.knorm[e], &mut gkr);
            for (a, &b) in gk[src * dq..(src + 1) * dq].iter_mut().zip(&gkr) {
                *a += b;
            }
            if tr.use_pos {
                let k = (e / wd) % wd;
                let m = e % wd;
                for t in 0..half {
                    grads.rh.data_mut()[k * half + t] += gkr[t];
                    grads.rw.data_mut()[m * half + t] += gkr[half + t];
                }
            }
        }
        unit_backward(&gqhat, qh, tr.qnorm[c], &mut gq[c * dq..(c + 1) * dq]);
    }

    let mut dy = Tensor::zeros(&[h, w, din]);
    let yd = y.data();
    let (wqd, wkd) = (p.wq.data(), p.wk.data());
    {
        let dyd = dy.data_mut();
        let gwq = grads.wq.data_mut();
        for c in 0..nc {
            let src = tr.centre[c];
            let yv = &yd[src * din..(src + 1) * din];
            let out = &mut dyd[src * din..(src + 1) * din];
            for r in 0..dq {
                let g = gq[c * dq + r];
                if g == T::zero() {
                    continue;
                }
                let row = &wqd[r * din..(r + 1) * din];
                let grow = &mut gwq[r * din..(r + 1) * din];
                for t in 0..din {
                    grow[t] += g * yv[t];
                    out[t] += g * row[t];
                }
            }
        }
    }
    {
        let dyd = dy.data_mut();
        let gwk = grads.wk.data_mut();
        for src in 0..h * w {
            let yv = &yd[src * din..(src + 1) * din];
            let out = &mut dyd[src * din..(src + 1) * din];
            for r in 0..dq {
                let g = gk[src * dq + r];
                if g == T::zero() {
                    continue;
                }
                let row = &wkd[r * din..(r + 1) * din];
                let grow = &mut gwk[r * din..(r + 1) * din];
                for t in 0..din {
                    grow[t] += g * yv[t];
                    out[t] += g * row[t];
                }
            }
        }
    }
    Ok(AffinityGrads { dy, params: grads })
}

/// Value projection for the reference attention operator.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceAttentionParams<T> {
    /// `D_out × D_in`
    pub wv: Tensor<T>,
}

/// Single-head local self-attention with relative positional encodings,
/// on raw (unnormalised) queries and keys. The softmax runs over in-range
/// neighbours only. Returns the `H'×W'×D_out` output and the attention
/// weights (`H'×W'×w_d×w_d`, zero at padded entries).
pub fn local_self_attention_with_weights<T: Real>(
    y: &Tensor<T>,
    p: &ProjectionParams<T>,
    v: &ReferenceAttentionParams<T>,
    cfg: &WindowConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    cfg.validate()?;
    let (q, k) = project_qk(y, p)?;
    if v.wv.ndim() != 2 || v.wv.shape()[1] != p.d_in() {
        return Err(Error::Shape(format!(
            "W_v must be D_out×{}, got {:?}",
            p.d_in(),
            v.wv.shape()
        )));
    }
    if p.wd() != cfg.wd {
        return Err(Error::Shape("positional tables do not match w_d".into()));
    }
    let vals = project(y, &v.wv);
    let grid = positional_grid(p)?;
    let (h, w) = (y.shape()[0], y.shape()[1]);
    let (ho, wo) = cfg.out_hw(h, w);
    let (wd, dq, dout) = (cfg.wd, p.d_q(), v.wv.shape()[0]);
    let mut out = Tensor::zeros(&[ho, wo, dout]);
    let mut weights = Tensor::zeros(&[ho, wo, wd, wd]);
    let mut logits = vec![T::zero(); wd * wd];
    let mut valid = vec![PADDED; wd * wd];
    let mut kr = vec![T::zero(); dq];
    for i in 0..ho {
        for j in 0..wo {
            let centre = (i * cfg.ws) * w + j * cfg.ws;
            let qv = &q.data()[centre * dq..(centre + 1) * dq];
            let mut best = T::neg_infinity();
            for e in 0..wd * wd {
                let (kk, mm) = (e / wd, e % wd);
                valid[e] = match (cfg.source(i, kk, h), cfg.source(j, mm, w)) {
                    (Some(a), Some(b)) => a * w + b,
                    _ => PADDED,
                };
                if valid[e] == PADDED {
                    continue;
                }
                let src = valid[e];
                let r = &grid.data()[e * dq..(e + 1) * dq];
                for t in 0..dq {
                    kr[t] = k.data()[src * dq + t] + r[t];
                }
                logits[e] = dot(qv, &kr);
                best = best.max(logits[e]);
            }
            if best == T::neg_infinity() {
                return Err(Error::EmptyWindow(i, j));
            }
            let mut z = T::zero();
            for e in 0..wd * wd {
                if valid[e] != PADDED {
                    logits[e] = (logits[e] - best).exp();
                    z += logits[e];
                }
            }
            let c = i * wo + j;
            for e in 0..wd * wd {
                if valid[e] == PADDED {
                    continue;
                }
                let a = logits[e] / z;
                weights.data_mut()[c * wd * wd + e] = a;
                let vv = &vals.data()[valid[e] * dout..(valid[e] + 1) * dout];
                for (o, &x) in out.data_mut()[c * dout..(c + 1) * dout].iter_mut().zip(vv) {
                    *o += a * x;
                }
            }
        }
    }
    Ok((out, weights))
}

pub fn local_self_attention<T: Real>(
    y: &Tensor<T>,
    p: &ProjectionParams<T>,
    v: &ReferenceAttentionParams<T>,
    cfg: &WindowConfig,
) -> Result<Tensor<T>> {
    local_self_attention_with_weights(y, p, v, cfg).map(|(o, _)| o)
}
