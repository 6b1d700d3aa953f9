//! Sliding-window parameters and the dilated, strided neighbourhood gather
//! shared by label generation and affinity computation.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// `w_d × w_d` window with dilation `w_r`, evaluated at every `w_s`-th
/// location, plus the loss hyperparameters that travel with it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub wd: usize,
    pub wr: usize,
    pub ws: usize,
    pub lambda: f64,
    pub margin: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            wd: 3,
            wr: 1,
            ws: 1,
            lambda: 0.125,
            margin: 0.0,
        }
    }
}

impl WindowConfig {
    pub fn new(wd: usize, wr: usize, ws: usize) -> Self {
        WindowConfig {
            wd,
            wr,
            ws,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.wd == 0 || self.wd % 2 == 0 {
            return Err(Error::Window(format!(
                "w_d must be odd and positive, got {}",
                self.wd
            )));
        }
        if self.wr == 0 || self.ws == 0 {
            return Err(Error::Window(format!(
                "w_r and w_s must be positive, got w_r={} w_s={}",
                self.wr, self.ws
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Window(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Index of the window centre.
    pub fn center(&self) -> usize {
        self.wd / 2
    }

    /// Spatial span covered by the dilated window.
    pub fn effective(&self) -> usize {
        effective_window(self.wd, self.wr)
    }

    /// Number of window centres along an axis of length `n`.
    pub fn out_len(&self, n: usize) -> usize {
        if n == 0 {
            0
        } else {
            (n - 1) / self.ws + 1
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (self.out_len(h), self.out_len(w))
    }

    /// Source coordinate of window entry `k` for the centre at output index `i`,
    /// or `None` when it falls outside `[0, n)`.
    #[inline]
    pub fn source(&self, i: usize, k: usize, n: usize) -> Option<usize> {
        let pos = (i * self.ws) as isize - (self.wr * self.center()) as isize + (self.wr * k) as isize;
        if pos >= 0 && (pos as usize) < n {
            Some(pos as usize)
        } else {
            None
        }
    }
}

/// `(w_d - 1)·w_r + 1`.
pub fn effective_window(wd: usize, wr: usize) -> usize {
    (wd - 1) * wr + 1
}

/// Per-entry padding flags, shaped `H'×W'×w_d×w_d`; `true` marks an
/// out-of-range neighbour.
pub type PadFlags = Tensor<bool>;

/// Counts live and peak elements held by intermediate gather buffers.
#[derive(Debug, Default)]
pub struct SpaceMeter {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl SpaceMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, n: usize) {
        let live = self.live.fetch_add(n, Ordering::SeqCst) + n;
        self.peak.fetch_max(live, Ordering::SeqCst);
    }

    pub fn free(&self, n: usize) {
        self.live.fetch_sub(n, Ordering::SeqCst);
    }

    pub fn live(&self) -> usize {
        self.live.load(Ordering::SeqCst)
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

/// Gathers the `w_r`-dilated `w_d×w_d` neighbourhood of every `w_s`-strided
/// centre of an `H×W×D` tensor. Out-of-range neighbours are zero-filled and
/// flagged.
pub fn window_gather<T: Element>(x: &Tensor<T>, cfg: &WindowConfig) -> Result<(Tensor<T>, PadFlags)> {
    cfg.validate()?;
    x.expect_ndim(3, "window_gather input")?;
    let (h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = cfg.out_hw(h, w);
    let wd = cfg.wd;
    let mut out = Tensor::zeros(&[ho, wo, wd, wd, d]);
    let mut pad = Tensor::full(&[ho, wo, wd, wd], false);
    let src = x.data();
    {
        let od = out.data_mut();
        let pd = pad.data_mut();
        for i in 0..ho {
            for j in 0..wo {
                for k in 0..wd {
                    let si = cfg.source(i, k, h);
                    for m in 0..wd {
                        let e = ((i * wo + j) * wd + k) * wd + m;
                        match (si, cfg.source(j, m, w)) {
                            (Some(a), Some(b)) => {
                                let s = (a * w + b) * d;
                                od[e * d..(e + 1) * d].copy_from_slice(&src[s..s + d]);
                            }
                            _ => pd[e] = true,
                        }
                    }
                }
            }
        }
    }
    Ok((out, pad))
}

/// Keeps every `g`-th row and column of an `H×W×D` tensor, starting at 0.
pub fn prestride<T: Element>(x: &Tensor<T>, g: usize) -> Result<Tensor<T>> {
    x.expect_ndim(3, "prestride input")?;
    if g == 0 {
        return Err(Error::Invalid("stride factor must be positive".into()));
    }
    let (h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (hs, ws) = ((h + g - 1) / g, (w + g - 1) / g);
    let mut data = Vec::with_capacity(hs * ws * d);
    for i in 0..hs {
        for j in 0..ws {
            let s = ((i * g) * w + j * g) * d;
            data.extend_from_slice(&x.data()[s..s + d]);
        }
    }
    Tensor::from_vec(&[hs, ws, d], data)
}
