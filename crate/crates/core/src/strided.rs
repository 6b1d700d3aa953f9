//! Reduced-space path for dilated, strided windows.
//!
//! When `w_r > 1`, `w_s > 1` and one divides the other, every location read
//! by the affinity computation is a multiple of `g = min(w_r, w_s)`: centres
//! sit at multiples of `w_s` and neighbour offsets at multiples of `w_r`.
//! Pre-striding the embedding by `g` therefore drops only locations that
//! never contribute, after which the window runs with dilation `w_r/g` and
//! stride `w_s/g`.
//!
//! Both paths here follow the unfold-then-subsample algorithm: keys are
//! unfolded densely (stride 1) over the whole grid and the strided centres are
//! selected afterwards. The unfold buffer is what the [`SpaceMeter`] counts.

use std::collections::BTreeSet;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::labels::{build_pair_labels, LabelMap, PairLabelTensor};
use crate::rng::Rng;
use crate::similarity::{pair_cosine, positional_grid, project, unit_query, ProjectionParams};
use crate::tensor::{Real, Tensor};
use crate::window::{prestride, window_gather, PadFlags, SpaceMeter, WindowConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StridePlan {
    pub eligible: bool,
    /// Pre-stride factor.
    pub g: usize,
    pub wr_inner: usize,
    pub ws_inner: usize,
    pub claimed_space_factor: f64,
}

pub fn plan_stride(cfg: &WindowConfig) -> StridePlan {
    let (wr, ws) = (cfg.wr, cfg.ws);
    let eligible = wr > 1 && ws > 1 && (wr % ws == 0 || ws % wr == 0);
    if !eligible {
        return StridePlan {
            eligible,
            g: 1,
            wr_inner: wr,
            ws_inner: ws,
            claimed_space_factor: 1.0,
        };
    }
    let g = wr.min(ws);
    let ratio = (wr as f64 / ws as f64).max(ws as f64 / wr as f64);
    StridePlan {
        eligible,
        g,
        wr_inner: wr / g,
        ws_inner: ws / g,
        claimed_space_factor: ratio * ratio,
    }
}

impl StridePlan {
    pub fn inner(&self, cfg: &WindowConfig) -> WindowConfig {
        WindowConfig {
            wr: self.wr_inner,
            ws: self.ws_inner,
            ..*cfg
        }
    }
}

/// Source coordinates read by a path, for index-trace comparisons.
pub type SourceTrace = BTreeSet<(usize, usize)>;

/// Unfold keys densely over an `h×w` grid, then evaluate the cosine
/// affinities at the `cfg.ws`-strided centres. `scale` maps grid coordinates
/// back to the original embedding for tracing.
#[allow(clippy::too_many_arguments)]
fn unfold_path<T: Real>(
    y: &Tensor<T>,
    p: &ProjectionParams<T>,
    cfg: &WindowConfig,
    use_pos: bool,
    meter: Option<&SpaceMeter>,
    mut trace: Option<&mut SourceTrace>,
    scale: usize,
) -> Result<(Tensor<T>, PadFlags)> {
    cfg.validate()?;
    p.validate()?;
    y.expect_ndim(3, "embedding")?;
    if y.shape()[2] != p.d_in() || p.wd() != cfg.wd {
        return Err(Error::Shape("embedding or positional tables do not match".into()));
    }
    let (h, w) = (y.shape()[0], y.shape()[1]);
    let dq = p.d_q();
    let wd = cfg.wd;
    let keys = project(y, &p.wk);
    let centres = prestride(y, cfg.ws)?;
    let queries = project(&centres, &p.wq);
    let dense = WindowConfig { ws: 1, ..*cfg };
    let (unfolded, dense_pad) = window_gather(&keys, &dense)?;
    if let Some(m) = meter {
        m.alloc(unfolded.len());
    }
    let grid = if use_pos { Some(positional_grid(p)?) } else { None };
    let (ho, wo) = cfg.out_hw(h, w);
    let mut s = Tensor::zeros(&[ho, wo, wd, wd]);
    let mut pad = Tensor::full(&[ho, wo, wd, wd], false);
    let mut qhat = vec![T::zero(); dq];
    let mut khat = vec![T::zero(); dq];
    let ud = unfolded.data();
    for i in 0..ho {
        for j in 0..wo {
            let c = i * wo + j;
            unit_query(&queries.data()[c * dq..(c + 1) * dq], &mut qhat);
            let src = (i * cfg.ws) * w + j * cfg.ws;
            for e in 0..wd * wd {
                let ue = src * wd * wd + e;
                let oe = c * wd * wd + e;
                if dense_pad.data()[ue] {
                    pad.data_mut()[oe] = true;
                    continue;
                }
                if let Some(t) = trace.as_deref_mut() {
                    let (k, m) = (e / wd, e % wd);
                    let a = cfg.source(i, k, h).expect("in range");
                    let b = cfg.source(j, m, w).expect("in range");
                    t.insert((a * scale, b * scale));
                }
                let r = grid.as_ref().map(|g| &g.data()[e * dq..(e + 1) * dq]);
                let (_, v) = pair_cosine(&qhat, &ud[ue * dq..(ue + 1) * dq], r, &mut khat);
                s.data_mut()[oe] = v;
            }
        }
    }
    if let Some(m) = meter {
        m.free(unfolded.len());
    }
    Ok((s, pad))
}

/// Unfold-then-subsample affinity over the full grid.
pub fn affinity_naive<T: Real>(
    y: &Tensor<T>,
    p: &ProjectionParams<T>,
    cfg: &WindowConfig,
    use_pos: bool,
    meter: Option<&SpaceMeter>,
    trace: Option<&mut SourceTrace>,
) -> Result<(Tensor<T>, PadFlags)> {
    unfold_path(y, p, cfg, use_pos, meter, trace, 1)
}

/// Affinity over the `g`-strided sub-grid. Elementwise identical to
/// [`crate::similarity::affinity`].
pub fn affinity_strided<T: Real>(
    y: &Tensor<T>,
    p: &ProjectionParams<T>,
    cfg: &WindowConfig,
    use_pos: bool,
) -> Result<(Tensor<T>, PadFlags)> {
    affinity_strided_metered(y, p, cfg, use_pos, None, None)
}

pub fn affinity_strided_metered<T: Real>(
    y: &Tensor<T>,
    p: &ProjectionParams<T>,
    cfg: &WindowConfig,
    use_pos: bool,
    meter: Option<&SpaceMeter>,
    trace: Option<&mut SourceTrace>,
) -> Result<(Tensor<T>, PadFlags)> {
    let plan = require_plan(cfg)?;
    let sub = prestride(y, plan.g)?;
    unfold_path(&sub, p, &plan.inner(cfg), use_pos, meter, trace, plan.g)
}

fn require_plan(cfg: &WindowConfig) -> Result<StridePlan> {
    cfg.validate()?;
    let plan = plan_stride(cfg);
    if !plan.eligible {
        return Err(Error::NotStridable(format!(
            "w_r={} w_s={}; use the naive path",
            cfg.wr, cfg.ws
        )));
    }
    Ok(plan)
}

/// Pair labels computed on the `g`-strided label grid.
pub fn pair_labels_strided(labels: &LabelMap, cfg: &WindowConfig) -> Result<PairLabelTensor> {
    let plan = require_plan(cfg)?;
    let (h, w) = (labels.height(), labels.width());
    let column = labels.classes.clone().reshape(&[h, w, 1])?;
    let sub = prestride(&column, plan.g)?;
    let (hs, wss) = (sub.shape()[0], sub.shape()[1]);
    let sub = LabelMap::new(sub.reshape(&[hs, wss])?, labels.num_classes)?;
    build_pair_labels(&sub, &plan.inner(cfg))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub cfg: WindowConfig,
    pub naive_peak_elems: usize,
    pub strided_peak_elems: usize,
    pub naive_ms: f64,
    pub strided_ms: f64,
    pub measured_factor: f64,
    /// Strided output equals naive output elementwise.
    pub equivalent: bool,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str =
        "H,W,D,cfg,naive_peak_elems,strided_peak_elems,naive_ms,strided_ms,measured_factor";

    pub fn cfg_label(&self) -> String {
        format!("wd{}_wr{}_ws{}", self.cfg.wd, self.cfg.wr, self.cfg.ws)
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3},{:.3},{:.4}",
            self.h,
            self.w,
            self.d,
            self.cfg_label(),
            self.naive_peak_elems,
            self.strided_peak_elems,
            self.naive_ms,
            self.strided_ms,
            self.measured_factor
        )
    }
}

/// Measures peak unfold-buffer elements and wall time of both paths on random
/// `f32` data. Ineligible configurations run the naive path twice and report
/// a factor of 1.
pub fn bench_stride(sizes: &[(usize, usize, usize)], cfgs: &[WindowConfig], seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for (si, &(h, w, d)) in sizes.iter().enumerate() {
        let mut rng = Rng::new(seed, si as u64);
        let y: Tensor<f32> = Tensor::from_fn(&[h, w, d], |_| rng.uniform(-1.0, 1.0));
        for cfg in cfgs {
            let mut prng = rng.fork(1000);
            let mut p = ProjectionParams::<f32>::init(d, d, cfg.wd, &mut prng)?;
            p.rh = Tensor::from_fn(p.rh.shape(), |_| prng.uniform(-0.1, 0.1));
            p.rw = Tensor::from_fn(p.rw.shape(), |_| prng.uniform(-0.1, 0.1));
            let naive_meter = SpaceMeter::new();
            let t0 = Instant::now();
            let (s_naive, pad_naive) = affinity_naive(&y, &p, cfg, true, Some(&naive_meter), None)?;
            let naive_ms = t0.elapsed().as_secs_f64() * 1e3;
            let plan = plan_stride(cfg);
            let strided_meter = SpaceMeter::new();
            let t1 = Instant::now();
            let (s_str, pad_str) = if plan.eligible {
                affinity_strided_metered(&y, &p, cfg, true, Some(&strided_meter), None)?
            } else {
                affinity_naive(&y, &p, cfg, true, Some(&strided_meter), None)?
            };
            let strided_ms = t1.elapsed().as_secs_f64() * 1e3;
            let measured_factor = if plan.eligible {
                naive_meter.peak() as f64 / strided_meter.peak().max(1) as f64
            } else {
                1.0
            };
            rows.push(BenchRow {
                h,
                w,
                d,
                cfg: *cfg,
                naive_peak_elems: naive_meter.peak(),
                strided_peak_elems: strided_meter.peak(),
                naive_ms,
                strided_ms,
                measured_factor,
                equivalent: s_naive == s_str && pad_naive == pad_str,
            });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BenchRow::CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::affinity;

    fn cfg(wd: usize, wr: usize, ws: usize) -> WindowConfig {
        WindowConfig::new(wd, wr, ws)
    }

    #[test]
    fn plan_examples() {
        let p = plan_stride(&cfg(3, 2, 4));
        assert!(p.eligible);
        assert_eq!((p.g, p.wr_inner, p.ws_inner), (2, 1, 2));
        assert_eq!(p.claimed_space_factor, 4.0);
        assert!(!plan_stride(&cfg(3, 3, 1)).eligible);
        assert!(!plan_stride(&cfg(3, 2, 3)).eligible);
        let p = plan_stride(&cfg(3, 4, 2));
        assert_eq!((p.g, p.wr_inner, p.ws_inner), (2, 2, 1));
        let p = plan_stride(&cfg(3, 2, 2));
        assert_eq!((p.g, p.wr_inner, p.ws_inner, p.claimed_space_factor), (2, 1, 1, 1.0));
    }

    #[test]
    fn planning_is_idempotent() {
        for (wr, ws) in [(2, 2), (2, 4), (4, 2), (3, 3), (3, 6), (6, 3), (4, 8)] {
            let c = cfg(3, wr, ws);
            let inner = plan_stride(&c).inner(&c);
            assert!(!plan_stride(&inner).eligible, "({wr},{ws})");
        }
    }

    #[test]
    fn ineligible_config_is_rejected() {
        let y = Tensor::<f64>::zeros(&[4, 4, 2]);
        let mut rng = Rng::new(0, 0);
        let p = ProjectionParams::init(2, 2, 3, &mut rng).unwrap();
        assert!(matches!(
            affinity_strided(&y, &p, &cfg(3, 2, 3), true),
            Err(Error::NotStridable(_))
        ));
    }

    #[test]
    fn strided_equals_direct_affinity() {
        let mut rng = Rng::new(7, 0);
        let y: Tensor<f64> = Tensor::from_fn(&[24, 24, 8], |_| rng.uniform(-1.0, 1.0));
        for (wr, ws) in [(2, 2), (2, 4), (4, 2)] {
            let c = cfg(3, wr, ws);
            let mut p = ProjectionParams::init(8, 8, 3, &mut rng).unwrap();
            p.rh = Tensor::from_fn(&[3, 4], |_| rng.uniform(-0.5, 0.5));
            p.rw = Tensor::from_fn(&[3, 4], |_| rng.uniform(-0.5, 0.5));
            let direct = affinity(&y, &p, &c, true).unwrap();
            let naive = affinity_naive(&y, &p, &c, true, None, None).unwrap();
            let strided = affinity_strided(&y, &p, &c, true).unwrap();
            assert_eq!(direct, naive);
            assert_eq!(direct, strided);
        }
    }

    #[test]
    fn strided_reads_exactly_the_naive_sources() {
        let mut rng = Rng::new(8, 0);
        for (h, w, wr, ws) in [(9, 11, 2, 4), (10, 7, 4, 2), (12, 12, 3, 3), (13, 8, 3, 6)] {
            let y: Tensor<f64> = Tensor::from_fn(&[h, w, 2], |_| rng.uniform(-1.0, 1.0));
            let p = ProjectionParams::init(2, 2, 3, &mut rng).unwrap();
            let c = cfg(3, wr, ws);
            let mut a = SourceTrace::new();
            let mut b = SourceTrace::new();
            affinity_naive(&y, &p, &c, false, None, Some(&mut a)).unwrap();
            affinity_strided_metered(&y, &p, &c, false, None, Some(&mut b)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn strided_labels_equal_naive() {
        let mut rng = Rng::new(12, 0);
        let uniform = LabelMap::new(Tensor::zeros(&[10, 10]), 1).unwrap();
        let c = cfg(3, 2, 2);
        let s = pair_labels_strided(&uniform, &c).unwrap();
        assert!(s.data().iter().enumerate().all(|(f, &v)| {
            // Entries pointing outside the grid are false.
            let pf = crate::labels::pad_flags(10, 10, &c).unwrap();
            v == !pf.data()[f]
        }));
        assert_eq!(s, build_pair_labels(&uniform, &c).unwrap());
        for c in [cfg(3, 2, 2), cfg(5, 2, 4)] {
            let m = LabelMap::new(Tensor::from_fn(&[17, 13], |_| rng.below(4) as i32 - 1), 3).unwrap();
            assert_eq!(pair_labels_strided(&m, &c).unwrap(), build_pair_labels(&m, &c).unwrap());
        }
    }

    #[test]
    fn meter_sees_the_reduction() {
        let rows = bench_stride(&[(32, 32, 4)], &[cfg(3, 2, 4), cfg(3, 2, 3)], 0).unwrap();
        assert_eq!(rows[0].measured_factor, 4.0);
        assert!(rows[0].equivalent);
        assert_eq!(rows[1].measured_factor, 1.0);
        let csv = bench_csv(&rows);
        assert!(csv.starts_with(BenchRow::CSV_HEADER));
        assert_eq!(csv.lines().count(), 3);
    }
}
