//! Oracle and gradient suites shared by the `check` command and the test
//! suites.

use crate::error::Result;
use crate::gradcheck::{default_cases, finite_diff_check, network_checks, GradCheckRow};
use crate::labels::{build_pair_labels, pair_labels_bruteforce, LabelMap, EXCLUDED};
use crate::rng::Rng;
use crate::similarity::{affinity, ProjectionParams};
use crate::strided::{affinity_naive, affinity_strided, pair_labels_strided};
use crate::tensor::{Real, Tensor};
use crate::window::WindowConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    /// Largest absolute deviation seen (0 for exact comparisons).
    pub max_err: f64,
}

impl SuiteReport {
    pub const CSV_HEADER: &'static str = "suite,cases,failures,max_err,passed";

    pub fn passed(&self) -> bool {
        self.cases > 0 && self.failures == 0
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:e},{}",
            self.name,
            self.cases,
            self.failures,
            self.max_err,
            self.passed()
        )
    }
}

/// Every `(w_d, w_r, w_s)` of the label oracle sweep.
pub fn label_configs(wds: &[usize]) -> Vec<WindowConfig> {
    let mut out = Vec::new();
    for &wd in wds {
        for wr in 1..=3 {
            for ws in 1..=2 {
                out.push(WindowConfig::new(wd, wr, ws));
            }
        }
    }
    out
}

/// Largest number of maps enumerated per (shape, class count); bigger
/// spaces are sampled instead.
pub const ENUMERATION_LIMIT: usize = 4096;

fn compare_labels(labels: &LabelMap, cfgs: &[WindowConfig], report: &mut SuiteReport) -> Result<()> {
    for cfg in cfgs {
        report.cases += 1;
        if build_pair_labels(labels, cfg)? != pair_labels_bruteforce(labels, cfg)? {
            report.failures += 1;
        }
    }
    Ok(())
}

/// Vectorised pair labels against the scalar oracle: every map shape up to
/// `max_side×max_side` and every class count up to `max_classes`, with all
/// label assignments enumerated where the space is at most
/// [`ENUMERATION_LIMIT`] (sampled otherwise, with excluded cells mixed in),
/// followed by `random_maps` random `12×12` maps.
pub fn label_suite(max_side: usize, max_classes: usize, wds: &[usize], random_maps: usize, seed: u64) -> Result<SuiteReport> {
    let cfgs = label_configs(wds);
    let mut report = SuiteReport {
        name: "pair_labels".into(),
        cases: 0,
        failures: 0,
        max_err: 0.0,
    };
    let mut rng = Rng::new(seed, 0);
    for h in 1..=max_side {
        for w in 1..=max_side {
            for c in 1..=max_classes {
                let n = h * w;
                let space = (c as f64).powi(n as i32);
                if space <= ENUMERATION_LIMIT as f64 {
                    for code in 0..space as usize {
                        let mut rest = code;
                        let classes = Tensor::from_fn(&[h, w], |_| {
                            let v = rest % c;
                            rest /= c;
                            v as i32
                        });
                        compare_labels(&LabelMap::new(classes, c)?, &cfgs, &mut report)?;
                    }
                } else {
                    for _ in 0..64 {
                        let classes = random_classes(h, w, c, &mut rng);
                        compare_labels(&LabelMap::new(classes, c)?, &cfgs, &mut report)?;
                    }
                }
            }
        }
    }
    for _ in 0..random_maps {
        let c = 1 + rng.below(max_classes.max(1));
        let classes = random_classes(12, 12, c, &mut rng);
        compare_labels(&LabelMap::new(classes, c)?, &cfgs, &mut report)?;
    }
    Ok(report)
}

fn random_classes(h: usize, w: usize, c: usize, rng: &mut Rng) -> Tensor<i32> {
    Tensor::from_fn(&[h, w], |_| {
        if rng.bernoulli(0.1) {
            EXCLUDED
        } else {
            rng.below(c) as i32
        }
    })
}

/// Per-pair scalar cosine computed in `f64` straight from the definition:
/// query of the centre, key of the neighbour shifted by its row/column
/// encodings, each divided by its clamped norm. Padded entries are 0.
pub fn affinity_scalar_oracle<T: Real>(y: &Tensor<T>, p: &ProjectionParams<T>, cfg: &WindowConfig, use_pos: bool) -> Tensor<f64> {
    let (h, w, din) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let dq = p.wq.shape()[0];
    let half = dq / 2;
    let (wd, wr, ws) = (cfg.wd as i64, cfg.wr as i64, cfg.ws as i64);
    let c = wd / 2;
    let ho = (h - 1) / cfg.ws + 1;
    let wo = (w - 1) / cfg.ws + 1;
    let mat = |m: &Tensor<T>, i: usize, j: usize| -> Vec<f64> {
        (0..dq)
            .map(|r| (0..din).map(|d| m.get(&[r, d]).as_f64() * y.get(&[i, j, d]).as_f64()).sum())
            .collect()
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let mut out = Vec::with_capacity(ho * wo * cfg.wd * cfg.wd);
    for i in 0..ho as i64 {
        for j in 0..wo as i64 {
            let (ci, cj) = (i * ws, j * ws);
            let q = mat(&p.wq, ci as usize, cj as usize);
            for k in 0..wd {
                for m in 0..wd {
                    let (si, sj) = (ci - wr * (c - k), cj - wr * (c - m));
                    if si < 0 || sj < 0 || si >= h as i64 || sj >= w as i64 {
                        out.push(0.0);
                        continue;
                    }
                    let mut key = mat(&p.wk, si as usize, sj as usize);
                    if use_pos {
                        for e in 0..half {
                            key[e] += p.rh.get(&[k as usize, e]).as_f64();
                            key[half + e] += p.rw.get(&[m as usize, e]).as_f64();
                        }
                    }
                    let d: f64 = q.iter().zip(&key).map(|(a, b)| a * b).sum();
                    out.push(d / (norm(&q) * norm(&key)));
                }
            }
        }
    }
    Tensor::from_vec(&[ho, wo, cfg.wd, cfg.wd], out).expect("oracle extents")
}

/// `affinity` in `f32` against [`affinity_scalar_oracle`] on randomised
/// configurations; a configuration fails if any entry deviates by more
/// than `tol`.
pub fn affinity_suite(configs: usize, tol: f64, seed: u64) -> Result<SuiteReport> {
    let mut rng = Rng::new(seed, 1);
    let mut report = SuiteReport {
        name: "affinity".into(),
        cases: 0,
        failures: 0,
        max_err: 0.0,
    };
    for _ in 0..configs {
        let (h, w) = (2 + rng.below(11), 2 + rng.below(11));
        let din = 1 + rng.below(16);
        let dq = 2 * (1 + rng.below(8));
        let cfg = WindowConfig::new(1 + 2 * rng.below(4), 1 + rng.below(3), 1 + rng.below(3));
        let use_pos = rng.bernoulli(0.5);
        let y: Tensor<f32> = Tensor::from_fn(&[h, w, din], |_| rng.uniform(-1.0, 1.0));
        let mut p = ProjectionParams::<f32>::init(din, dq, cfg.wd, &mut rng)?;
        for t in [&mut p.rh, &mut p.rw] {
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
        }
        let (s, _) = affinity(&y, &p, &cfg, use_pos)?;
        let oracle = affinity_scalar_oracle(&y, &p, &cfg, use_pos);
        let err = s
            .data()
            .iter()
            .zip(oracle.data())
            .fold(0.0f64, |m, (a, b)| m.max((*a as f64 - b).abs()));
        report.cases += 1;
        report.max_err = report.max_err.max(err);
        if s.shape() != oracle.shape() || !(err <= tol) {
            report.failures += 1;
        }
    }
    Ok(report)
}

/// CSCL gradient cases plus encoder-layer cases.
pub fn gradient_suite() -> (SuiteReport, Vec<GradCheckRow>) {
    let mut rows = finite_diff_check(&default_cases());
    rows.extend(network_checks());
    let report = SuiteReport {
        name: "gradients".into(),
        cases: rows.len(),
        failures: rows.iter().filter(|r| !r.passed).count(),
        max_err: rows.iter().fold(0.0f64, |m, r| m.max(r.max_rel_err)),
    };
    (report, rows)
}

/// Stride pairs covered by the equivalence sweep.
pub const STRIDE_PAIRS: [(usize, usize); 5] = [(2, 2), (2, 4), (4, 2), (3, 3), (3, 6)];

/// Strided against naive affinity (exact in `f64`, within `tol` in `f32`)
/// and strided against vectorised pair labels, over `triples` random
/// (shape, configuration, seed) draws.
pub fn stride_suite(triples: usize, tol: f64, seed: u64) -> Result<SuiteReport> {
    let mut rng = Rng::new(seed, 2);
    let mut report = SuiteReport {
        name: "strided".into(),
        cases: 0,
        failures: 0,
        max_err: 0.0,
    };
    for t in 0..triples {
        let (wr, ws) = STRIDE_PAIRS[t % STRIDE_PAIRS.len()];
        let mut cfg = WindowConfig::new([1, 3, 5][rng.below(3)], wr, ws);
        cfg.lambda = 0.125;
        let (h, w) = (1 + rng.below(30), 1 + rng.below(30));
        let d = 1 + rng.below(6);
        let use_pos = rng.bernoulli(0.5);
        let y64: Tensor<f64> = Tensor::from_fn(&[h, w, d], |_| rng.uniform(-1.0, 1.0));
        let mut p64 = ProjectionParams::<f64>::init(d, 2 * d, cfg.wd, &mut rng)?;
        for t in [&mut p64.rh, &mut p64.rw] {
            t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-0.5, 0.5));
        }
        let naive = affinity_naive(&y64, &p64, &cfg, use_pos, None, None)?;
        let strided = affinity_strided(&y64, &p64, &cfg, use_pos)?;
        let exact64 = naive == strided;

        let (y32, p32) = (y64.cast::<f32>(), cast_params(&p64));
        let naive = affinity_naive(&y32, &p32, &cfg, use_pos, None, None)?;
        let strided = affinity_strided(&y32, &p32, &cfg, use_pos)?;
        let err32 = naive
            .0
            .data()
            .iter()
            .zip(strided.0.data())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs() as f64));

        let classes = random_classes(h, w, 3, &mut rng);
        let labels = LabelMap::new(classes, 3)?;
        let labels_ok = pair_labels_strided(&labels, &cfg)? == build_pair_labels(&labels, &cfg)?;

        report.cases += 1;
        report.max_err = report.max_err.max(err32);
        if !exact64 || naive.1 != strided.1 || !(err32 <= tol) || !labels_ok {
            report.failures += 1;
        }
    }
    Ok(report)
}

fn cast_params(p: &ProjectionParams<f64>) -> ProjectionParams<f32> {
    ProjectionParams {
        wq: p.wq.cast(),
        wk: p.wk.cast(),
        rh: p.rh.cast(),
        rw: p.rw.cast(),
    }
}
