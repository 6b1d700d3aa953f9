//! Central finite-difference verification of the hand-written backward
//! passes.

use crate::encoder::{encode, encode_trace, encoder_backward, EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::labels::{build_pair_labels, build_pair_mask, pad_flags, LabelMap, EXCLUDED};
use crate::loss::{cscl_backward, cscl_value, LossForm};
use crate::nn::{
    ce_weights, conv3x3, conv3x3_backward, deconv3x3s2, deconv3x3s2_backward, weighted_cross_entropy, CeVariant,
    ClassifierParams, Conv,
};
use crate::rng::Rng;
use crate::similarity::ProjectionParams;
use crate::tensor::Tensor;
use crate::window::WindowConfig;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Denominator floor for the relative error of near-zero components.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between `analytic` and central differences of `f`
/// around `x`.
pub fn check_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * h)));
    }
    worst
}

/// One randomised CSCL gradient case.
#[derive(Debug, Clone, Copy)]
pub struct GradCase {
    pub height: usize,
    pub width: usize,
    pub d_in: usize,
    pub d_q: usize,
    pub window: WindowConfig,
    pub form: LossForm,
    pub use_pos: bool,
    pub seed: u64,
}

impl GradCase {
    pub fn name(&self) -> String {
        format!(
            "cscl {}x{}x{} wd={} wr={} ws={} {} pos={}",
            self.height,
            self.width,
            self.d_in,
            self.window.wd,
            self.window.wr,
            self.window.ws,
            self.form,
            self.use_pos
        )
    }
}

/// Sixteen cases over `w_d ∈ {3,5}`, `w_r ∈ {1,2}`, both loss forms, with and
/// without positional encodings.
pub fn default_cases() -> Vec<GradCase> {
    let mut out = Vec::new();
    let mut seed = 100;
    for wd in [3, 5] {
        for wr in [1, 2] {
            for form in [LossForm::Lambda, LossForm::Margin] {
                for use_pos in [true, false] {
                    out.push(GradCase {
                        height: 6,
                        width: 6,
                        d_in: 8,
                        d_q: 8,
                        window: WindowConfig {
                            wd,
                            wr,
                            ws: 1,
                            lambda: 0.125,
                            margin: 0.0,
                        },
                        form,
                        use_pos,
                        seed,
                    });
                    seed += 1;
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub fn random_problem(
    case: &GradCase,
) -> Result<(Tensor<f64>, ProjectionParams<f64>, LabelMap)> {
    let mut rng = Rng::new(case.seed, 0);
    let y = Tensor::from_fn(&[case.height, case.width, case.d_in], |_| rng.uniform(-1.0, 1.0));
    let wd = case.window.wd;
    let half = case.d_q / 2;
    let p = ProjectionParams {
        wq: Tensor::from_fn(&[case.d_q, case.d_in], |_| rng.uniform(-1.0, 1.0)),
        wk: Tensor::from_fn(&[case.d_q, case.d_in], |_| rng.uniform(-1.0, 1.0)),
        rh: Tensor::from_fn(&[wd, half], |_| rng.uniform(-0.5, 0.5)),
        rw: Tensor::from_fn(&[wd, half], |_| rng.uniform(-0.5, 0.5)),
    };
    let classes = Tensor::from_fn(&[case.height, case.width], |_| {
        if rng.bernoulli(0.1) {
            EXCLUDED
        } else {
            rng.below(3) as i32
        }
    });
    Ok((y, p, LabelMap::new(classes, 3)?))
}

fn flatten(y: &Tensor<f64>, p: &ProjectionParams<f64>) -> Vec<f64> {
    let mut v = y.data().to_vec();
    for t in p.tensors() {
        v.extend_from_slice(t.data());
    }
    v
}

fn unflatten(v: &[f64], y: &mut Tensor<f64>, p: &mut ProjectionParams<f64>) {
    let mut off = y.len();
    y.data_mut().copy_from_slice(&v[..off]);
    for t in p.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&v[off..off + n]);
        off += n;
    }
}

/// Runs one CSCL gradient case at `f64`.
pub fn check_case(case: &GradCase) -> Result<GradCheckRow> {
    let (y, p, labels) = random_problem(case)?;
    let cfg = case.window;
    let l = build_pair_labels(&labels, &cfg)?;
    let pf = pad_flags(case.height, case.width, &cfg)?;
    let m = build_pair_mask(&labels, &pf, &cfg, true)?;
    let out = cscl_backward(&y, &p, &cfg, case.use_pos, &l, &m, case.form)?;
    let analytic = flatten(&out.dy, &out.grads);
    let x = flatten(&y, &p);
    let f = |v: &[f64]| {
        let mut yy = y.clone();
        let mut pp = p.clone();
        unflatten(v, &mut yy, &mut pp);
        cscl_value(&yy, &pp, &cfg, case.use_pos, &l, &m, case.form).expect("valid case")
    };
    let err = check_gradient(f, &x, &analytic, FD_STEP);
    Ok(GradCheckRow {
        name: case.name(),
        max_rel_err: err,
        passed: err < REL_TOL,
    })
}

/// Runs every case; a case that errors is reported as failed with an
/// infinite error.
pub fn finite_diff_check(cases: &[GradCase]) -> Vec<GradCheckRow> {
    cases
        .iter()
        .map(|c| {
            check_case(c).unwrap_or_else(|e| {
                log::warn!("{}: {e}", c.name());
                GradCheckRow {
                    name: c.name(),
                    max_rel_err: f64::INFINITY,
                    passed: false,
                }
            })
        })
        .collect()
}

fn fill(t: &mut Tensor<f64>, rng: &mut Rng) {
    t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-1.0, 1.0));
}

fn flat(ts: &[&Tensor<f64>]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn assign(v: &[f64], ts: Vec<&mut Tensor<f64>>) {
    let mut off = 0;
    for t in ts {
        let n = t.len();
        t.data_mut().copy_from_slice(&v[off..off + n]);
        off += n;
    }
}

fn row(name: String, err: f64) -> GradCheckRow {
    GradCheckRow {
        name,
        max_rel_err: err,
        passed: err < REL_TOL,
    }
}

/// A single layer against a random linear probe of its output, w.r.t. both
/// input and parameters.
fn layer_case(deconv: bool, h: usize, w: usize, cin: usize, cout: usize, seed: u64) -> Result<GradCheckRow> {
    let mut rng = Rng::new(seed, 0);
    let mut layer = Conv::<f64>::init(cin, cout, &mut rng);
    fill(&mut layer.bias, &mut rng);
    let x = Tensor::from_fn(&[h, w, cin], |_| rng.uniform(-1.0, 1.0));
    let fwd = |x: &Tensor<f64>, l: &Conv<f64>| if deconv { deconv3x3s2(x, l) } else { conv3x3(x, l) };
    let probe = Tensor::from_fn(fwd(&x, &layer)?.shape(), |_| rng.uniform(-1.0, 1.0));
    let mut g = layer.zeros_like();
    let dx = if deconv {
        deconv3x3s2_backward(&x, &layer, &probe, &mut g)?
    } else {
        conv3x3_backward(&x, &layer, &probe, &mut g)?
    };
    let analytic = flat(&[&dx, &g.kernel, &g.bias]);
    let x0 = flat(&[&x, &layer.kernel, &layer.bias]);
    let f = |v: &[f64]| {
        let (mut xx, mut ll) = (x.clone(), layer.clone());
        assign(v, vec![&mut xx, &mut ll.kernel, &mut ll.bias]);
        let out = fwd(&xx, &ll).expect("valid layer");
        out.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    };
    let kind = if deconv { "deconv3x3s2" } else { "conv3x3" };
    Ok(row(format!("{kind} {h}x{w} {cin}->{cout}"), check_gradient(f, &x0, &analytic, FD_STEP)))
}

/// The full encoder (leaky activations, optional upsampling) followed by
/// the classifier and masked cross-entropy.
fn network_case(super_res: bool, variant: CeVariant, seed: u64) -> Result<GradCheckRow> {
    let mut rng = Rng::new(seed, 0);
    let cfg = EncoderConfig {
        in_channels: 2,
        hidden: vec![3],
        d_in: 4,
        super_res,
        ..Default::default()
    };
    let mut enc = EncoderParams::<f64>::init(&cfg, &mut rng)?;
    for t in enc.tensors_mut() {
        fill(t, &mut rng);
    }
    let mut cls = ClassifierParams::<f64>::init(3, 4, &mut rng);
    fill(&mut cls.bias, &mut rng);
    let (h, w) = (4, 3);
    let s = enc.scale();
    let x = Tensor::from_fn(&[h, w, 2], |_| rng.uniform(-1.0, 1.0));
    let classes = Tensor::from_fn(&[h * s, w * s], |f| if f % 7 == 3 { EXCLUDED } else { ((f / 2) % 3) as i32 });
    let labels = LabelMap::new(classes, 3)?;
    let weights = ce_weights(&labels, variant, Some(&mut rng))?;
    let tr = encode_trace(&x, &enc)?;
    let logits = cls.forward(tr.output())?;
    let (_, dlogits) = weighted_cross_entropy(&logits, &labels, &weights)?;
    let mut gcls = cls.zeros_like();
    let dy = cls.backward(tr.output(), &dlogits, &mut gcls);
    let mut genc = enc.zeros_like();
    let dx = encoder_backward(&tr, &enc, &dy, &mut genc)?;
    let mut analytic = dx.data().to_vec();
    for (_, t) in genc.named() {
        analytic.extend_from_slice(t.data());
    }
    analytic.extend(flat(&[&gcls.weight, &gcls.bias]));
    let mut x0 = x.data().to_vec();
    for (_, t) in enc.named() {
        x0.extend_from_slice(t.data());
    }
    x0.extend(flat(&[&cls.weight, &cls.bias]));
    let f = |v: &[f64]| {
        let (mut xx, mut ee, mut cc) = (x.clone(), enc.clone(), cls.clone());
        let mut ts = vec![&mut xx];
        ts.extend(ee.tensors_mut());
        ts.extend([&mut cc.weight, &mut cc.bias]);
        assign(v, ts);
        let y = encode(&xx, &ee).expect("valid encoder");
        let logits = cc.forward(&y).expect("valid classifier");
        weighted_cross_entropy(&logits, &labels, &weights).expect("labelled pixels").0
    };
    let name = format!("encoder+classifier super_res={super_res} ce={variant}");
    Ok(row(name, check_gradient(f, &x0, &analytic, FD_STEP)))
}

/// Encoder-layer, classifier and cross-entropy gradient cases, including the
/// transposed convolutions.
pub fn network_checks() -> Vec<GradCheckRow> {
    let cases: Vec<(String, Result<GradCheckRow>)> = vec![
        ("conv a".into(), layer_case(false, 5, 4, 3, 2, 200)),
        ("conv b".into(), layer_case(false, 1, 6, 2, 5, 201)),
        ("deconv a".into(), layer_case(true, 3, 4, 2, 3, 202)),
        ("deconv b".into(), layer_case(true, 1, 2, 4, 2, 203)),
        ("net a".into(), network_case(false, CeVariant::Plain, 204)),
        ("net b".into(), network_case(true, CeVariant::Plain, 205)),
        ("net c".into(), network_case(false, CeVariant::Gamma, 206)),
        ("net d".into(), network_case(true, CeVariant::Balanced, 207)),
    ];
    cases
        .into_iter()
        .map(|(name, r)| {
            r.unwrap_or_else(|e| {
                log::warn!("{name}: {e}");
                row(name, f64::INFINITY)
            })
        })
        .collect()
}
