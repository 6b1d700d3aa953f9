//! The masked context-self contrastive loss, in its margin form and its
//! positive-weighted (`λ`) form, with analytic gradients.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::labels::{PairLabelTensor, PairMask};
use crate::similarity::{affinity_backward, affinity_trace, AffinityTrace, ProjectionParams};
use crate::tensor::{Real, Tensor};
use crate::window::WindowConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossForm {
    /// `-(1/ΣM) Σ M ⊙ ((λ+1)L - 1) ⊙ S`
    Lambda,
    /// `-(1/ΣM) Σ M ⊙ (L ⊙ S + (1-L) ⊙ min(0, m - S))`
    Margin,
}

impl fmt::Display for LossForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossForm::Lambda => "lambda",
            LossForm::Margin => "margin",
        })
    }
}

impl FromStr for LossForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda" => Ok(LossForm::Lambda),
            "margin" => Ok(LossForm::Margin),
            _ => Err(Error::Invalid(format!("unknown loss form {s:?}"))),
        }
    }
}

fn check<T: Real>(s: &Tensor<T>, l: &PairLabelTensor, m: &PairMask) -> Result<usize> {
    l.expect_shape(s.shape(), "pair labels")?;
    m.expect_shape(s.shape(), "pair mask")?;
    let n = m.data().iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(n)
}

pub fn cscl_loss_lambda<T: Real>(s: &Tensor<T>, l: &PairLabelTensor, m: &PairMask, lambda: f64) -> Result<T> {
    let n = check(s, l, m)?;
    let lam = T::lit(lambda);
    let mut acc = T::zero();
    for ((&sv, &lv), &mv) in s.data().iter().zip(l.data()).zip(m.data()) {
        if mv {
            let coef = if lv { lam } else { -T::one() };
            acc += coef * sv;
        }
    }
    Ok(-acc / T::lit(n as f64))
}

pub fn cscl_loss_margin<T: Real>(s: &Tensor<T>, l: &PairLabelTensor, m: &PairMask, margin: f64) -> Result<T> {
    let n = check(s, l, m)?;
    let mg = T::lit(margin);
    let mut acc = T::zero();
    for ((&sv, &lv), &mv) in s.data().iter().zip(l.data()).zip(m.data()) {
        if mv {
            acc += if lv { sv } else { (mg - sv).min(T::zero()) };
        }
    }
    Ok(-acc / T::lit(n as f64))
}

pub fn cscl_loss<T: Real>(
    s: &Tensor<T>,
    l: &PairLabelTensor,
    m: &PairMask,
    cfg: &WindowConfig,
    form: LossForm,
) -> Result<T> {
    match form {
        LossForm::Lambda => cscl_loss_lambda(s, l, m, cfg.lambda),
        LossForm::Margin => cscl_loss_margin(s, l, m, cfg.margin),
    }
}

/// `dL/dS`. The hinge subgradient at `S == m` is 0.
pub fn loss_grad_s<T: Real>(
    s: &Tensor<T>,
    l: &PairLabelTensor,
    m: &PairMask,
    cfg: &WindowConfig,
    form: LossForm,
) -> Result<Tensor<T>> {
    let n = check(s, l, m)?;
    let inv = T::one() / T::lit(n as f64);
    let lam = T::lit(cfg.lambda);
    let mg = T::lit(cfg.margin);
    let mut g = Tensor::zeros(s.shape());
    for (((o, &sv), &lv), &mv) in g.data_mut().iter_mut().zip(s.data()).zip(l.data()).zip(m.data()) {
        if !mv {
            continue;
        }
        *o = match (form, lv) {
            (LossForm::Lambda, true) => -lam * inv,
            (LossForm::Lambda, false) => inv,
            (LossForm::Margin, true) => -inv,
            (LossForm::Margin, false) => {
                if sv > mg {
                    inv
                } else {
                    T::zero()
                }
            }
        };
    }
    Ok(g)
}

/// Loss value with gradients for the embedding and every projection
/// parameter.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub value: T,
    pub dy: Tensor<T>,
    pub grads: ProjectionParams<T>,
    pub diagnostics: PretrainDiagnostics,
}

/// Mean cosine over masked-in positive and negative pairs (NaN when a set is
/// empty).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainDiagnostics {
    pub step: usize,
    pub loss: f64,
    pub mean_pos_cos: f64,
    pub mean_neg_cos: f64,
}

impl PretrainDiagnostics {
    pub const CSV_HEADER: &'static str = "step,loss,mean_pos_cos,mean_neg_cos";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.step, self.loss, self.mean_pos_cos, self.mean_neg_cos
        )
    }
}

pub fn pair_cosine_means<T: Real>(s: &Tensor<T>, l: &PairLabelTensor, m: &PairMask) -> (f64, f64) {
    let (mut ps, mut pn, mut ns, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for ((&sv, &lv), &mv) in s.data().iter().zip(l.data()).zip(m.data()) {
        if mv {
            if lv {
                ps += sv.as_f64();
                pn += 1;
            } else {
                ns += sv.as_f64();
                nn += 1;
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    (mean(ps, pn), mean(ns, nn))
}

/// Forward and reverse pass through projection, positional shift,
/// normalisation, cosine and the masked reduction.
pub fn cscl_backward<T: Real>(
    y: &Tensor<T>,
    p: &ProjectionParams<T>,
    cfg: &WindowConfig,
    use_pos: bool,
    l: &PairLabelTensor,
    m: &PairMask,
    form: LossForm,
) -> Result<LossOutput<T>> {
    let tr = affinity_trace(y, p, cfg, use_pos)?;
    backward_from_trace(&tr, y, p, cfg, l, m, form)
}

pub fn backward_from_trace<T: Real>(
    tr: &AffinityTrace<T>,
    y: &Tensor<T>,
    p: &ProjectionParams<T>,
    cfg: &WindowConfig,
    l: &PairLabelTensor,
    m: &PairMask,
    form: LossForm,
) -> Result<LossOutput<T>> {
    let value = cscl_loss(&tr.s, l, m, cfg, form)?;
    let ds = loss_grad_s(&tr.s, l, m, cfg, form)?;
    let g = affinity_backward(tr, y, p, &ds)?;
    let (pos, neg) = pair_cosine_means(&tr.s, l, m);
    Ok(LossOutput {
        value,
        dy: g.dy,
        grads: g.params,
        diagnostics: PretrainDiagnostics {
            step: 0,
            loss: value.as_f64(),
            mean_pos_cos: pos,
            mean_neg_cos: neg,
        },
    })
}

/// Loss value only, for finite differences.
pub fn cscl_value<T: Real>(
    y: &Tensor<T>,
    p: &ProjectionParams<T>,
    cfg: &WindowConfig,
    use_pos: bool,
    l: &PairLabelTensor,
    m: &PairMask,
    form: LossForm,
) -> Result<T> {
    let tr = affinity_trace(y, p, cfg, use_pos)?;
    cscl_loss(&tr.s, l, m, cfg, form)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn filled(v: f64, n: usize) -> Tensor<f64> {
        Tensor::full(&[1, 1, 1, n], v)
    }

    #[test]
    fn lambda_form_closed_values() {
        let lam = 0.125;
        let all = Tensor::full(&[1, 1, 1, 4], true);
        let pos = Tensor::full(&[1, 1, 1, 4], true);
        let neg = Tensor::full(&[1, 1, 1, 4], false);
        assert_eq!(cscl_loss_lambda(&filled(1.0, 4), &pos, &all, lam).unwrap(), -0.125);
        assert_eq!(cscl_loss_lambda(&filled(-1.0, 4), &neg, &all, lam).unwrap(), -1.0);
        let half = Tensor::from_vec(&[1, 1, 1, 4], vec![true, true, false, false]).unwrap();
        let s = Tensor::from_vec(&[1, 1, 1, 4], vec![1.0, 1.0, -1.0, -1.0]).unwrap();
        assert_eq!(cscl_loss_lambda(&s, &half, &all, lam).unwrap(), -0.5625);
    }

    #[test]
    fn margin_form_closed_values() {
        let all = Tensor::full(&[1, 1, 1, 4], true);
        let pos = Tensor::full(&[1, 1, 1, 4], true);
        let neg = Tensor::full(&[1, 1, 1, 4], false);
        assert_eq!(cscl_loss_margin(&filled(1.0, 4), &pos, &all, 0.3).unwrap(), -1.0);
        assert_eq!(cscl_loss_margin(&filled(-1.0, 4), &neg, &all, 0.0).unwrap(), 0.0);
        assert_eq!(cscl_loss_margin(&filled(0.5, 4), &neg, &all, 0.0).unwrap(), 0.5);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let none = Tensor::full(&[1, 1, 1, 4], false);
        let l = Tensor::full(&[1, 1, 1, 4], true);
        assert!(matches!(
            cscl_loss_lambda(&filled(1.0, 4), &l, &none, 0.1),
            Err(Error::EmptyMask)
        ));
        assert!(cscl_loss_margin(&filled(1.0, 4), &l, &none, 0.1).is_err());
    }

    #[test]
    fn lambda_form_is_linear_in_s() {
        let mut rng = Rng::new(9, 0);
        let s = Tensor::from_fn(&[2, 2, 3, 3], |_| rng.uniform::<f64>(-1.0, 1.0));
        let l = Tensor::from_fn(&[2, 2, 3, 3], |_| rng.bernoulli(0.5));
        let m = Tensor::from_fn(&[2, 2, 3, 3], |f| f % 4 != 0);
        let base = cscl_loss_lambda(&s, &l, &m, 0.3).unwrap();
        for alpha in [-2.0, 0.5, 3.0] {
            let scaled = s.map(|v| v * alpha);
            let got = cscl_loss_lambda(&scaled, &l, &m, 0.3).unwrap();
            assert!((got - alpha * base).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_entries_do_not_contribute() {
        let mut rng = Rng::new(10, 0);
        let mut s = Tensor::from_fn(&[2, 2, 3, 3], |_| rng.uniform::<f64>(-1.0, 1.0));
        let l = Tensor::from_fn(&[2, 2, 3, 3], |_| rng.bernoulli(0.5));
        let m = Tensor::from_fn(&[2, 2, 3, 3], |f| f % 3 != 0);
        let cfg = WindowConfig::default();
        let a = cscl_loss(&s, &l, &m, &cfg, LossForm::Lambda).unwrap();
        let g = loss_grad_s(&s, &l, &m, &cfg, LossForm::Lambda).unwrap();
        s.data_mut()[0] = 0.987;
        s.data_mut()[3] = -0.5;
        assert_eq!(a, cscl_loss(&s, &l, &m, &cfg, LossForm::Lambda).unwrap());
        assert_eq!(g.data()[0], 0.0);
        assert_eq!(g.data()[3], 0.0);
    }

    #[test]
    fn margin_hinge_kink_has_zero_subgradient() {
        let s = filled(0.2, 1);
        let l = Tensor::full(&[1, 1, 1, 1], false);
        let m = Tensor::full(&[1, 1, 1, 1], true);
        let cfg = WindowConfig {
            margin: 0.2,
            ..Default::default()
        };
        let g = loss_grad_s(&s, &l, &m, &cfg, LossForm::Margin).unwrap();
        assert_eq!(g.data()[0], 0.0);
    }

    #[test]
    fn diagnostics_csv_row() {
        let d = PretrainDiagnostics {
            step: 3,
            loss: -0.5,
            mean_pos_cos: 0.75,
            mean_neg_cos: -0.25,
        };
        assert_eq!(d.csv_row(), "3,-0.5,0.75,-0.25");
    }
}
