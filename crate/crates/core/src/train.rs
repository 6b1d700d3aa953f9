//! Adam, the learning-rate schedule, CSCL pre-training, masked-CE
//! fine-tuning and evaluation.

use crate::encoder::{encode, encode_trace, encoder_backward, EncoderParams};
use crate::error::{Error, Result};
use crate::labels::{build_pair_labels, build_pair_mask, pad_flags, LabelMap};
use crate::loss::{cscl_backward, LossForm, PretrainDiagnostics};
use crate::metrics::{confusion, metrics, per_position_accuracy, upscale_nearest, ConfusionMatrix, Metrics, Region};
use crate::nn::{argmax_classes, masked_cross_entropy, CeVariant, ClassifierParams};
use crate::rng::Rng;
use crate::similarity::{affinity, ProjectionParams};
use crate::synth::{augment_flip, SyntheticScene};
use crate::tensor::{Real, Tensor};
use crate::window::WindowConfig;

/// Fixed stream offsets so every stage draws from its own sequence.
pub const STREAM_ENCODER: u64 = 1;
pub const STREAM_PROJECTIONS: u64 = 2;
pub const STREAM_CLASSIFIER: u64 = 3;
pub const STREAM_PRETRAIN: u64 = 4;
pub const STREAM_FINETUNE: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: f64,
    pub decay_every: usize,
    /// Epoch at which the schedule restarts from `lr`.
    pub reset_at: Option<usize>,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.975,
            decay_every: 2,
            reset_at: None,
        }
    }
}

impl OptConfig {
    /// Learning rate in effect during (0-based) `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let e = match self.reset_at {
            Some(r) if epoch >= r => epoch - r,
            _ => epoch,
        };
        self.lr * self.decay.powi((e / self.decay_every.max(1)) as i32)
    }
}

#[derive(Debug, Clone)]
pub struct OptState<T> {
    pub cfg: OptConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub lr: f64,
}

impl<T: Real> OptState<T> {
    pub fn new(cfg: OptConfig, params: &[&Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        OptState {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
            lr: cfg.lr,
        }
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.lr = self.cfg.lr_at(epoch);
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Real>(params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], state: &mut OptState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape("parameter, gradient and moment lists differ in length".into()));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        g.expect_shape(p.shape(), "gradient")?;
        m.expect_shape(p.shape(), "moment")?;
    }
    state.step += 1;
    let c = &state.cfg;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
    let corr1 = T::lit(1.0 - c.beta1.powi(t));
    let corr2 = T::lit(1.0 - c.beta2.powi(t));
    let (lr, eps) = (T::lit(state.lr), T::lit(c.eps));
    for (k, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        for (idx, (pv, &gv)) in p.data_mut().iter_mut().zip(grads[k].data()).enumerate() {
            m[idx] = b1 * m[idx] + one_b1 * gv;
            v[idx] = b2 * v[idx] + one_b2 * gv * gv;
            let mhat = m[idx] / corr1;
            let vhat = v[idx] / corr2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub flip_p: f64,
    pub seed: u64,
    pub opt: OptConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            flip_p: 0.5,
            seed: 0,
            opt: OptConfig::default(),
        }
    }
}

/// Label grid matching an encoder's output resolution.
fn target_labels<'a>(scene: &'a SyntheticScene, scale: usize) -> Result<&'a LabelMap> {
    let l = if scale == 1 { &scene.labels } else { &scene.labels_sr };
    let (h, w) = (scene.image.shape()[0], scene.image.shape()[1]);
    if l.height() != h * scale || l.width() != w * scale {
        return Err(Error::Shape(format!(
            "scene {} has {}×{} labels, the encoder outputs {}×{}",
            scene.id,
            l.height(),
            l.width(),
            h * scale,
            w * scale
        )));
    }
    Ok(l)
}

fn batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

fn scale_all<T: Real>(ts: &mut [&mut Tensor<T>], s: f64) {
    for t in ts {
        t.scale(T::lit(s));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub window: WindowConfig,
    pub form: LossForm,
    pub use_pos: bool,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub encoder: EncoderParams<f32>,
    pub projections: ProjectionParams<f32>,
    /// One row per epoch, `step` counting epochs from 1.
    pub diagnostics: Vec<PretrainDiagnostics>,
}

/// Minimises the CSCL loss end to end through encoder and projections.
/// Scenes whose pair mask is empty are skipped with a warning.
pub fn pretrain(
    scenes: &[SyntheticScene],
    mut encoder: EncoderParams<f32>,
    mut proj: ProjectionParams<f32>,
    cfg: &PretrainConfig,
) -> Result<Pretrained> {
    if scenes.is_empty() {
        return Err(Error::Invalid("pre-training needs at least one scene".into()));
    }
    cfg.window.validate()?;
    if proj.d_in() != encoder.d_in() || proj.wd() != cfg.window.wd {
        return Err(Error::Shape("projection parameters do not fit the encoder/window".into()));
    }
    let tc = &cfg.train;
    let mut rng = Rng::new(tc.seed, STREAM_PRETRAIN);
    let mut state = {
        let mut ps: Vec<&Tensor<f32>> = encoder.named().into_iter().map(|(_, t)| t).collect();
        ps.extend(proj.tensors());
        OptState::new(tc.opt, &ps)
    };
    let scale = encoder.scale();
    let mut diagnostics = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        state.set_epoch(epoch);
        let (mut loss_sum, mut pos_sum, mut neg_sum) = (0.0, 0.0, 0.0);
        let (mut n_loss, mut n_pos, mut n_neg) = (0usize, 0usize, 0usize);
        for batch in batches(scenes.len(), tc.batch_size, &mut rng) {
            let mut genc = encoder.zeros_like();
            let mut gproj = proj.zeros_like();
            let mut used = 0usize;
            for &idx in &batch {
                let scene = augment_flip(&scenes[idx], &mut rng, tc.flip_p);
                let labels = target_labels(&scene, scale)?;
                let l = build_pair_labels(labels, &cfg.window)?;
                let pf = pad_flags(labels.height(), labels.width(), &cfg.window)?;
                let m = match build_pair_mask(labels, &pf, &cfg.window, true) {
                    Ok(m) => m,
                    Err(Error::EmptyMask) => {
                        log::warn!("scene {} has no valid pairs; skipped", scene.id);
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let tr = encode_trace(&scene.image, &encoder)?;
                let out = cscl_backward(tr.output(), &proj, &cfg.window, cfg.use_pos, &l, &m, cfg.form)?;
                encoder_backward(&tr, &encoder, &out.dy, &mut genc)?;
                for (g, d) in gproj.tensors_mut().into_iter().zip(out.grads.tensors()) {
                    g.add_assign(d);
                }
                used += 1;
                loss_sum += out.value as f64;
                n_loss += 1;
                let d = out.diagnostics;
                if d.mean_pos_cos.is_finite() {
                    pos_sum += d.mean_pos_cos;
                    n_pos += 1;
                }
                if d.mean_neg_cos.is_finite() {
                    neg_sum += d.mean_neg_cos;
                    n_neg += 1;
                }
            }
            if used == 0 {
                continue;
            }
            let mut grads = genc.tensors_mut();
            grads.extend(gproj.tensors_mut());
            scale_all(&mut grads, 1.0 / used as f64);
            let grads: Vec<&Tensor<f32>> = grads.into_iter().map(|g| &*g).collect();
            let mut params = encoder.tensors_mut();
            params.extend(proj.tensors_mut());
            adam_step(&mut params, &grads, &mut state)?;
        }
        let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
        let row = PretrainDiagnostics {
            step: epoch + 1,
            loss: mean(loss_sum, n_loss),
            mean_pos_cos: mean(pos_sum, n_pos),
            mean_neg_cos: mean(neg_sum, n_neg),
        };
        log::info!("pretrain {}", row.csv_row());
        diagnostics.push(row);
    }
    Ok(Pretrained {
        encoder,
        projections: proj,
        diagnostics,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub variant: CeVariant,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Finetuned {
    pub encoder: EncoderParams<f32>,
    pub classifier: ClassifierParams<f32>,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

/// Masked cross-entropy training of encoder and classifier together.
pub fn finetune(
    scenes: &[SyntheticScene],
    mut encoder: EncoderParams<f32>,
    mut classifier: ClassifierParams<f32>,
    cfg: &FinetuneConfig,
) -> Result<Finetuned> {
    if classifier.d_in() != encoder.d_in() {
        return Err(Error::Shape(format!(
            "classifier expects {} features, encoder gives {}",
            classifier.d_in(),
            encoder.d_in()
        )));
    }
    let tc = &cfg.train;
    if tc.epochs > 0 && scenes.is_empty() {
        return Err(Error::Invalid("fine-tuning needs at least one scene".into()));
    }
    let mut rng = Rng::new(tc.seed, STREAM_FINETUNE);
    let mut state = {
        let mut ps: Vec<&Tensor<f32>> = encoder.named().into_iter().map(|(_, t)| t).collect();
        ps.extend([&classifier.weight, &classifier.bias]);
        OptState::new(tc.opt, &ps)
    };
    let scale = encoder.scale();
    let mut losses = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        state.set_epoch(epoch);
        let (mut loss_sum, mut n_loss) = (0.0, 0usize);
        for batch in batches(scenes.len(), tc.batch_size, &mut rng) {
            let mut genc = encoder.zeros_like();
            let mut gcls = classifier.zeros_like();
            let mut used = 0usize;
            for &idx in &batch {
                let scene = augment_flip(&scenes[idx], &mut rng, tc.flip_p);
                let labels = target_labels(&scene, scale)?;
                let tr = encode_trace(&scene.image, &encoder)?;
                let logits = classifier.forward(tr.output())?;
                let (loss, dlogits) = match masked_cross_entropy(&logits, labels, cfg.variant, Some(&mut rng)) {
                    Ok(v) => v,
                    Err(Error::NoPixels) => {
                        log::warn!("scene {} has no labelled pixels; skipped", scene.id);
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let dy = classifier.backward(tr.output(), &dlogits, &mut gcls);
                encoder_backward(&tr, &encoder, &dy, &mut genc)?;
                used += 1;
                loss_sum += loss as f64;
                n_loss += 1;
            }
            if used == 0 {
                continue;
            }
            let mut grads = genc.tensors_mut();
            grads.extend([&mut gcls.weight, &mut gcls.bias]);
            scale_all(&mut grads, 1.0 / used as f64);
            let grads: Vec<&Tensor<f32>> = grads.into_iter().map(|g| &*g).collect();
            let mut params = encoder.tensors_mut();
            params.extend([&mut classifier.weight, &mut classifier.bias]);
            adam_step(&mut params, &grads, &mut state)?;
        }
        let loss = if n_loss == 0 { f64::NAN } else { loss_sum / n_loss as f64 };
        log::info!("finetune epoch {} loss {loss}", epoch + 1);
        losses.push(loss);
    }
    Ok(Finetuned {
        encoder,
        classifier,
        losses,
    })
}

pub fn predict(image: &Tensor<f32>, encoder: &EncoderParams<f32>, classifier: &ClassifierParams<f32>) -> Result<Tensor<i32>> {
    let y = encode(image, encoder)?;
    Ok(argmax_classes(&classifier.forward(&y)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionReport {
    pub region: Region,
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
}

/// Pooled metrics per region. With `sr_labels` predictions are scored
/// against the fine label grid, nearest-upscaling base-resolution output.
pub fn evaluate(
    scenes: &[SyntheticScene],
    encoder: &EncoderParams<f32>,
    classifier: &ClassifierParams<f32>,
    regions: &[Region],
    sr_labels: bool,
) -> Result<Vec<RegionReport>> {
    let c = classifier.num_classes();
    let mut cms: Vec<ConfusionMatrix> = regions.iter().map(|_| ConfusionMatrix::new(c)).collect();
    for scene in scenes {
        let labels = if sr_labels { &scene.labels_sr } else { &scene.labels };
        let mut pred = predict(&scene.image, encoder, classifier)?;
        if pred.shape()[0] != labels.height() {
            let f = labels.height() / pred.shape()[0];
            if f < 1 || pred.shape()[0] * f != labels.height() || pred.shape()[1] * f != labels.width() {
                return Err(Error::Shape(format!(
                    "{:?} prediction cannot be scored against {}×{} labels",
                    pred.shape(),
                    labels.height(),
                    labels.width()
                )));
            }
            pred = upscale_nearest(&pred, f)?;
        }
        for (cm, &r) in cms.iter_mut().zip(regions) {
            cm.merge(&confusion(&pred, labels, r)?);
        }
    }
    regions
        .iter()
        .zip(cms)
        .map(|(&region, confusion)| {
            Ok(RegionReport {
                region,
                metrics: metrics(&confusion)?,
                confusion,
            })
        })
        .collect()
}

/// Per-offset pair accuracy of a pre-trained encoder pooled over scenes.
pub fn position_accuracy(
    scenes: &[SyntheticScene],
    encoder: &EncoderParams<f32>,
    proj: &ProjectionParams<f32>,
    window: &WindowConfig,
    use_pos: bool,
    threshold: f64,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let wd = window.wd;
    let (mut s_all, mut l_all, mut m_all) = (Vec::new(), Vec::new(), Vec::new());
    for scene in scenes {
        let labels = target_labels(scene, encoder.scale())?;
        let y = encode(&scene.image, encoder)?;
        let (s, _) = affinity(&y, proj, window, use_pos)?;
        let l = build_pair_labels(labels, window)?;
        let pf = pad_flags(labels.height(), labels.width(), window)?;
        let m = match build_pair_mask(labels, &pf, window, true) {
            Ok(m) => m,
            Err(Error::EmptyMask) => continue,
            Err(e) => return Err(e),
        };
        s_all.extend_from_slice(s.data());
        l_all.extend_from_slice(l.data());
        m_all.extend_from_slice(m.data());
    }
    let n = s_all.len() / (wd * wd);
    let shape = [n, 1, wd, wd];
    per_position_accuracy(
        &Tensor::from_vec(&shape, s_all)?,
        &Tensor::from_vec(&shape, l_all)?,
        &Tensor::from_vec(&shape, m_all)?,
        threshold,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub final_pretrain_loss: f64,
    pub mean_neg_cos: f64,
    pub metrics: Metrics,
}

/// Pre-trains and fine-tunes once per `λ` from the same initial weights,
/// reporting whole-scene evaluation metrics.
#[allow(clippy::too_many_arguments)]
pub fn lambda_sweep(
    train: &[SyntheticScene],
    eval: &[SyntheticScene],
    lambdas: &[f64],
    encoder: &EncoderParams<f32>,
    proj: &ProjectionParams<f32>,
    classifier: &ClassifierParams<f32>,
    pre: &PretrainConfig,
    fine: &FinetuneConfig,
) -> Result<Vec<SweepRow>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let mut cfg = pre.clone();
            cfg.window.lambda = lambda;
            let p = pretrain(train, encoder.clone(), proj.clone(), &cfg)?;
            let last = p.diagnostics.last().copied();
            let f = finetune(train, p.encoder, classifier.clone(), fine)?;
            let report = evaluate(eval, &f.encoder, &f.classifier, &[Region::All], false)?;
            Ok(SweepRow {
                lambda,
                final_pretrain_loss: last.map_or(f64::NAN, |d| d.loss),
                mean_neg_cos: last.map_or(f64::NAN, |d| d.mean_neg_cos),
                metrics: report[0].metrics,
            })
        })
        .collect()
}
