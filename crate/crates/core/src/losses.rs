//! Training objectives: mean-absolute pixel loss, relativistic average
//! adversarial losses for both networks, a single-tap perceptual loss, and
//! the weighted generator total.
//!
//! Logit-space math runs in f64 regardless of the model element type, and
//! every loss comes with its analytic gradient. Log arguments are clamped at
//! 1e-12 so saturated discriminators cannot produce infinities; the gradients
//! use the exact unclamped expressions, which stay bounded.

use crate::container::TensorStore;
use crate::rng::Seeder;
use crate::sr_models::{model_config, model_store, tensor_from_store};
use crate::tensor::{
    fr, he_std, leaky_relu, max_pool2, max_pool2_backward, trunc_normal, Conv2d, Scalar,
};
use crate::{Error, Result};
use ndarray::{Array4, ArrayD};
use serde::{Deserialize, Serialize};
use std::path::Path;

const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Adversarial term weight.
    pub lambda: f64,
    /// Pixel term weight.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 5e-3,
            eta: 1e-2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 || self.eta < 0.0 {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        Ok(())
    }
}

fn check_same_shape<F: Scalar>(hr: &Array4<F>, sr: &Array4<F>) -> Result<()> {
    if hr.dim() != sr.dim() {
        return Err(Error::invalid(format!(
            "batch shapes differ: {:?} vs {:?}",
            hr.dim(),
            sr.dim()
        )));
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn pixel_loss<F: Scalar>(hr: &Array4<F>, sr: &Array4<F>) -> Result<f64> {
    check_same_shape(hr, sr)?;
    let mut acc = 0.0f64;
    for (a, b) in hr.iter().zip(sr.iter()) {
        acc += (a.f64() - b.f64()).abs();
    }
    Ok(acc / hr.len() as f64)
}

/// Pixel loss plus its gradient w.r.t. `sr` (sign(sr - hr) / n, with the
/// zero subgradient at ties).
pub fn pixel_loss_grad<F: Scalar>(hr: &Array4<F>, sr: &Array4<F>) -> Result<(f64, Array4<F>)> {
    check_same_shape(hr, sr)?;
    let n = hr.len() as f64;
    let mut acc = 0.0f64;
    let mut grad = Array4::zeros(hr.dim());
    for ((a, b), g) in hr.iter().zip(sr.iter()).zip(grad.iter_mut()) {
        let d = b.f64() - a.f64();
        acc += d.abs();
        *g = fr(d.signum() / n);
    }
    Ok((acc / n, grad))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_nonempty(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("logit vectors must be non-empty"));
    }
    Ok(())
}

/// Relativistic average output: sigmoid(c_a[i] - mean(c_b)) per element.
pub fn relativistic_output(c_a: &[f64], c_b: &[f64]) -> Result<Vec<f64>> {
    check_nonempty(c_a, c_b)?;
    let m = mean(c_b);
    Ok(c_a.iter().map(|&c| sigmoid(c - m)).collect())
}

fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_FLOOR).ln()
}

/// Discriminator objective: -mean log D(hr, sr) - mean log(1 - D(sr, hr)).
pub fn discriminator_loss(c_hr: &[f64], c_sr: &[f64]) -> Result<f64> {
    let d1 = relativistic_output(c_hr, c_sr)?;
    let d2 = relativistic_output(c_sr, c_hr)?;
    let t1 = -d1.iter().map(|&d| clamped_ln(d)).sum::<f64>() / d1.len() as f64;
    let t2 = -d2.iter().map(|&d| clamped_ln(1.0 - d)).sum::<f64>() / d2.len() as f64;
    Ok(t1 + t2)
}

/// Discriminator loss with gradients w.r.t. (c_hr, c_sr). Both relativistic
/// terms couple the vectors through the batch means, so each logit receives
/// a direct and a mean-path contribution.
pub fn discriminator_loss_grad(c_hr: &[f64], c_sr: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let d1 = relativistic_output(c_hr, c_sr)?;
    let d2 = relativistic_output(c_sr, c_hr)?;
    let loss = discriminator_loss(c_hr, c_sr)?;
    let n = d1.len() as f64;
    let m = d2.len() as f64;
    let mean_d2 = mean(&d2);
    let mean_1m_d1 = d1.iter().map(|&d| 1.0 - d).sum::<f64>() / n;
    let g_hr: Vec<f64> = d1.iter().map(|&d| -((1.0 - d) + mean_d2) / n).collect();
    let g_sr: Vec<f64> = d2.iter().map(|&d| (d + mean_1m_d1) / m).collect();
    Ok((loss, g_hr, g_sr))
}

/// Generator objective: -mean log(1 - D(hr, sr)) - mean log D(sr, hr), which
/// is the discriminator loss with the roles exchanged.
pub fn generator_adv_loss(c_hr: &[f64], c_sr: &[f64]) -> Result<f64> {
    discriminator_loss(c_sr, c_hr)
}

/// Generator adversarial loss with gradients w.r.t. (c_hr, c_sr).
pub fn generator_adv_loss_grad(c_hr: &[f64], c_sr: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (loss, g_sr, g_hr) = discriminator_loss_grad(c_sr, c_hr)?;
    Ok((loss, g_hr, g_sr))
}

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// (in, out) channels of the 16 convs; a 2x2 max-pool follows the convs at
/// [`POOL_AFTER`]. The tap is the final conv's pre-activation output.
const VGG_PLAN: [(usize, usize); 16] = [
    (3, 64),
    (64, 64),
    (64, 128),
    (128, 128),
    (128, 256),
    (256, 256),
    (256, 256),
    (256, 256),
    (256, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
    (512, 512),
];
const POOL_AFTER: [usize; 4] = [1, 3, 7, 11];

fn vgg_conv_name(i: usize) -> String {
    let starts = [0usize, 2, 4, 8, 12];
    let block = starts.iter().rposition(|&s| i >= s).unwrap();
    format!("conv{}_{}", block + 1, i - starts[block] + 1)
}

/// Frozen feature network for the perceptual loss: 16 convs with ReLU and
/// four interleaved max-pools, evaluated up to the last conv pre-activation.
/// Inputs are normalized with the ImageNet channel statistics.
pub struct FeatureExtractor<F: Scalar> {
    convs: Vec<Conv2d<F>>,
}

/// Caches from a traced extractor forward, consumed by input_grad.
pub struct FxTrace<F> {
    steps: Vec<FxStep<F>>,
}

struct FxStep<F> {
    conv_in_hw: (usize, usize),
    slope: Option<Array4<F>>,
    pool: Option<(Array4<usize>, (usize, usize))>,
}

impl<F: Scalar> FeatureExtractor<F> {
    fn with_weights(convs: Vec<Conv2d<F>>) -> Self {
        FeatureExtractor { convs }
    }

    fn empty() -> Self {
        let convs = VGG_PLAN
            .iter()
            .map(|&(ic, oc)| {
                let mut c = Conv2d::new(ic, oc, 3, 1, 1);
                c.requires_grad = false;
                c
            })
            .collect();
        Self::with_weights(convs)
    }

    fn check_input(x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 3 {
            return Err(Error::invalid("feature extractor expects 3-channel input"));
        }
        if h < 32 || w < 32 {
            return Err(Error::invalid(format!(
                "feature extractor needs images of at least 32x32, got {h}x{w}"
            )));
        }
        Ok(())
    }

    fn normalize(x: &Array4<F>) -> Array4<F> {
        let mut y = x.clone();
        for c in 0..3 {
            let m = fr::<F>(IMAGENET_MEAN[c]);
            let s = fr::<F>(IMAGENET_STD[c]);
            y.slice_mut(ndarray::s![.., c, .., ..])
                .mapv_inplace(|v| (v - m) / s);
        }
        y
    }

    fn forward_impl(&self, x: &Array4<F>, want_trace: bool) -> (Array4<F>, Option<FxTrace<F>>) {
        let mut cur = Self::normalize(x);
        let mut steps = Vec::new();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            let conv_in_hw = (cur.dim().2, cur.dim().3);
            let pre = conv.forward(&cur);
            let mut slope = None;
            if i < last {
                if want_trace {
                    let a = fr::<F>(0.0);
                    let one = fr::<F>(1.0);
                    slope = Some(pre.mapv(|v| if v > fr(0.0) { one } else { a }));
                }
                cur = leaky_relu(&pre, 0.0);
            } else {
                cur = pre;
            }
            let mut pool = None;
            if POOL_AFTER.contains(&i) {
                let in_hw = (cur.dim().2, cur.dim().3);
                let (pooled, idx) = max_pool2(&cur);
                cur = pooled;
                if want_trace {
                    pool = Some((idx, in_hw));
                }
            }
            if want_trace {
                steps.push(FxStep {
                    conv_in_hw,
                    slope,
                    pool,
                });
            }
        }
        (cur, want_trace.then_some(FxTrace { steps }))
    }

    /// Feature map of the tap layer for a (n, 3, h, w) batch.
    pub fn features(&self, x: &Array4<F>) -> Result<Array4<F>> {
        Self::check_input(x)?;
        Ok(self.forward_impl(x, false).0)
    }

    pub fn features_traced(&self, x: &Array4<F>) -> Result<(Array4<F>, FxTrace<F>)> {
        Self::check_input(x)?;
        let (y, tr) = self.forward_impl(x, true);
        Ok((y, tr.expect("trace requested")))
    }

    /// Gradient w.r.t. the raw (unnormalized) input batch. Weights stay
    /// untouched; the extractor is frozen.
    pub fn input_grad(&self, tr: &FxTrace<F>, gfeat: &Array4<F>) -> Array4<F> {
        let mut g = gfeat.clone();
        for (conv, step) in self.convs.iter().zip(tr.steps.iter()).rev() {
            if let Some((idx, in_hw)) = &step.pool {
                g = max_pool2_backward(&g, idx, *in_hw);
            }
            if let Some(slope) = &step.slope {
                g = &g * slope;
            }
            g = conv.input_grad(step.conv_in_hw, &g);
        }
        for c in 0..3 {
            let s = fr::<F>(IMAGENET_STD[c]);
            g.slice_mut(ndarray::s![.., c, .., ..])
                .mapv_inplace(|v| v / s);
        }
        g
    }

    pub fn tensors(&self) -> Vec<(String, ArrayD<F>)> {
        let mut out = Vec::new();
        for (i, conv) in self.convs.iter().enumerate() {
            conv.collect_tensors(&vgg_conv_name(i), &mut out);
        }
        out
    }
}

/// Deterministic random-weight extractor; a self-contained stand-in for
/// pretrained weights so tests and desk runs need no external files.
pub fn random_feature_extractor<F: Scalar>(seed: u64) -> FeatureExtractor<F> {
    let mut fx = FeatureExtractor::<F>::empty();
    let mut rng = Seeder::new(seed).stream("feature_extractor.init");
    for conv in fx.convs.iter_mut() {
        let (oc, ic, kh, kw) = conv.weight.dim();
        let std = he_std(ic * kh * kw, 1.0);
        conv.weight = trunc_normal::<F>(&[oc, ic, kh, kw], std, &mut rng)
            .into_dimensionality()
            .expect("4-d weight");
    }
    fx
}

impl FeatureExtractor<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        model_store(
            "feature_extractor",
            &serde_json::json!({"topology": "conv16_tap_preactivation"}),
            self.tensors(),
        )
        .save(path)
    }

    pub fn load_file(path: &Path) -> Result<Self> {
        let store = TensorStore::load(path)?;
        let _cfg: serde_json::Value = model_config(&store, "feature_extractor")?;
        let mut fx = FeatureExtractor::<f32>::empty();
        let names: Vec<String> = fx.tensors().into_iter().map(|(n, _)| n).collect();
        store.expect_exact(&names)?;
        for (i, conv) in fx.convs.iter_mut().enumerate() {
            conv.load_tensors(&vgg_conv_name(i), &mut |name: &str| {
                tensor_from_store(&store, name)
            })?;
        }
        Ok(fx)
    }
}

/// Loads extractor weights from a container file, or builds deterministic
/// random weights for the sentinel form "random:<seed>".
pub fn load_feature_extractor(source: &str) -> Result<FeatureExtractor<f32>> {
    if let Some(seed) = source.strip_prefix("random:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| Error::invalid(format!("bad extractor seed in {source:?}")))?;
        return Ok(random_feature_extractor(seed));
    }
    FeatureExtractor::load_file(Path::new(source))
}

/// Mean absolute difference of tap-layer feature maps.
pub fn perceptual_loss<F: Scalar>(
    fx: &FeatureExtractor<F>,
    hr: &Array4<F>,
    sr: &Array4<F>,
) -> Result<f64> {
    check_same_shape(hr, sr)?;
    let fh = fx.features(hr)?;
    let fs = fx.features(sr)?;
    let mut acc = 0.0f64;
    for (a, b) in fh.iter().zip(fs.iter()) {
        acc += (a.f64() - b.f64()).abs();
    }
    Ok(acc / fh.len() as f64)
}

/// Perceptual loss plus its gradient w.r.t. `sr`.
pub fn perceptual_loss_grad<F: Scalar>(
    fx: &FeatureExtractor<F>,
    hr: &Array4<F>,
    sr: &Array4<F>,
) -> Result<(f64, Array4<F>)> {
    check_same_shape(hr, sr)?;
    let fh = fx.features(hr)?;
    let (fs, tr) = fx.features_traced(sr)?;
    let n = fh.len() as f64;
    let mut acc = 0.0f64;
    let mut gfeat = Array4::zeros(fh.dim());
    for ((a, b), g) in fh.iter().zip(fs.iter()).zip(gfeat.iter_mut()) {
        let d = b.f64() - a.f64();
        acc += d.abs();
        *g = fr(d.signum() / n);
    }
    Ok((acc / n, fx.input_grad(&tr, &gfeat)))
}

/// Component breakdown of the generator total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLoss {
    pub total: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub pixel: f64,
}

/// Generator total: perceptual + lambda * adversarial + eta * pixel.
pub fn total_generator_loss<F: Scalar>(
    fx: &FeatureExtractor<F>,
    weights: &LossWeights,
    hr: &Array4<F>,
    sr: &Array4<F>,
    c_hr: &[f64],
    c_sr: &[f64],
) -> Result<GeneratorLoss> {
    weights.validate()?;
    let perceptual = perceptual_loss(fx, hr, sr)?;
    let adversarial = generator_adv_loss(c_hr, c_sr)?;
    let pixel = pixel_loss(hr, sr)?;
    Ok(GeneratorLoss {
        total: perceptual + weights.lambda * adversarial + weights.eta * pixel,
        perceptual,
        adversarial,
        pixel,
    })
}

/// Generator total with gradients w.r.t. the sr batch and both logit
/// vectors, treating the logits as independent inputs (the model backward
/// chains them through the discriminator).
pub fn total_generator_loss_grad<F: Scalar>(
    fx: &FeatureExtractor<F>,
    weights: &LossWeights,
    hr: &Array4<F>,
    sr: &Array4<F>,
    c_hr: &[f64],
    c_sr: &[f64],
) -> Result<(GeneratorLoss, Array4<F>, Vec<f64>, Vec<f64>)> {
    weights.validate()?;
    let (perceptual, g_percep) = perceptual_loss_grad(fx, hr, sr)?;
    let (adversarial, ga_hr, ga_sr) = generator_adv_loss_grad(c_hr, c_sr)?;
    let (pixel, g_pix) = pixel_loss_grad(hr, sr)?;
    let lambda = weights.lambda;
    let eta = fr::<F>(weights.eta);
    let mut g_sr = g_percep;
    g_sr.zip_mut_with(&g_pix, |a, &b| *a = *a + eta * b);
    let g_c_hr = ga_hr.into_iter().map(|g| lambda * g).collect();
    let g_c_sr = ga_sr.into_iter().map(|g| lambda * g).collect();
    Ok((
        GeneratorLoss {
            total: perceptual + lambda * adversarial + weights.eta * pixel,
            perceptual,
            adversarial,
            pixel,
        },
        g_sr,
        g_c_hr,
        g_c_sr,
    ))
}
