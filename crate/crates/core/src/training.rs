//! Two-stage SR training. Stage one fits the generator alone under the mean
//! absolute pixel error. Stage two starts from that result and co-trains
//! generator and discriminator, the generator minimizing perceptual plus
//! weighted adversarial and pixel terms, alternating strictly one
//! discriminator update then one generator update on the same batch.
//!
//! Both loops draw every random decision from one seeded stream, so runs are
//! bit-reproducible and checkpoints capture enough state (parameters,
//! optimizer moments, rng position, counters, history) to resume exactly.

use crate::container::{Tensor, TensorStore};
use crate::datasets::{make_pair, ManifestEntry};
use crate::imaging::{augment, batch_to_nchw, ensure_rgb, random_crop, read_png, ImageTensor};
use crate::losses::{
    discriminator_loss_grad, pixel_loss_grad, total_generator_loss_grad, FeatureExtractor,
    GeneratorLoss, LossWeights,
};
use crate::rng::{RngState, Seeder};
use crate::sr_models::{
    build_discriminator, build_generator, tensor_from_store, Discriminator, DiscriminatorConfig,
    Generator, GeneratorConfig,
};
use crate::tensor::{Adam, AdamConfig, Feat, Params, Phase, Trace};
use crate::{Error, Result};
use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

const PIXEL_KIND: &str = "pixel_checkpoint";
const GAN_KIND: &str = "gan_checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PixelStageConfig {
    /// HR crop edge in pixels.
    pub crop: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for PixelStageConfig {
    fn default() -> Self {
        PixelStageConfig {
            crop: 96,
            batch_size: 64,
            iterations: 1_000_000,
            optimizer: AdamConfig::with_lr(2e-4),
            seed: 0,
        }
    }
}

impl PixelStageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop % 4 != 0 {
            return Err(Error::config("pixel-stage crop must be a positive multiple of 4"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("pixel-stage batch size must be at least 1"));
        }
        self.optimizer.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GanStageConfig {
    /// HR crop edge in pixels; must equal the discriminator input size.
    pub crop: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub gen_optimizer: AdamConfig,
    pub disc_optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for GanStageConfig {
    fn default() -> Self {
        GanStageConfig {
            crop: 192,
            batch_size: 32,
            epochs: 400,
            weights: LossWeights::default(),
            gen_optimizer: AdamConfig::with_lr(1e-4),
            disc_optimizer: AdamConfig::with_lr(1e-4),
            seed: 0,
        }
    }
}

impl GanStageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop % 64 != 0 {
            return Err(Error::config(
                "adversarial-stage crop must be a positive multiple of 64",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("adversarial-stage batch size must be at least 1"));
        }
        self.weights.validate()?;
        self.gen_optimizer.validate()?;
        self.disc_optimizer.validate()?;
        Ok(())
    }
}

/// Per-epoch means of the adversarial-stage loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GanEpochStats {
    pub d_loss: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    /// Pixel term already multiplied by its weight.
    pub weighted_pixel: f64,
    pub total: f64,
}

impl GanEpochStats {
    fn zero() -> Self {
        GanEpochStats {
            d_loss: 0.0,
            perceptual: 0.0,
            adversarial: 0.0,
            weighted_pixel: 0.0,
            total: 0.0,
        }
    }

    fn add(&mut self, d_loss: f64, g: &GeneratorLoss, eta: f64) {
        self.d_loss += d_loss;
        self.perceptual += g.perceptual;
        self.adversarial += g.adversarial;
        self.weighted_pixel += eta * g.pixel;
        self.total += g.total;
    }

    fn mean(&self, steps: usize) -> Self {
        let k = 1.0 / steps as f64;
        GanEpochStats {
            d_loss: self.d_loss * k,
            perceptual: self.perceptual * k,
            adversarial: self.adversarial * k,
            weighted_pixel: self.weighted_pixel * k,
            total: self.total * k,
        }
    }
}

/// Where and how often to write checkpoints during a run. `every` counts
/// iterations (pixel stage) or epochs (adversarial stage); 0 disables
/// periodic writes. The path is also the emergency sink when a loss turns
/// non-finite.
#[derive(Debug, Clone, Default)]
pub struct CheckpointPolicy {
    pub path: Option<PathBuf>,
    pub every: usize,
}

impl CheckpointPolicy {
    fn due(&self, completed: usize) -> bool {
        self.path.is_some() && self.every > 0 && completed % self.every == 0
    }
}

/// Loads every training image once, dropping (with a warning) those smaller
/// than the crop. Grayscale images are replicated to three channels.
fn load_pool(data: &[ManifestEntry], crop: usize) -> Result<Vec<ImageTensor>> {
    if data.is_empty() {
        return Err(Error::config("the training set is empty"));
    }
    let mut pool = Vec::new();
    for entry in data {
        let img = read_png(&entry.path)?;
        if img.height < crop || img.width < crop {
            log::warn!(
                "skipping {}: {}x{} is smaller than the {}px crop",
                entry.path.display(),
                img.height,
                img.width,
                crop
            );
            continue;
        }
        pool.push(ensure_rgb(img));
    }
    if pool.is_empty() {
        return Err(Error::config(format!(
            "no training image is at least {crop}x{crop}px"
        )));
    }
    Ok(pool)
}

/// Crop, augment, and downsample one training image into an (hr, lr) pair.
fn sample_pair(
    img: &ImageTensor,
    crop: usize,
    scale: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageTensor, ImageTensor)> {
    let cropped = random_crop(img, crop, rng)?;
    let pair = make_pair(augment(&cropped, rng), scale)?;
    Ok((pair.hr, pair.lr))
}

fn logits(out: Feat<f32>) -> Vec<f64> {
    out.t2().column(0).iter().map(|&v| v as f64).collect()
}

fn column(g: &[f64]) -> Array2<f32> {
    Array2::from_shape_fn((g.len(), 1), |(i, _)| g[i] as f32)
}

fn insert_tensor(store: &mut TensorStore, name: String, arr: &ArrayD<f32>) {
    let data: Vec<f32> = arr.iter().copied().collect();
    store.insert(name, Tensor::new(arr.shape().to_vec(), data));
}

fn insert_moments(store: &mut TensorStore, prefix: &str, map: &BTreeMap<String, ArrayD<f32>>) {
    for (name, arr) in map {
        insert_tensor(store, format!("{prefix}{name}"), arr);
    }
}

fn extract_moments(store: &TensorStore, prefix: &str) -> Result<BTreeMap<String, ArrayD<f32>>> {
    let mut out = BTreeMap::new();
    for (name, t) in &store.tensors {
        if let Some(stripped) = name.strip_prefix(prefix) {
            let arr = ArrayD::from_shape_vec(IxDyn(&t.shape), t.data.clone())
                .map_err(|_| Error::load(format!("tensor {name}: malformed shape")))?;
            out.insert(stripped.to_string(), arr);
        }
    }
    Ok(out)
}

fn expect_kind(store: &TensorStore, kind: &str) -> Result<()> {
    if store.config.get("kind").and_then(|k| k.as_str()) != Some(kind) {
        return Err(Error::load(format!("file does not hold a {kind}")));
    }
    Ok(())
}

fn config_section<C: serde::de::DeserializeOwned>(store: &TensorStore, field: &str) -> Result<C> {
    let v = store
        .config
        .get(field)
        .ok_or_else(|| Error::load(format!("checkpoint lacks the {field} config section")))?;
    serde_json::from_value(v.clone())
        .map_err(|e| Error::load(format!("checkpoint {field} config: {e}")))
}

fn state_section<C: serde::de::DeserializeOwned>(store: &TensorStore) -> Result<C> {
    let v = store
        .state
        .as_ref()
        .ok_or_else(|| Error::load("checkpoint lacks a state section"))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::load(format!("checkpoint state: {e}")))
}

#[derive(Serialize, Deserialize)]
struct PixelMeta {
    iteration: usize,
    adam_t: u64,
    rng: RngState,
    history: Vec<f64>,
}

/// Pixel-stage training state: generator, optimizer, data rng, and the
/// per-iteration loss history.
pub struct PixelTrainer {
    pub cfg: PixelStageConfig,
    pub gen: Generator<f32>,
    pub adam: Adam<f32>,
    pub rng: ChaCha8Rng,
    pub iteration: usize,
    pub history: Vec<f64>,
}

impl PixelTrainer {
    pub fn new(gen: Generator<f32>, cfg: &PixelStageConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.crop % gen.cfg.scale != 0 {
            return Err(Error::config(format!(
                "crop {} is not divisible by the generator scale {}",
                cfg.crop, gen.cfg.scale
            )));
        }
        let rng = Seeder::new(cfg.seed).stream("pixel.data");
        Ok(PixelTrainer {
            cfg: cfg.clone(),
            adam: Adam::new(cfg.optimizer),
            gen,
            rng,
            iteration: 0,
            history: Vec::new(),
        })
    }

    /// Runs from the current iteration up to the configured count. Each
    /// iteration samples a batch with replacement, crops, augments, pairs,
    /// and applies one Adam step on the mean absolute pixel error.
    pub fn run(&mut self, data: &[ManifestEntry], policy: &CheckpointPolicy) -> Result<()> {
        if self.iteration >= self.cfg.iterations {
            return Ok(());
        }
        let pool = load_pool(data, self.cfg.crop)?;
        let scale = self.gen.cfg.scale;
        while self.iteration < self.cfg.iterations {
            let boundary_rng = RngState::capture(&self.rng);
            let mut hrs = Vec::with_capacity(self.cfg.batch_size);
            let mut lrs = Vec::with_capacity(self.cfg.batch_size);
            for _ in 0..self.cfg.batch_size {
                let idx = self.rng.gen_range(0..pool.len());
                let (hr, lr) = sample_pair(&pool[idx], self.cfg.crop, scale, &mut self.rng)?;
                hrs.push(hr);
                lrs.push(lr);
            }
            let hr = batch_to_nchw(&hrs)?;
            let lr = batch_to_nchw(&lrs)?;
            let (sr, trace) = self.gen.forward(&lr, true);
            let (loss, grad) = pixel_loss_grad(&hr, &sr)?;
            if !loss.is_finite() {
                let checkpoint = match &policy.path {
                    Some(p) => {
                        self.store_with_rng(boundary_rng).save(p)?;
                        Some(p.clone())
                    }
                    None => None,
                };
                return Err(Error::NonFinite {
                    step: self.iteration + 1,
                    checkpoint,
                });
            }
            let trace = trace.expect("trace requested");
            self.gen.zero_grads();
            self.gen.backward(&trace, &grad);
            self.adam.step(&mut self.gen);
            self.history.push(loss);
            self.iteration += 1;
            if policy.due(self.iteration) {
                if let Some(p) = &policy.path {
                    self.save(p)?;
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store_with_rng(RngState::capture(&self.rng)).save(path)
    }

    fn store_with_rng(&self, rng: RngState) -> TensorStore {
        let mut store = TensorStore::new(serde_json::json!({
            "kind": PIXEL_KIND,
            "trainer": serde_json::to_value(&self.cfg).expect("config serializes"),
            "generator": serde_json::to_value(&self.gen.cfg).expect("config serializes"),
        }));
        let meta = PixelMeta {
            iteration: self.iteration,
            adam_t: self.adam.t,
            rng,
            history: self.history.clone(),
        };
        store.state = Some(serde_json::to_value(&meta).expect("state serializes"));
        for (name, arr) in self.gen.tensors() {
            insert_tensor(&mut store, format!("gen.{name}"), &arr);
        }
        insert_moments(&mut store, "optim.m.", &self.adam.m);
        insert_moments(&mut store, "optim.v.", &self.adam.v);
        store
    }
}

pub fn load_pixel_checkpoint(path: &Path) -> Result<PixelTrainer> {
    let store = TensorStore::load(path)?;
    expect_kind(&store, PIXEL_KIND)?;
    let cfg: PixelStageConfig = config_section(&store, "trainer")?;
    let gen_cfg: GeneratorConfig = config_section(&store, "generator")?;
    let mut gen = build_generator::<f32>(&gen_cfg, 0)?;
    gen.load_tensors(|name| tensor_from_store(&store, &format!("gen.{name}")))?;
    let meta: PixelMeta = state_section(&store)?;
    let mut adam = Adam::new(cfg.optimizer);
    adam.t = meta.adam_t;
    adam.m = extract_moments(&store, "optim.m.")?;
    adam.v = extract_moments(&store, "optim.v.")?;
    Ok(PixelTrainer {
        cfg,
        gen,
        adam,
        rng: meta.rng.restore()?,
        iteration: meta.iteration,
        history: meta.history,
    })
}

/// Trains the generator on the pixel loss from scratch state to the
/// configured iteration count.
pub fn train_pixel_stage(
    gen: Generator<f32>,
    data: &[ManifestEntry],
    cfg: &PixelStageConfig,
) -> Result<PixelTrainer> {
    let mut trainer = PixelTrainer::new(gen, cfg)?;
    trainer.run(data, &CheckpointPolicy::default())?;
    Ok(trainer)
}

#[derive(Serialize, Deserialize)]
struct GanMeta {
    epoch: usize,
    gen_adam_t: u64,
    disc_adam_t: u64,
    rng: RngState,
    history: Vec<GanEpochStats>,
}

/// Adversarial-stage training state: both networks, their optimizers, the
/// data rng, and per-epoch loss means.
pub struct GanTrainer {
    pub cfg: GanStageConfig,
    pub gen: Generator<f32>,
    pub disc: Discriminator<f32>,
    pub gen_adam: Adam<f32>,
    pub disc_adam: Adam<f32>,
    pub rng: ChaCha8Rng,
    pub epoch: usize,
    pub history: Vec<GanEpochStats>,
}

impl GanTrainer {
    pub fn new(
        gen: Generator<f32>,
        disc: Discriminator<f32>,
        cfg: &GanStageConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.crop != disc.cfg.input_size {
            return Err(Error::config(format!(
                "the discriminator was built for {}px inputs but the stage crops at {}px",
                disc.cfg.input_size, cfg.crop
            )));
        }
        if cfg.crop % gen.cfg.scale != 0 {
            return Err(Error::config(format!(
                "crop {} is not divisible by the generator scale {}",
                cfg.crop, gen.cfg.scale
            )));
        }
        let rng = Seeder::new(cfg.seed).stream("gan.data");
        Ok(GanTrainer {
            cfg: cfg.clone(),
            gen_adam: Adam::new(cfg.gen_optimizer),
            disc_adam: Adam::new(cfg.disc_optimizer),
            gen,
            disc,
            rng,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// One discriminator update: forward both batches with live batch-norm
    /// statistics, backprop the relativistic loss, and step. Skips the step
    /// (leaving parameters intact) when the loss is non-finite.
    fn d_step(&mut self, hr: &Array4<f32>, lr: &Array4<f32>) -> Result<f64> {
        let sr = self.gen.forward(lr, false).0;
        self.disc.net.zero_grads();
        let phase = Phase::Train { update_stats: true };
        let mut tr_hr = Trace::new();
        let c_hr = logits(
            self.disc
                .net
                .forward(Feat::T4(hr.clone()), phase, None, Some(&mut tr_hr)),
        );
        let mut tr_sr = Trace::new();
        let c_sr = logits(
            self.disc
                .net
                .forward(Feat::T4(sr), phase, None, Some(&mut tr_sr)),
        );
        let (loss, g_hr, g_sr) = discriminator_loss_grad(&c_hr, &c_sr)?;
        if !loss.is_finite() {
            return Ok(loss);
        }
        self.disc.net.backward(&tr_hr, Feat::T2(column(&g_hr)));
        self.disc.net.backward(&tr_sr, Feat::T2(column(&g_sr)));
        self.disc_adam.step(&mut self.disc.net);
        Ok(loss)
    }

    /// One generator update: the pixel and perceptual gradients flow straight
    /// into the SR batch, the adversarial gradient arrives through the
    /// discriminator (frozen statistics, parameters untouched). Skips the
    /// step when the total is non-finite.
    fn g_step(
        &mut self,
        hr: &Array4<f32>,
        lr: &Array4<f32>,
        fx: &FeatureExtractor<f32>,
    ) -> Result<GeneratorLoss> {
        let (sr, gtrace) = self.gen.forward(lr, true);
        let gtrace = gtrace.expect("trace requested");
        let phase = Phase::Train {
            update_stats: false,
        };
        let c_hr = logits(self.disc.net.forward(Feat::T4(hr.clone()), phase, None, None));
        let mut tr_sr = Trace::new();
        let c_sr = logits(
            self.disc
                .net
                .forward(Feat::T4(sr.clone()), phase, None, Some(&mut tr_sr)),
        );
        let (parts, mut g_sr, _g_c_hr, g_c_sr) =
            total_generator_loss_grad(fx, &self.cfg.weights, hr, &sr, &c_hr, &c_sr)?;
        if !parts.total.is_finite() {
            return Ok(parts);
        }
        let g_adv = self
            .disc
            .net
            .backward(&tr_sr, Feat::T2(column(&g_c_sr)))
            .t4();
        g_sr.zip_mut_with(&g_adv, |a, &b| *a += b);
        self.gen.zero_grads();
        self.gen.backward(&gtrace, &g_sr);
        self.gen_adam.step(&mut self.gen);
        Ok(parts)
    }

    /// Runs from the current epoch to the configured count. An epoch is one
    /// shuffled pass over the usable images, floor(n / batch) steps, each
    /// step one discriminator then one generator update on the same batch.
    pub fn run(
        &mut self,
        data: &[ManifestEntry],
        fx: &FeatureExtractor<f32>,
        policy: &CheckpointPolicy,
    ) -> Result<()> {
        if self.epoch >= self.cfg.epochs {
            return Ok(());
        }
        let pool = load_pool(data, self.cfg.crop)?;
        let batch = self.cfg.batch_size;
        let steps = pool.len() / batch;
        if steps == 0 {
            return Err(Error::config(format!(
                "batch size {batch} exceeds the {} usable training images",
                pool.len()
            )));
        }
        let scale = self.gen.cfg.scale;
        while self.epoch < self.cfg.epochs {
            // Snapshot the epoch boundary so a mid-epoch blow-up can still
            // dump a consistent, resumable state.
            let boundary = policy.path.as_ref().map(|_| self.to_store().to_bytes());
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut self.rng);
            let mut sums = GanEpochStats::zero();
            for step in 0..steps {
                let mut hrs = Vec::with_capacity(batch);
                let mut lrs = Vec::with_capacity(batch);
                for &i in &order[step * batch..(step + 1) * batch] {
                    let (hr, lr) = sample_pair(&pool[i], self.cfg.crop, scale, &mut self.rng)?;
                    hrs.push(hr);
                    lrs.push(lr);
                }
                let hr = batch_to_nchw(&hrs)?;
                let lr = batch_to_nchw(&lrs)?;
                let step_no = self.epoch * steps + step + 1;
                let d_loss = self.d_step(&hr, &lr)?;
                if !d_loss.is_finite() {
                    return self.abort_non_finite(step_no, boundary.as_deref(), policy);
                }
                let parts = self.g_step(&hr, &lr, fx)?;
                if !parts.total.is_finite() {
                    return self.abort_non_finite(step_no, boundary.as_deref(), policy);
                }
                sums.add(d_loss, &parts, self.cfg.weights.eta);
            }
            self.history.push(sums.mean(steps));
            self.epoch += 1;
            if policy.due(self.epoch) {
                if let Some(p) = &policy.path {
                    self.save(p)?;
                }
            }
        }
        Ok(())
    }

    fn abort_non_finite(
        &self,
        step: usize,
        boundary: Option<&[u8]>,
        policy: &CheckpointPolicy,
    ) -> Result<()> {
        let checkpoint = match (&policy.path, boundary) {
            (Some(p), Some(bytes)) => {
                std::fs::write(p, bytes)?;
                Some(p.clone())
            }
            _ => None,
        };
        Err(Error::NonFinite { step, checkpoint })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_store().save(path)
    }

    fn to_store(&self) -> TensorStore {
        let mut store = TensorStore::new(serde_json::json!({
            "kind": GAN_KIND,
            "trainer": serde_json::to_value(&self.cfg).expect("config serializes"),
            "generator": serde_json::to_value(&self.gen.cfg).expect("config serializes"),
            "discriminator": serde_json::to_value(&self.disc.cfg).expect("config serializes"),
        }));
        let meta = GanMeta {
            epoch: self.epoch,
            gen_adam_t: self.gen_adam.t,
            disc_adam_t: self.disc_adam.t,
            rng: RngState::capture(&self.rng),
            history: self.history.clone(),
        };
        store.state = Some(serde_json::to_value(&meta).expect("state serializes"));
        for (name, arr) in self.gen.tensors() {
            insert_tensor(&mut store, format!("gen.{name}"), &arr);
        }
        for (name, arr) in self.disc.net.tensors() {
            insert_tensor(&mut store, format!("disc.{name}"), &arr);
        }
        insert_moments(&mut store, "optim.gen.m.", &self.gen_adam.m);
        insert_moments(&mut store, "optim.gen.v.", &self.gen_adam.v);
        insert_moments(&mut store, "optim.disc.m.", &self.disc_adam.m);
        insert_moments(&mut store, "optim.disc.v.", &self.disc_adam.v);
        store
    }
}

pub fn load_gan_checkpoint(path: &Path) -> Result<GanTrainer> {
    let store = TensorStore::load(path)?;
    expect_kind(&store, GAN_KIND)?;
    let cfg: GanStageConfig = config_section(&store, "trainer")?;
    let gen_cfg: GeneratorConfig = config_section(&store, "generator")?;
    let disc_cfg: DiscriminatorConfig = config_section(&store, "discriminator")?;
    let mut gen = build_generator::<f32>(&gen_cfg, 0)?;
    gen.load_tensors(|name| tensor_from_store(&store, &format!("gen.{name}")))?;
    let mut disc = build_discriminator::<f32>(&disc_cfg, 0)?;
    disc.net
        .load_tensors(|name| tensor_from_store(&store, &format!("disc.{name}")))?;
    let meta: GanMeta = state_section(&store)?;
    let mut gen_adam = Adam::new(cfg.gen_optimizer);
    gen_adam.t = meta.gen_adam_t;
    gen_adam.m = extract_moments(&store, "optim.gen.m.")?;
    gen_adam.v = extract_moments(&store, "optim.gen.v.")?;
    let mut disc_adam = Adam::new(cfg.disc_optimizer);
    disc_adam.t = meta.disc_adam_t;
    disc_adam.m = extract_moments(&store, "optim.disc.m.")?;
    disc_adam.v = extract_moments(&store, "optim.disc.v.")?;
    Ok(GanTrainer {
        cfg,
        gen,
        disc,
        gen_adam,
        disc_adam,
        rng: meta.rng.restore()?,
        epoch: meta.epoch,
        history: meta.history,
    })
}

/// Fine-tunes a pixel-stage generator adversarially. The feature extractor
/// is required; pass the pixel-stage result as `gen`.
pub fn train_gan_stage(
    gen: Generator<f32>,
    disc: Discriminator<f32>,
    data: &[ManifestEntry],
    cfg: &GanStageConfig,
    fx: Option<&FeatureExtractor<f32>>,
) -> Result<GanTrainer> {
    let fx = fx.ok_or_else(|| {
        Error::config("the adversarial stage requires a perceptual feature extractor")
    })?;
    let mut trainer = GanTrainer::new(gen, disc, cfg)?;
    trainer.run(data, fx, &CheckpointPolicy::default())?;
    Ok(trainer)
}

pub fn export_pixel_history(history: &[f64], path: &Path) -> Result<()> {
    let mut s = String::from("iteration,pixel_loss\n");
    for (i, v) in history.iter().enumerate() {
        let _ = writeln!(s, "{},{v}", i + 1);
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn export_gan_history(history: &[GanEpochStats], path: &Path) -> Result<()> {
    let mut s = String::from("epoch,d_loss,perceptual,adversarial,weighted_pixel,total\n");
    for (i, e) in history.iter().enumerate() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            i + 1,
            e.d_loss,
            e.perceptual,
            e.adversarial,
            e.weighted_pixel,
            e.total
        );
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::check_config_matches;
    use crate::datasets::{load_manifest, synth_class_names, synth_corpus, LabelSpace, SynthParams};
    use crate::losses::{perceptual_loss_grad, random_feature_extractor};

    fn err_string<T>(r: Result<T>) -> String {
        match r {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected an error"),
        }
    }

    fn fnv(h: &mut u64, bytes: &[u8]) {
        for &b in bytes {
            *h ^= b as u64;
            *h = h.wrapping_mul(0x100000001b3);
        }
    }

    fn tensor_hash(tensors: &[(String, ArrayD<f32>)]) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (name, arr) in tensors {
            fnv(&mut h, name.as_bytes());
            for v in arr.iter() {
                fnv(&mut h, &v.to_bits().to_le_bytes());
            }
        }
        h
    }

    fn corpus(dir: &Path, size: usize, per_class: usize) -> Vec<ManifestEntry> {
        let manifest =
            synth_corpus(dir, 2, per_class, size, 9, &SynthParams::default()).unwrap();
        let space = LabelSpace::new(synth_class_names(2)).unwrap();
        load_manifest(&manifest, &space).unwrap()
    }

    fn tiny_gen_cfg() -> GeneratorConfig {
        GeneratorConfig {
            blocks: 1,
            features: 8,
            growth: 4,
            residual_scale: 0.2,
            scale: 4,
        }
    }

    fn tiny_disc_cfg() -> DiscriminatorConfig {
        DiscriminatorConfig {
            input_size: 64,
            features: vec![4, 4, 8, 8, 8, 8],
            alpha: 0.2,
            fc_units: 8,
        }
    }

    fn pixel_cfg(iterations: usize) -> PixelStageConfig {
        PixelStageConfig {
            crop: 32,
            batch_size: 2,
            iterations,
            optimizer: AdamConfig::with_lr(2e-4),
            seed: 11,
        }
    }

    fn gan_cfg(epochs: usize) -> GanStageConfig {
        GanStageConfig {
            crop: 64,
            batch_size: 2,
            epochs,
            weights: LossWeights::default(),
            gen_optimizer: AdamConfig::with_lr(1e-4),
            disc_optimizer: AdamConfig::with_lr(1e-4),
            seed: 13,
        }
    }

    #[test]
    fn configs_validate() {
        assert!(PixelStageConfig::default().validate().is_ok());
        assert!(GanStageConfig::default().validate().is_ok());
        let mut p = pixel_cfg(1);
        p.crop = 50;
        assert!(p.validate().is_err());
        p = pixel_cfg(1);
        p.batch_size = 0;
        assert!(p.validate().is_err());
        let mut g = gan_cfg(1);
        g.crop = 96;
        assert!(g.validate().is_err());
        g = gan_cfg(1);
        g.batch_size = 0;
        assert!(g.validate().is_err());
    }

    #[test]
    fn pixel_zero_iterations_changes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let data = corpus(dir.path(), 64, 2);
        let gen = build_generator::<f32>(&tiny_gen_cfg(), 3).unwrap();
        let before = tensor_hash(&gen.tensors());
        let t = train_pixel_stage(gen, &data, &pixel_cfg(0)).unwrap();
        assert_eq!(tensor_hash(&t.gen.tensors()), before);
        assert!(t.history.is_empty());
    }

    #[test]
    fn pixel_loss_decreases_on_small_run() {
        let dir = tempfile::tempdir().unwrap();
        let data = corpus(dir.path(), 64, 3);
        let gen = build_generator::<f32>(&tiny_gen_cfg(), 3).unwrap();
        let t = train_pixel_stage(gen, &data, &pixel_cfg(60)).unwrap();
        assert_eq!(t.history.len(), 60);
        let first: f64 = t.history[..20].iter().sum::<f64>() / 20.0;
        let last: f64 = t.history[40..].iter().sum::<f64>() / 20.0;
        assert!(
            last < first,
            "loss did not decrease: first 20 mean {first}, last 20 mean {last}"
        );
    }

    #[test]
    fn pixel_resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let data = corpus(dir.path(), 64, 2);
        let ckpt = dir.path().join("pixel.ckpt");

        let straight = train_pixel_stage(
            build_generator::<f32>(&tiny_gen_cfg(), 3).unwrap(),
            &data,
            &pixel_cfg(8),
        )
        .unwrap();

        let policy = CheckpointPolicy {
            path: Some(ckpt.clone()),
            every: 5,
        };
        let mut with_ckpt =
            PixelTrainer::new(build_generator::<f32>(&tiny_gen_cfg(), 3).unwrap(), &pixel_cfg(8))
                .unwrap();
        with_ckpt.run(&data, &policy).unwrap();

        let bytes1 = std::fs::read(&ckpt).unwrap();
        let mut resumed = load_pixel_checkpoint(&ckpt).unwrap();
        assert_eq!(resumed.iteration, 5);
        let ckpt2 = dir.path().join("pixel2.ckpt");
        resumed.save(&ckpt2).unwrap();
        assert_eq!(bytes1, std::fs::read(&ckpt2).unwrap(), "save-load-save changed bytes");

        resumed.run(&data, &CheckpointPolicy::default()).unwrap();
        assert_eq!(resumed.iteration, 8);
        assert_eq!(resumed.history, straight.history);
        assert_eq!(
            tensor_hash(&resumed.gen.tensors()),
            tensor_hash(&straight.gen.tensors()),
            "resumed parameters differ from the uninterrupted run"
        );
        assert_eq!(resumed.adam.t, straight.adam.t);
    }

    #[test]
    fn checkpoint_config_mismatch_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let data = corpus(dir.path(), 64, 2);
        let ckpt = dir.path().join("pixel.ckpt");
        let t = train_pixel_stage(
            build_generator::<f32>(&tiny_gen_cfg(), 3).unwrap(),
            &data,
            &pixel_cfg(2),
        )
        .unwrap();
        t.save(&ckpt).unwrap();

        let store = TensorStore::load(&ckpt).unwrap();
        let mut other = pixel_cfg(2);
        other.batch_size = 3;
        let expected = serde_json::to_value(&other).unwrap();
        let err = check_config_matches(&expected, store.config.get("trainer").unwrap())
            .unwrap_err()
            .to_string();
        assert!(err.contains("batch_size"), "error does not name the field: {err}");

        let bad_kind = err_string(load_gan_checkpoint(&ckpt));
        assert!(bad_kind.contains("gan_checkpoint"), "{bad_kind}");
    }

    #[test]
    fn non_finite_loss_aborts_with_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let data = corpus(dir.path(), 64, 2);
        let ckpt = dir.path().join("blown.ckpt");
        let mut cfg = pixel_cfg(5);
        cfg.optimizer = AdamConfig::with_lr(1e25);
        let mut t =
            PixelTrainer::new(build_generator::<f32>(&tiny_gen_cfg(), 3).unwrap(), &cfg).unwrap();
        let policy = CheckpointPolicy {
            path: Some(ckpt.clone()),
            every: 0,
        };
        match t.run(&data, &policy) {
            Err(Error::NonFinite { step, checkpoint }) => {
                assert!(step >= 2, "first step should be finite, failed at {step}");
                assert_eq!(checkpoint.as_deref(), Some(ckpt.as_path()));
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
        let rescued = load_pixel_checkpoint(&ckpt).unwrap();
        assert!(rescued.iteration >= 1);
        assert_eq!(rescued.history.len(), rescued.iteration);
    }

    #[test]
    fn pixel_skips_small_images_and_rejects_all_small() {
        let small_dir = tempfile::tempdir().unwrap();
        let small = corpus(small_dir.path(), 24, 2);
        let err = err_string(train_pixel_stage(
            build_generator::<f32>(&tiny_gen_cfg(), 3).unwrap(),
            &small,
            &pixel_cfg(1),
        ));
        assert!(err.contains("32x32"), "{err}");

        let big_dir = tempfile::tempdir().unwrap();
        let mut mixed = corpus(big_dir.path(), 64, 2);
        mixed.extend(small);
        let t = train_pixel_stage(
            build_generator::<f32>(&tiny_gen_cfg(), 3).unwrap(),
            &mixed,
            &pixel_cfg(1),
        )
        .unwrap();
        assert_eq!(t.history.len(), 1);
    }

    #[test]
    fn gan_requires_feature_extractor_and_zero_epochs_is_noop() {
        let dir = tempfile::tempdir().unwrap();
        let data = corpus(dir.path(), 64, 2);
        let gen = build_generator::<f32>(&tiny_gen_cfg(), 3).unwrap();
        let disc = build_discriminator::<f32>(&tiny_disc_cfg(), 4).unwrap();
        let err = err_string(train_gan_stage(gen, disc, &data, &gan_cfg(1), None));
        assert!(err.contains("feature extractor"), "{err}");

        let fx = random_feature_extractor::<f32>(7);
        let gen = build_generator::<f32>(&tiny_gen_cfg(), 3).unwrap();
        let disc = build_discriminator::<f32>(&tiny_disc_cfg(), 4).unwrap();
        let g_before = tensor_hash(&gen.tensors());
        let d_before = tensor_hash(&disc.net.tensors());
        let t = train_gan_stage(gen, disc, &data, &gan_cfg(0), Some(&fx)).unwrap();
        assert_eq!(tensor_hash(&t.gen.tensors()), g_before);
        assert_eq!(tensor_hash(&t.disc.net.tensors()), d_before);
        assert!(t.history.is_empty());

        let gen = build_generator::<f32>(&tiny_gen_cfg(), 3).unwrap();
        let disc = build_discriminator::<f32>(&tiny_disc_cfg(), 4).unwrap();
        let mut cfg = gan_cfg(1);
        cfg.crop = 128;
        let err = err_string(GanTrainer::new(gen, disc, &cfg));
        assert!(err.contains("64") && err.contains("128"), "{err}");
    }

    #[test]
    fn gan_steps_leave_the_other_network_alone() {
        let dir = tempfile::tempdir().unwrap();
        let data = corpus(dir.path(), 64, 2);
        let fx = random_feature_extractor::<f32>(7);
        let gen = build_generator::<f32>(&tiny_gen_cfg(), 3).unwrap();
        let disc = build_discriminator::<f32>(&tiny_disc_cfg(), 4).unwrap();
        let mut t = GanTrainer::new(gen, disc, &gan_cfg(1)).unwrap();

        let pool = load_pool(&data, 64).unwrap();
        let mut rng = Seeder::new(1).stream("test.batch");
        let mut hrs = Vec::new();
        let mut lrs = Vec::new();
        for img in pool.iter().take(2) {
            let (hr, lr) = sample_pair(img, 64, 4, &mut rng).unwrap();
            hrs.push(hr);
            lrs.push(lr);
        }
        let hr = batch_to_nchw(&hrs).unwrap();
        let lr = batch_to_nchw(&lrs).unwrap();

        let fx_before = tensor_hash(&fx.tensors());
        let g_before = tensor_hash(&t.gen.tensors());
        let d_loss = t.d_step(&hr, &lr).unwrap();
        assert!(d_loss.is_finite());
        assert_eq!(
            tensor_hash(&t.gen.tensors()),
            g_before,
            "the discriminator update touched the generator"
        );

        let d_after_dstep = tensor_hash(&t.disc.net.tensors());
        let parts = t.g_step(&hr, &lr, &fx).unwrap();
        assert!(parts.total.is_finite());
        assert_eq!(
            tensor_hash(&t.disc.net.tensors()),
            d_after_dstep,
            "the generator update touched the discriminator"
        );
        assert_eq!(tensor_hash(&fx.tensors()), fx_before);
    }

    #[test]
    fn gan_resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let data = corpus(dir.path(), 64, 2);
        let fx = random_feature_extractor::<f32>(7);

        let straight = train_gan_stage(
            build_generator::<f32>(&tiny_gen_cfg(), 3).unwrap(),
            build_discriminator::<f32>(&tiny_disc_cfg(), 4).unwrap(),
            &data,
            &gan_cfg(2),
            Some(&fx),
        )
        .unwrap();
        assert_eq!(straight.history.len(), 2);
        for e in &straight.history {
            for v in [e.d_loss, e.perceptual, e.adversarial, e.weighted_pixel, e.total] {
                assert!(v.is_finite());
            }
        }

        let fx_hash = tensor_hash(&fx.tensors());
        let halted = train_gan_stage(
            build_generator::<f32>(&tiny_gen_cfg(), 3).unwrap(),
            build_discriminator::<f32>(&tiny_disc_cfg(), 4).unwrap(),
            &data,
            &gan_cfg(1),
            Some(&fx),
        )
        .unwrap();
        assert_eq!(tensor_hash(&fx.tensors()), fx_hash, "extractor weights moved");

        let ckpt = dir.path().join("gan.ckpt");
        halted.save(&ckpt).unwrap();
        let bytes1 = std::fs::read(&ckpt).unwrap();
        let mut resumed = load_gan_checkpoint(&ckpt).unwrap();
        let ckpt2 = dir.path().join("gan2.ckpt");
        resumed.save(&ckpt2).unwrap();
        assert_eq!(bytes1, std::fs::read(&ckpt2).unwrap(), "save-load-save changed bytes");

        resumed.cfg.epochs = 2;
        resumed.run(&data, &fx, &CheckpointPolicy::default()).unwrap();
        assert_eq!(resumed.epoch, 2);
        assert_eq!(resumed.history, straight.history);
        assert_eq!(
            tensor_hash(&resumed.gen.tensors()),
            tensor_hash(&straight.gen.tensors()),
            "generator trajectories diverged"
        );
        assert_eq!(
            tensor_hash(&resumed.disc.net.tensors()),
            tensor_hash(&straight.disc.net.tensors()),
            "discriminator trajectories diverged"
        );
    }

    #[test]
    fn adversarial_weight_zero_reduces_to_pixel_plus_perceptual() {
        let dir = tempfile::tempdir().unwrap();
        let data = corpus(dir.path(), 64, 2);
        let fx = random_feature_extractor::<f32>(7);
        let mut cfg = gan_cfg(1);
        cfg.weights = LossWeights {
            lambda: 0.0,
            eta: 1.0,
        };

        let pool = load_pool(&data, 64).unwrap();
        let mut rng = Seeder::new(1).stream("test.batch");
        let mut hrs = Vec::new();
        let mut lrs = Vec::new();
        for img in pool.iter().take(2) {
            let (hr, lr) = sample_pair(img, 64, 4, &mut rng).unwrap();
            hrs.push(hr);
            lrs.push(lr);
        }
        let hr = batch_to_nchw(&hrs).unwrap();
        let lr = batch_to_nchw(&lrs).unwrap();

        let mut t = GanTrainer::new(
            build_generator::<f32>(&tiny_gen_cfg(), 5).unwrap(),
            build_discriminator::<f32>(&tiny_disc_cfg(), 6).unwrap(),
            &cfg,
        )
        .unwrap();
        t.g_step(&hr, &lr, &fx).unwrap();

        let mut manual = build_generator::<f32>(&tiny_gen_cfg(), 5).unwrap();
        let (sr, trace) = manual.forward(&lr, true);
        let (_, g_per) = perceptual_loss_grad(&fx, &hr, &sr).unwrap();
        let (_, g_pix) = pixel_loss_grad(&hr, &sr).unwrap();
        let mut g = g_per;
        g.zip_mut_with(&g_pix, |a, &b| *a += b);
        manual.zero_grads();
        manual.backward(&trace.unwrap(), &g);
        let mut adam = Adam::new(cfg.gen_optimizer);
        adam.step(&mut manual);

        for ((na, a), (nb, b)) in t.gen.tensors().iter().zip(manual.tensors().iter()) {
            assert_eq!(na, nb);
            for (x, y) in a.iter().zip(b.iter()) {
                assert!(
                    (x - y).abs() <= 1e-7_f32.max(1e-6 * y.abs()),
                    "{na}: {x} vs {y}"
                );
            }
        }
    }

    #[test]
    fn history_csv_round_trip_format() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pixel.csv");
        export_pixel_history(&[0.5, 0.25], &p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "iteration,pixel_loss\n1,0.5\n2,0.25\n"
        );

        let g = dir.path().join("gan.csv");
        let e = GanEpochStats {
            d_loss: 1.5,
            perceptual: 0.5,
            adversarial: 1.25,
            weighted_pixel: 0.0125,
            total: 0.75,
        };
        export_gan_history(&[e], &g).unwrap();
        assert_eq!(
            std::fs::read_to_string(&g).unwrap(),
            "epoch,d_loss,perceptual,adversarial,weighted_pixel,total\n1,1.5,0.5,1.25,0.0125,0.75\n"
        );
    }
}
