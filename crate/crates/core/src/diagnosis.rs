//! Multi-label disease classifier: eight convolutional layers (batch norm and
//! ReLU on each, stride-2 downsampling closing every pair) into three fully
//! connected layers, trained with per-class binary cross-entropy. Sigmoid
//! probabilities are cut by per-class thresholds tuned with an F1 grid
//! search, and accuracy is exact set match, the strictest multi-label
//! reading.

use crate::datasets::{encode_labels, LabelSpace, ManifestEntry};
use crate::imaging::{augment, batch_to_nchw, bicubic_resize, ensure_rgb, read_png, ImageTensor};
use crate::rng::Seeder;
use crate::sr_models::{model_config, model_store, tensor_from_store};
use crate::tensor::{
    he_std, sigmoid, trunc_normal, Adam, AdamConfig, BatchNorm2d, Conv2d, Feat, Layer, LayerKind,
    Linear, Params, Phase, Scalar, Sequential, Trace,
};
use crate::{Error, Result};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosisConfig {
    /// Square input edge in pixels.
    pub input_size: usize,
    /// Output channels of the eight conv layers.
    pub channels: Vec<usize>,
    /// Width of the two hidden fully connected layers.
    pub fc_width: usize,
    pub dropout: f64,
    pub classes: usize,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Random flips and rotations during training. Disable for label sets
    /// that are not orientation-invariant.
    pub augment: bool,
    pub seed: u64,
}

impl Default for DiagnosisConfig {
    fn default() -> Self {
        DiagnosisConfig {
            input_size: 224,
            channels: vec![32, 32, 64, 64, 128, 128, 256, 256],
            fc_width: 2048,
            dropout: 0.5,
            classes: 25,
            optimizer: AdamConfig::default(),
            batch_size: 128,
            epochs: 100,
            augment: true,
            seed: 0,
        }
    }
}

impl DiagnosisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 8 || self.channels.iter().any(|&c| c == 0) {
            return Err(Error::invalid(
                "classifier needs exactly 8 nonzero conv channel counts",
            ));
        }
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(Error::invalid(format!(
                "classifier input {} must be divisible by 16",
                self.input_size
            )));
        }
        if self.fc_width == 0 {
            return Err(Error::invalid("fc width must be nonzero"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0, 1)"));
        }
        if self.classes == 0 {
            return Err(Error::invalid("classifier needs at least one class"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        self.optimizer.validate()?;
        Ok(())
    }

    /// Spatial edge of the feature map entering the flatten stage.
    pub fn final_extent(&self) -> usize {
        self.input_size / 16
    }
}

pub struct Classifier<F: Scalar> {
    pub cfg: DiagnosisConfig,
    pub net: Sequential<F>,
}

/// Eight 3x3 convolutions (each with batch norm and ReLU, the second of every
/// pair at stride 2), then two hidden FC layers with ReLU and dropout, then a
/// linear layer emitting one raw logit per class.
pub fn build_classifier<F: Scalar>(cfg: &DiagnosisConfig, seed: u64) -> Result<Classifier<F>> {
    cfg.validate()?;
    let mut net = Sequential::new();
    let mut prev = 3;
    for (i, &nf) in cfg.channels.iter().enumerate() {
        let stride = if i % 2 == 1 { 2 } else { 1 };
        net.push(format!("conv{}", i + 1), Layer::Conv(Conv2d::new(prev, nf, 3, stride, 1)));
        net.push(format!("bn{}", i + 1), Layer::Bn(BatchNorm2d::new(nf)));
        net.push(format!("act{}", i + 1), Layer::Relu);
        prev = nf;
    }
    net.push("flatten", Layer::Flatten);
    let extent = cfg.final_extent();
    let mut fc_in = cfg.channels[7] * extent * extent;
    for j in 1..=2 {
        net.push(format!("fc{j}"), Layer::Linear(Linear::new(fc_in, cfg.fc_width)));
        net.push(format!("fc{j}.act"), Layer::Relu);
        net.push(format!("fc{j}.drop"), Layer::Dropout(cfg.dropout));
        fc_in = cfg.fc_width;
    }
    net.push("fc3", Layer::Linear(Linear::new(fc_in, cfg.classes)));

    let mut rng = Seeder::new(seed).stream("classifier.init");
    for (_, layer) in net.layers.iter_mut() {
        match layer {
            Layer::Conv(c) => {
                let (oc, ic, kh, kw) = c.weight.dim();
                let std = he_std(ic * kh * kw, 1.0);
                c.weight = trunc_normal::<F>(&[oc, ic, kh, kw], std, &mut rng)
                    .into_dimensionality()
                    .expect("4-d weight");
            }
            Layer::Linear(l) => {
                let (fin, fout) = l.weight.dim();
                let std = he_std(fin, 1.0);
                l.weight = trunc_normal::<F>(&[fin, fout], std, &mut rng)
                    .into_dimensionality()
                    .expect("2-d weight");
            }
            _ => {}
        }
    }
    Ok(Classifier { cfg: cfg.clone(), net })
}

impl<F: Scalar> Classifier<F> {
    pub fn conv_layer_count(&self) -> usize {
        self.layer_count(LayerKind::Conv)
    }

    pub fn linear_layer_count(&self) -> usize {
        self.layer_count(LayerKind::Linear)
    }

    fn layer_count(&self, kind: LayerKind) -> usize {
        self.net.layers.iter().filter(|(_, l)| l.kind() == kind).count()
    }

    pub fn check_input(&self, img: &ImageTensor) -> Result<()> {
        let s = self.cfg.input_size;
        if img.channels != 3 || img.height != s || img.width != s {
            return Err(Error::invalid(format!(
                "classifier expects 3x{s}x{s} inputs, got {}x{}x{}",
                img.channels, img.height, img.width
            )));
        }
        Ok(())
    }
}

impl Classifier<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        model_store(
            "classifier",
            &serde_json::to_value(&self.cfg).expect("config serializes"),
            self.net.tensors(),
        )
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = crate::container::TensorStore::load(path)?;
        let cfg: DiagnosisConfig = model_config(&store, "classifier")?;
        let mut clf = build_classifier::<f32>(&cfg, 0)?;
        let names: Vec<String> = clf.net.tensors().into_iter().map(|(n, _)| n).collect();
        store.expect_exact(&names)?;
        clf.net.load_tensors(|name| tensor_from_store(&store, name))?;
        Ok(clf)
    }
}

/// Mean binary cross-entropy over every (sample, class) cell, computed from
/// raw logits in the overflow-safe form, with the gradient w.r.t. logits.
pub fn bce_with_logits_grad<F: Scalar>(
    logits: &Array2<F>,
    targets: &Array2<F>,
) -> Result<(f64, Array2<F>)> {
    if logits.dim() != targets.dim() {
        return Err(Error::invalid(format!(
            "logits are {:?} but targets are {:?}",
            logits.dim(),
            targets.dim()
        )));
    }
    let n = logits.len() as f64;
    let mut acc = 0.0f64;
    let mut grad = Array2::zeros(logits.dim());
    for ((&z, &y), g) in logits.iter().zip(targets.iter()).zip(grad.iter_mut()) {
        let (zf, yf) = (z.f64(), y.f64());
        acc += zf.max(0.0) - zf * yf + (-zf.abs()).exp().ln_1p();
        *g = crate::tensor::fr((sigmoid(zf) - yf) / n);
    }
    Ok((acc / n, grad))
}

/// Sigmoid class probabilities in evaluation mode (dropout off, running
/// normalization statistics), one row per image.
pub fn predict_probs(clf: &mut Classifier<f32>, batch: &[ImageTensor]) -> Result<Array2<f32>> {
    if batch.is_empty() {
        return Ok(Array2::zeros((0, clf.cfg.classes)));
    }
    for img in batch {
        clf.check_input(img)?;
    }
    let x = batch_to_nchw(batch)?;
    let logits = clf.net.forward(Feat::T4(x), Phase::Eval, None, None).t2();
    Ok(logits.mapv(sigmoid))
}

fn decide(space: &LabelSpace, probs: &[f32], thresholds: &[f64]) -> BTreeSet<String> {
    space
        .names()
        .iter()
        .enumerate()
        .filter(|(i, _)| probs[*i] as f64 >= thresholds[*i])
        .map(|(_, n)| n.clone())
        .collect()
}

/// One decided label set per image: labels whose probability reaches their
/// threshold. The empty set is a legal outcome.
pub fn predict_batch(
    clf: &mut Classifier<f32>,
    space: &LabelSpace,
    batch: &[ImageTensor],
    thresholds: &[f64],
) -> Result<Vec<BTreeSet<String>>> {
    if space.size() != clf.cfg.classes || thresholds.len() != clf.cfg.classes {
        return Err(Error::invalid(format!(
            "classifier has {} outputs but got {} labels and {} thresholds",
            clf.cfg.classes,
            space.size(),
            thresholds.len()
        )));
    }
    let probs = predict_probs(clf, batch)?;
    Ok((0..batch.len())
        .map(|i| decide(space, probs.row(i).as_slice().expect("row"), thresholds))
        .collect())
}

pub fn predict(
    clf: &mut Classifier<f32>,
    space: &LabelSpace,
    img: &ImageTensor,
    thresholds: &[f64],
) -> Result<BTreeSet<String>> {
    let mut sets = predict_batch(clf, space, std::slice::from_ref(img), thresholds)?;
    Ok(sets.pop().expect("one prediction"))
}

fn f1_at(probs: &Array2<f32>, truth: &Array2<f32>, class: usize, t: f64) -> f64 {
    let n = probs.dim().0;
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let predicted = probs[(i, class)] as f64 >= t;
        let positive = truth[(i, class)] >= 0.5;
        match (predicted, positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Per class independently, picks the threshold from {0.05, 0.10, ..., 0.95}
/// maximizing that class's F1, preferring the lowest on ties. Classes with no
/// positive truth get 0.5.
pub fn tune_thresholds(probs: &Array2<f32>, truth: &Array2<f32>) -> Result<Vec<f64>> {
    if probs.dim() != truth.dim() {
        return Err(Error::invalid(format!(
            "threshold tuning got {:?} probabilities and {:?} truth",
            probs.dim(),
            truth.dim()
        )));
    }
    let (n, k) = probs.dim();
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        let positives = (0..n).filter(|&i| truth[(i, c)] >= 0.5).count();
        if positives == 0 {
            log::warn!("class {c} has no positive examples; threshold falls back to 0.5");
            out.push(0.5);
            continue;
        }
        let mut best_t = 0.0;
        let mut best_f1 = -1.0;
        for step in 1..=19 {
            let t = step as f64 / 20.0;
            let f1 = f1_at(probs, truth, c, t);
            if f1 > best_f1 {
                best_f1 = f1;
                best_t = t;
            }
        }
        out.push(best_t);
    }
    Ok(out)
}

/// Fraction of samples whose predicted label set equals the truth exactly.
pub fn subset_accuracy(
    predictions: &[BTreeSet<String>],
    truth: &[BTreeSet<String>],
) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions scored against {} truth sets",
            predictions.len(),
            truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("cannot score an empty sample list"));
    }
    let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Trains in place with per-class binary cross-entropy and Adam. An epoch is
/// one shuffled pass, floor(n / batch) full batches. Images are resized to
/// the configured input edge when needed. Returns per-epoch mean losses.
pub fn train_classifier(
    clf: &mut Classifier<f32>,
    data: &[ManifestEntry],
    space: &LabelSpace,
) -> Result<Vec<f64>> {
    let cfg = clf.cfg.clone();
    if space.size() != cfg.classes {
        return Err(Error::config(format!(
            "classifier has {} outputs but the label space has {} classes",
            cfg.classes,
            space.size()
        )));
    }
    if data.is_empty() {
        return Err(Error::config("the training set is empty"));
    }
    let s = cfg.input_size;
    let mut images = Vec::with_capacity(data.len());
    let mut targets = Vec::with_capacity(data.len());
    for entry in data {
        let mut img = ensure_rgb(read_png(&entry.path)?);
        if (img.height, img.width) != (s, s) {
            img = bicubic_resize(&img, s, s)?;
            img.clamp01();
        }
        images.push(img);
        targets.push(encode_labels(&entry.labels, space)?);
    }
    for (c, name) in space.names().iter().enumerate() {
        if targets.iter().all(|row| row[c] < 0.5) {
            log::warn!(
                "class {name} never appears in the training data; its tuned threshold will fall back to 0.5"
            );
        }
    }
    if cfg.epochs == 0 {
        return Ok(Vec::new());
    }
    let steps = images.len() / cfg.batch_size;
    if steps == 0 {
        return Err(Error::config(format!(
            "batch size {} exceeds the {} training images",
            cfg.batch_size,
            images.len()
        )));
    }
    let seeder = Seeder::new(cfg.seed);
    let mut data_rng = seeder.stream("diagnosis.data");
    let mut drop_rng = seeder.stream("diagnosis.dropout");
    let mut adam = Adam::new(cfg.optimizer);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut trace = Trace::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut data_rng);
        let mut sum = 0.0;
        for step in 0..steps {
            let ids = &order[step * cfg.batch_size..(step + 1) * cfg.batch_size];
            let mut batch = Vec::with_capacity(cfg.batch_size);
            let mut tgt = Array2::zeros((cfg.batch_size, cfg.classes));
            for (bi, &i) in ids.iter().enumerate() {
                batch.push(if cfg.augment {
                    augment(&images[i], &mut data_rng)
                } else {
                    images[i].clone()
                });
                for (c, &v) in targets[i].iter().enumerate() {
                    tgt[(bi, c)] = v;
                }
            }
            let x = batch_to_nchw(&batch)?;
            let logits = clf
                .net
                .forward(
                    Feat::T4(x),
                    Phase::Train { update_stats: true },
                    Some(&mut drop_rng),
                    Some(&mut trace),
                )
                .t2();
            let (loss, grad) = bce_with_logits_grad(&logits, &tgt)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step: epoch * steps + step + 1,
                    checkpoint: None,
                });
            }
            clf.net.zero_grads();
            clf.net.backward(&trace, Feat::T2(grad));
            adam.step(&mut clf.net);
            sum += loss;
        }
        history.push(sum / steps as f64);
    }
    Ok(history)
}

#[derive(Serialize, Deserialize)]
struct ThresholdFile {
    version: u32,
    thresholds: Vec<ThresholdEntry>,
}

#[derive(Serialize, Deserialize)]
struct ThresholdEntry {
    class: String,
    threshold: f64,
}

/// Writes thresholds as JSON, one entry per class in label-space order.
pub fn save_thresholds(path: &Path, space: &LabelSpace, thresholds: &[f64]) -> Result<()> {
    if thresholds.len() != space.size() {
        return Err(Error::invalid(format!(
            "{} thresholds for {} classes",
            thresholds.len(),
            space.size()
        )));
    }
    let file = ThresholdFile {
        version: 1,
        thresholds: space
            .names()
            .iter()
            .zip(thresholds)
            .map(|(class, &threshold)| ThresholdEntry {
                class: class.clone(),
                threshold,
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("thresholds serialize");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Reads a threshold file back into label-space order, requiring exactly one
/// in-range entry per class.
pub fn load_thresholds(path: &Path, space: &LabelSpace) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let file: ThresholdFile = serde_json::from_str(&text)
        .map_err(|e| Error::load(format!("{}: {e}", path.display())))?;
    if file.version != 1 {
        return Err(Error::load(format!(
            "unsupported threshold file version {}",
            file.version
        )));
    }
    let mut out = vec![None; space.size()];
    for entry in &file.thresholds {
        let idx = space
            .index_of(&entry.class)
            .ok_or_else(|| Error::load(format!("unknown class {} in threshold file", entry.class)))?;
        if out[idx].is_some() {
            return Err(Error::load(format!(
                "class {} appears twice in the threshold file",
                entry.class
            )));
        }
        if !(entry.threshold > 0.0 && entry.threshold < 1.0) {
            return Err(Error::load(format!(
                "threshold {} for class {} is outside (0, 1)",
                entry.threshold, entry.class
            )));
        }
        out[idx] = Some(entry.threshold);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, t)| {
            t.ok_or_else(|| {
                Error::load(format!(
                    "threshold file lacks an entry for class {}",
                    space.names()[i]
                ))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{load_manifest, synth_class_names, synth_corpus, SynthParams};
    use ndarray::array;
    use rand::Rng;

    fn small_cfg(classes: usize) -> DiagnosisConfig {
        DiagnosisConfig {
            input_size: 32,
            channels: vec![4, 4, 8, 8, 8, 8, 16, 16],
            fc_width: 16,
            dropout: 0.5,
            classes,
            optimizer: AdamConfig::with_lr(2e-4),
            batch_size: 4,
            epochs: 6,
            augment: false,
            seed: 21,
        }
    }

    fn tensor_hash(tensors: &[(String, ndarray::ArrayD<f32>)]) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let eat = |h: &mut u64, b: u8| {
            *h ^= b as u64;
            *h = h.wrapping_mul(0x100000001b3);
        };
        for (name, arr) in tensors {
            for b in name.bytes() {
                eat(&mut h, b);
            }
            for v in arr.iter() {
                for b in v.to_bits().to_le_bytes() {
                    eat(&mut h, b);
                }
            }
        }
        h
    }

    #[test]
    fn config_validation_and_layer_audit() {
        assert!(DiagnosisConfig::default().validate().is_ok());
        let mut bad = small_cfg(4);
        bad.channels = vec![4, 4];
        assert!(bad.validate().is_err());
        bad = small_cfg(4);
        bad.dropout = 1.0;
        assert!(bad.validate().is_err());
        bad = small_cfg(4);
        bad.input_size = 100;
        assert!(bad.validate().is_err());
        bad = small_cfg(4);
        bad.classes = 0;
        assert!(bad.validate().is_err());

        let clf = build_classifier::<f32>(&small_cfg(25), 1).unwrap();
        assert_eq!(clf.conv_layer_count(), 8);
        assert_eq!(clf.linear_layer_count(), 3);
        let bns = clf.net.layers.iter().filter(|(_, l)| l.kind() == LayerKind::Bn).count();
        let drops = clf
            .net
            .layers
            .iter()
            .filter(|(_, l)| l.kind() == LayerKind::Dropout)
            .count();
        assert_eq!((bns, drops), (8, 2));
    }

    #[test]
    fn probabilities_are_sigmoid_shaped() {
        let mut clf = build_classifier::<f32>(&small_cfg(25), 1).unwrap();
        let imgs = vec![
            ImageTensor::constant(32, 32, 3, 0.25),
            ImageTensor::constant(32, 32, 3, 0.75),
        ];
        let p = predict_probs(&mut clf, &imgs).unwrap();
        assert_eq!(p.dim(), (2, 25));
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));

        let wrong = ImageTensor::constant(16, 16, 3, 0.5);
        assert!(predict_probs(&mut clf, &[wrong]).is_err());
        let gray = ImageTensor::constant(32, 32, 1, 0.5);
        assert!(predict_probs(&mut clf, &[gray]).is_err());
    }

    #[test]
    fn builds_are_seed_deterministic() {
        let a = build_classifier::<f32>(&small_cfg(4), 7).unwrap();
        let b = build_classifier::<f32>(&small_cfg(4), 7).unwrap();
        let c = build_classifier::<f32>(&small_cfg(4), 8).unwrap();
        assert_eq!(tensor_hash(&a.net.tensors()), tensor_hash(&b.net.tensors()));
        assert_ne!(tensor_hash(&a.net.tensors()), tensor_hash(&c.net.tensors()));
    }

    #[test]
    fn forced_logits_give_hand_computed_predictions() {
        let space = LabelSpace::new(synth_class_names(4)).unwrap();
        let mut clf = build_classifier::<f32>(&small_cfg(4), 1).unwrap();
        match clf.net.layers.last_mut() {
            Some((name, Layer::Linear(l))) => {
                assert_eq!(name, "fc3");
                l.weight.fill(0.0);
                l.bias = array![2.0f32, -1.0, 0.0, -3.0];
            }
            _ => panic!("expected a final linear layer"),
        }
        let img = ImageTensor::constant(32, 32, 3, 0.5);
        // sigmoid(2) = 0.881, sigmoid(-1) = 0.269, sigmoid(0) = 0.5, sigmoid(-3) = 0.047
        let got = predict(&mut clf, &space, &img, &[0.5, 0.5, 0.5, 0.5]).unwrap();
        let names = space.names();
        let expect: BTreeSet<String> = [names[0].clone(), names[2].clone()].into();
        assert_eq!(got, expect);

        assert!(predict(&mut clf, &space, &img, &[1.0; 4]).unwrap().is_empty());
        assert_eq!(predict(&mut clf, &space, &img, &[0.01; 4]).unwrap().len(), 4);
        let again = predict(&mut clf, &space, &img, &[0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(again, expect, "evaluation-mode prediction must be deterministic");

        assert!(predict(&mut clf, &space, &img, &[0.5; 3]).is_err());
        let wrong = ImageTensor::constant(16, 16, 3, 0.5);
        assert!(predict(&mut clf, &space, &wrong, &[0.5; 4]).is_err());
    }

    #[test]
    fn threshold_examples_from_first_principles() {
        // probabilities identical to 0/1 truth: every grid point is perfect,
        // the tie rule keeps the lowest
        let probs = array![[1.0f32, 0.0], [0.0, 0.0], [1.0, 0.0]];
        let truth = probs.clone();
        let t = tune_thresholds(&probs, &truth).unwrap();
        assert_eq!(t[0], 0.05);
        assert_eq!(t[1], 0.5, "a never-positive class falls back to 0.5");

        let probs = array![[0.9f32], [0.8], [0.2]];
        let truth = array![[1.0f32], [1.0], [0.0]];
        assert_eq!(tune_thresholds(&probs, &truth).unwrap(), vec![0.25]);

        let bad = array![[0.5f32]];
        assert!(tune_thresholds(&probs, &bad).is_err());
    }

    #[test]
    fn threshold_search_matches_brute_force_oracle() {
        let mut rng = Seeder::new(77).stream("oracle");
        for _ in 0..40 {
            let n = rng.gen_range(1..=20);
            let k = rng.gen_range(1..=6);
            let probs = Array2::from_shape_fn((n, k), |_| {
                if rng.gen::<f64>() < 0.3 {
                    // land exactly on grid points to exercise the >= rule
                    rng.gen_range(1..=19) as f32 / 20.0
                } else {
                    rng.gen::<f32>()
                }
            });
            let truth = Array2::from_shape_fn((n, k), |_| if rng.gen::<f64>() < 0.4 { 1.0 } else { 0.0 });
            let got = tune_thresholds(&probs, &truth).unwrap();

            for c in 0..k {
                let has_positive = (0..n).any(|i| truth[(i, c)] >= 0.5);
                let want = if !has_positive {
                    0.5
                } else {
                    let mut best = (f64::NEG_INFINITY, 0.0);
                    for step in (1..=19).rev() {
                        let t = step as f64 / 20.0;
                        let f1 = f1_at(&probs, &truth, c, t);
                        if f1 >= best.0 {
                            best = (f1, t);
                        }
                    }
                    best.1
                };
                assert_eq!(got[c], want, "class {c} of {n}x{k}");
            }
        }
    }

    #[test]
    fn raising_a_threshold_never_adds_labels() {
        let space = LabelSpace::new(synth_class_names(5)).unwrap();
        let mut rng = Seeder::new(3).stream("mono");
        for _ in 0..200 {
            let probs: Vec<f32> = (0..5).map(|_| rng.gen()).collect();
            let mut lo = [0.0f64; 5];
            let mut hi = [0.0f64; 5];
            for i in 0..5 {
                let a: f64 = rng.gen();
                let b: f64 = rng.gen();
                lo[i] = a.min(b);
                hi[i] = a.max(b);
            }
            let with_lo = decide(&space, &probs, &lo);
            let with_hi = decide(&space, &probs, &hi);
            assert!(
                with_hi.is_subset(&with_lo),
                "{probs:?} {lo:?} {hi:?}"
            );
        }
    }

    #[test]
    fn subset_accuracy_counts_exact_matches() {
        let s = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
        let truth = vec![s(&["a"]), s(&["a", "b"]), s(&["c"]), s(&[])];
        assert_eq!(subset_accuracy(&truth, &truth).unwrap(), 1.0);

        let wrong = vec![s(&["b"]), s(&["a"]), s(&["d"]), s(&["a"])];
        assert_eq!(subset_accuracy(&wrong, &truth).unwrap(), 0.0);

        let mut three = truth.clone();
        three[1] = s(&["a"]);
        assert_eq!(subset_accuracy(&three, &truth).unwrap(), 0.75);

        let perm = vec![truth[2].clone(), truth[0].clone(), truth[3].clone(), truth[1].clone()];
        let pred_perm = vec![three[2].clone(), three[0].clone(), three[3].clone(), three[1].clone()];
        assert_eq!(
            subset_accuracy(&pred_perm, &perm).unwrap(),
            subset_accuracy(&three, &truth).unwrap()
        );

        assert!(subset_accuracy(&truth[..2], &truth).is_err());
        assert!(subset_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn bce_hand_values_and_finite_differences() {
        let z = array![[0.0f64, 10.0], [-10.0, 0.0]];
        let y = array![[1.0f64, 1.0], [1.0, 0.0]];
        let (loss, _) = bce_with_logits_grad(&z, &y).unwrap();
        let expect = (2.0 * (2.0f64).ln() + (1.0 + (-10.0f64).exp()).ln() + 10.0
            + (1.0 + (-10.0f64).exp()).ln())
            / 4.0;
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");

        let mut rng = Seeder::new(5).stream("bce");
        let z = Array2::from_shape_fn((3, 4), |_| rng.gen::<f64>() * 2.0 - 1.0);
        let y = Array2::from_shape_fn((3, 4), |_| if rng.gen::<f64>() < 0.5 { 1.0 } else { 0.0 });
        let (_, grad) = bce_with_logits_grad(&z, &y).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            for j in 0..4 {
                let mut zp = z.clone();
                zp[(i, j)] += h;
                let mut zm = z.clone();
                zm[(i, j)] -= h;
                let fd = (bce_with_logits_grad(&zp, &y).unwrap().0
                    - bce_with_logits_grad(&zm, &y).unwrap().0)
                    / (2.0 * h);
                assert!((grad[(i, j)] - fd).abs() < 1e-8, "({i},{j}): {} vs {fd}", grad[(i, j)]);
            }
        }

        let bad = Array2::<f64>::zeros((2, 3));
        assert!(bce_with_logits_grad(&z, &bad).is_err());
    }

    #[test]
    fn training_decreases_loss_and_zero_epochs_is_noop() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth_corpus(dir.path(), 2, 6, 32, 5, &SynthParams::default()).unwrap();
        let space = LabelSpace::new(synth_class_names(2)).unwrap();
        let data = load_manifest(&manifest, &space).unwrap();

        let mut clf = build_classifier::<f32>(&small_cfg(2), 2).unwrap();
        let before = tensor_hash(&clf.net.tensors());
        clf.cfg.epochs = 0;
        assert!(train_classifier(&mut clf, &data, &space).unwrap().is_empty());
        assert_eq!(tensor_hash(&clf.net.tensors()), before);

        clf.cfg.epochs = 6;
        let history = train_classifier(&mut clf, &data, &space).unwrap();
        assert_eq!(history.len(), 6);
        assert!(history.iter().all(|l| l.is_finite()));
        assert!(
            history[5] < history[0],
            "loss did not decrease: {history:?}"
        );
        assert_ne!(tensor_hash(&clf.net.tensors()), before);

        let mut too_big = build_classifier::<f32>(&small_cfg(2), 2).unwrap();
        too_big.cfg.batch_size = 64;
        assert!(train_classifier(&mut too_big, &data, &space).is_err());

        let wrong_space = LabelSpace::new(synth_class_names(4)).unwrap();
        let mut clf4 = build_classifier::<f32>(&small_cfg(2), 2).unwrap();
        assert!(train_classifier(&mut clf4, &data, &wrong_space).is_err());
    }

    #[test]
    fn classifier_and_thresholds_round_trip_files() {
        let dir = tempfile::tempdir().unwrap();
        let clf = build_classifier::<f32>(&small_cfg(4), 9).unwrap();
        let p = dir.path().join("clf.bin");
        clf.save(&p).unwrap();
        let loaded = Classifier::load(&p).unwrap();
        assert_eq!(loaded.cfg, clf.cfg);
        assert_eq!(
            tensor_hash(&loaded.net.tensors()),
            tensor_hash(&clf.net.tensors())
        );

        let names = synth_class_names(4);
        let space = LabelSpace::new(names[..3].to_vec()).unwrap();
        let tp = dir.path().join("thresholds.json");
        save_thresholds(&tp, &space, &[0.25, 0.5, 0.7]).unwrap();
        assert_eq!(load_thresholds(&tp, &space).unwrap(), vec![0.25, 0.5, 0.7]);

        let superset = LabelSpace::new(names).unwrap();
        let missing = match load_thresholds(&tp, &superset) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected an error"),
        };
        assert!(missing.contains("lacks an entry"), "{missing}");

        let disjoint = LabelSpace::new(synth_class_names(2)).unwrap();
        let unknown = match load_thresholds(&tp, &disjoint) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected an error"),
        };
        assert!(unknown.contains("unknown class"), "{unknown}");

        std::fs::write(&tp, "{\"version\":2,\"thresholds\":[]}").unwrap();
        let bad = match load_thresholds(&tp, &space) {
            Err(e) => e.to_string(),
            Ok(_) => panic!("expected an error"),
        };
        assert!(bad.contains("version"), "{bad}");

        save_thresholds(&tp, &space, &[0.25, 0.5, 0.7]).unwrap();
        let gen_store = dir.path().join("not_clf.bin");
        let gen_cfg = crate::sr_models::GeneratorConfig {
            blocks: 1,
            features: 8,
            growth: 4,
            residual_scale: 0.2,
            scale: 4,
        };
        crate::sr_models::build_generator::<f32>(&gen_cfg, 1)
            .unwrap()
            .save(&gen_store)
            .unwrap();
        assert!(Classifier::load(&gen_store).is_err());
    }
}
