//! The 4x super-resolution generator and the discriminator backbone.
//!
//! The generator is a residual-in-residual dense network: a first conv, a
//! trunk of B blocks (each holding three 5-conv dense blocks with residual
//! scaling), a trunk conv with a long skip, two nearest-neighbor x2
//! upsampling stages and two head convs. Dense connectivity makes the
//! backward pass irregular, so forward/backward are written out explicitly
//! here instead of going through the generic layer stack.

use crate::container::{Tensor, TensorStore};
use crate::imaging::{batch_to_nchw, nchw_to_batch, ImageTensor};
use crate::rng::Seeder;
use crate::tensor::{
    fr, he_std, leaky_relu, trunc_normal, BatchNorm2d, Conv2d, Feat, Layer, LayerKind, Linear,
    ParamMut, Params, Phase, Scalar, Sequential,
};
use crate::{Error, Result};
use ndarray::{s, Array4, ArrayD};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Leaky-ReLU slope used throughout both networks.
pub const LRELU_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Residual-in-residual block count. 23 in the reference network; the
    /// default is desk-sized.
    pub blocks: usize,
    /// Trunk feature width.
    pub features: usize,
    /// Channels added by each dense-block conv.
    pub growth: usize,
    /// Residual branch scale, in (0, 1].
    pub residual_scale: f64,
    /// Upscale factor; 4 is the supported configuration (2 and 8 build but
    /// are untested).
    pub scale: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            blocks: 4,
            features: 64,
            growth: 32,
            residual_scale: 0.2,
            scale: 4,
        }
    }
}

impl GeneratorConfig {
    /// The full-size network: 23 blocks at width 64.
    pub fn reference() -> Self {
        GeneratorConfig {
            blocks: 23,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks < 1 || self.features < 1 || self.growth < 1 {
            return Err(Error::invalid(
                "generator needs at least 1 block, 1 feature and 1 growth channel",
            ));
        }
        if !(self.residual_scale > 0.0 && self.residual_scale <= 1.0) {
            return Err(Error::invalid(format!(
                "residual scale {} must be in (0, 1]",
                self.residual_scale
            )));
        }
        if ![2, 4, 8].contains(&self.scale) {
            return Err(Error::invalid(format!(
                "upscale factor {} is not a supported power of two",
                self.scale
            )));
        }
        Ok(())
    }
}

/// Five densely connected convs: each conv sees the block input plus every
/// earlier conv's activated output. The last conv projects back to the trunk
/// width and is added residually, scaled by beta.
struct DenseBlock<F: Scalar> {
    convs: Vec<Conv2d<F>>,
    beta: f64,
}

struct DenseTrace<F> {
    x: Array4<F>,
    /// Activated outputs of convs 1..4.
    acts: Vec<Array4<F>>,
    /// Gradient multipliers of the four leaky ReLUs.
    slopes: Vec<Array4<F>>,
}

fn slope_of<F: Scalar>(pre: &Array4<F>) -> Array4<F> {
    let a = fr::<F>(LRELU_SLOPE);
    let one = fr::<F>(1.0);
    pre.mapv(|v| if v > fr(0.0) { one } else { a })
}

/// Channel concatenation into a freshly allocated standard-layout array
/// (required by the im2col path downstream).
fn cat_channels<F: Scalar>(parts: &[&Array4<F>]) -> Array4<F> {
    let (n, _, h, w) = parts[0].dim();
    let total: usize = parts.iter().map(|p| p.dim().1).sum();
    let mut out = Array4::zeros((n, total, h, w));
    let mut start = 0;
    for p in parts {
        let c = p.dim().1;
        out.slice_mut(s![.., start..start + c, .., ..]).assign(p);
        start += c;
    }
    out
}

fn split_channels<F: Scalar>(g: &Array4<F>, sizes: &[usize]) -> Vec<Array4<F>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &sz in sizes {
        out.push(g.slice(s![.., start..start + sz, .., ..]).to_owned());
        start += sz;
    }
    out
}

impl<F: Scalar> DenseBlock<F> {
    fn new(features: usize, growth: usize, beta: f64) -> Self {
        let mut convs = Vec::with_capacity(5);
        for i in 0..4 {
            convs.push(Conv2d::new(features + i * growth, growth, 3, 1, 1));
        }
        convs.push(Conv2d::new(features + 4 * growth, features, 3, 1, 1));
        DenseBlock { convs, beta }
    }

    fn forward(&self, x: &Array4<F>, want_trace: bool) -> (Array4<F>, Option<DenseTrace<F>>) {
        let beta = fr::<F>(self.beta);
        let mut cat = x.clone();
        let mut acts = Vec::new();
        let mut slopes = Vec::new();
        for i in 0..4 {
            let pre = self.convs[i].forward(&cat);
            let a = leaky_relu(&pre, LRELU_SLOPE);
            if want_trace {
                slopes.push(slope_of(&pre));
                acts.push(a.clone());
            }
            cat = cat_channels(&[&cat, &a]);
        }
        let y = self.convs[4].forward(&cat);
        let out = x + &y.mapv(|v| v * beta);
        let trace = want_trace.then(|| DenseTrace {
            x: x.clone(),
            acts,
            slopes,
        });
        (out, trace)
    }

    fn backward(&mut self, tr: &DenseTrace<F>, gout: &Array4<F>) -> Array4<F> {
        let beta = fr::<F>(self.beta);
        let features = tr.x.dim().1;
        let growth = tr.acts[0].dim().1;
        let mut gx = gout.clone();
        let gy = gout.mapv(|v| v * beta);

        let cat5 = cat_channels(&[&tr.x, &tr.acts[0], &tr.acts[1], &tr.acts[2], &tr.acts[3]]);
        let gcat = self.convs[4].backward(&cat5, &gy);
        let mut parts = split_channels(&gcat, &[features, growth, growth, growth, growth]);
        let mut ga: Vec<Array4<F>> = parts.drain(1..).collect();
        gx += &parts[0];

        for i in (0..4).rev() {
            let gpre = &ga[i] * &tr.slopes[i];
            let mut ins: Vec<&Array4<F>> = vec![&tr.x];
            ins.extend(tr.acts[..i].iter());
            let cat = cat_channels(&ins);
            let gcat = self.convs[i].backward(&cat, &gpre);
            let sizes: Vec<usize> =
                std::iter::once(features).chain(std::iter::repeat(growth).take(i)).collect();
            let parts = split_channels(&gcat, &sizes);
            gx += &parts[0];
            for (j, p) in parts[1..].iter().enumerate() {
                ga[j] += p;
            }
        }
        gx
    }
}

/// Three dense blocks in sequence with an outer scaled residual.
struct Rrdb<F: Scalar> {
    rdbs: Vec<DenseBlock<F>>,
    beta: f64,
}

struct RrdbTrace<F> {
    rdbs: Vec<DenseTrace<F>>,
}

impl<F: Scalar> Rrdb<F> {
    fn new(features: usize, growth: usize, beta: f64) -> Self {
        Rrdb {
            rdbs: (0..3).map(|_| DenseBlock::new(features, growth, beta)).collect(),
            beta,
        }
    }

    fn forward(&self, x: &Array4<F>, want_trace: bool) -> (Array4<F>, Option<RrdbTrace<F>>) {
        let beta = fr::<F>(self.beta);
        let mut traces = Vec::new();
        let mut y = x.clone();
        for rdb in &self.rdbs {
            let (out, tr) = rdb.forward(&y, want_trace);
            y = out;
            if let Some(tr) = tr {
                traces.push(tr);
            }
        }
        let out = x + &y.mapv(|v| v * beta);
        (out, want_trace.then_some(RrdbTrace { rdbs: traces }))
    }

    fn backward(&mut self, tr: &RrdbTrace<F>, gout: &Array4<F>) -> Array4<F> {
        let beta = fr::<F>(self.beta);
        let mut g = gout.mapv(|v| v * beta);
        for (rdb, tr) in self.rdbs.iter_mut().zip(tr.rdbs.iter()).rev() {
            g = rdb.backward(tr, &g);
        }
        g + gout
    }
}

pub struct Generator<F: Scalar> {
    pub cfg: GeneratorConfig,
    conv_first: Conv2d<F>,
    body: Vec<Rrdb<F>>,
    conv_body: Conv2d<F>,
    conv_up: Vec<Conv2d<F>>,
    conv_hr: Conv2d<F>,
    conv_last: Conv2d<F>,
}

/// Forward caches for [`Generator::backward`].
pub struct GenTrace<F> {
    x: Array4<F>,
    body: Vec<RrdbTrace<F>>,
    trunk_in: Array4<F>,
    up_in: Vec<Array4<F>>,
    up_slope: Vec<Array4<F>>,
    hr_in: Array4<F>,
    hr_slope: Array4<F>,
    last_in: Array4<F>,
}

/// Builds a generator with deterministic initialization: truncated-normal
/// weights at He scale, shrunk by 0.1 on the final conv of every dense block
/// and on the trunk conv so residual branches start near zero.
pub fn build_generator<F: Scalar>(cfg: &GeneratorConfig, seed: u64) -> Result<Generator<F>> {
    cfg.validate()?;
    let nf = cfg.features;
    let stages = (cfg.scale as f64).log2() as usize;
    let mut gen = Generator {
        cfg: cfg.clone(),
        conv_first: Conv2d::new(3, nf, 3, 1, 1),
        body: (0..cfg.blocks)
            .map(|_| Rrdb::new(nf, cfg.growth, cfg.residual_scale))
            .collect(),
        conv_body: Conv2d::new(nf, nf, 3, 1, 1),
        conv_up: (0..stages).map(|_| Conv2d::new(nf, nf, 3, 1, 1)).collect(),
        conv_hr: Conv2d::new(nf, nf, 3, 1, 1),
        conv_last: Conv2d::new(nf, 3, 3, 1, 1),
    };
    let mut rng = Seeder::new(seed).stream("generator.init");
    for (name, conv) in gen.convs_mut() {
        let (oc, ic, kh, kw) = conv.weight.dim();
        let shrink = if name.ends_with(".conv5") || name == "conv_body" {
            0.1
        } else {
            1.0
        };
        let std = he_std(ic * kh * kw, 1.0) * shrink;
        conv.weight = trunc_normal::<F>(&[oc, ic, kh, kw], std, &mut rng)
            .into_dimensionality()
            .expect("4-d weight");
    }
    Ok(gen)
}

impl<F: Scalar> Generator<F> {
    /// All convs with their stable names, in construction order.
    fn convs_mut(&mut self) -> Vec<(String, &mut Conv2d<F>)> {
        let mut v: Vec<(String, &mut Conv2d<F>)> = vec![("conv_first".into(), &mut self.conv_first)];
        for (bi, blk) in self.body.iter_mut().enumerate() {
            for (ri, rdb) in blk.rdbs.iter_mut().enumerate() {
                for (ci, c) in rdb.convs.iter_mut().enumerate() {
                    v.push((format!("body.{bi:02}.rdb{}.conv{}", ri + 1, ci + 1), c));
                }
            }
        }
        v.push(("conv_body".into(), &mut self.conv_body));
        for (ui, c) in self.conv_up.iter_mut().enumerate() {
            v.push((format!("conv_up{}", ui + 1), c));
        }
        v.push(("conv_hr".into(), &mut self.conv_hr));
        v.push(("conv_last".into(), &mut self.conv_last));
        v
    }

    fn convs(&self) -> Vec<(String, &Conv2d<F>)> {
        let mut v: Vec<(String, &Conv2d<F>)> = vec![("conv_first".into(), &self.conv_first)];
        for (bi, blk) in self.body.iter().enumerate() {
            for (ri, rdb) in blk.rdbs.iter().enumerate() {
                for (ci, c) in rdb.convs.iter().enumerate() {
                    v.push((format!("body.{bi:02}.rdb{}.conv{}", ri + 1, ci + 1), c));
                }
            }
        }
        v.push(("conv_body".into(), &self.conv_body));
        for (ui, c) in self.conv_up.iter().enumerate() {
            v.push((format!("conv_up{}", ui + 1), c));
        }
        v.push(("conv_hr".into(), &self.conv_hr));
        v.push(("conv_last".into(), &self.conv_last));
        v
    }

    pub fn conv_layer_count(&self) -> usize {
        self.convs().len()
    }

    /// Runs the network on an (n, 3, h, w) batch. With `want_trace` the
    /// returned caches support one [`Generator::backward`] call.
    pub fn forward(&self, x: &Array4<F>, want_trace: bool) -> (Array4<F>, Option<GenTrace<F>>) {
        let fea = self.conv_first.forward(x);
        let mut t = fea.clone();
        let mut body_traces = Vec::new();
        for blk in &self.body {
            let (out, tr) = blk.forward(&t, want_trace);
            t = out;
            if let Some(tr) = tr {
                body_traces.push(tr);
            }
        }
        let trunk = self.conv_body.forward(&t);
        let mut u = &fea + &trunk;
        let mut up_in = Vec::new();
        let mut up_slope = Vec::new();
        for conv in &self.conv_up {
            let upsampled = crate::tensor::upsample2(&u);
            let pre = conv.forward(&upsampled);
            u = leaky_relu(&pre, LRELU_SLOPE);
            if want_trace {
                up_in.push(upsampled);
                up_slope.push(slope_of(&pre));
            }
        }
        let hr_pre = self.conv_hr.forward(&u);
        let h = leaky_relu(&hr_pre, LRELU_SLOPE);
        let out = self.conv_last.forward(&h);
        let trace = want_trace.then(|| GenTrace {
            x: x.clone(),
            body: body_traces,
            trunk_in: t,
            up_in,
            up_slope,
            hr_in: u,
            hr_slope: slope_of(&hr_pre),
            last_in: h,
        });
        (out, trace)
    }

    /// Accumulates parameter gradients from a traced forward and returns the
    /// gradient w.r.t. the input batch.
    pub fn backward(&mut self, tr: &GenTrace<F>, gout: &Array4<F>) -> Array4<F> {
        let gh = self.conv_last.backward(&tr.last_in, gout);
        let g_hrpre = &gh * &tr.hr_slope;
        let mut gu = self.conv_hr.backward(&tr.hr_in, &g_hrpre);
        for (conv, (up_in, slope)) in self
            .conv_up
            .iter_mut()
            .zip(tr.up_in.iter().zip(tr.up_slope.iter()))
            .rev()
        {
            let gpre = &gu * slope;
            let gupsampled = conv.backward(up_in, &gpre);
            gu = crate::tensor::upsample2_backward(&gupsampled);
        }
        let gfea2 = gu;
        let gt = self.conv_body.backward(&tr.trunk_in, &gfea2);
        let mut g = gt;
        for (blk, btr) in self.body.iter_mut().zip(tr.body.iter()).rev() {
            g = blk.backward(btr, &g);
        }
        let gfea = &g + &gfea2;
        self.conv_first.backward(&tr.x, &gfea)
    }

    /// Stable named-tensor list for serialization.
    pub fn tensors(&self) -> Vec<(String, ArrayD<F>)> {
        let mut out = Vec::new();
        for (name, conv) in self.convs() {
            conv.collect_tensors(&name, &mut out);
        }
        out
    }

    pub fn load_tensors(
        &mut self,
        mut get: impl FnMut(&str) -> Result<ArrayD<F>>,
    ) -> Result<()> {
        for (name, conv) in self.convs_mut() {
            conv.load_tensors(&name, &mut get)?;
        }
        Ok(())
    }
}

impl<F: Scalar> Params<F> for Generator<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamMut<'_, F>)) {
        for (name, conv) in self.convs_mut() {
            conv.visit_params(&name, f);
        }
    }

    fn zero_grads(&mut self) {
        for (_, conv) in self.convs_mut() {
            conv.zero_grads();
        }
    }
}

/// Applies the generator to a uniform batch of 3-channel images. Output
/// values are raw network outputs; callers clamp before display or metrics.
pub fn generator_forward(gen: &Generator<f32>, batch: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let x = batch_to_nchw(batch)?;
    if x.dim().1 != 3 {
        return Err(Error::invalid("the generator expects 3-channel images"));
    }
    let (y, _) = gen.forward(&x, false);
    Ok(nchw_to_batch(&y))
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Square input edge; must be divisible by 64 (six stride-2 stages).
    pub input_size: usize,
    /// Output channels of each of the six conv blocks.
    pub features: Vec<usize>,
    /// Leaky-ReLU slope.
    pub alpha: f64,
    /// Width of the first fully connected layer.
    pub fc_units: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            input_size: 192,
            features: vec![64, 128, 256, 512, 512, 512],
            alpha: LRELU_SLOPE,
            fc_units: 100,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.features.len() != 6 || self.features.iter().any(|&f| f == 0) {
            return Err(Error::invalid(
                "discriminator needs exactly 6 nonzero block feature counts",
            ));
        }
        if self.input_size == 0 || self.input_size % 64 != 0 {
            return Err(Error::invalid(format!(
                "discriminator input {} must be divisible by 64",
                self.input_size
            )));
        }
        if self.alpha <= 0.0 {
            return Err(Error::invalid("activation slope must be positive"));
        }
        if self.fc_units == 0 {
            return Err(Error::invalid("fc width must be nonzero"));
        }
        Ok(())
    }

    /// Spatial edge of the feature map entering the flatten stage.
    pub fn final_extent(&self) -> usize {
        self.input_size / 64
    }
}

pub struct Discriminator<F: Scalar> {
    pub cfg: DiscriminatorConfig,
    pub net: Sequential<F>,
}

/// Six blocks of (conv k3 s1, conv k4 s2), batch norm on every conv except
/// the very first, then FC layers down to a single raw logit.
pub fn build_discriminator<F: Scalar>(
    cfg: &DiscriminatorConfig,
    seed: u64,
) -> Result<Discriminator<F>> {
    cfg.validate()?;
    let mut net = Sequential::new();
    let mut prev = 3;
    for (bi, &nf) in cfg.features.iter().enumerate() {
        net.push(format!("block{bi}.conv0"), Layer::Conv(Conv2d::new(prev, nf, 3, 1, 1)));
        if bi > 0 {
            net.push(format!("block{bi}.bn0"), Layer::Bn(BatchNorm2d::new(nf)));
        }
        net.push(format!("block{bi}.act0"), Layer::LRelu(cfg.alpha));
        net.push(format!("block{bi}.conv1"), Layer::Conv(Conv2d::new(nf, nf, 4, 2, 1)));
        net.push(format!("block{bi}.bn1"), Layer::Bn(BatchNorm2d::new(nf)));
        net.push(format!("block{bi}.act1"), Layer::LRelu(cfg.alpha));
        prev = nf;
    }
    net.push("flatten", Layer::Flatten);
    let extent = cfg.final_extent();
    let fc_in = cfg.features[5] * extent * extent;
    net.push("fc0", Layer::Linear(Linear::new(fc_in, cfg.fc_units)));
    net.push("fc0.act", Layer::LRelu(cfg.alpha));
    net.push("fc1", Layer::Linear(Linear::new(cfg.fc_units, 1)));

    let mut rng = Seeder::new(seed).stream("discriminator.init");
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
    Ok(Discriminator { cfg: cfg.clone(), net })
}

impl<F: Scalar> Discriminator<F> {
    pub fn conv_layer_count(&self) -> usize {
        self.net
            .layers
            .iter()
            .filter(|(_, l)| l.kind() == LayerKind::Conv)
            .count()
    }

    /// Checks a batch against the configured input geometry.
    pub fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != 3 || h != self.cfg.input_size || w != self.cfg.input_size {
            return Err(Error::invalid(format!(
                "discriminator expects 3x{0}x{0} inputs, got {c}x{h}x{w}",
                self.cfg.input_size
            )));
        }
        Ok(())
    }
}

/// Raw critic outputs C(I) in evaluation mode, one per image. No sigmoid is
/// applied; loss composition does that.
pub fn discriminator_logits(
    disc: &mut Discriminator<f32>,
    batch: &[ImageTensor],
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let x = batch_to_nchw(batch)?;
    disc.check_input(&x)?;
    let out = disc.net.forward(Feat::T4(x), Phase::Eval, None, None).t2();
    Ok(out.column(0).iter().map(|&v| v as f64).collect())
}

impl Generator<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        model_store("generator", &serde_json::to_value(&self.cfg)?, self.tensors()).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = TensorStore::load(path)?;
        let cfg: GeneratorConfig = model_config(&store, "generator")?;
        let mut gen = build_generator::<f32>(&cfg, 0)?;
        let names: Vec<String> = gen.tensors().into_iter().map(|(n, _)| n).collect();
        store.expect_exact(&names)?;
        gen.load_tensors(|name| tensor_from_store(&store, name))?;
        Ok(gen)
    }
}

impl Discriminator<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        model_store(
            "discriminator",
            &serde_json::to_value(&self.cfg)?,
            self.net.tensors(),
        )
        .save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let store = TensorStore::load(path)?;
        let cfg: DiscriminatorConfig = model_config(&store, "discriminator")?;
        let mut disc = build_discriminator::<f32>(&cfg, 0)?;
        let names: Vec<String> = disc.net.tensors().into_iter().map(|(n, _)| n).collect();
        store.expect_exact(&names)?;
        disc.net.load_tensors(|name| tensor_from_store(&store, name))?;
        Ok(disc)
    }
}

pub(crate) fn model_store(
    kind: &str,
    cfg: &serde_json::Value,
    tensors: Vec<(String, ArrayD<f32>)>,
) -> TensorStore {
    let mut store = TensorStore::new(serde_json::json!({ "kind": kind, "config": cfg }));
    for (name, arr) in tensors {
        let shape = arr.shape().to_vec();
        let data = arr.into_raw_vec_and_offset().0;
        store.insert(name, Tensor::new(shape, data));
    }
    store
}

pub(crate) fn model_config<C: serde::de::DeserializeOwned>(
    store: &TensorStore,
    kind: &str,
) -> Result<C> {
    if store.config.get("kind").and_then(|k| k.as_str()) != Some(kind) {
        return Err(Error::load(format!("container does not hold a {kind}")));
    }
    let cfg = store
        .config
        .get("config")
        .ok_or_else(|| Error::load("container has no config snapshot"))?;
    serde_json::from_value(cfg.clone()).map_err(|e| Error::load(format!("bad config snapshot: {e}")))
}

pub(crate) fn tensor_from_store(store: &TensorStore, name: &str) -> Result<ArrayD<f32>> {
    let t = store.get(name)?;
    ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&t.shape), t.data.clone())
        .map_err(|_| Error::load(format!("tensor {name}: malformed shape")))
}
