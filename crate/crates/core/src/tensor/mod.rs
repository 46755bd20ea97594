//! Minimal CPU tensor-network engine: typed layers over `ndarray`, im2col
//! convolutions backed by the matrixmultiply GEMM, and Adam. Generic over
//! `f32`/`f64`; all layers are deterministic and single threaded.
//!
//! Forward passes write activation caches into an external [`Trace`] instead
//! of the layer itself, so one network can run several live forwards (e.g. a
//! discriminator seeing real and generated batches) and backpropagate each.

mod adam;
mod conv;
mod init;
mod linear;
mod norm;
mod ops;

pub use adam::{Adam, AdamConfig};
pub use conv::Conv2d;
pub use init::{he_std, normal, trunc_normal};
pub use linear::Linear;
pub use norm::BatchNorm2d;
pub use ops::{dropout_backward, dropout_forward, leaky_relu, leaky_relu_backward, max_pool2, max_pool2_backward, sigmoid, upsample2, upsample2_backward};

use ndarray::{Array2, Array4, ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;

/// Element type of the engine. `f32` for production training, `f64` for
/// gradient oracles.
pub trait Scalar: ndarray::NdFloat {
    fn fr(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    fn fr(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn fr(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

/// Shorthand cast used throughout the engine.
pub fn fr<F: Scalar>(v: f64) -> F {
    F::fr(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics in normalization layers, dropout active.
    /// `update_stats` controls whether running averages are mutated.
    Train { update_stats: bool },
    /// Running statistics, dropout inactive, no caches required.
    Eval,
}

impl Phase {
    pub fn is_train(self) -> bool {
        matches!(self, Phase::Train { .. })
    }
}

/// Activations flowing through a [`Sequential`]: image-shaped or flat.
#[derive(Debug, Clone)]
pub enum Feat<F> {
    T4(Array4<F>),
    T2(Array2<F>),
}

impl<F> Feat<F> {
    pub fn t4(self) -> Array4<F> {
        match self {
            Feat::T4(a) => a,
            Feat::T2(_) => panic!("expected a 4-d activation"),
        }
    }
    pub fn t2(self) -> Array2<F> {
        match self {
            Feat::T2(a) => a,
            Feat::T4(_) => panic!("expected a 2-d activation"),
        }
    }
}

/// Per-layer forward caches, parallel to a [`Sequential`]'s layer list.
pub enum LayerCache<F> {
    Conv { x: Array4<F> },
    Bn(norm::BnCache<F>),
    Linear { x: Array2<F> },
    /// Elementwise gradient multiplier (covers ReLU and leaky ReLU).
    Slope(Feat<F>),
    Dropout(Feat<F>),
    Pool { idx: Array4<usize>, in_hw: (usize, usize) },
    Flatten { shape: (usize, usize, usize, usize) },
    None,
}

#[derive(Default)]
pub struct Trace<F> {
    caches: Vec<LayerCache<F>>,
}

impl<F> Trace<F> {
    pub fn new() -> Self {
        Trace { caches: Vec::new() }
    }
    pub fn clear(&mut self) {
        self.caches.clear();
    }
}

/// A mutable parameter with its accumulated gradient, as presented to the
/// optimizer and to state inspection.
pub struct ParamMut<'a, F> {
    pub value: ArrayViewMutD<'a, F>,
    pub grad: ArrayViewD<'a, F>,
}

/// Networks expose parameters through a visitor keyed by stable names.
pub trait Params<F: Scalar> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamMut<'_, F>));
    fn zero_grads(&mut self);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Bn,
    Linear,
    Relu,
    LRelu,
    MaxPool2,
    Up2,
    Dropout,
    Flatten,
}

pub enum Layer<F: Scalar> {
    Conv(Conv2d<F>),
    Bn(BatchNorm2d<F>),
    Linear(Linear<F>),
    Relu,
    LRelu(f64),
    MaxPool2,
    Up2,
    Dropout(f64),
    Flatten,
}

impl<F: Scalar> Layer<F> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::Bn(_) => LayerKind::Bn,
            Layer::Linear(_) => LayerKind::Linear,
            Layer::Relu => LayerKind::Relu,
            Layer::LRelu(_) => LayerKind::LRelu,
            Layer::MaxPool2 => LayerKind::MaxPool2,
            Layer::Up2 => LayerKind::Up2,
            Layer::Dropout(_) => LayerKind::Dropout,
            Layer::Flatten => LayerKind::Flatten,
        }
    }
}

/// An ordered stack of named layers. Names key the parameter store, so they
/// must stay stable across construction paths.
pub struct Sequential<F: Scalar> {
    pub layers: Vec<(String, Layer<F>)>,
}

impl<F: Scalar> Sequential<F> {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, layer: Layer<F>) {
        self.layers.push((name.into(), layer));
    }

    pub fn forward(
        &mut self,
        x: Feat<F>,
        phase: Phase,
        mut rng: Option<&mut ChaCha8Rng>,
        mut trace: Option<&mut Trace<F>>,
    ) -> Feat<F> {
        if let Some(t) = trace.as_deref_mut() {
            t.clear();
        }
        let mut cur = x;
        for (_, layer) in self.layers.iter_mut() {
            let mut cache = LayerCache::None;
            let want_cache = trace.is_some();
            cur = match layer {
                Layer::Conv(c) => {
                    let x4 = cur.t4();
                    let y = c.forward(&x4);
                    if want_cache {
                        cache = LayerCache::Conv { x: x4 };
                    }
                    Feat::T4(y)
                }
                Layer::Bn(b) => {
                    let x4 = cur.t4();
                    let (y, bc) = b.forward(&x4, phase, want_cache);
                    if let Some(bc) = bc {
                        cache = LayerCache::Bn(bc);
                    }
                    Feat::T4(y)
                }
                Layer::Linear(l) => {
                    let x2 = cur.t2();
                    let y = l.forward(&x2);
                    if want_cache {
                        cache = LayerCache::Linear { x: x2 };
                    }
                    Feat::T2(y)
                }
                Layer::Relu => {
                    let (y, slope) = ops::slope_activation(cur, 0.0, want_cache);
                    if let Some(s) = slope {
                        cache = LayerCache::Slope(s);
                    }
                    y
                }
                Layer::LRelu(a) => {
                    let (y, slope) = ops::slope_activation(cur, *a, want_cache);
                    if let Some(s) = slope {
                        cache = LayerCache::Slope(s);
                    }
                    y
                }
                Layer::MaxPool2 => {
                    let x4 = cur.t4();
                    let in_hw = (x4.shape()[2], x4.shape()[3]);
                    let (y, idx) = max_pool2(&x4);
                    if want_cache {
                        cache = LayerCache::Pool { idx, in_hw };
                    }
                    Feat::T4(y)
                }
                Layer::Up2 => Feat::T4(upsample2(&cur.t4())),
                Layer::Dropout(p) => {
                    if phase.is_train() {
                        let r = rng
                            .as_deref_mut()
                            .expect("dropout in training phase needs an rng");
                        let (y, mask) = dropout_forward(cur, *p, r);
                        if want_cache {
                            cache = LayerCache::Dropout(mask);
                        } else {
                            drop(mask);
                        }
                        y
                    } else {
                        cur
                    }
                }
                Layer::Flatten => {
                    let x4 = cur.t4();
                    let d = x4.dim();
                    let (n, c, h, w) = d;
                    let y = x4
                        .into_shape_with_order((n, c * h * w))
                        .expect("flatten on standard layout");
                    if want_cache {
                        cache = LayerCache::Flatten { shape: d };
                    }
                    Feat::T2(y)
                }
            };
            if let Some(t) = trace.as_deref_mut() {
                t.caches.push(cache);
            }
        }
        cur
    }

    /// Backpropagates `g` through the stack using `trace` from the matching
    /// forward call. Parameter gradients accumulate (`+=`); callers zero them
    /// at step boundaries. Returns the gradient w.r.t. the input.
    pub fn backward(&mut self, trace: &Trace<F>, g: Feat<F>) -> Feat<F> {
        assert_eq!(
            trace.caches.len(),
            self.layers.len(),
            "trace does not match this network"
        );
        let mut cur = g;
        for ((_, layer), cache) in self.layers.iter_mut().zip(trace.caches.iter()).rev() {
            cur = match (layer, cache) {
                (Layer::Conv(c), LayerCache::Conv { x }) => Feat::T4(c.backward(x, &cur.t4())),
                (Layer::Bn(b), LayerCache::Bn(bc)) => Feat::T4(b.backward(bc, &cur.t4())),
                (Layer::Linear(l), LayerCache::Linear { x }) => Feat::T2(l.backward(x, &cur.t2())),
                (Layer::Relu, LayerCache::Slope(s)) | (Layer::LRelu(_), LayerCache::Slope(s)) => {
                    leaky_relu_backward(cur, s)
                }
                (Layer::MaxPool2, LayerCache::Pool { idx, in_hw }) => {
                    Feat::T4(max_pool2_backward(&cur.t4(), idx, *in_hw))
                }
                (Layer::Up2, _) => Feat::T4(upsample2_backward(&cur.t4())),
                (Layer::Dropout(_), LayerCache::Dropout(mask)) => dropout_backward(cur, mask),
                (Layer::Dropout(_), LayerCache::None) => cur,
                (Layer::Flatten, LayerCache::Flatten { shape }) => {
                    let g2 = cur.t2();
                    let g2 = if g2.is_standard_layout() {
                        g2
                    } else {
                        g2.as_standard_layout().to_owned()
                    };
                    Feat::T4(
                        g2.into_shape_with_order(*shape)
                            .expect("unflatten on standard layout"),
                    )
                }
                _ => panic!("layer/cache mismatch in backward"),
            };
        }
        cur
    }

    /// Stable list of all stateful tensors (parameters and running buffers)
    /// for serialization, prefixed by layer name.
    pub fn tensors(&self) -> Vec<(String, ndarray::ArrayD<F>)> {
        let mut out = Vec::new();
        for (name, layer) in &self.layers {
            match layer {
                Layer::Conv(c) => c.collect_tensors(name, &mut out),
                Layer::Bn(b) => b.collect_tensors(name, &mut out),
                Layer::Linear(l) => l.collect_tensors(name, &mut out),
                _ => {}
            }
        }
        out
    }

    /// Writes tensors back by name. Errors on any shape mismatch.
    pub fn load_tensors(
        &mut self,
        mut get: impl FnMut(&str) -> crate::Result<ndarray::ArrayD<F>>,
    ) -> crate::Result<()> {
        for (name, layer) in self.layers.iter_mut() {
            match layer {
                Layer::Conv(c) => c.load_tensors(name, &mut get)?,
                Layer::Bn(b) => b.load_tensors(name, &mut get)?,
                Layer::Linear(l) => l.load_tensors(name, &mut get)?,
                _ => {}
            }
        }
        Ok(())
    }
}

impl<F: Scalar> Params<F> for Sequential<F> {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamMut<'_, F>)) {
        for (name, layer) in self.layers.iter_mut() {
            match layer {
                Layer::Conv(c) => c.visit_params(name, f),
                Layer::Bn(b) => b.visit_params(name, f),
                Layer::Linear(l) => l.visit_params(name, f),
                _ => {}
            }
        }
    }

    fn zero_grads(&mut self) {
        for (_, layer) in self.layers.iter_mut() {
            match layer {
                Layer::Conv(c) => c.zero_grads(),
                Layer::Bn(b) => b.zero_grads(),
                Layer::Linear(l) => l.zero_grads(),
                _ => {}
            }
        }
    }
}

pub(crate) fn load_shaped<F: Scalar, D: ndarray::Dimension>(
    name: &str,
    expected: &[usize],
    get: &mut impl FnMut(&str) -> crate::Result<ndarray::ArrayD<F>>,
) -> crate::Result<ndarray::Array<F, D>> {
    let arr = get(name)?;
    if arr.shape() != expected {
        return Err(crate::Error::load(format!(
            "tensor {name}: shape {:?} does not match expected {:?}",
            arr.shape(),
            expected
        )));
    }
    arr.into_dimensionality::<D>()
        .map_err(|_| crate::Error::load(format!("tensor {name}: wrong rank")))
}

#[cfg(test)]
mod grad_check;
