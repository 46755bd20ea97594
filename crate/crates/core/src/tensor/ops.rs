//! Stateless layer math: activations, 2x2 max pooling, nearest-neighbor
//! upsampling and inverted dropout.

use super::{fr, Feat, Scalar};
use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn leaky_relu<F: Scalar>(x: &Array4<F>, alpha: f64) -> Array4<F> {
    let a = fr::<F>(alpha);
    x.mapv(|v| if v > fr(0.0) { v } else { v * a })
}

/// Applies max(x, alpha*x) to either activation shape, optionally returning
/// the per-element gradient multiplier.
pub fn slope_activation<F: Scalar>(
    x: Feat<F>,
    alpha: f64,
    want_cache: bool,
) -> (Feat<F>, Option<Feat<F>>) {
    let a = fr::<F>(alpha);
    let one = fr::<F>(1.0);
    let act = |v: F| if v > fr(0.0) { v } else { v * a };
    let slope = |v: F| if v > fr(0.0) { one } else { a };
    match x {
        Feat::T4(t) => {
            let s = want_cache.then(|| Feat::T4(t.mapv(slope)));
            (Feat::T4(t.mapv(act)), s)
        }
        Feat::T2(t) => {
            let s = want_cache.then(|| Feat::T2(t.mapv(slope)));
            (Feat::T2(t.mapv(act)), s)
        }
    }
}

pub fn leaky_relu_backward<F: Scalar>(g: Feat<F>, slope: &Feat<F>) -> Feat<F> {
    match (g, slope) {
        (Feat::T4(g), Feat::T4(s)) => Feat::T4(g * s),
        (Feat::T2(g), Feat::T2(s)) => Feat::T2(g * s),
        _ => panic!("activation gradient shape mismatch"),
    }
}

pub fn sigmoid<F: Scalar>(v: F) -> F {
    fr::<F>(1.0) / (fr::<F>(1.0) + (-v).exp())
}

/// 2x2 max pooling with stride 2. Returns pooled values and the flat (y*w+x)
/// index of each winner for backward routing.
pub fn max_pool2<F: Scalar>(x: &Array4<F>) -> (Array4<F>, Array4<usize>) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::zeros((n, c, oh, ow));
    let mut idx = Array4::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (iy, ix) = (oy * 2, ox * 2);
                    let mut best = x[(ni, ci, iy, ix)];
                    let mut bi = iy * w + ix;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let v = x[(ni, ci, iy + dy, ix + dx)];
                            if v > best {
                                best = v;
                                bi = (iy + dy) * w + (ix + dx);
                            }
                        }
                    }
                    y[(ni, ci, oy, ox)] = best;
                    idx[(ni, ci, oy, ox)] = bi;
                }
            }
        }
    }
    (y, idx)
}

pub fn max_pool2_backward<F: Scalar>(
    g: &Array4<F>,
    idx: &Array4<usize>,
    in_hw: (usize, usize),
) -> Array4<F> {
    let (n, c, oh, ow) = g.dim();
    let (h, w) = in_hw;
    let mut gx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let flat = idx[(ni, ci, oy, ox)];
                    let (iy, ix) = (flat / w, flat % w);
                    gx[(ni, ci, iy, ix)] = gx[(ni, ci, iy, ix)] + g[(ni, ci, oy, ox)];
                }
            }
        }
    }
    gx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::zeros((n, c, h * 2, w * 2));
    for ni in 0..n {
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    let v = x[(ni, ci, iy, ix)];
                    y[(ni, ci, 2 * iy, 2 * ix)] = v;
                    y[(ni, ci, 2 * iy, 2 * ix + 1)] = v;
                    y[(ni, ci, 2 * iy + 1, 2 * ix)] = v;
                    y[(ni, ci, 2 * iy + 1, 2 * ix + 1)] = v;
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<F: Scalar>(g: &Array4<F>) -> Array4<F> {
    let (n, c, h2, w2) = g.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..w {
                    gx[(ni, ci, iy, ix)] = g[(ni, ci, 2 * iy, 2 * ix)]
                        + g[(ni, ci, 2 * iy, 2 * ix + 1)]
                        + g[(ni, ci, 2 * iy + 1, 2 * ix)]
                        + g[(ni, ci, 2 * iy + 1, 2 * ix + 1)];
                }
            }
        }
    }
    gx
}

/// Inverted dropout: kept elements are scaled by 1/(1-p) so evaluation needs
/// no rescaling. Returns output and the applied mask.
pub fn dropout_forward<F: Scalar>(x: Feat<F>, p: f64, rng: &mut ChaCha8Rng) -> (Feat<F>, Feat<F>) {
    let keep = 1.0 - p;
    let scale = fr::<F>(1.0 / keep);
    let zero = fr::<F>(0.0);
    let mut draw = |_: &F| if rng.gen::<f64>() < keep { scale } else { zero };
    match x {
        Feat::T4(t) => {
            let mask = t.map(&mut draw);
            (Feat::T4(&t * &mask), Feat::T4(mask))
        }
        Feat::T2(t) => {
            let mask = t.map(&mut draw);
            (Feat::T2(&t * &mask), Feat::T2(mask))
        }
    }
}

pub fn dropout_backward<F: Scalar>(g: Feat<F>, mask: &Feat<F>) -> Feat<F> {
    leaky_relu_backward(g, mask)
}
