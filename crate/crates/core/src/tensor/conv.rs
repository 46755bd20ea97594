//! 2-d convolution via im2col and GEMM. Backward recomputes the column matrix
//! from the cached input rather than holding it, trading FLOPs for memory.

use super::{fr, Scalar};
use ndarray::{Array1, Array2, Array4, ArrayView4, Axis};

pub struct Conv2d<F: Scalar> {
    /// (out_channels, in_channels, kh, kw)
    pub weight: Array4<F>,
    pub bias: Array1<F>,
    pub gweight: Array4<F>,
    pub gbias: Array1<F>,
    pub stride: usize,
    pub pad: usize,
    /// When false, backward produces only the input gradient (frozen layers).
    pub requires_grad: bool,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            weight: Array4::zeros((out_ch, in_ch, ksize, ksize)),
            bias: Array1::zeros(out_ch),
            gweight: Array4::zeros((out_ch, in_ch, ksize, ksize)),
            gbias: Array1::zeros(out_ch),
            stride,
            pad,
            requires_grad: true,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.weight.dim();
        (
            (h + 2 * self.pad - kh) / self.stride + 1,
            (w + 2 * self.pad - kw) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (n, ic, h, w) = x.dim();
        let (oc, wic, kh, kw) = self.weight.dim();
        assert_eq!(ic, wic, "conv input channel mismatch");
        let (oh, ow) = self.out_hw(h, w);
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((oc, wic * kh * kw))
            .expect("conv weight is standard layout");
        let mut out = Array4::zeros((n, oc, oh, ow));
        let mut cols = Array2::zeros((wic * kh * kw, oh * ow));
        for ni in 0..n {
            im2col(&x.view(), ni, kh, kw, self.stride, self.pad, &mut cols);
            let y = w2.dot(&cols);
            let mut on = out.index_axis_mut(Axis(0), ni);
            let mut on2 = on
                .view_mut()
                .into_shape_with_order((oc, oh * ow))
                .expect("contiguous output image");
            on2.assign(&y);
            for (mut row, b) in on2.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
                row.mapv_inplace(|v| v + *b);
            }
        }
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Array4<F>, gout: &Array4<F>) -> Array4<F> {
        let (n, ic, h, w) = x.dim();
        let (oc, _, kh, kw) = self.weight.dim();
        let (oh, ow) = self.out_hw(h, w);
        assert_eq!(gout.dim(), (n, oc, oh, ow));
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((oc, ic * kh * kw))
            .expect("conv weight is standard layout");
        let mut gx = Array4::zeros((n, ic, h, w));
        let mut cols = Array2::zeros((ic * kh * kw, oh * ow));
        let mut gw2 = Array2::<F>::zeros((oc, ic * kh * kw));
        for ni in 0..n {
            let gn = gout.index_axis(Axis(0), ni);
            let g2 = gn
                .into_shape_with_order((oc, oh * ow))
                .expect("contiguous gradient image");
            if self.requires_grad {
                im2col(&x.view(), ni, kh, kw, self.stride, self.pad, &mut cols);
                gw2 = gw2 + g2.dot(&cols.t());
                for (gb, row) in self.gbias.iter_mut().zip(g2.axis_iter(Axis(0))) {
                    *gb = *gb + row.sum();
                }
            }
            let gcols = w2.t().dot(&g2);
            col2im(
                &gcols,
                ni,
                kh,
                kw,
                self.stride,
                self.pad,
                &mut gx.view_mut(),
            );
        }
        if self.requires_grad {
            let gw4 = gw2
                .into_shape_with_order((oc, ic, kh, kw))
                .expect("contiguous weight gradient");
            self.gweight = &self.gweight + &gw4;
        }
        gx
    }

    /// Input gradient alone, leaving parameter gradients untouched. `in_hw`
    /// is the spatial size of the forward input.
    pub fn input_grad(&self, in_hw: (usize, usize), gout: &Array4<F>) -> Array4<F> {
        let (n, oc, oh, ow) = gout.dim();
        let (woc, ic, kh, kw) = self.weight.dim();
        assert_eq!(oc, woc, "conv output channel mismatch");
        let (h, w) = in_hw;
        debug_assert_eq!((oh, ow), self.out_hw(h, w));
        let w2 = self
            .weight
            .view()
            .into_shape_with_order((oc, ic * kh * kw))
            .expect("conv weight is standard layout");
        let mut gx = Array4::zeros((n, ic, h, w));
        for ni in 0..n {
            let gn = gout.index_axis(Axis(0), ni);
            let g2 = gn
                .into_shape_with_order((oc, oh * ow))
                .expect("contiguous gradient image");
            let gcols = w2.t().dot(&g2);
            col2im(
                &gcols,
                ni,
                kh,
                kw,
                self.stride,
                self.pad,
                &mut gx.view_mut(),
            );
        }
        gx
    }

    pub fn zero_grads(&mut self) {
        self.gweight.fill(fr(0.0));
        self.gbias.fill(fr(0.0));
    }

    pub fn visit_params(
        &mut self,
        name: &str,
        f: &mut dyn FnMut(&str, super::ParamMut<'_, F>),
    ) {
        if !self.requires_grad {
            return;
        }
        f(
            &format!("{name}.weight"),
            super::ParamMut {
                value: self.weight.view_mut().into_dyn(),
                grad: self.gweight.view().into_dyn(),
            },
        );
        f(
            &format!("{name}.bias"),
            super::ParamMut {
                value: self.bias.view_mut().into_dyn(),
                grad: self.gbias.view().into_dyn(),
            },
        );
    }

    pub fn collect_tensors(&self, name: &str, out: &mut Vec<(String, ndarray::ArrayD<F>)>) {
        out.push((format!("{name}.weight"), self.weight.clone().into_dyn()));
        out.push((format!("{name}.bias"), self.bias.clone().into_dyn()));
    }

    pub fn load_tensors(
        &mut self,
        name: &str,
        get: &mut impl FnMut(&str) -> crate::Result<ndarray::ArrayD<F>>,
    ) -> crate::Result<()> {
        self.weight = super::load_shaped(
            &format!("{name}.weight"),
            &self.weight.shape().to_vec(),
            get,
        )?;
        self.bias = super::load_shaped(&format!("{name}.bias"), &[self.bias.len()], get)?;
        Ok(())
    }
}

/// Unfolds image `ni` of `x` into `cols` with shape (ic*kh*kw, oh*ow).
/// Out-of-bounds taps read as zero.
fn im2col<F: Scalar>(
    x: &ArrayView4<F>,
    ni: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut Array2<F>,
) {
    let (_, ic, h, w) = x.dim();
    let ohw = cols.dim().1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let oh = ohw / ow;
    let img = x.index_axis(Axis(0), ni);
    let img = img.as_slice().expect("contiguous input image");
    let cs = cols.as_slice_mut().expect("contiguous column matrix");
    let zero = fr::<F>(0.0);
    for c in 0..ic {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh) + ky) * kw + kx;
                let dst = &mut cs[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(zero);
                        continue;
                    }
                    let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            zero
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds column gradients back onto image `ni`.
fn col2im<F: Scalar>(
    gcols: &Array2<F>,
    ni: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    gx: &mut ndarray::ArrayViewMut4<F>,
) {
    let (_, ic, h, w) = gx.dim();
    let ohw = gcols.dim().1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let oh = ohw / ow;
    let mut img = gx.index_axis_mut(Axis(0), ni);
    let img = img.as_slice_mut().expect("contiguous gradient image");
    let gs = gcols.as_slice().expect("contiguous column gradient");
    for c in 0..ic {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh) + ky) * kw + kx;
                let src = &gs[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, s) in srow.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] = drow[ix as usize] + *s;
                        }
                    }
                }
            }
        }
    }
}
