//! Per-channel batch normalization over (N, H, W) with running statistics.

use super::{fr, Phase, Scalar};
use ndarray::{Array1, Array4, Axis};

pub struct BatchNorm2d<F: Scalar> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub ggamma: Array1<F>,
    pub gbeta: Array1<F>,
    /// Weight on the previous running value: new = m*old + (1-m)*batch.
    pub momentum: f64,
    pub eps: f64,
    pub requires_grad: bool,
}

pub struct BnCache<F> {
    xhat: Array4<F>,
    inv_std: Array1<F>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Array1::from_elem(channels, fr(1.0)),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::from_elem(channels, fr(1.0)),
            ggamma: Array1::zeros(channels),
            gbeta: Array1::zeros(channels),
            momentum: 0.9,
            eps: 1e-5,
            requires_grad: true,
        }
    }

    pub fn forward(
        &mut self,
        x: &Array4<F>,
        phase: Phase,
        want_cache: bool,
    ) -> (Array4<F>, Option<BnCache<F>>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.gamma.len(), "batchnorm channel mismatch");
        let count = fr::<F>((n * h * w) as f64);
        let (mean, var) = match phase {
            Phase::Train { update_stats } => {
                let mut mean = Array1::<F>::zeros(c);
                let mut var = Array1::<F>::zeros(c);
                for ci in 0..c {
                    let plane = x.index_axis(Axis(1), ci);
                    let m = plane.sum() / count;
                    let v = plane.mapv(|e| (e - m) * (e - m)).sum() / count;
                    mean[ci] = m;
                    var[ci] = v;
                }
                if update_stats {
                    let m = fr::<F>(self.momentum);
                    let im = fr::<F>(1.0 - self.momentum);
                    self.running_mean = &self.running_mean * m + &mean * im;
                    self.running_var = &self.running_var * m + &var * im;
                }
                (mean, var)
            }
            Phase::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| fr::<F>(1.0) / (v + fr(self.eps)).sqrt());
        let mut y = x.clone();
        for ci in 0..c {
            let (m, s, g, b) = (mean[ci], inv_std[ci], self.gamma[ci], self.beta[ci]);
            y.index_axis_mut(Axis(1), ci)
                .mapv_inplace(|e| (e - m) * s * g + b);
        }
        let cache = if want_cache {
            let mut xhat = x.clone();
            for ci in 0..c {
                let (m, s) = (mean[ci], inv_std[ci]);
                xhat.index_axis_mut(Axis(1), ci).mapv_inplace(|e| (e - m) * s);
            }
            Some(BnCache { xhat, inv_std })
        } else {
            None
        };
        (y, cache)
    }

    /// Training-mode backward (batch statistics). Accumulates gamma/beta
    /// gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &BnCache<F>, gout: &Array4<F>) -> Array4<F> {
        let (n, c, h, w) = gout.dim();
        let count = fr::<F>((n * h * w) as f64);
        let mut gx = Array4::zeros((n, c, h, w));
        for ci in 0..c {
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let go = gout.index_axis(Axis(1), ci);
            let sum_g = go.sum();
            let sum_gx = (&go * &xh).sum();
            if self.requires_grad {
                self.ggamma[ci] = self.ggamma[ci] + sum_gx;
                self.gbeta[ci] = self.gbeta[ci] + sum_g;
            }
            let scale = self.gamma[ci] * cache.inv_std[ci] / count;
            let mut gxc = gx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut gxc).and(&go).and(&xh).for_each(|d, &g, &x| {
                *d = scale * (count * g - sum_g - x * sum_gx);
            });
        }
        gx
    }

    pub fn zero_grads(&mut self) {
        self.ggamma.fill(fr(0.0));
        self.gbeta.fill(fr(0.0));
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
            &format!("{name}.gamma"),
            super::ParamMut {
                value: self.gamma.view_mut().into_dyn(),
                grad: self.ggamma.view().into_dyn(),
            },
        );
        f(
            &format!("{name}.beta"),
            super::ParamMut {
                value: self.beta.view_mut().into_dyn(),
                grad: self.gbeta.view().into_dyn(),
            },
        );
    }

    pub fn collect_tensors(&self, name: &str, out: &mut Vec<(String, ndarray::ArrayD<F>)>) {
        out.push((format!("{name}.gamma"), self.gamma.clone().into_dyn()));
        out.push((format!("{name}.beta"), self.beta.clone().into_dyn()));
        out.push((
            format!("{name}.running_mean"),
            self.running_mean.clone().into_dyn(),
        ));
        out.push((
            format!("{name}.running_var"),
            self.running_var.clone().into_dyn(),
        ));
    }

    pub fn load_tensors(
        &mut self,
        name: &str,
        get: &mut impl FnMut(&str) -> crate::Result<ndarray::ArrayD<F>>,
    ) -> crate::Result<()> {
        let c = self.gamma.len();
        self.gamma = super::load_shaped(&format!("{name}.gamma"), &[c], get)?;
        self.beta = super::load_shaped(&format!("{name}.beta"), &[c], get)?;
        self.running_mean = super::load_shaped(&format!("{name}.running_mean"), &[c], get)?;
        self.running_var = super::load_shaped(&format!("{name}.running_var"), &[c], get)?;
        Ok(())
    }
}
