//! Fully connected layer. Weight shape is (in, out) so the forward pass is a
//! plain `x.dot(w)`.

use super::{fr, Scalar};
use ndarray::{Array1, Array2, Axis};

pub struct Linear<F: Scalar> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub gweight: Array2<F>,
    pub gbias: Array1<F>,
    pub requires_grad: bool,
}

impl<F: Scalar> Linear<F> {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Linear {
            weight: Array2::zeros((in_features, out_features)),
            bias: Array1::zeros(out_features),
            gweight: Array2::zeros((in_features, out_features)),
            gbias: Array1::zeros(out_features),
            requires_grad: true,
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight);
        for mut row in y.axis_iter_mut(Axis(0)) {
            row += &self.bias;
        }
        y
    }

    pub fn backward(&mut self, x: &Array2<F>, gout: &Array2<F>) -> Array2<F> {
        if self.requires_grad {
            self.gweight = &self.gweight + &x.t().dot(gout);
            self.gbias = &self.gbias + &gout.sum_axis(Axis(0));
        }
        // dot can hand back a transposed (column-major) buffer; later layers
        // reshape gradients, so normalize here
        let gx = gout.dot(&self.weight.t());
        if gx.is_standard_layout() {
            gx
        } else {
            gx.as_standard_layout().to_owned()
        }
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
