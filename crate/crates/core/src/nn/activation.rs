use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pointwise nonlinearity. `Clip` replaces `Relu` in fused graphs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// `min(max(x, lower), upper)`. `upper = None` means +inf.
    Clip { lower: f32, upper: Option<f32> },
}

impl Activation {
    pub fn relu_clip() -> Self {
        Activation::Clip {
            lower: 0.0,
            upper: None,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match *self {
            Activation::Relu => Ok(relu(x)),
            Activation::Clip { lower, upper } => clip(x, lower, upper.unwrap_or(f32::INFINITY)),
        }
    }

    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
        match *self {
            Activation::Relu => relu_backward(x, grad_out),
            Activation::Clip { lower, upper } => clip_backward(x, grad_out, lower, upper.unwrap_or(f32::INFINITY)),
        }
    }

    /// Scalar form, used by the streaming engine.
    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        match *self {
            Activation::Relu => v.max(0.0),
            Activation::Clip { lower, upper } => v.max(lower).min(upper.unwrap_or(f32::INFINITY)),
        }
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn masked(x: &Tensor, grad_out: &Tensor, pass: impl Fn(f32) -> bool) -> Result<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(Error::Shape(format!(
            "grad_out shape {:?} does not match input {:?}",
            grad_out.shape(),
            x.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if pass(v) { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    masked(x, grad_out, |v| v > 0.0)
}

pub fn clip(x: &Tensor, lower: f32, upper: f32) -> Result<Tensor> {
    if !(lower < upper) {
        return Err(Error::InvalidConfig(format!(
            "clip needs lower < upper, got [{lower}, {upper}]"
        )));
    }
    let data = x.data().iter().map(|v| v.max(lower).min(upper)).collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub fn clip_backward(x: &Tensor, grad_out: &Tensor, lower: f32, upper: f32) -> Result<Tensor> {
    masked(x, grad_out, |v| v > lower && v < upper)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn scalar_cases() {
        let x = Tensor::from_vec(vec![-1.0, 2.0, 7.0]);
        assert_eq!(relu(&x).data(), &[0.0, 2.0, 7.0]);
        assert_eq!(clip(&x, 0.0, 6.0).unwrap().data(), &[0.0, 2.0, 6.0]);
    }

    #[test]
    fn unbounded_clip_is_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_vec((0..1000).map(|_| rng.gen_range(-3.0..3.0)).collect());
        assert_eq!(clip(&x, 0.0, f32::INFINITY).unwrap(), relu(&x));
        assert_eq!(Activation::relu_clip().forward(&x).unwrap(), relu(&x));
    }

    #[test]
    fn clip_bounds_must_be_ordered() {
        assert!(clip(&Tensor::from_vec(vec![1.0]), 2.0, 2.0).is_err());
    }

    #[test]
    fn gradient_masks() {
        let x = Tensor::from_vec(vec![-1.0, 0.5, 7.0]);
        let g = Tensor::from_vec(vec![1.0, 1.0, 1.0]);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 1.0, 1.0]);
        assert_eq!(clip_backward(&x, &g, 0.0, 6.0).unwrap().data(), &[0.0, 1.0, 0.0]);
    }
}
