//! Learned perceptual distance computed on a frozen convolutional trunk.
//!
//! Each layer's activations are unit-normalized along the channel axis; the
//! distance is the squared difference summed over channels, averaged over
//! positions, then averaged over layers and over the batch.

use candle_core::{Tensor, D};

use crate::error::{Error, Result};

/// Anything that exposes a list of intermediate feature maps.
pub trait FeatureExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

fn unit_normalize(f: &Tensor) -> Result<Tensor> {
    let norm = (f.sqr()?.sum_keepdim(1)? + 1e-10)?.sqrt()?;
    Ok(f.broadcast_div(&norm)?)
}

/// Differentiable batch-mean distance between `x` and `y`.
pub fn perceptual_loss(x: &Tensor, y: &Tensor, net: &dyn FeatureExtractor) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(Error::shape(format!("{:?}", x.dims()), format!("{:?}", y.dims())));
    }
    let fx = net.features(x)?;
    let fy = net.features(y)?;
    if fx.is_empty() {
        return Err(Error::Config("perceptual network exposes no features".into()));
    }
    let mut total: Option<Tensor> = None;
    for (a, b) in fx.iter().zip(&fy) {
        let d = (unit_normalize(a)? - unit_normalize(b)?)?
            .sqr()?
            .sum(1)?
            .flatten_from(1)?
            .mean(D::Minus1)?
            .mean_all()?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    let layers = fx.len() as f64;
    Ok((total.expect("at least one layer") / layers)?)
}

pub fn perceptual_distance(x: &Tensor, y: &Tensor, net: &dyn FeatureExtractor) -> Result<f64> {
    crate::nn::scalar(&perceptual_loss(x, y, net)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{device, Conv2d, ParamStore};

    struct TwoConv(Conv2d, Conv2d);

    impl FeatureExtractor for TwoConv {
        fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
            let a = self.0.forward(x)?.relu()?;
            let b = self.1.forward(&a)?.relu()?;
            Ok(vec![a, b])
        }
    }

    fn net() -> TwoConv {
        let s = ParamStore::seeded(3);
        let r = s.frozen_root();
        TwoConv(Conv2d::new(&r.pp("a"), 3, 8, 3, 1).unwrap(), Conv2d::new(&r.pp("b"), 8, 8, 3, 2).unwrap())
    }

    #[test]
    fn zero_symmetric_and_shape_checked() {
        let n = net();
        let x = Tensor::rand(0f32, 1f32, (2, 3, 8, 8), &device()).unwrap();
        let y = Tensor::rand(0f32, 1f32, (2, 3, 8, 8), &device()).unwrap();
        assert_eq!(perceptual_distance(&x, &x, &n).unwrap(), 0.0);
        let a = perceptual_distance(&x, &y, &n).unwrap();
        let b = perceptual_distance(&y, &x, &n).unwrap();
        assert!(a > 0.0);
        assert!((a - b).abs() < 1e-9);
        let z = Tensor::rand(0f32, 1f32, (2, 3, 4, 4), &device()).unwrap();
        assert!(perceptual_distance(&x, &z, &n).is_err());
    }
}
