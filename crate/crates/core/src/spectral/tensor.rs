//! Differentiable counterparts of the spectral operations on `(B, C, H, W)`
//! tensors. The DFT is expressed as real cosine/sine matrix products so that
//! gradients flow back to the pixels.

use std::f64::consts::PI;

use candle_core::{Tensor, D};
use ndarray::Array3;

use super::{DenoiserFilter, NoisePrototype};
use crate::error::{Error, Result};
use crate::nn::device;

const AMP_EPS: f64 = 1e-12;

fn basis(n: usize) -> Result<(Tensor, Tensor)> {
    let mut c = Vec::with_capacity(n * n);
    let mut s = Vec::with_capacity(n * n);
    for k in 0..n {
        for x in 0..n {
            let phase = 2.0 * PI * ((k * x) % n) as f64 / n as f64;
            c.push(phase.cos() as f32);
            s.push(phase.sin() as f32);
        }
    }
    Ok((Tensor::from_vec(c, (n, n), &device())?, Tensor::from_vec(s, (n, n), &device())?))
}

/// Precomputed DFT bases for one image size.
#[derive(Debug, Clone)]
pub struct SpectralOps {
    h: usize,
    w: usize,
    ch: Tensor,
    sh: Tensor,
    cw: Tensor,
    sw: Tensor,
}

impl SpectralOps {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        let (ch, sh) = basis(h)?;
        let (cw, sw) = basis(w)?;
        Ok(Self { h, w, ch, sh, cw, sw })
    }

    /// `1/(HW)`-normalized amplitude spectrum per plane, same layout as the input.
    pub fn amplitude(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if (h, w) != (self.h, self.w) {
            return Err(Error::shape(format!("{}×{}", self.h, self.w), format!("{h}×{w}")));
        }
        let planes = x.reshape((b * c * h, w))?;
        let a = planes.matmul(&self.cw)?;
        let bb = planes.matmul(&self.sw)?;
        // transpose each plane so the row transform is another right product
        let t = |m: Tensor| -> candle_core::Result<Tensor> {
            m.reshape((b * c, h, w))?.transpose(1, 2)?.contiguous()?.reshape((b * c * w, h))
        };
        let (at, bt) = (t(a)?, t(bb)?);
        let re = (at.matmul(&self.ch)? - bt.matmul(&self.sh)?)?;
        let im = (bt.matmul(&self.ch)? + at.matmul(&self.sh)?)?;
        let norm = 1.0 / (h * w) as f64;
        let amp = ((re.sqr()? + im.sqr()?)? + AMP_EPS)?.sqrt()?.affine(norm, 0.0)?;
        Ok(amp.reshape((b, c, w, h))?.transpose(2, 3)?.contiguous()?)
    }

    pub fn residual_amplitude(&self, x: &Tensor, filter: &DenoiserFilter) -> Result<Tensor> {
        let r = (x - filter.apply_tensor(x)?)?;
        self.amplitude(&r)
    }
}

/// Prototype amplitudes as a `(C, H, W)` tensor.
pub fn prototype_tensor(prototype: &NoisePrototype) -> Result<Tensor> {
    array_to_chw(&prototype.spectrum.amplitudes)
}

pub fn array_to_chw(a: &Array3<f32>) -> Result<Tensor> {
    let (h, w, c) = a.dim();
    let data: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(data, (h, w, c), &device())?.permute((2, 0, 1))?.contiguous()?)
}

/// `Σ_i ‖N_p − N_{b_i}‖_F` over a batch of `(B, C, H, W)` spectra.
pub fn npl(spectra: &Tensor, prototype: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = spectra.dims4()?;
    if prototype.dims() != [c, h, w] {
        return Err(Error::shape(format!("{:?}", prototype.dims()), format!("{c}×{h}×{w}")));
    }
    let diff = spectra.broadcast_sub(&prototype.unsqueeze(0)?)?;
    let per = (diff.sqr()?.flatten_from(1)?.sum(D::Minus1)? + AMP_EPS)?.sqrt()?;
    Ok(per.sum_all()?)
}

/// Mean of per-image NPL terms; the scale used by training losses.
pub fn npl_mean(x: &Tensor, ops: &SpectralOps, filter: &DenoiserFilter, prototype: &Tensor) -> Result<Tensor> {
    let b = x.dims4()?.0;
    Ok(npl(&ops.residual_amplitude(x, filter)?, prototype)?.affine(1.0 / b as f64, 0.0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;
    use crate::spectral::{batch_spectra, npl_loss, AmplitudeSpectrum, BatchSpectra};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn imgs(seed: u64, n: usize, h: usize, w: usize) -> Vec<Array3<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Array3::from_shape_fn((h, w, 3), |_| rng.random_range(0.0..1.0))).collect()
    }

    #[test]
    fn matches_fft_path() {
        let images = imgs(1, 3, 8, 6);
        let refs: Vec<&Array3<f32>> = images.iter().collect();
        let f = DenoiserFilter::default_blur();
        let expect = batch_spectra(&refs, &f).unwrap();
        let ops = SpectralOps::new(8, 6).unwrap();
        let got = ops.residual_amplitude(&corpus::to_tensor(&refs).unwrap(), &f).unwrap();
        let got = corpus::from_tensor(&got).unwrap();
        for (g, e) in got.iter().zip(&expect.spectra) {
            for (a, b) in g.iter().zip(e.amplitudes.iter()) {
                assert!((a - b).abs() < 2e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn npl_matches_array_version() {
        let images = imgs(2, 2, 8, 8);
        let refs: Vec<&Array3<f32>> = images.iter().collect();
        let f = DenoiserFilter::default_blur();
        let spectra = batch_spectra(&refs, &f).unwrap();
        let proto = NoisePrototype {
            spectrum: AmplitudeSpectrum {
                amplitudes: imgs(3, 1, 8, 8).remove(0).mapv(|v| v * 0.01),
            },
            count: 1,
            filter_fingerprint: f.fingerprint(),
            convention: Default::default(),
        };
        let expect = npl_loss(&BatchSpectra { spectra: spectra.spectra }, &proto).unwrap();
        let ops = SpectralOps::new(8, 8).unwrap();
        let amp = ops.residual_amplitude(&corpus::to_tensor(&refs).unwrap(), &f).unwrap();
        let got = crate::nn::scalar(&npl(&amp, &prototype_tensor(&proto).unwrap()).unwrap()).unwrap();
        assert!((got - expect).abs() < 1e-4 * expect.max(1.0), "{got} vs {expect}");
    }

    #[test]
    fn npl_gradient_reaches_pixels() {
        let images = imgs(4, 1, 8, 8);
        let x = candle_core::Var::from_tensor(&corpus::to_tensor(&[&images[0]]).unwrap()).unwrap();
        let ops = SpectralOps::new(8, 8).unwrap();
        let proto = Tensor::zeros((3, 8, 8), candle_core::DType::F32, &device()).unwrap();
        let loss = npl_mean(x.as_tensor(), &ops, &DenoiserFilter::default_blur(), &proto).unwrap();
        let g = loss.backward().unwrap();
        let g = g.get(x.as_tensor()).unwrap();
        let norm = crate::nn::scalar(&g.sqr().unwrap().sum_all().unwrap()).unwrap();
        assert!(norm.is_finite() && norm > 0.0);
    }
}
