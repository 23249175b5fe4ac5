//! Tensor plumbing shared by every model: a seeded parameter store, an
//! im2col convolution with a fast backward pass, and the handful of layers
//! the toy networks are built from.
//!
//! Tensors are `f32` (`f64` for gradient checks), NCHW, on the CPU device.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn device() -> Device {
    Device::Cpu
}

// ---------------------------------------------------------------------------
// im2col convolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Range of output columns whose input column is inside the image for
    /// kernel column offset `kj`.
    fn valid_cols(&self, kj: usize, ow: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
        let hi = if self.width + p > kj {
            ((self.width + p - kj - 1) / s + 1).min(ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn input_row(&self, oy: usize, ki: usize) -> Option<usize> {
        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.height).then_some(iy as usize)
    }
}

/// Unfolds `(B, C, H, W)` into `(C·k·k, B·OH·OW)`.
struct Im2Col(ConvGeometry);
/// Adjoint of [`Im2Col`]: scatters-and-adds columns back into an image.
struct Col2Im(ConvGeometry);

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("im2col: input must be contiguous"),
    }
}

fn im2col<T: Copy + Default>(src: &[T], g: ConvGeometry) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let plane_out = oh * ow;
    let n = g.batch * plane_out;
    let plane_in = g.height * g.width;
    let mut dst = vec![T::default(); g.rows() * n];
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let (lo, hi) = g.valid_cols(kj, ow);
                if lo >= hi {
                    continue;
                }
                let x0 = lo * g.stride + kj - g.pad;
                for b in 0..g.batch {
                    let plane = &src[(b * g.channels + c) * plane_in..][..plane_in];
                    let out = &mut dst[row * n + b * plane_out..][..plane_out];
                    for oy in 0..oh {
                        let Some(iy) = g.input_row(oy, ki) else { continue };
                        let irow = &plane[iy * g.width..][..g.width];
                        let orow = &mut out[oy * ow + lo..oy * ow + hi];
                        if g.stride == 1 {
                            orow.copy_from_slice(&irow[x0..x0 + (hi - lo)]);
                        } else {
                            for (o, i) in orow.iter_mut().zip(irow[x0..].iter().step_by(g.stride)) {
                                *o = *i;
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn col2im<T: Copy + Default + std::ops::AddAssign>(src: &[T], g: ConvGeometry) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let plane_out = oh * ow;
    let n = g.batch * plane_out;
    let plane_in = g.height * g.width;
    let mut dst = vec![T::default(); g.batch * g.channels * plane_in];
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let (lo, hi) = g.valid_cols(kj, ow);
                if lo >= hi {
                    continue;
                }
                let x0 = lo * g.stride + kj - g.pad;
                for b in 0..g.batch {
                    let plane = &mut dst[(b * g.channels + c) * plane_in..][..plane_in];
                    let inp = &src[row * n + b * plane_out..][..plane_out];
                    for oy in 0..oh {
                        let Some(iy) = g.input_row(oy, ki) else { continue };
                        let prow = &mut plane[iy * g.width..][..g.width];
                        let irow = &inp[oy * ow + lo..oy * ow + hi];
                        for (p, i) in prow[x0..].iter_mut().step_by(g.stride).zip(irow) {
                            *p += *i;
                        }
                    }
                }
            }
        }
    }
    dst
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let (oh, ow) = g.out_hw();
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(im2col(contiguous(d, layout)?, g)),
            CpuStorage::F64(d) => CpuStorage::F64(im2col(contiguous(d, layout)?, g)),
            _ => candle_core::bail!("im2col: only f32 and f64 tensors are supported"),
        };
        Ok((out, Shape::from((g.rows(), g.batch * oh * ow))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = match storage {
            CpuStorage::F32(d) => CpuStorage::F32(col2im(contiguous(d, layout)?, g)),
            CpuStorage::F64(d) => CpuStorage::F64(col2im(contiguous(d, layout)?, g)),
            _ => candle_core::bail!("col2im: only f32 and f64 tensors are supported"),
        };
        Ok((out, Shape::from((g.batch, g.channels, g.height, g.width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 2-D convolution with zero padding. `weight` is `(O, C, k, k)`.
///
/// Candle's own CPU convolution back-propagates through a direct
/// transposed convolution that is several times slower than the
/// im2col + GEMM route used here.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (out_ch, w_ch, kernel, kernel_w) = weight.dims4()?;
    if w_ch != channels || kernel != kernel_w {
        candle_core::bail!("conv2d: weight {:?} incompatible with input {:?}", weight.dims(), x.dims());
    }
    let g = ConvGeometry {
        batch,
        channels,
        height,
        width,
        kernel,
        stride,
        pad,
    };
    let (oh, ow) = g.out_hw();
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let y = weight.reshape((out_ch, g.rows()))?.matmul(&cols)?;
    let y = y.reshape((out_ch, batch, oh, ow))?.transpose(0, 1)?.contiguous()?;
    match bias {
        Some(b) => y.broadcast_add(&b.reshape((1, out_ch, 1, 1))?),
        None => Ok(y),
    }
}

/// Applies one `k×k` kernel to every channel independently, with edge
/// replication so constant images map to themselves under a normalized kernel.
pub fn depthwise_replicate(x: &Tensor, kernel: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let k = kernel.dim(0)?;
    let pad = k / 2;
    let xp = x
        .reshape((b * c, 1, h, w))?
        .pad_with_same(2, pad, pad)?
        .pad_with_same(3, pad, pad)?;
    let y = conv2d(&xp, &kernel.reshape((1, 1, k, k))?, None, 1, 0)?;
    y.reshape((b, c, h, w))
}

/// Nearest-neighbour 2× upsampling expressed as a broadcast so the backward
/// pass is a plain sum.
pub fn upsample2x(x: &Tensor) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .reshape((b, c, 2 * h, 2 * w))
}

pub fn silu(x: &Tensor) -> candle_core::Result<Tensor> {
    x * candle_nn::ops::sigmoid(x)?
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: &Tensor) -> candle_core::Result<Tensor> {
    let pos = x.relu()?;
    let neg_abs = x.abs()?.neg()?;
    pos + (neg_abs.exp()? + 1.0)?.log()?
}

/// Per-example binary cross-entropy of logits against a constant label.
pub fn bce_with_logits(logits: &Tensor, label: f32) -> candle_core::Result<Tensor> {
    // y·softplus(-l) + (1-y)·softplus(l)
    let pos = softplus(&logits.neg()?)?;
    let neg = softplus(logits)?;
    (pos * label as f64)? + (neg * (1.0 - label) as f64)?
}

/// BCE against per-example labels (0 or 1).
pub fn bce_with_logits_labels(logits: &Tensor, labels: &Tensor) -> candle_core::Result<Tensor> {
    let pos = softplus(&logits.neg()?)?;
    let neg = softplus(logits)?;
    (pos * labels)? + (neg * (1.0 - labels)?)?
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He-normal with the given fan-in.
    He(usize),
    Normal(f64),
    Zeros,
    Ones,
}

/// Named, seeded parameter storage. Parameters are created on first request
/// (drawing from the store's RNG in request order) or looked up when the
/// store was populated from a weight file.
pub struct ParamStore {
    vars: RefCell<BTreeMap<String, Var>>,
    used: RefCell<BTreeSet<String>>,
    rng: RefCell<ChaCha8Rng>,
    loaded: bool,
}

impl ParamStore {
    pub fn seeded(seed: u64) -> Self {
        Self {
            vars: RefCell::new(BTreeMap::new()),
            used: RefCell::new(BTreeSet::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            loaded: false,
        }
    }

    /// A store backed by existing tensors; requesting a missing name is an error.
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in tensors {
            vars.insert(name, Var::from_tensor(&t)?);
        }
        Ok(Self {
            vars: RefCell::new(vars),
            used: RefCell::new(BTreeSet::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
            loaded: true,
        })
    }

    /// Copy of every parameter converted to `dtype`; used to evaluate models
    /// in double precision for gradient checks.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let converted = self
            .tensors()
            .into_iter()
            .map(|(k, t)| Ok((k, t.to_dtype(dtype)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        Self::from_tensors(converted)
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
            frozen: false,
        }
    }

    pub fn frozen_root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
            frozen: true,
        }
    }

    fn fetch(&self, name: &str, shape: &[usize], init: Init, frozen: bool) -> Result<Tensor> {
        self.used.borrow_mut().insert(name.to_string());
        if let Some(v) = self.vars.borrow().get(name) {
            if v.dims() != shape {
                return Err(Error::shape(format!("{name}: {shape:?}"), format!("{:?}", v.dims())));
            }
            return Ok(if frozen { v.as_tensor().detach() } else { v.as_tensor().clone() });
        }
        if self.loaded {
            return Err(Error::Format(format!("parameter `{name}` missing from weight file")));
        }
        let count: usize = shape.iter().product();
        let data: Vec<f32> = {
            let mut rng = self.rng.borrow_mut();
            match init {
                Init::Zeros => vec![0.0; count],
                Init::Ones => vec![1.0; count],
                Init::He(fan_in) => {
                    let std = (2.0 / fan_in.max(1) as f64).sqrt();
                    (0..count)
                        .map(|_| (<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut *rng) * std) as f32)
                        .collect()
                }
                Init::Normal(std) => (0..count)
                    .map(|_| (<StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut *rng) * std) as f32)
                    .collect(),
            }
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &device())?)?;
        let t = if frozen { var.as_tensor().detach() } else { var.as_tensor().clone() };
        self.vars.borrow_mut().insert(name.to_string(), var);
        Ok(t)
    }

    /// Trainable variables whose name starts with `prefix`, in name order.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .borrow()
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars_with_prefix("")
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .borrow()
            .iter()
            .map(|(k, v)| {
                let t = v.as_tensor().detach();
                // Var::set writes in place, so snapshots need their own storage
                (k.clone(), t.copy().unwrap_or(t))
            })
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.borrow().keys().cloned().collect()
    }

    /// Overwrites an existing parameter in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let vars = self.vars.borrow();
        let var = vars
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        var.set(value)?;
        Ok(())
    }

    /// Fails if a loaded store holds parameters the architecture never asked for.
    pub fn check_all_used(&self) -> Result<()> {
        let used = self.used.borrow();
        let unused: Vec<_> = self
            .vars
            .borrow()
            .keys()
            .filter(|k| !used.contains(*k))
            .cloned()
            .collect();
        if unused.is_empty() {
            Ok(())
        } else {
            Err(Error::Format(format!("weight file has unexpected parameters: {}", unused.join(", "))))
        }
    }

    /// SHA-256 over names, shapes, and raw values; used to prove frozen
    /// weights survive training untouched.
    pub fn digest(&self) -> Result<String> {
        digest_tensors(&self.tensors())
    }
}

pub fn digest_tensors(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// A named view into a [`ParamStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a ParamStore,
    prefix: String,
    frozen: bool,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: &str) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
            frozen: self.frozen,
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        self.store.fetch(&full, shape, init, self.frozen)
    }
}

// ---------------------------------------------------------------------------
// layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new(s: &Scope, cin: usize, cout: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::with_init(s, cin, cout, kernel, stride, Init::He(cin * kernel * kernel), true)
    }

    pub fn zeroed(s: &Scope, cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        Self::with_init(s, cin, cout, kernel, 1, Init::Zeros, true)
    }

    pub fn with_init(s: &Scope, cin: usize, cout: usize, kernel: usize, stride: usize, init: Init, bias: bool) -> Result<Self> {
        let weight = s.get("weight", &[cout, cin, kernel, kernel], init)?;
        let bias = if bias {
            Some(s.get("bias", &[cout], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(s: &Scope, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            weight: s.get("weight", &[dout, din], Init::He(din))?,
            bias: s.get("bias", &[dout], Init::Zeros)?,
        })
    }

    /// Works on `(N, din)` and `(B, T, din)` inputs.
    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let dims = x.dims().to_vec();
        let din = *dims.last().unwrap_or(&0);
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, din))?.matmul(&self.weight.t()?)?;
        let y = y.broadcast_add(&self.bias)?;
        let mut out = dims;
        let last = out.len() - 1;
        out[last] = self.bias.dim(0)?;
        y.reshape(out)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(s: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: s.get("gamma", &[dim], Init::Ones)?,
            beta: s.get("beta", &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

/// Scalar value of a rank-0 tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Adam with zero weight decay over the given variables.
pub fn adam(vars: Vec<Var>, lr: f64) -> Result<candle_nn::AdamW> {
    use candle_nn::Optimizer;
    let params = candle_nn::ParamsAdamW {
        lr,
        weight_decay: 0.0,
        ..Default::default()
    };
    Ok(candle_nn::AdamW::new(vars, params)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn conv_matches_candle_reference() {
        let x = randn(&[2, 3, 8, 8], 1);
        let w = randn(&[4, 3, 3, 3], 2);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0), (1, 2)] {
            let ours = conv2d(&x, &w, None, stride, pad).unwrap();
            let theirs = x.conv2d(&w, pad, stride, 1, 1).unwrap();
            let diff = (ours - theirs).unwrap().abs().unwrap().max_all().unwrap();
            assert!(diff.to_scalar::<f32>().unwrap() < 1e-4, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn conv_gradients_match_candle_reference() {
        let x = Var::from_tensor(&randn(&[2, 3, 8, 8], 3)).unwrap();
        let w = Var::from_tensor(&randn(&[5, 3, 3, 3], 4)).unwrap();
        let ours = conv2d(x.as_tensor(), w.as_tensor(), None, 2, 1).unwrap().sqr().unwrap().sum_all().unwrap();
        let g1 = ours.backward().unwrap();
        let theirs = x.as_tensor().conv2d(w.as_tensor(), 1, 2, 1, 1).unwrap().sqr().unwrap().sum_all().unwrap();
        let g2 = theirs.backward().unwrap();
        for v in [&x, &w] {
            let d = (g1.get(v).unwrap() - g2.get(v).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
            assert!(d.to_scalar::<f32>().unwrap() < 1e-3);
        }
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::from_vec(vec![1f32, 2., 3., 4.], (1, 1, 2, 2), &Device::Cpu).unwrap();
        let y = upsample2x(&x).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]);
    }

    #[test]
    fn loaded_store_rejects_missing_and_unused() {
        let mut m = BTreeMap::new();
        m.insert("a.weight".to_string(), Tensor::zeros((2, 2), DType::F32, &Device::Cpu).unwrap());
        m.insert("extra".to_string(), Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap());
        let store = ParamStore::from_tensors(m).unwrap();
        assert!(store.root().pp("a").get("weight", &[2, 2], Init::Zeros).is_ok());
        assert!(store.root().get("missing", &[1], Init::Zeros).is_err());
        assert!(store.check_all_used().is_err());
    }

    #[test]
    fn bce_matches_closed_form() {
        let l = Tensor::new(&[0.3f32, -2.0], &Device::Cpu).unwrap();
        let v = bce_with_logits(&l, 1.0).unwrap().to_vec1::<f32>().unwrap();
        for (got, logit) in v.iter().zip([0.3f64, -2.0]) {
            let p = 1.0 / (1.0 + (-logit).exp());
            assert!((*got as f64 - (-p.ln())).abs() < 1e-5);
        }
    }
}
