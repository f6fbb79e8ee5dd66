//! Small neural-network toolkit on top of `candle_core`.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted path strings, which is
//! also what the checkpoint format serializes. Initialization draws from a
//! seeded ChaCha stream so two stores built with the same seed are
//! bit-identical.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Const(f64),
    Uniform(f64),
    Normal(f64),
    Identity,
}

/// Named, ordered collection of trainable variables.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    params: Vec<(String, Var)>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> ParamBuilder<'_> {
        ParamBuilder {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrite a parameter from raw values. Shape must match exactly.
    pub fn assign(&self, name: &str, shape: &[usize], values: &[f32]) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter `{name}`")))?;
        if var.dims() != shape {
            return Err(Error::shape(
                "ParamStore::assign",
                format!("{name}: stored {:?}, given {:?}", var.dims(), shape),
            ));
        }
        let t = Tensor::from_slice(values, shape, &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    fn create(&mut self, name: String, shape: &[usize], init: Init) -> Result<Var> {
        if self.get(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::Uniform(bound) => (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect(),
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
            Init::Identity => {
                if shape.len() != 2 {
                    return Err(Error::shape("Init::Identity", format!("{shape:?}")));
                }
                let (r, c) = (shape[0], shape[1]);
                (0..n)
                    .map(|i| if i / c == i % c && i / c < r { 1.0 } else { 0.0 })
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.push((name, var.clone()));
        Ok(var)
    }
}

pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn pp(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            prefix,
        }
    }

    pub fn var(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self::with_init(pb, in_dim, out_dim, Init::Uniform(bound), Init::Zeros)
    }

    pub fn with_init(pb: &mut ParamBuilder, in_dim: usize, out_dim: usize, w: Init, b: Init) -> Result<Self> {
        Ok(Self {
            weight: pb.var("weight", &[out_dim, in_dim], w)?,
            bias: pb.var("bias", &[out_dim], b)?,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    /// `x`: [rows, in] -> [rows, out]
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.t()?)?;
        Ok(y.broadcast_add(&self.bias)?)
    }

    /// Overwrite with the given matrix and bias (used by forced-weight tests).
    pub fn set(&self, weight: &Tensor, bias: &Tensor) -> Result<()> {
        self.weight.set(&weight.to_dtype(self.weight.dtype())?)?;
        self.bias.set(&bias.to_dtype(self.bias.dtype())?)?;
        Ok(())
    }

    pub fn set_identity(&self) -> Result<()> {
        let (o, i) = (self.out_dim(), self.in_dim());
        let dev = self.weight.device();
        let w = Tensor::eye(o.max(i), self.weight.dtype(), dev)?
            .narrow(0, 0, o)?
            .narrow(1, 0, i)?;
        self.set(&w, &Tensor::zeros(o, self.bias.dtype(), dev)?)
    }

    pub fn set_zero(&self) -> Result<()> {
        self.weight.set(&self.weight.zeros_like()?)?;
        self.bias.set(&self.bias.zeros_like()?)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(pb: &mut ParamBuilder, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Result<Self> {
        let std = (2.0 / (in_ch * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: pb.var("weight", &[out_ch, in_ch, kernel, kernel], Init::Normal(std))?,
            bias: pb.var("bias", &[out_ch], Init::Zeros)?,
            stride,
            padding: kernel / 2,
        })
    }

    /// `x`: [1, C, H, W]
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_ch = self.weight.dims()[0];
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, out_ch, 1, 1))?)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Var,
    pub beta: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: pb.var("gamma", &[dim], Init::Const(1.0))?,
            beta: pb.var("beta", &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    /// Normalizes over the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// Multi-head scaled dot-product attention with learned projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&mut pb.pp("q"), dim, dim)?,
            k: Linear::new(&mut pb.pp("k"), dim, dim)?,
            v: Linear::new(&mut pb.pp("v"), dim, dim)?,
            o: Linear::new(&mut pb.pp("o"), dim, dim)?,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// `query`: [Nq, C], `memory`: [Nk, C], `mask`: additive [Nq, Nk].
    pub fn forward(&self, query: &Tensor, memory: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_weights(query, memory, mask)?.0)
    }

    /// Also returns the attention weights, [heads, Nq, Nk].
    pub fn forward_with_weights(
        &self,
        query: &Tensor,
        memory: &Tensor,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (nq, c) = query.dims2()?;
        let (nk, c2) = memory.dims2()?;
        if c != c2 {
            return Err(Error::shape(
                "attention",
                format!("query width {c} vs memory width {c2}"),
            ));
        }
        let h = self.heads;
        let dh = c / h;
        let split =
            |t: Tensor, n: usize| -> Result<Tensor> { Ok(t.reshape((n, h, dh))?.transpose(0, 1)?.contiguous()?) };
        let q = split(self.q.forward(query)?, nq)?;
        let k = split(self.k.forward(memory)?, nk)?;
        let v = split(self.v.forward(memory)?, nk)?;
        let mut scores = (q.matmul(&k.transpose(1, 2)?.contiguous()?)? / (dh as f64).sqrt())?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let attn = softmax(&scores, 2)?;
        let out = attn.matmul(&v)?.transpose(0, 1)?.contiguous()?.reshape((nq, c))?;
        Ok((self.o.forward(&out)?, attn))
    }
}

/// Two-layer ReLU perceptron, no residual.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(&mut pb.pp("l1"), dim, hidden)?,
            l2: Linear::new(&mut pb.pp("l2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.l2.forward(&self.l1.forward(x)?.relu()?)
    }
}

/// Additive attention mask: 0 where `allowed`, a large negative value elsewhere.
pub fn attention_mask(rows: usize, allowed_cols: &[bool], dtype: DType, device: &Device) -> Result<Tensor> {
    let row: Vec<f64> = allowed_cols.iter().map(|&a| if a { 0.0 } else { -1e9 }).collect();
    let cols = row.len();
    let t = Tensor::from_vec(row, (1, cols), device)?.to_dtype(dtype)?;
    Ok(t.broadcast_as((rows, cols))?.contiguous()?)
}

/// Logistic function, written through `tanh` so it saturates without overflow.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// `log(1 + exp(x))`, stable for large |x|.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn softmax(x: &Tensor, dim: usize) -> Result<Tensor> {
    let m = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(dim)?)?)
}

/// Log-sum-exp over `dim`, keeping the dimension.
pub fn logsumexp(x: &Tensor, dim: usize) -> Result<Tensor> {
    let m = x.max_keepdim(dim)?.detach();
    let s = x.broadcast_sub(&m)?.exp()?.sum_keepdim(dim)?.log()?;
    Ok(s.broadcast_add(&m)?)
}

/// Returns an error if any element of `t` is NaN or infinite.
pub fn ensure_finite(t: &Tensor, what: &'static str) -> Result<()> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Fixed 2-D sinusoidal position code, [C, H, W]. Half the channels encode
/// the row coordinate, half the column coordinate.
pub fn sinusoidal_position_code(
    channels: usize,
    height: usize,
    width: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    if channels % 4 != 0 {
        return Err(Error::Config(format!(
            "positional code needs channels divisible by 4, got {channels}"
        )));
    }
    let per_axis = channels / 2;
    let two_pi = std::f64::consts::PI * 2.0;
    let mut out = vec![0.0f64; channels * height * width];
    for c in 0..channels {
        let (axis, i) = (c / per_axis, c % per_axis);
        let freq = 10000f64.powf((2 * (i / 2)) as f64 / per_axis as f64);
        for y in 0..height {
            for x in 0..width {
                let coord = if axis == 0 {
                    (y as f64 + 0.5) / height as f64
                } else {
                    (x as f64 + 0.5) / width as f64
                };
                let a = coord * two_pi / freq;
                out[(c * height + y) * width + x] = if i % 2 == 0 { a.sin() } else { a.cos() };
            }
        }
    }
    Ok(Tensor::from_vec(out, (channels, height, width), device)?.to_dtype(dtype)?)
}

/// Bilinear resampling matrix (half-pixel centers), [out, inp].
fn interp_matrix(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        let w1 = src - i0 as f64;
        m[o * inp + i0] += 1.0 - w1;
        m[o * inp + i1] += w1;
    }
    m
}

/// Differentiable bilinear upsampling of [N, h, w] maps to [N, H, W].
#[derive(Clone, Debug)]
pub struct Upsampler {
    rows: Tensor,
    cols_t: Tensor,
    pub out_h: usize,
    pub out_w: usize,
}

impl Upsampler {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize, dtype: DType, device: &Device) -> Result<Self> {
        let rows = Tensor::from_vec(interp_matrix(out_h, in_h), (out_h, in_h), device)?.to_dtype(dtype)?;
        let cols_t = Tensor::from_vec(interp_matrix(out_w, in_w), (out_w, in_w), device)?
            .to_dtype(dtype)?
            .t()?
            .contiguous()?;
        Ok(Self {
            rows,
            cols_t,
            out_h,
            out_w,
        })
    }

    pub fn forward(&self, maps: &Tensor) -> Result<Tensor> {
        let y = self.rows.broadcast_matmul(maps)?;
        Ok(y.broadcast_matmul(&self.cols_t)?)
    }
}

/// Nearest-neighbour 2x upsampling of a [1, C, H, W] map.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let y = x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?;
    Ok(y.reshape((b, c, h * 2, w * 2))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn sigmoid_and_softplus_match_scalar_formulas() {
        let x = t(&[-60.0, -2.0, 0.0, 3.0, 60.0], &[5]);
        let s = to_f64_vec(&sigmoid(&x).unwrap()).unwrap();
        let sp = to_f64_vec(&softplus(&x).unwrap()).unwrap();
        for (i, xv) in [-60.0f64, -2.0, 0.0, 3.0, 60.0].iter().enumerate() {
            assert!((s[i] - 1.0 / (1.0 + (-xv).exp())).abs() < 1e-12);
            assert!((sp[i] - (1.0 + xv.exp()).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn upsampler_preserves_constants_and_is_identity_at_same_size() {
        let dev = Device::Cpu;
        let up = Upsampler::new(4, 4, 16, 16, DType::F64, &dev).unwrap();
        let x = (Tensor::ones((2, 4, 4), DType::F64, &dev).unwrap() * 3.0).unwrap();
        let y = to_f64_vec(&up.forward(&x).unwrap()).unwrap();
        assert!(y.iter().all(|v| (v - 3.0).abs() < 1e-12));
        let same = Upsampler::new(3, 5, 3, 5, DType::F64, &dev).unwrap();
        let x = Tensor::arange(0f64, 15.0, &dev).unwrap().reshape((1, 3, 5)).unwrap();
        let y = same.forward(&x).unwrap();
        assert_eq!(to_f64_vec(&x).unwrap(), to_f64_vec(&y).unwrap());
    }

    #[test]
    fn position_code_is_bounded_and_position_dependent() {
        let p = sinusoidal_position_code(8, 4, 4, DType::F64, &Device::Cpu).unwrap();
        let v = to_f64_vec(&p).unwrap();
        assert!(v.iter().all(|x| x.abs() <= 1.0));
        let at = |c: usize, y: usize, x: usize| v[(c * 4 + y) * 4 + x];
        assert_ne!(at(0, 0, 0), at(0, 1, 0));
        assert_eq!(at(0, 1, 0), at(0, 1, 3));
        assert_ne!(at(4, 0, 0), at(4, 0, 1));
    }

    #[test]
    fn same_seed_same_parameters() {
        let build = || {
            let mut s = ParamStore::new(DType::F32, 7);
            Linear::new(&mut s.root().pp("a"), 4, 3).unwrap();
            to_f64_vec(s.get("a.weight").unwrap()).unwrap()
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn duplicate_parameter_names_are_rejected() {
        let mut s = ParamStore::new(DType::F32, 0);
        Linear::new(&mut s.root().pp("x"), 2, 2).unwrap();
        assert!(Linear::new(&mut s.root().pp("x"), 2, 2).is_err());
    }
}
