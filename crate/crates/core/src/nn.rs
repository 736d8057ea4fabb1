//! Parameter storage and the small set of layers the networks are built from.

use candle_core::{DType, Device, Module, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How a fresh parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

impl Init {
    /// Variance-preserving uniform bound for a layer with `fan_in` inputs.
    pub fn fan_in(fan_in: usize) -> Self {
        Init::Uniform((3.0 / fan_in as f64).sqrt())
    }
}

/// Named trainable tensors, created in a deterministic order from a seed.
///
/// A store built with [`ParamStore::shape_only`] allocates zeros and skips the
/// random draws; it exists for parameter accounting.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    vars: Vec<(String, Var)>,
    rng: ChaCha8Rng,
    materialize: bool,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("tensors", &self.vars.len())
            .field("elements", &self.num_elements())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            vars: Vec::new(),
            rng: crate::rng::seeded(seed),
            materialize: true,
        }
    }

    pub fn shape_only() -> Self {
        Self {
            materialize: false,
            ..Self::new(0, DType::F32)
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Registers a parameter and returns a handle that tracks later updates.
    pub fn param(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<Tensor> {
        let name = name.into();
        if self.vars.iter().any(|(n, _)| *n == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f32> = match (init, self.materialize) {
            (Init::Ones, _) => vec![1.0; n],
            (Init::Uniform(b), true) => (0..n)
                .map(|_| self.rng.random_range(-b..=b) as f32)
                .collect(),
            _ => vec![0.0; n],
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.vars.push((name, var));
        Ok(handle)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_elements(&self) -> usize {
        self.vars.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn num_elements_with_prefix(&self, prefix: &str) -> usize {
        self.vars
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Flattened f32 copies of every parameter, in registration order.
    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        self.vars
            .iter()
            .map(|(n, v)| {
                let data = v
                    .as_tensor()
                    .to_dtype(DType::F32)?
                    .flatten_all()?
                    .to_vec1::<f32>()?;
                Ok((n.clone(), v.dims().to_vec(), data))
            })
            .collect()
    }

    /// Overwrites parameters by name. Every parameter of this store must be
    /// present with a matching shape; extra entries in `src` are ignored.
    pub fn import<'a, I>(&self, src: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a [usize], &'a [f32])>,
    {
        let lookup: std::collections::HashMap<&str, (&[usize], &[f32])> = src
            .into_iter()
            .map(|(n, s, d)| (n, (s, d)))
            .collect();
        for (name, var) in &self.vars {
            let (shape, data) = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if *shape != var.dims() {
                return Err(Error::shape("parameter import", shape, var.dims()));
            }
            let t = Tensor::from_slice(data, *shape, &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Copies values from another store with the same names (any dtype).
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (name, var) in &self.vars {
            let src = other
                .get(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            var.set(&src.as_tensor().to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Element-exact snapshot, for immutability checks.
    pub fn snapshot(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self.export()?.into_iter().map(|(_, _, d)| d).collect())
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Picks a group count with at least four channels per group where possible.
pub fn norm_groups(channels: usize) -> usize {
    [32, 16, 8, 4, 2]
        .into_iter()
        .find(|g| channels % g == 0 && channels / g >= 4)
        .unwrap_or(1)
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::with_init(
            store,
            prefix,
            (in_ch, out_ch, kernel),
            (stride, padding),
            Init::fan_in(in_ch * kernel * kernel),
        )
    }

    /// 3x3, stride 1, same padding.
    pub fn same3(store: &mut ParamStore, prefix: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Self::new(store, prefix, in_ch, out_ch, 3, 1, 1)
    }

    pub fn with_init(
        store: &mut ParamStore,
        prefix: &str,
        (in_ch, out_ch, kernel): (usize, usize, usize),
        (stride, padding): (usize, usize),
        init: Init,
    ) -> Result<Self> {
        let weight = store.param(join(prefix, "weight"), &[out_ch, in_ch, kernel, kernel], init)?;
        let bias = store.param(join(prefix, "bias"), &[out_ch], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dims1()?;
        y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, input: usize, output: usize) -> Result<Self> {
        let weight = store.param(join(prefix, "weight"), &[output, input], Init::fan_in(input))?;
        let bias = store.param(join(prefix, "bias"), &[output], Init::Zeros)?;
        Ok(Self { weight, bias })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        // x: (..., in)
        let w = self.weight.t()?;
        let y = match x.rank() {
            2 => x.matmul(&w)?,
            3 => x.broadcast_matmul(&w)?,
            r => candle_core::bail!("Linear expects rank 2 or 3 input, got {r}"),
        };
        y.broadcast_add(&self.bias)
    }
}

pub fn group_norm(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<candle_nn::GroupNorm> {
    let weight = store.param(join(prefix, "weight"), &[channels], Init::Ones)?;
    let bias = store.param(join(prefix, "bias"), &[channels], Init::Zeros)?;
    Ok(candle_nn::GroupNorm::new(
        weight,
        bias,
        channels,
        norm_groups(channels),
        1e-6,
    )?)
}

/// Stride-2 3x3 convolution.
pub fn downsample(store: &mut ParamStore, prefix: &str, in_ch: usize, out_ch: usize) -> Result<Conv2d> {
    Conv2d::new(store, prefix, in_ch, out_ch, 3, 2, 1)
}

/// Nearest-neighbour 2x upsampling followed by a 3x3 convolution.
#[derive(Clone, Debug)]
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new(store: &mut ParamStore, prefix: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::same3(store, &join(prefix, "conv"), in_ch, out_ch)?,
        })
    }
}

impl Module for Upsample {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.conv.forward(&x.upsample_nearest2d(h * 2, w * 2)?)
    }
}

/// Residual block: norm, SiLU, 3x3 conv, optional time shift, norm, SiLU,
/// 3x3 conv, plus an identity or 1x1 projected skip. Spatial size is kept.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    norm1: candle_nn::GroupNorm,
    conv1: Conv2d,
    time_proj: Option<Linear>,
    norm2: candle_nn::GroupNorm,
    pub conv2: Conv2d,
    skip: Option<Conv2d>,
    in_ch: usize,
}

impl ResidualBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        time_dim: Option<usize>,
    ) -> Result<Self> {
        let norm1 = group_norm(store, &join(prefix, "norm1"), in_ch)?;
        let conv1 = Conv2d::same3(store, &join(prefix, "conv1"), in_ch, out_ch)?;
        let time_proj = time_dim
            .map(|d| Linear::new(store, &join(prefix, "time_proj"), d, out_ch))
            .transpose()?;
        let norm2 = group_norm(store, &join(prefix, "norm2"), out_ch)?;
        let conv2 = Conv2d::same3(store, &join(prefix, "conv2"), out_ch, out_ch)?;
        let skip = (in_ch != out_ch)
            .then(|| Conv2d::new(store, &join(prefix, "skip"), in_ch, out_ch, 1, 1, 0))
            .transpose()?;
        Ok(Self {
            norm1,
            conv1,
            time_proj,
            norm2,
            conv2,
            skip,
            in_ch,
        })
    }

    /// `time` is the shared time embedding `(B, time_dim)`; ignored when the
    /// block was built without a time projection.
    pub fn forward(&self, x: &Tensor, time: Option<&Tensor>) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_ch {
            return Err(Error::shape("residual block channels", &[c], &[self.in_ch]));
        }
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(proj), Some(temb)) = (&self.time_proj, time) {
            let shift = proj.forward(&temb.silu()?)?;
            let (b, oc) = shift.dims2()?;
            h = h.broadcast_add(&shift.reshape((b, oc, 1, 1))?)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Pre-norm multi-head self-attention over spatial positions, with residual.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    norm: candle_nn::GroupNorm,
    qkv: Linear,
    out: Linear,
    heads: usize,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, head_dim: usize) -> Result<Self> {
        let heads = (channels / head_dim).max(1);
        if channels % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {channels} not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            norm: group_norm(store, &join(prefix, "norm"), channels)?,
            qkv: Linear::new(store, &join(prefix, "qkv"), channels, 3 * channels)?,
            out: Linear::new(store, &join(prefix, "out"), channels, channels)?,
            heads,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let n = h * w;
        let hd = c / self.heads;
        let tokens = self
            .norm
            .forward(x)?
            .reshape((b, c, n))?
            .transpose(1, 2)?
            .contiguous()?;
        let qkv = self.qkv.forward(&tokens)?; // (b, n, 3c)
        let split = |i: usize| -> candle_core::Result<Tensor> {
            qkv.narrow(D::Minus1, i * c, c)?
                .reshape((b, n, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()
        };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let scores = (q.matmul(&k.t()?)? / (hd as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let mixed = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, n, c))?;
        let out = self
            .out
            .forward(&mixed)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, c, h, w))?;
        Ok((x + out)?)
    }
}

/// Sinusoidal features of `t` scaled by 1000, `(len(t), dim)`.
pub fn sinusoidal_embedding(t: &[f64], dim: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    if dim < 2 || dim % 2 != 0 {
        return Err(Error::Config(format!("time embedding dim must be even, got {dim}")));
    }
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let arg = ti * 1000.0;
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let (sin, cos): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((arg * f).sin(), (arg * f).cos())).unzip();
        data.extend(sin);
        data.extend(cos);
    }
    Ok(Tensor::from_vec(data, (t.len(), dim), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_param_count_matches_hand_sum() {
        let mut store = ParamStore::shape_only();
        Conv2d::same3(&mut store, "c", 3, 8).unwrap();
        assert_eq!(store.num_elements(), 3 * 8 * 9 + 8);
        assert_eq!(store.num_elements(), 224);
    }

    #[test]
    fn residual_identity_when_branch_zeroed() {
        let mut store = ParamStore::new(3, DType::F32);
        let block = ResidualBlock::new(&mut store, "b", 8, 8, Some(16)).unwrap();
        block.conv2.weight.zero_set().unwrap();
        block.conv2.bias.zero_set().unwrap();
        let x = crate::rng::standard_normal((2, 8, 5, 5), &mut crate::rng::seeded(1), &Device::Cpu, DType::F32).unwrap();
        let t = crate::rng::standard_normal((2, 16), &mut crate::rng::seeded(2), &Device::Cpu, DType::F32).unwrap();
        let y = block.forward(&x, Some(&t)).unwrap();
        let diff = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn residual_projected_skip_when_branch_zeroed() {
        let mut store = ParamStore::new(3, DType::F32);
        let block = ResidualBlock::new(&mut store, "b", 4, 8, None).unwrap();
        block.conv2.weight.zero_set().unwrap();
        block.conv2.bias.zero_set().unwrap();
        let x = crate::rng::standard_normal((1, 4, 3, 3), &mut crate::rng::seeded(1), &Device::Cpu, DType::F32).unwrap();
        let y = block.forward(&x, None).unwrap();
        let skip = block.skip.as_ref().unwrap().forward(&x).unwrap();
        let diff = (y - skip).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn residual_zero_in_zero_out() {
        let mut store = ParamStore::new(5, DType::F32);
        let block = ResidualBlock::new(&mut store, "b", 8, 16, Some(8)).unwrap();
        let x = Tensor::zeros((1, 8, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let t = Tensor::zeros((1, 8), DType::F32, &Device::Cpu).unwrap();
        let y = block.forward(&x, Some(&t)).unwrap();
        assert_eq!(y.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn residual_is_deterministic_and_rejects_bad_channels() {
        let run = || {
            let mut store = ParamStore::new(9, DType::F32);
            let block = ResidualBlock::new(&mut store, "b", 8, 8, None).unwrap();
            let x = crate::rng::standard_normal((1, 8, 6, 6), &mut crate::rng::seeded(4), &Device::Cpu, DType::F32).unwrap();
            (block.forward(&x, None).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(), block)
        };
        let (a, block) = run();
        let (b, _) = run();
        assert_eq!(a, b);
        let bad = Tensor::zeros((1, 4, 6, 6), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(block.forward(&bad, None), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn attention_keeps_shape() {
        let mut store = ParamStore::new(1, DType::F32);
        let attn = SpatialAttention::new(&mut store, "a", 64, 32).unwrap();
        assert_eq!(attn.heads, 2);
        let x = crate::rng::standard_normal((2, 64, 3, 4), &mut crate::rng::seeded(0), &Device::Cpu, DType::F32).unwrap();
        assert_eq!(attn.forward(&x).unwrap().dims(), &[2, 64, 3, 4]);
    }

    #[test]
    fn import_rejects_shape_disagreement() {
        let mut a = ParamStore::new(0, DType::F32);
        a.param("w", &[2, 2], Init::Ones).unwrap();
        let data = [0.0f32; 3];
        let shape = [3usize];
        assert!(a.import([("w", &shape[..], &data[..])]).is_err());
    }
}
