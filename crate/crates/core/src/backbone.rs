//! Condition encoder and velocity UNet.
//!
//! The condition encoder maps the RGB input to a 256-channel feature map at
//! latent resolution, which is concatenated with the flow state at the UNet
//! input, and to three further maps that are added pointwise to the UNet's
//! input-convolution output and to its two downsampling-block outputs.
//!
//! Encoder resolutions: blocks 1-3 halve the resolution (H/8 after block 3),
//! block 4 keeps H/8, blocks 5 and 6 halve again (H/16, H/32). Blocks 4-6
//! therefore line up with the three injection sites.

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Module, Tensor};

use crate::error::{Error, Result};
use crate::nn::{self, join, Conv2d, Init, Linear, ParamStore, ResidualBlock, SpatialAttention, Upsample};

/// Architecture and ablation knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Input side length in pixels; must be divisible by 32.
    pub image_size: usize,
    pub latent_channels: usize,
    pub base_width: usize,
    /// Residual stages in the UNet: 4 (two down, two up) or 5 (adds a bottleneck).
    pub unet_depth: usize,
    /// 1-based stage indices carrying self-attention.
    pub attention_stages: Vec<usize>,
    pub use_concatenation: bool,
    pub time_embed_dim: usize,
    pub encoder_blocks: usize,
    /// Width of the encoder feature map concatenated with the flow state.
    pub concat_channels: usize,
    pub width_cap: usize,
    pub head_dim: usize,
    pub vae_width: usize,
    pub disc_width: usize,
}

/// Ablation variants of the velocity network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ablation {
    Full,
    NoConcat,
    FiveBlocks,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::NoConcat, Ablation::FiveBlocks, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoConcat => "no_concat",
            Ablation::FiveBlocks => "five_blocks",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_concat" => Ok(Ablation::NoConcat),
            "five_blocks" => Ok(Ablation::FiveBlocks),
            other => Err(Error::Config(format!(
                "unknown ablation preset {other:?} (expected full, no_concat or five_blocks)"
            ))),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    /// CPU-trainable preset at 64x64.
    pub fn tiny() -> Self {
        Self {
            image_size: 64,
            latent_channels: 8,
            base_width: 8,
            unet_depth: 4,
            attention_stages: vec![2, 3],
            use_concatenation: true,
            time_embed_dim: 64,
            encoder_blocks: 6,
            concat_channels: 64,
            width_cap: 512,
            head_dim: 32,
            vae_width: 8,
            disc_width: 16,
        }
    }

    /// Full-size preset at 256x256.
    pub fn paper() -> Self {
        Self {
            image_size: 256,
            latent_channels: 8,
            base_width: 64,
            unet_depth: 4,
            attention_stages: vec![2, 3],
            use_concatenation: true,
            time_embed_dim: 128,
            encoder_blocks: 6,
            concat_channels: 256,
            width_cap: 512,
            head_dim: 32,
            vae_width: 64,
            disc_width: 64,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown model preset {other:?}"))),
        }
    }

    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        let mut cfg = self.clone();
        match ablation {
            Ablation::Full => {}
            Ablation::NoConcat => cfg.use_concatenation = false,
            Ablation::FiveBlocks => {
                cfg.unet_depth = 5;
                cfg.attention_stages = vec![2, 3, 4];
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad(format!("image_size {} must be a positive multiple of 32", self.image_size));
        }
        if !(4..=5).contains(&self.unet_depth) {
            return bad(format!("unet_depth must be 4 or 5, got {}", self.unet_depth));
        }
        if let Some(s) = self
            .attention_stages
            .iter()
            .find(|&&s| s == 0 || s > self.unet_depth)
        {
            return bad(format!("attention stage {s} outside 1..={}", self.unet_depth));
        }
        if self.encoder_blocks != 6 {
            return bad(format!("encoder_blocks must be 6, got {}", self.encoder_blocks));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return bad(format!("time_embed_dim must be even, got {}", self.time_embed_dim));
        }
        for (name, v) in [
            ("latent_channels", self.latent_channels),
            ("base_width", self.base_width),
            ("concat_channels", self.concat_channels),
            ("width_cap", self.width_cap),
            ("head_dim", self.head_dim),
            ("vae_width", self.vae_width),
            ("disc_width", self.disc_width),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    pub fn latent_size(&self) -> usize {
        self.image_size / 8
    }

    fn cap(&self, w: usize) -> usize {
        w.min(self.width_cap)
    }

    /// Encoder widths at H, H/2 and H/4.
    pub fn encoder_widths(&self) -> [usize; 3] {
        let b = self.base_width;
        [self.cap(b), self.cap(2 * b), self.cap(4 * b)]
    }

    /// UNet widths at H/8, H/16 and H/32.
    pub fn unet_widths(&self) -> [usize; 3] {
        let b = self.base_width;
        [self.cap(4 * b), self.cap(8 * b), self.cap(16 * b)]
    }

    pub fn unet_input_channels(&self) -> usize {
        if self.use_concatenation {
            self.latent_channels + self.concat_channels
        } else {
            self.latent_channels
        }
    }

    fn has_attention(&self, stage: usize) -> bool {
        self.attention_stages.contains(&stage)
    }
}

/// Encoder outputs consumed by the UNet.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    /// `(B, concat_channels, H/8, W/8)`.
    pub concat: Tensor,
    /// Added to the input-conv output (H/8) and the two downsampling outputs (H/16, H/32).
    pub inject: [Tensor; 3],
}

impl FeatureBundle {
    /// Same bundle with the injected maps replaced by zeros.
    pub fn with_zero_injection(&self) -> Result<Self> {
        Ok(Self {
            concat: self.concat.clone(),
            inject: [
                self.inject[0].zeros_like()?,
                self.inject[1].zeros_like()?,
                self.inject[2].zeros_like()?,
            ],
        })
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    down: Option<Conv2d>,
    block: ResidualBlock,
}

/// Six residual blocks (no attention, no time input) after a stem convolution.
#[derive(Clone, Debug)]
pub struct ConditionEncoder {
    stem: Conv2d,
    blocks: Vec<EncoderBlock>,
    image_size: usize,
}

impl ConditionEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let [e0, e1, e2] = cfg.encoder_widths();
        let [u0, u1, u2] = cfg.unet_widths();
        let stem = Conv2d::same3(store, &join(prefix, "stem"), 3, e0)?;
        // (in, out, downsample first)
        let plan = [
            (e0, e1, true),
            (e1, e2, true),
            (e2, cfg.concat_channels, true),
            (cfg.concat_channels, u0, false),
            (u0, u1, true),
            (u1, u2, true),
        ];
        let mut blocks = Vec::with_capacity(plan.len());
        for (i, (cin, cout, down)) in plan.into_iter().enumerate() {
            let p = join(prefix, &format!("block{}", i + 1));
            let down = down
                .then(|| nn::downsample(store, &join(&p, "down"), cin, cin))
                .transpose()?;
            let block = ResidualBlock::new(store, &join(&p, "res"), cin, cout, None)?;
            blocks.push(EncoderBlock { down, block });
        }
        Ok(Self {
            stem,
            blocks,
            image_size: cfg.image_size,
        })
    }

    /// `image`: `(B, 3, H, W)` with `H = W = image_size`.
    pub fn forward(&self, image: &Tensor) -> Result<FeatureBundle> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::shape(
                "condition encoder input",
                &[c, h, w],
                &[3, self.image_size, self.image_size],
            ));
        }
        let mut x = self.stem.forward(image)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            if let Some(d) = &b.down {
                x = d.forward(&x)?;
            }
            x = b.block.forward(&x, None)?;
            outs.push(x.clone());
        }
        Ok(FeatureBundle {
            concat: outs[2].clone(),
            inject: [outs[3].clone(), outs[4].clone(), outs[5].clone()],
        })
    }
}

#[derive(Clone, Debug)]
struct Stage {
    block: ResidualBlock,
    attn: Option<SpatialAttention>,
}

impl Stage {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        (cin, cout): (usize, usize),
        time_dim: usize,
        attn: bool,
        head_dim: usize,
    ) -> Result<Self> {
        let block = ResidualBlock::new(store, &join(prefix, "res"), cin, cout, Some(time_dim))?;
        let attn = attn
            .then(|| SpatialAttention::new(store, &join(prefix, "attn"), cout, head_dim))
            .transpose()?;
        Ok(Self { block, attn })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.block.forward(x, Some(temb))?;
        match &self.attn {
            Some(a) => a.forward(&h),
            None => Ok(h),
        }
    }
}

/// Velocity network `u(x_t, t | image features)`.
#[derive(Clone, Debug)]
pub struct Unet {
    time_dim: usize,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    down1: Stage,
    down1_ds: Conv2d,
    down2: Stage,
    down2_ds: Conv2d,
    mid: Option<Stage>,
    up1_us: Upsample,
    up1: Stage,
    up2_us: Upsample,
    up2: Stage,
    out_norm: candle_nn::GroupNorm,
    conv_out: Conv2d,
    latent_channels: usize,
    latent_size: usize,
    use_concatenation: bool,
    concat_channels: usize,
}

impl Unet {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let [u0, u1, u2] = cfg.unet_widths();
        let td = cfg.time_embed_dim;
        let hd = cfg.head_dim;
        let p = |s: &str| join(prefix, s);
        let time_in = Linear::new(store, &p("time.fc1"), td, td)?;
        let time_out = Linear::new(store, &p("time.fc2"), td, td)?;
        let conv_in = Conv2d::same3(store, &p("conv_in"), cfg.unet_input_channels(), u0)?;
        let mut stage_no = 0;
        let mut next_attn = || {
            stage_no += 1;
            cfg.has_attention(stage_no)
        };
        let down1 = Stage::new(store, &p("down1"), (u0, u1), td, next_attn(), hd)?;
        let down1_ds = nn::downsample(store, &p("down1.ds"), u1, u1)?;
        let down2 = Stage::new(store, &p("down2"), (u1, u2), td, next_attn(), hd)?;
        let down2_ds = nn::downsample(store, &p("down2.ds"), u2, u2)?;
        let mid = (cfg.unet_depth == 5)
            .then(|| Stage::new(store, &p("mid"), (u2, u2), td, next_attn(), hd))
            .transpose()?;
        let up1_us = Upsample::new(store, &p("up1.us"), u2, u2)?;
        let up1 = Stage::new(store, &p("up1"), (u2 + u1, u1), td, next_attn(), hd)?;
        let up2_us = Upsample::new(store, &p("up2.us"), u1, u1)?;
        let up2 = Stage::new(store, &p("up2"), (u1 + u0, u0), td, next_attn(), hd)?;
        let out_norm = nn::group_norm(store, &p("out_norm"), u0)?;
        let conv_out = Conv2d::with_init(
            store,
            &p("conv_out"),
            (u0, cfg.latent_channels, 3),
            (1, 1),
            Init::Zeros,
        )?;
        Ok(Self {
            time_dim: td,
            time_in,
            time_out,
            conv_in,
            down1,
            down1_ds,
            down2,
            down2_ds,
            mid,
            up1_us,
            up1,
            up2_us,
            up2,
            out_norm,
            conv_out,
            latent_channels: cfg.latent_channels,
            latent_size: cfg.latent_size(),
            use_concatenation: cfg.use_concatenation,
            concat_channels: cfg.concat_channels,
        })
    }

    /// Channels consumed by the first convolution.
    pub fn input_channels(&self) -> usize {
        self.conv_in.in_channels()
    }

    /// Final projection, zero at initialization.
    pub fn output_conv(&self) -> &Conv2d {
        &self.conv_out
    }

    /// `x_t`: `(B, C_lat, H/8, W/8)`; `t`: one time per batch item.
    pub fn forward(&self, x_t: &Tensor, bundle: &FeatureBundle, t: &[f64]) -> Result<Tensor> {
        self.forward_impl(x_t, &bundle.concat, Some(&bundle.inject), t)
    }

    /// Forward pass that skips the pointwise feature injection entirely.
    pub fn forward_without_injection(
        &self,
        x_t: &Tensor,
        bundle: &FeatureBundle,
        t: &[f64],
    ) -> Result<Tensor> {
        self.forward_impl(x_t, &bundle.concat, None, t)
    }

    fn time_embedding(&self, t: &[f64], like: &Tensor) -> Result<Tensor> {
        let e = nn::sinusoidal_embedding(t, self.time_dim, like.device(), like.dtype())?;
        Ok(self.time_out.forward(&self.time_in.forward(&e)?.silu()?)?)
    }

    fn check_inputs(&self, x_t: &Tensor, concat: &Tensor, t: &[f64]) -> Result<usize> {
        let (b, c, h, w) = x_t.dims4()?;
        let s = self.latent_size;
        if c != self.latent_channels || h != s || w != s {
            return Err(Error::shape("unet latent", &[c, h, w], &[self.latent_channels, s, s]));
        }
        if t.len() != b {
            return Err(Error::shape("unet times", &[t.len()], &[b]));
        }
        if self.use_concatenation {
            let want = [b, self.concat_channels, h, w];
            if concat.dims() != want {
                return Err(Error::shape("unet concat features", concat.dims(), &want));
            }
        }
        Ok(b)
    }

    fn forward_impl(
        &self,
        x_t: &Tensor,
        concat: &Tensor,
        inject: Option<&[Tensor; 3]>,
        t: &[f64],
    ) -> Result<Tensor> {
        self.check_inputs(x_t, concat, t)?;
        let temb = self.time_embedding(t, x_t)?;
        let add = |h: Tensor, site: usize| -> Result<Tensor> {
            match inject {
                Some(feats) => {
                    let f = &feats[site];
                    if f.dims() != h.dims() {
                        return Err(Error::shape("feature injection", f.dims(), h.dims()));
                    }
                    Ok((h + f)?)
                }
                None => Ok(h),
            }
        };

        let input = if self.use_concatenation {
            Tensor::cat(&[x_t, concat], 1)?
        } else {
            x_t.clone()
        };
        let h0 = add(self.conv_in.forward(&input)?, 0)?;
        let h1 = add(
            self.down1_ds.forward(&self.down1.forward(&h0, &temb)?)?,
            1,
        )?;
        let mut h = add(
            self.down2_ds.forward(&self.down2.forward(&h1, &temb)?)?,
            2,
        )?;
        if let Some(mid) = &self.mid {
            h = mid.forward(&h, &temb)?;
        }
        let h = self.up1_us.forward(&h)?;
        let h = self.up1.forward(&Tensor::cat(&[&h, &h1], 1)?, &temb)?;
        let h = self.up2_us.forward(&h)?;
        let h = self.up2.forward(&Tensor::cat(&[&h, &h0], 1)?, &temb)?;
        let h = self.out_norm.forward(&h)?.silu()?;
        Ok(self.conv_out.forward(&h)?)
    }
}

/// Condition encoder plus UNet, sharing one parameter store.
#[derive(Debug)]
pub struct FlowNetwork {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: ConditionEncoder,
    pub unet: Unet,
    encode_calls: AtomicUsize,
    unet_calls: AtomicUsize,
}

impl FlowNetwork {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype);
        let encoder = ConditionEncoder::new(&mut store, "cond", cfg)?;
        let unet = Unet::new(&mut store, "unet", cfg)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            unet,
            encode_calls: AtomicUsize::new(0),
            unet_calls: AtomicUsize::new(0),
        })
    }

    pub fn encode(&self, image: &Tensor) -> Result<FeatureBundle> {
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        self.encoder.forward(image)
    }

    pub fn velocity(&self, x_t: &Tensor, bundle: &FeatureBundle, t: &[f64]) -> Result<Tensor> {
        self.unet_calls.fetch_add(1, Ordering::Relaxed);
        self.unet.forward(x_t, bundle, t)
    }

    /// `(condition_encode calls, unet_forward calls)` since construction or the last reset.
    pub fn call_counts(&self) -> (usize, usize) {
        (
            self.encode_calls.load(Ordering::Relaxed),
            self.unet_calls.load(Ordering::Relaxed),
        )
    }

    pub fn reset_call_counts(&self) {
        self.encode_calls.store(0, Ordering::Relaxed);
        self.unet_calls.store(0, Ordering::Relaxed);
    }
}

/// Learnable element counts per network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub condition_encoder: usize,
    pub unet: usize,
    pub vae_encoder: usize,
    pub vae_decoder: usize,
    pub discriminator: usize,
}

impl ParamCount {
    /// Networks needed to decompose an image.
    pub fn inference(&self) -> usize {
        self.condition_encoder + self.unet + self.vae_decoder
    }

    /// Everything trained at some point.
    pub fn training(&self) -> usize {
        self.inference() + self.vae_encoder + self.discriminator
    }
}

pub fn count_parameters(cfg: &ModelConfig) -> Result<ParamCount> {
    let mut store = ParamStore::shape_only();
    ConditionEncoder::new(&mut store, "cond", cfg)?;
    Unet::new(&mut store, "unet", cfg)?;
    crate::vae::VaeEncoder::new(&mut store, "vae.encoder", cfg)?;
    crate::vae::VaeDecoder::new(&mut store, "vae.decoder", cfg)?;
    crate::vae::Discriminator::new(&mut store, "disc", cfg)?;
    Ok(ParamCount {
        condition_encoder: store.num_elements_with_prefix("cond."),
        unet: store.num_elements_with_prefix("unet."),
        vae_encoder: store.num_elements_with_prefix("vae.encoder."),
        vae_decoder: store.num_elements_with_prefix("vae.decoder."),
        discriminator: store.num_elements_with_prefix("disc."),
    })
}
