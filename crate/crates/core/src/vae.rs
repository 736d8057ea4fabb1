//! Shading autoencoder, patch discriminator and the stage-one losses.
//!
//! Objective before `adv_start_epoch`: `rec + kl_weight*KL + perc_weight*perc`.
//! From `adv_start_epoch` on, `adv_weight * g_loss` is added and the
//! discriminator is updated after every generator step.

use candle_core::{DType, Module, Tensor};
use rand::Rng;

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::flow::all_finite;
use crate::nn::{self, join, Conv2d, ParamStore, ResidualBlock, Upsample};
use crate::optim::Adam;

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// Diagonal Gaussian over the latent.
#[derive(Clone, Debug)]
pub struct LatentDistribution {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl LatentDistribution {
    pub fn new(mean: Tensor, logvar: Tensor) -> Result<Self> {
        if mean.dims() != logvar.dims() {
            return Err(Error::shape("latent distribution", mean.dims(), logvar.dims()));
        }
        Ok(Self {
            mean,
            logvar: logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)?,
        })
    }

    /// Reparameterized draw `mean + exp(logvar / 2) * eps`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<Tensor> {
        let eps = crate::rng::standard_normal(
            self.mean.shape().clone(),
            rng,
            self.mean.device(),
            self.mean.dtype(),
        )?;
        Ok((&self.mean + ((&self.logvar * 0.5)?.exp()? * eps)?)?)
    }
}

/// Loss coefficients and the adversarial switch-on epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLossWeights {
    pub kl_weight: f64,
    pub perc_weight: f64,
    pub adv_weight: f64,
    pub adv_start_epoch: usize,
}

impl Default for VaeLossWeights {
    fn default() -> Self {
        Self {
            kl_weight: 0.005,
            perc_weight: 1.0,
            adv_weight: 0.1,
            adv_start_epoch: 90,
        }
    }
}

impl VaeLossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.kl_weight, self.perc_weight, self.adv_weight]
            .iter()
            .any(|w| !w.is_finite() || *w < 0.0)
        {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    pub fn adversarial_active(&self, epoch: usize) -> bool {
        epoch >= self.adv_start_epoch
    }
}

fn vae_widths(cfg: &ModelConfig) -> [usize; 4] {
    let v = cfg.vae_width;
    let c = |w: usize| w.min(cfg.width_cap);
    [c(v), c(2 * v), c(4 * v), c(4 * v)]
}

/// `1 x H x W` shading to a latent distribution at `H/8 x W/8`.
#[derive(Clone, Debug)]
pub struct VaeEncoder {
    stem: Conv2d,
    levels: Vec<(Conv2d, ResidualBlock)>,
    mid: ResidualBlock,
    out_norm: candle_nn::GroupNorm,
    out: Conv2d,
    latent_channels: usize,
}

impl VaeEncoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let w = vae_widths(cfg);
        let p = |s: &str| join(prefix, s);
        let stem = Conv2d::same3(store, &p("stem"), 1, w[0])?;
        let mut levels = Vec::new();
        for i in 1..4 {
            let lp = p(&format!("level{i}"));
            let down = nn::downsample(store, &join(&lp, "down"), w[i - 1], w[i - 1])?;
            let res = ResidualBlock::new(store, &join(&lp, "res"), w[i - 1], w[i], None)?;
            levels.push((down, res));
        }
        let mid = ResidualBlock::new(store, &p("mid"), w[3], w[3], None)?;
        let out_norm = nn::group_norm(store, &p("out_norm"), w[3])?;
        let out = Conv2d::same3(store, &p("out"), w[3], 2 * cfg.latent_channels)?;
        Ok(Self {
            stem,
            levels,
            mid,
            out_norm,
            out,
            latent_channels: cfg.latent_channels,
        })
    }

    /// `s0`: `(B, 1, H, W)` with `H`, `W` divisible by 8.
    pub fn forward(&self, s0: &Tensor) -> Result<LatentDistribution> {
        let (_, c, h, w) = s0.dims4()?;
        if c != 1 || h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!(
                "vae encoder wants 1 x H x W with H, W divisible by 8, got {c} x {h} x {w}"
            )));
        }
        let mut x = self.stem.forward(s0)?;
        for (down, res) in &self.levels {
            x = res.forward(&down.forward(&x)?, None)?;
        }
        let x = self.mid.forward(&x, None)?;
        let moments = self.out.forward(&self.out_norm.forward(&x)?.silu()?)?;
        let l = self.latent_channels;
        LatentDistribution::new(moments.narrow(1, 0, l)?, moments.narrow(1, l, l)?)
    }
}

/// Latent back to a `1 x H x W` shading image in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct VaeDecoder {
    conv_in: Conv2d,
    mid: ResidualBlock,
    levels: Vec<(Upsample, ResidualBlock)>,
    out_norm: candle_nn::GroupNorm,
    out: Conv2d,
    latent_channels: usize,
}

impl VaeDecoder {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let w = vae_widths(cfg);
        let p = |s: &str| join(prefix, s);
        let conv_in = Conv2d::same3(store, &p("conv_in"), cfg.latent_channels, w[3])?;
        let mid = ResidualBlock::new(store, &p("mid"), w[3], w[3], None)?;
        let mut levels = Vec::new();
        for i in (1..4).rev() {
            let lp = p(&format!("level{i}"));
            let up = Upsample::new(store, &join(&lp, "up"), w[i], w[i])?;
            let res = ResidualBlock::new(store, &join(&lp, "res"), w[i], w[i - 1], None)?;
            levels.push((up, res));
        }
        let out_norm = nn::group_norm(store, &p("out_norm"), w[0])?;
        let out = Conv2d::same3(store, &p("out"), w[0], 1)?;
        Ok(Self {
            conv_in,
            mid,
            levels,
            out_norm,
            out,
            latent_channels: cfg.latent_channels,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.latent_channels {
            return Err(Error::shape("vae decoder latent", &[c], &[self.latent_channels]));
        }
        let mut x = self.mid.forward(&self.conv_in.forward(z)?, None)?;
        for (up, res) in &self.levels {
            x = res.forward(&up.forward(&x)?, None)?;
        }
        let x = self.out.forward(&self.out_norm.forward(&x)?.silu()?)?;
        Ok(candle_nn::ops::sigmoid(&x)?)
    }
}

/// Four stride-2 4x4 convolutions ending in a one-channel logit map.
#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.disc_width;
        let c = |w: usize| w.min(cfg.width_cap);
        let chans = [1, c(d), c(2 * d), c(4 * d), 1];
        let convs = chans
            .windows(2)
            .enumerate()
            .map(|(i, io)| Conv2d::new(store, &join(prefix, &format!("conv{}", i + 1)), io[0], io[1], 4, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { convs })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if i != last {
                h = candle_nn::ops::leaky_relu(&h, 0.2)?;
            }
        }
        Ok(h)
    }
}

/// Multi-level feature maps used by the perceptual loss.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// Fixed, seeded, untrained five-level strided convolution pyramid.
#[derive(Clone, Debug)]
pub struct RandomPyramid {
    levels: Vec<(Tensor, Tensor)>,
}

impl RandomPyramid {
    pub const CHANNELS: [usize; 5] = [8, 16, 32, 32, 32];

    pub fn new(seed: u64, dtype: DType) -> Result<Self> {
        // Constants, not trainable: built in a throwaway store.
        let mut store = ParamStore::new(seed, dtype);
        let mut cin = 1;
        let mut levels = Vec::new();
        for (i, &cout) in Self::CHANNELS.iter().enumerate() {
            let conv = Conv2d::new(&mut store, &format!("level{i}"), cin, cout, 3, 2, 1)?;
            levels.push((conv.weight.detach(), conv.bias.detach()));
            cin = cout;
        }
        Ok(Self { levels })
    }
}

impl FeatureExtractor for RandomPyramid {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut h = x.clone();
        let mut out = Vec::with_capacity(self.levels.len());
        for (w, b) in &self.levels {
            let (w, b) = (w.to_dtype(h.dtype())?, b.to_dtype(h.dtype())?);
            h = h.conv2d(&w, 1, 2, 1, 1)?.broadcast_add(&b.reshape((1, (), 1, 1))?)?;
            h = candle_nn::ops::leaky_relu(&h, 0.2)?;
            out.push(h.clone());
        }
        Ok(out)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, context: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(context, a.dims(), b.dims()));
    }
    Ok(())
}

/// Mean squared reconstruction error.
pub fn rec_loss(s_hat: &Tensor, s0: &Tensor) -> Result<Tensor> {
    same_shape(s_hat, s0, "rec_loss")?;
    Ok((s_hat - s0)?.sqr()?.mean_all()?)
}

/// Element-mean KL divergence to the standard normal.
pub fn kl_loss(d: &LatentDistribution) -> Result<Tensor> {
    if !all_finite(&d.mean)? || !all_finite(&d.logvar)? {
        return Err(Error::Numerical("non-finite latent moments in kl_loss".into()));
    }
    let inner = ((d.logvar.clone() + 1.0)? - d.mean.sqr()? - d.logvar.exp()?)?;
    Ok((inner.mean_all()? * -0.5)?)
}

/// Sum over extractor levels of mean squared feature differences.
pub fn perceptual_loss(s_hat: &Tensor, s0: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    same_shape(s_hat, s0, "perceptual_loss")?;
    let fa = extractor.features(s_hat)?;
    let fb = extractor.features(s0)?;
    let mut total: Option<Tensor> = None;
    for (a, b) in fa.iter().zip(&fb) {
        let term = (a - b)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Config("feature extractor produced no levels".into()))
}

/// Hinge losses from precomputed logits. `fake_logits_for_g` should carry the
/// generator graph; `fake_logits_detached` should not.
pub fn hinge_losses(
    real_logits: &Tensor,
    fake_logits_detached: &Tensor,
    fake_logits_for_g: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let real_term = (1.0 - real_logits)?.relu()?.mean_all()?;
    let fake_term = (fake_logits_detached + 1.0)?.relu()?.mean_all()?;
    let d_loss = (real_term + fake_term)?;
    let g_loss = fake_logits_for_g.mean_all()?.neg()?;
    Ok((d_loss, g_loss))
}

/// `(d_loss, g_loss)`; the discriminator term sees `fake` detached, so only
/// `g_loss` carries gradients back into the generator.
pub fn adversarial_losses(disc: &Discriminator, real: &Tensor, fake: &Tensor) -> Result<(Tensor, Tensor)> {
    same_shape(real, fake, "adversarial_losses")?;
    let real_logits = disc.forward(&real.detach())?;
    let fake_det = disc.forward(&fake.detach())?;
    let fake_g = disc.forward(fake)?;
    hinge_losses(&real_logits, &fake_det, &fake_g)
}

/// Encoder and decoder with their parameter store.
#[derive(Debug)]
pub struct Vae {
    pub store: ParamStore,
    pub encoder: VaeEncoder,
    pub decoder: VaeDecoder,
}

impl Vae {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(seed, dtype);
        let encoder = VaeEncoder::new(&mut store, "vae.encoder", cfg)?;
        let decoder = VaeDecoder::new(&mut store, "vae.decoder", cfg)?;
        Ok(Self {
            store,
            encoder,
            decoder,
        })
    }

    pub fn encode(&self, s0: &Tensor) -> Result<LatentDistribution> {
        self.encoder.forward(s0)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.forward(z)
    }

    /// `decode(encode(s0).mean)`.
    pub fn reconstruct(&self, s0: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(s0)?.mean)
    }
}

/// Per-step loss terms. `adv` is the generator hinge term, `disc` the
/// discriminator loss; both are `None` before the adversarial phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLossBreakdown {
    pub rec: f64,
    pub kl: f64,
    pub perc: f64,
    pub adv: Option<f64>,
    pub disc: Option<f64>,
    pub total: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Stage-one training state: VAE, discriminator and their optimizers.
pub struct VaeTrainer {
    pub vae: Vae,
    pub disc_store: ParamStore,
    pub disc: Discriminator,
    pub extractor: Box<dyn FeatureExtractor>,
    pub opt_gen: Adam,
    pub opt_disc: Adam,
    pub weights: VaeLossWeights,
}

impl VaeTrainer {
    pub fn new(cfg: &ModelConfig, weights: VaeLossWeights, lr: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        let vae = Vae::new(cfg, crate::rng::derive_seed(seed, 1), DType::F32)?;
        let mut disc_store = ParamStore::new(crate::rng::derive_seed(seed, 2), DType::F32);
        let disc = Discriminator::new(&mut disc_store, "disc", cfg)?;
        let extractor = Box::new(RandomPyramid::new(crate::rng::derive_seed(seed, 3), DType::F32)?);
        let opt_gen = Adam::new(&vae.store, lr);
        let opt_disc = Adam::new(&disc_store, lr);
        Ok(Self {
            vae,
            disc_store,
            disc,
            extractor,
            opt_gen,
            opt_disc,
            weights,
        })
    }

    /// Generator objective for a batch; returns the graph-carrying total and
    /// the breakdown of its terms.
    pub fn objective<R: Rng>(
        &self,
        s0: &Tensor,
        epoch: usize,
        rng: &mut R,
    ) -> Result<(Tensor, Tensor, VaeLossBreakdown)> {
        let dist = self.vae.encode(s0)?;
        let z = dist.sample(rng)?;
        let s_hat = self.vae.decode(&z)?;
        let rec = rec_loss(&s_hat, s0)?;
        let kl = kl_loss(&dist)?;
        let perc = perceptual_loss(&s_hat, s0, self.extractor.as_ref())?;
        let w = &self.weights;
        let mut total = ((&rec + (&kl * w.kl_weight)?)? + (&perc * w.perc_weight)?)?;
        let mut adv = None;
        if w.adversarial_active(epoch) {
            let g = self.disc.forward(&s_hat)?.mean_all()?.neg()?;
            adv = Some(scalar(&g)?);
            total = (total + (g * w.adv_weight)?)?;
        }
        let breakdown = VaeLossBreakdown {
            rec: scalar(&rec)?,
            kl: scalar(&kl)?,
            perc: scalar(&perc)?,
            adv,
            disc: None,
            total: scalar(&total)?,
        };
        Ok((total, s_hat, breakdown))
    }

    /// One generator update, followed by one discriminator update once the
    /// adversarial phase is active.
    pub fn step<R: Rng>(&mut self, s0: &Tensor, epoch: usize, rng: &mut R) -> Result<VaeLossBreakdown> {
        let (total, s_hat, mut breakdown) = self.objective(s0, epoch, rng)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite VAE loss at epoch {epoch}: {breakdown:?}"
            )));
        }
        let grads = total.backward()?;
        self.opt_gen.step(&grads)?;
        if self.weights.adversarial_active(epoch) {
            let real = self.disc.forward(s0)?;
            let fake = self.disc.forward(&s_hat.detach())?;
            let (d_loss, _) = hinge_losses(&real, &fake, &fake)?;
            let d = scalar(&d_loss)?;
            if !d.is_finite() {
                return Err(Error::Numerical(format!("non-finite discriminator loss at epoch {epoch}")));
            }
            let grads = d_loss.backward()?;
            self.opt_disc.step(&grads)?;
            breakdown.disc = Some(d);
        }
        Ok(breakdown)
    }
}

/// Reciprocal standard deviation of the latent means over `shading` batches.
pub fn latent_scale(vae: &Vae, batches: &[Tensor]) -> Result<f64> {
    let (mut n, mut sum, mut sq) = (0usize, 0f64, 0f64);
    for b in batches {
        let m = vae.encode(b)?.mean.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        n += m.len();
        sum += m.iter().sum::<f64>();
        sq += m.iter().map(|v| v * v).sum::<f64>();
    }
    if n == 0 {
        return Err(Error::Data("no shading samples for latent scale".into()));
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    if var <= 1e-12 {
        return Err(Error::Numerical("degenerate latent variance".into()));
    }
    Ok(1.0 / var.sqrt())
}
