//! Training stages, single-step inference and evaluation.
//!
//! Both stages draw their batch order from a per-epoch stream and their noise
//! from a per-step stream of the run seed, so a run restored from a checkpoint
//! continues exactly where the original would have been.

use candle_core::{DType, Device, Tensor};

use crate::backbone::{FlowNetwork, ModelConfig};
use crate::checkpoint::Checkpoint;
use crate::config::{model_from_kv, model_to_kv, TrainSchedule};
use crate::data::ScenePair;
use crate::error::{Error, Result};
use crate::flow::{euler_integrate, fm_loss, fm_loss_per_item, FlowConfig, FlowSample};
use crate::image_plane::ImagePlane;
use crate::metrics::MetricReport;
use crate::nn::ParamStore;
use crate::optim::Adam;
use crate::rng::{derive_seed, permutation, seeded, standard_normal, substream};
use crate::vae::{latent_scale, Vae, VaeDecoder, VaeLossWeights, VaeTrainer};

/// Lower bound applied to predicted shading before division.
pub const SHADING_FLOOR: f32 = 1e-3;
/// Bins of the per-time loss histogram.
pub const HIST_BINS: usize = 20;

const VAE_KIND: &str = "vae";
const FLOW_KIND: &str = "flow";

#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionResult {
    /// 1xHxW in `[SHADING_FLOOR, 1]`.
    pub shading: ImagePlane,
    /// 3xHxW in `[0, 1]`.
    pub albedo: ImagePlane,
    pub reconstruction: ImagePlane,
    /// Fraction of pixels where some channel of `I / S` left `[0, 1]`.
    pub clamped_fraction: f64,
    /// Per-pixel flag, row-major, set where clamping occurred.
    pub clamped: Vec<bool>,
}

/// `albedo * shading` with the shading channel broadcast.
pub fn reconstruct(albedo: &ImagePlane, shading: &ImagePlane) -> Result<ImagePlane> {
    if shading.channels() != 1 || albedo.height() != shading.height() || albedo.width() != shading.width() {
        return Err(Error::shape("reconstruct", &albedo.shape(), &shading.shape()));
    }
    Ok(ImagePlane::from_fn(albedo.channels(), albedo.height(), albedo.width(), |c, y, x| {
        albedo.get(c, y, x) * shading.get(0, y, x)
    }))
}

impl DecompositionResult {
    /// Albedo `clamp(I / S, 0, 1)` for a given shading.
    pub fn from_shading(image: &ImagePlane, shading: ImagePlane) -> Result<Self> {
        if image.channels() != 3 || shading.channels() != 1 {
            return Err(Error::shape("decompose", &image.shape(), &shading.shape()));
        }
        let (h, w) = (image.height(), image.width());
        let mut clamped = vec![false; h * w];
        let mut albedo = ImagePlane::zeros(3, h, w);
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let q = image.get(c, y, x) / shading.get(0, y, x);
                    if !(0.0..=1.0).contains(&q) {
                        clamped[y * w + x] = true;
                    }
                    albedo.set(c, y, x, q.clamp(0.0, 1.0));
                }
            }
        }
        let reconstruction = reconstruct(&albedo, &shading)?;
        let n = clamped.iter().filter(|c| **c).count();
        Ok(Self {
            shading,
            albedo,
            reconstruction,
            clamped_fraction: n as f64 / (h * w) as f64,
            clamped,
        })
    }

    pub fn reconstruct(&self) -> Result<ImagePlane> {
        reconstruct(&self.albedo, &self.shading)
    }
}

/// Constant shading at the mean luminance of the image.
pub fn constant_shading_baseline(image: &ImagePlane) -> Result<DecompositionResult> {
    let level = (image.luminance().mean() as f32).max(SHADING_FLOOR);
    DecompositionResult::from_shading(image, ImagePlane::filled(1, image.height(), image.width(), level))
}

fn stack(planes: &[&ImagePlane]) -> Result<Tensor> {
    ImagePlane::stack(planes, &Device::Cpu, DType::F32)
}

/// Batches of `order`, the last possibly short.
fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size)
}

/// Mean squared error of `decode(mean)` against the input, over a set of shadings.
pub fn vae_reconstruction_mse(vae: &Vae, shadings: &[ImagePlane], batch: usize) -> Result<f64> {
    let (mut acc, mut n) = (0.0, 0usize);
    for chunk in shadings.chunks(batch.max(1)) {
        let refs: Vec<&ImagePlane> = chunk.iter().collect();
        let x = stack(&refs)?;
        let y = vae.decode(&vae.encode(&x)?.mean)?;
        let d = (y - &x)?.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        acc += d;
        n += x.elem_count();
    }
    if n == 0 {
        return Err(Error::Data("no shading images".into()));
    }
    Ok(acc / n as f64)
}

fn ckpt_err(reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: std::path::PathBuf::new(),
        reason: reason.into(),
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

fn parse_cell(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse().map(Some).map_err(|_| ckpt_err(format!("bad log value {s:?}")))
    }
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T> {
    s.parse().map_err(|_| ckpt_err(format!("bad log value {s:?}")))
}

fn required_meta<'a>(ckpt: &'a Checkpoint, key: &str) -> Result<&'a str> {
    ckpt.meta.get(key).map(String::as_str).ok_or_else(|| ckpt_err(format!("missing metadata {key}")))
}

fn require_kind(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    if ckpt.kind != kind {
        return Err(ckpt_err(format!("expected a {kind} checkpoint, found {:?}", ckpt.kind)));
    }
    Ok(())
}

fn model_from_meta(ckpt: &Checkpoint) -> Result<ModelConfig> {
    model_from_kv(ckpt.meta.iter().map(|(k, v)| (k.as_str(), v.as_str())))
}

fn lookup<'a>(ckpt: &'a Checkpoint) -> impl Fn(&str) -> Option<(&'a [usize], &'a [f32])> + 'a {
    move |name| ckpt.get(name).map(|t| (t.shape.as_slice(), t.data.as_slice()))
}

// ---------------------------------------------------------------------------
// Stage one

#[derive(Clone, Debug, PartialEq)]
pub struct VaeLogRow {
    pub step: usize,
    pub epoch: usize,
    pub rec: f64,
    pub kl: f64,
    pub perc: f64,
    pub adv: Option<f64>,
    pub disc: Option<f64>,
    pub total: f64,
}

pub const VAE_LOG_COLUMNS: &str = "step,epoch,rec,kl,perc,adv,disc,total";

impl VaeLogRow {
    fn cells(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.rec,
            self.kl,
            self.perc,
            opt_cell(self.adv),
            opt_cell(self.disc),
            self.total
        )
    }

    fn parse(s: &str) -> Result<Self> {
        let f: Vec<&str> = s.split(',').collect();
        if f.len() != 8 {
            return Err(ckpt_err(format!("bad log row {s:?}")));
        }
        Ok(Self {
            step: parse_num(f[0])?,
            epoch: parse_num(f[1])?,
            rec: parse_num(f[2])?,
            kl: parse_num(f[3])?,
            perc: parse_num(f[4])?,
            adv: parse_cell(f[5])?,
            disc: parse_cell(f[6])?,
            total: parse_num(f[7])?,
        })
    }
}

pub fn vae_log_csv(rows: &[VaeLogRow]) -> String {
    let mut s = format!("{VAE_LOG_COLUMNS}\n");
    for r in rows {
        s.push_str(&r.cells());
        s.push('\n');
    }
    s
}

/// Resumable stage-one training state.
pub struct VaeStage {
    pub cfg: ModelConfig,
    pub weights: VaeLossWeights,
    pub schedule: TrainSchedule,
    pub seed: u64,
    pub trainer: VaeTrainer,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub log: Vec<VaeLogRow>,
}

impl VaeStage {
    pub fn new(cfg: &ModelConfig, weights: VaeLossWeights, schedule: &TrainSchedule, seed: u64) -> Result<Self> {
        schedule.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            weights,
            schedule: schedule.clone(),
            seed,
            trainer: VaeTrainer::new(cfg, weights, schedule.vae_lr, seed)?,
            epoch: 0,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.schedule.vae_epochs || self.schedule.max_steps.is_some_and(|m| self.step >= m)
    }

    /// Runs one epoch (or up to the step cap). `progress` sees every step.
    pub fn run_epoch(&mut self, shadings: &[ImagePlane], mut progress: impl FnMut(&VaeLogRow)) -> Result<()> {
        if shadings.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let order = permutation(shadings.len(), &mut substream(derive_seed(self.seed, 100), self.epoch as u64));
        for idx in batches(&order, self.schedule.batch_size) {
            if self.schedule.max_steps.is_some_and(|m| self.step >= m) {
                return Ok(());
            }
            let refs: Vec<&ImagePlane> = idx.iter().map(|&i| &shadings[i]).collect();
            let s0 = stack(&refs)?;
            let mut rng = substream(derive_seed(self.seed, 101), self.step as u64);
            let b = self.trainer.step(&s0, self.epoch, &mut rng)?;
            self.step += 1;
            let row = VaeLogRow {
                step: self.step,
                epoch: self.epoch,
                rec: b.rec,
                kl: b.kl,
                perc: b.perc,
                adv: b.adv,
                disc: b.disc,
                total: b.total,
            };
            progress(&row);
            self.log.push(row);
        }
        self.epoch += 1;
        Ok(())
    }

    /// Trains until the schedule is exhausted, calling `on_epoch` after each epoch.
    pub fn run(
        &mut self,
        shadings: &[ImagePlane],
        mut progress: impl FnMut(&VaeLogRow),
        mut on_epoch: impl FnMut(&Self) -> Result<()>,
    ) -> Result<()> {
        while !self.done() {
            self.run_epoch(shadings, &mut progress)?;
            on_epoch(self)?;
        }
        Ok(())
    }

    pub fn vae(&self) -> &Vae {
        &self.trainer.vae
    }

    /// Full state; `latent_scale` is recorded when given.
    pub fn to_checkpoint(&self, latent_scale: Option<f64>) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(VAE_KIND);
        for (k, v) in model_to_kv(&self.cfg) {
            ck.set_meta(k, v);
        }
        let w = &self.weights;
        ck.set_meta("vae.kl_weight", w.kl_weight);
        ck.set_meta("vae.perc_weight", w.perc_weight);
        ck.set_meta("vae.adv_weight", w.adv_weight);
        ck.set_meta("vae.adv_start_epoch", w.adv_start_epoch);
        ck.set_meta("seed", self.seed);
        ck.set_meta("epoch", self.epoch);
        ck.set_meta("step", self.step);
        ck.set_meta("opt.gen.steps", self.trainer.opt_gen.steps());
        ck.set_meta("opt.disc.steps", self.trainer.opt_disc.steps());
        ck.set_meta("log", self.log.iter().map(VaeLogRow::cells).collect::<Vec<_>>().join(";"));
        if let Some(s) = latent_scale {
            ck.set_meta("latent_scale", s);
        }
        ck.push_all(self.trainer.vae.store.export()?);
        ck.push_all(self.trainer.disc_store.export()?);
        ck.push_all(self.trainer.opt_gen.export("opt.gen")?);
        ck.push_all(self.trainer.opt_disc.export("opt.disc")?);
        Ok(ck)
    }

    /// Restores a stage-one run; the schedule may extend the original one.
    pub fn from_checkpoint(ckpt: &Checkpoint, schedule: &TrainSchedule) -> Result<Self> {
        require_kind(ckpt, VAE_KIND)?;
        let cfg = model_from_meta(ckpt)?;
        let meta = |k: &str| -> Result<f64> { parse_num(required_meta(ckpt, k)?) };
        let weights = VaeLossWeights {
            kl_weight: meta("vae.kl_weight")?,
            perc_weight: meta("vae.perc_weight")?,
            adv_weight: meta("vae.adv_weight")?,
            adv_start_epoch: parse_num(required_meta(ckpt, "vae.adv_start_epoch")?)?,
        };
        let seed: u64 = parse_num(required_meta(ckpt, "seed")?)?;
        let mut stage = Self::new(&cfg, weights, schedule, seed)?;
        stage.trainer.vae.store.import(ckpt.views())?;
        stage.trainer.disc_store.import(ckpt.views())?;
        let gen_steps = parse_num(required_meta(ckpt, "opt.gen.steps")?)?;
        let disc_steps = parse_num(required_meta(ckpt, "opt.disc.steps")?)?;
        stage.trainer.opt_gen.import("opt.gen", gen_steps, lookup(ckpt))?;
        stage.trainer.opt_disc.import("opt.disc", disc_steps, lookup(ckpt))?;
        stage.epoch = parse_num(required_meta(ckpt, "epoch")?)?;
        stage.step = parse_num(required_meta(ckpt, "step")?)?;
        let log = required_meta(ckpt, "log")?;
        stage.log = if log.is_empty() {
            Vec::new()
        } else {
            log.split(';').map(VaeLogRow::parse).collect::<Result<_>>()?
        };
        Ok(stage)
    }
}

/// Latent scale `1 / std` of the encoder means over a shading set.
pub fn compute_latent_scale(vae: &Vae, shadings: &[ImagePlane], batch: usize) -> Result<f64> {
    let mut xs = Vec::new();
    for chunk in shadings.chunks(batch.max(1)) {
        let refs: Vec<&ImagePlane> = chunk.iter().collect();
        xs.push(stack(&refs)?);
    }
    latent_scale(vae, &xs)
}

/// Trained VAE restored from a stage-one checkpoint, with its latent scale.
pub fn load_vae(ckpt: &Checkpoint) -> Result<(Vae, f64)> {
    require_kind(ckpt, VAE_KIND)?;
    let cfg = model_from_meta(ckpt)?;
    let vae = Vae::new(&cfg, 0, DType::F32)?;
    vae.store.import(ckpt.views())?;
    let scale = ckpt.meta_f64("latent_scale").ok_or_else(|| ckpt_err("VAE checkpoint has no latent_scale; training did not finish"))?;
    Ok((vae, scale))
}

// ---------------------------------------------------------------------------
// Stage two

/// Running mean loss per time bin over `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeHistogram {
    pub sums: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Default for TimeHistogram {
    fn default() -> Self {
        Self {
            sums: vec![0.0; HIST_BINS],
            counts: vec![0; HIST_BINS],
        }
    }
}

impl TimeHistogram {
    pub fn bin(t: f64) -> usize {
        ((t * HIST_BINS as f64) as usize).min(HIST_BINS - 1)
    }

    pub fn add(&mut self, t: f64, loss: f64) {
        let b = Self::bin(t);
        self.sums[b] += loss;
        self.counts[b] += 1;
    }

    pub fn mean(&self, bin: usize) -> Option<f64> {
        (self.counts[bin] > 0).then(|| self.sums[bin] / self.counts[bin] as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin,t_lo,t_hi,count,mean_loss\n");
        for b in 0..HIST_BINS {
            let w = 1.0 / HIST_BINS as f64;
            s.push_str(&format!(
                "{b},{},{},{},{}\n",
                b as f64 * w,
                (b + 1) as f64 * w,
                self.counts[b],
                opt_cell(self.mean(b))
            ));
        }
        s
    }

    fn encode(&self) -> String {
        (0..HIST_BINS).map(|b| format!("{}:{}", self.sums[b], self.counts[b])).collect::<Vec<_>>().join(";")
    }

    fn decode(s: &str) -> Result<Self> {
        let mut h = Self::default();
        let parts: Vec<&str> = s.split(';').collect();
        if parts.len() != HIST_BINS {
            return Err(ckpt_err("bad histogram"));
        }
        for (b, p) in parts.iter().enumerate() {
            let (sum, count) = p.split_once(':').unwrap_or((p, ""));
            h.sums[b] = parse_num(sum)?;
            h.counts[b] = parse_num(count)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowLogRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

pub fn flow_log_csv(rows: &[FlowLogRow]) -> String {
    let mut s = String::from("step,epoch,loss\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.step, r.epoch, r.loss));
    }
    s
}

/// Resumable stage-two training state. The VAE is only read, to build targets.
pub struct FlowStage {
    pub cfg: ModelConfig,
    pub flow: FlowConfig,
    pub schedule: TrainSchedule,
    pub seed: u64,
    pub net: FlowNetwork,
    pub opt: Adam,
    pub latent_scale: f64,
    decoder_params: Vec<(String, Vec<usize>, Vec<f32>)>,
    targets: Vec<Tensor>,
    images: Vec<Tensor>,
    pub epoch: usize,
    pub step: usize,
    pub log: Vec<FlowLogRow>,
    pub histogram: TimeHistogram,
}

impl FlowStage {
    /// Precomputes `x1 = scale * E(s0).mean` for every scene.
    pub fn new(
        cfg: &ModelConfig,
        flow: FlowConfig,
        schedule: &TrainSchedule,
        seed: u64,
        vae: &Vae,
        latent_scale: f64,
        scenes: &[ScenePair],
    ) -> Result<Self> {
        cfg.validate()?;
        flow.validate()?;
        schedule.validate()?;
        if scenes.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let size = cfg.image_size;
        let mut targets = Vec::with_capacity(scenes.len());
        let mut images = Vec::with_capacity(scenes.len());
        for chunk in scenes.chunks(schedule.batch_size) {
            for s in chunk {
                if s.image.shape() != [3, size, size] || s.shading.shape() != [1, size, size] {
                    return Err(Error::Data(format!(
                        "scene resolution {:?} does not match model size {size}",
                        s.image.shape()
                    )));
                }
            }
            let shading: Vec<&ImagePlane> = chunk.iter().map(|s| &s.shading).collect();
            let mean = vae.encode(&stack(&shading)?)?.mean.detach();
            let x1 = (mean * latent_scale)?;
            for i in 0..chunk.len() {
                targets.push(x1.get(i)?);
                images.push(chunk[i].image.to_tensor(&Device::Cpu, DType::F32)?.squeeze(0)?);
            }
        }
        let decoder_params = vae
            .store
            .export()?
            .into_iter()
            .filter(|(n, _, _)| n.starts_with("vae.decoder."))
            .collect();
        let net = FlowNetwork::new(cfg, derive_seed(seed, 1), DType::F32)?;
        let opt = Adam::new(&net.store, schedule.fm_lr);
        Ok(Self {
            cfg: cfg.clone(),
            flow,
            schedule: schedule.clone(),
            seed,
            net,
            opt,
            latent_scale,
            decoder_params,
            targets,
            images,
            epoch: 0,
            step: 0,
            log: Vec::new(),
            histogram: TimeHistogram::default(),
        })
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.schedule.fm_epochs || self.schedule.max_steps.is_some_and(|m| self.step >= m)
    }

    /// One optimizer step on the given scene indices; returns the batch loss.
    pub fn train_step(&mut self, idx: &[usize]) -> Result<f64> {
        let x1 = Tensor::stack(&idx.iter().map(|&i| &self.targets[i]).collect::<Vec<_>>(), 0)?;
        let img = Tensor::stack(&idx.iter().map(|&i| &self.images[i]).collect::<Vec<_>>(), 0)?;
        let mut rng = substream(derive_seed(self.seed, 201), self.step as u64);
        let sample = FlowSample::draw(&x1, &mut rng, &self.flow)?;
        let bundle = self.net.encode(&img)?;
        let u = self.net.velocity(&sample.x_t, &bundle, &sample.t)?;
        let loss = fm_loss(&u, &sample.v_t)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite flow loss at step {}", self.step + 1)));
        }
        for (t, l) in sample.t.iter().zip(fm_loss_per_item(&u, &sample.v_t)?) {
            self.histogram.add(*t, l);
        }
        let grads = loss.backward()?;
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(value)
    }

    pub fn run_epoch(&mut self, mut progress: impl FnMut(&FlowLogRow)) -> Result<()> {
        let order = permutation(self.targets.len(), &mut substream(derive_seed(self.seed, 200), self.epoch as u64));
        for idx in batches(&order, self.schedule.batch_size) {
            if self.schedule.max_steps.is_some_and(|m| self.step >= m) {
                return Ok(());
            }
            let loss = self.train_step(idx)?;
            let row = FlowLogRow {
                step: self.step,
                epoch: self.epoch,
                loss,
            };
            progress(&row);
            self.log.push(row);
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn run(
        &mut self,
        mut progress: impl FnMut(&FlowLogRow),
        mut on_epoch: impl FnMut(&Self) -> Result<()>,
    ) -> Result<()> {
        while !self.done() {
            self.run_epoch(&mut progress)?;
            on_epoch(self)?;
        }
        Ok(())
    }

    /// Model checkpoint; with `training_state` it also carries optimizer
    /// moments, counters, loss log and histogram for resuming.
    pub fn to_checkpoint(&self, training_state: bool) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(FLOW_KIND);
        for (k, v) in model_to_kv(&self.cfg) {
            ck.set_meta(k, v);
        }
        ck.set_meta("flow.sigma_min", self.flow.sigma_min);
        ck.set_meta("flow.num_steps", self.flow.num_steps);
        ck.set_meta("latent_scale", self.latent_scale);
        ck.push_all(self.net.store.export()?);
        ck.push_all(self.decoder_params.iter().cloned());
        if training_state {
            ck.set_meta("seed", self.seed);
            ck.set_meta("epoch", self.epoch);
            ck.set_meta("step", self.step);
            ck.set_meta("opt.steps", self.opt.steps());
            ck.set_meta(
                "log",
                self.log
                    .iter()
                    .map(|r| format!("{},{},{}", r.step, r.epoch, r.loss))
                    .collect::<Vec<_>>()
                    .join(";"),
            );
            ck.set_meta("histogram", self.histogram.encode());
            ck.push_all(self.opt.export("opt")?);
        }
        Ok(ck)
    }

    /// Restores a stage-two run. Targets are rebuilt from the same VAE and scenes.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        schedule: &TrainSchedule,
        vae: &Vae,
        scenes: &[ScenePair],
    ) -> Result<Self> {
        require_kind(ckpt, FLOW_KIND)?;
        let cfg = model_from_meta(ckpt)?;
        let flow = FlowConfig {
            sigma_min: parse_num(required_meta(ckpt, "flow.sigma_min")?)?,
            num_steps: parse_num(required_meta(ckpt, "flow.num_steps")?)?,
        };
        let scale: f64 = parse_num(required_meta(ckpt, "latent_scale")?)?;
        let seed: u64 = parse_num(required_meta(ckpt, "seed")?)?;
        let mut stage = Self::new(&cfg, flow, schedule, seed, vae, scale, scenes)?;
        stage.net.store.import(ckpt.views())?;
        stage.opt.import("opt", parse_num(required_meta(ckpt, "opt.steps")?)?, lookup(ckpt))?;
        stage.epoch = parse_num(required_meta(ckpt, "epoch")?)?;
        stage.step = parse_num(required_meta(ckpt, "step")?)?;
        let log = required_meta(ckpt, "log")?;
        if !log.is_empty() {
            for row in log.split(';') {
                let f: Vec<&str> = row.split(',').collect();
                if f.len() != 3 {
                    return Err(ckpt_err(format!("bad log row {row:?}")));
                }
                stage.log.push(FlowLogRow {
                    step: parse_num(f[0])?,
                    epoch: parse_num(f[1])?,
                    loss: parse_num(f[2])?,
                });
            }
        }
        stage.histogram = TimeHistogram::decode(required_meta(ckpt, "histogram")?)?;
        Ok(stage)
    }

    pub fn inference_model(&self) -> Result<InferenceModel> {
        InferenceModel::from_checkpoint(&self.to_checkpoint(false)?)
    }
}

// ---------------------------------------------------------------------------
// Inference

/// Frozen condition encoder, UNet and VAE decoder.
pub struct InferenceModel {
    pub cfg: ModelConfig,
    pub flow: FlowConfig,
    pub latent_scale: f64,
    pub net: FlowNetwork,
    decoder_store: ParamStore,
    decoder: VaeDecoder,
}

impl InferenceModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        require_kind(ckpt, FLOW_KIND)?;
        let cfg = model_from_meta(ckpt)?;
        let flow = FlowConfig {
            sigma_min: parse_num(required_meta(ckpt, "flow.sigma_min")?)?,
            num_steps: parse_num(required_meta(ckpt, "flow.num_steps")?)?,
        };
        flow.validate()?;
        let latent_scale: f64 = parse_num(required_meta(ckpt, "latent_scale")?)?;
        if !(latent_scale.is_finite() && latent_scale > 0.0) {
            return Err(ckpt_err(format!("invalid latent_scale {latent_scale}")));
        }
        let net = FlowNetwork::new(&cfg, 0, DType::F32)?;
        net.store.import(ckpt.views())?;
        let mut decoder_store = ParamStore::new(0, DType::F32);
        let decoder = VaeDecoder::new(&mut decoder_store, "vae.decoder", &cfg)?;
        decoder_store.import(ckpt.views())?;
        Ok(Self {
            cfg,
            flow,
            latent_scale,
            net,
            decoder_store,
            decoder,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Errors when the checkpoint was trained with a different architecture.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.cfg != expected {
            return Err(Error::Config(format!(
                "checkpoint model configuration {:?} disagrees with requested {:?}",
                self.cfg, expected
            )));
        }
        Ok(())
    }

    pub fn decoder_parameters(&self) -> usize {
        self.decoder_store.num_elements()
    }

    fn validate_image(&self, image: &ImagePlane) -> Result<()> {
        let s = self.cfg.image_size;
        if image.shape() != [3, s, s] {
            return Err(Error::shape("decompose input", &image.shape(), &[3, s, s]));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("image values must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Predicted shading for a batch; item `i` uses noise from `seeds[i]`.
    pub fn predict_shading(&self, images: &[&ImagePlane], seeds: &[u64]) -> Result<Vec<ImagePlane>> {
        if images.len() != seeds.len() || images.is_empty() {
            return Err(Error::InvalidInput("need one seed per image".into()));
        }
        for img in images {
            self.validate_image(img)?;
        }
        let (l, h) = (self.cfg.latent_channels, self.cfg.latent_size());
        let mut noise = Vec::with_capacity(images.len());
        for &seed in seeds {
            noise.push(standard_normal((1, l, h, h), &mut seeded(seed), &Device::Cpu, DType::F32)?);
        }
        let x0 = Tensor::cat(&noise, 0)?;
        let bundle = self.net.encode(&stack(images)?)?;
        let n = images.len();
        let z1 = euler_integrate(|x, t| self.net.velocity(x, &bundle, &vec![t; n]), &x0, &self.flow)?;
        let s = self.decoder.forward(&(z1 / self.latent_scale)?)?;
        let s = s.clamp(SHADING_FLOOR, 1.0f32)?;
        ImagePlane::unstack(&s.detach())
    }

    pub fn decompose(&self, image: &ImagePlane, seed: u64) -> Result<DecompositionResult> {
        let shading = self.predict_shading(&[image], &[seed])?.pop().expect("one output");
        DecompositionResult::from_shading(image, shading)
    }

    /// Decomposes `images` in batches of `batch`, seeding item `i` with `derive_seed(seed, i)`.
    pub fn decompose_many(&self, images: &[&ImagePlane], seed: u64, batch: usize) -> Result<Vec<DecompositionResult>> {
        let mut out = Vec::with_capacity(images.len());
        for (c, chunk) in images.chunks(batch.max(1)).enumerate() {
            let seeds: Vec<u64> = (0..chunk.len())
                .map(|j| derive_seed(seed, (c * batch.max(1) + j) as u64))
                .collect();
            for (img, s) in chunk.iter().zip(self.predict_shading(chunk, &seeds)?) {
                out.push(DecompositionResult::from_shading(img, s)?);
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Evaluation

/// Metrics of the model on `(stem, scene)` pairs.
pub fn evaluate_model(model: &InferenceModel, scenes: &[(String, &ScenePair)], seed: u64) -> Result<MetricReport> {
    let images: Vec<&ImagePlane> = scenes.iter().map(|(_, s)| &s.image).collect();
    let results = model.decompose_many(&images, seed, 16)?;
    let mut report = MetricReport::default();
    for ((stem, scene), r) in scenes.iter().zip(&results) {
        report.push(stem.clone(), (&r.albedo, &scene.albedo), (&r.shading, &scene.shading))?;
    }
    Ok(report)
}

/// Metrics of the constant-shading baseline.
pub fn evaluate_baseline(scenes: &[(String, &ScenePair)]) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for (stem, scene) in scenes {
        let r = constant_shading_baseline(&scene.image)?;
        report.push(stem.clone(), (&r.albedo, &scene.albedo), (&r.shading, &scene.shading))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reconstruct_identities() {
        let img = ImagePlane::from_fn(3, 4, 5, |c, y, x| 0.05 * (c + y + x) as f32);
        let one = ImagePlane::filled(1, 4, 5, 1.0);
        assert_eq!(reconstruct(&img, &one).unwrap(), img);
        let zero = ImagePlane::zeros(3, 4, 5);
        assert_eq!(reconstruct(&zero, &one).unwrap(), zero);
        assert!(reconstruct(&img, &img).is_err());
    }

    #[test]
    fn albedo_recovery_and_clamping() {
        let img = ImagePlane::from_fn(3, 2, 2, |c, y, x| 0.1 + 0.2 * (c + y + x) as f32);
        let mut s = ImagePlane::filled(1, 2, 2, 0.9);
        s.set(0, 1, 1, 0.2);
        let r = DecompositionResult::from_shading(&img, s).unwrap();
        assert_eq!(r.clamped, vec![false, false, false, true]);
        assert!((r.clamped_fraction - 0.25).abs() < 1e-12);
        for c in 0..3 {
            for (y, x) in [(0, 0), (0, 1), (1, 0)] {
                assert!((r.reconstruction.get(c, y, x) - img.get(c, y, x)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn baseline_uses_mean_luminance() {
        let img = ImagePlane::filled(3, 3, 3, 0.4);
        let r = constant_shading_baseline(&img).unwrap();
        assert!(r.shading.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
        assert!(r.albedo.data().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn histogram_bins_and_encoding() {
        let mut h = TimeHistogram::default();
        h.add(0.0, 1.0);
        h.add(0.999, 3.0);
        h.add(1.0, 5.0);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[HIST_BINS - 1], 2);
        assert_eq!(h.mean(HIST_BINS - 1), Some(4.0));
        assert_eq!(TimeHistogram::decode(&h.encode()).unwrap(), h);
        assert_eq!(h.to_csv().lines().count(), HIST_BINS + 1);
    }
}
