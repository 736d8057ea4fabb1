use std::path::{Path, PathBuf};
use std::time::Instant;

use flowiid_core::backbone::{count_parameters, Ablation, ModelConfig};
use flowiid_core::checkpoint::Checkpoint;
use flowiid_core::config::RunConfig;
use flowiid_core::data::{self, Split};
use flowiid_core::image_plane::ImagePlane;
use flowiid_core::metrics::MetricReport;
use flowiid_core::pipeline::{
    self, compute_latent_scale, flow_log_csv, load_vae, vae_log_csv, vae_reconstruction_mse, FlowStage,
    InferenceModel, VaeStage,
};
use flowiid_core::ScenePair;

use crate::{Cli, Command, OutArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] flowiid_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(flowiid_core::Error::Config(_)) => 1,
            CliError::Core(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Emits one `key=value` progress line on stderr.
struct Progress {
    start: Instant,
}

impl Progress {
    fn new() -> Self {
        Self { start: Instant::now() }
    }

    fn line(&self, stage: &str, fields: &[(&str, String)]) {
        let mut s = format!("progress stage={stage}");
        for (k, v) in fields {
            s.push_str(&format!(" {k}={v}"));
        }
        s.push_str(&format!(" elapsed={:.3}", self.start.elapsed().as_secs_f64()));
        eprintln!("{s}");
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.6}"))
}

fn resolve(cli: &Cli, flags: Vec<(&str, Option<String>)>) -> Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    for (k, v) in flags {
        if let Some(v) = v {
            overrides.push(format!("{k}={v}"));
        }
    }
    RunConfig::load(cli.config.as_deref(), &overrides).map_err(|e| usage(e.to_string()))
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

/// Creates `dir`, refusing a non-empty one unless forced.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !force && std::fs::read_dir(dir)?.next().is_some() {
        return Err(usage(format!(
            "output directory {} is not empty (pass --force to overwrite)",
            dir.display()
        )));
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn required(p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.clone().ok_or_else(|| usage(format!("{what} is required")))
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::write(dir.join("config.resolved"), cfg.to_kv_text())?;
    Ok(())
}

fn fit(plane: &ImagePlane, side: usize) -> flowiid_core::Result<ImagePlane> {
    if plane.height() == side && plane.width() == side {
        Ok(plane.clone())
    } else {
        data::resize_crop(plane, side)
    }
}

/// Scenes of one split at the model resolution.
fn load_scenes(dir: &Path, split: Split, side: usize) -> Result<Vec<(String, ScenePair)>> {
    let ds = data::load_dataset(dir, Some(split))?;
    let mut out = Vec::with_capacity(ds.entries.len());
    for e in ds.entries {
        let s = &e.scene;
        out.push((
            e.stem,
            ScenePair {
                image: fit(&s.image, side)?,
                albedo: fit(&s.albedo, side)?,
                shading: fit(&s.shading, side)?,
            },
        ));
    }
    Ok(out)
}

fn held_out(dir: &Path, side: usize) -> Result<Vec<(String, ScenePair)>> {
    let has_test = data::read_manifest(dir)?.iter().any(|(_, s)| *s == Split::Test);
    if has_test {
        load_scenes(dir, Split::Test, side)
    } else {
        Ok(Vec::new())
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData {
            seed,
            count,
            side,
            test_count,
            out,
        } => {
            let cfg = resolve(
                &cli,
                vec![
                    ("seed", seed.map(|v| v.to_string())),
                    ("data.count", count.map(|v| v.to_string())),
                    ("data.side", side.map(|v| v.to_string())),
                    ("data.test_count", test_count.map(|v| v.to_string())),
                    ("paths.out", path_flag(&out.out)),
                ],
            )?;
            gen_data(&cfg, out)
        }
        Command::TrainVae { data, seed, resume, out } => {
            let cfg = resolve(
                &cli,
                vec![
                    ("seed", seed.map(|v| v.to_string())),
                    ("paths.data", path_flag(data)),
                    ("paths.resume", path_flag(resume)),
                    ("paths.out", path_flag(&out.out)),
                ],
            )?;
            train_vae(&cfg, out.force)
        }
        Command::TrainFm {
            data,
            vae,
            seed,
            resume,
            out,
        } => {
            let cfg = resolve(
                &cli,
                vec![
                    ("seed", seed.map(|v| v.to_string())),
                    ("paths.data", path_flag(data)),
                    ("paths.vae_checkpoint", path_flag(vae)),
                    ("paths.resume", path_flag(resume)),
                    ("paths.out", path_flag(&out.out)),
                ],
            )?;
            train_fm(&cfg, out.force)
        }
        Command::Infer {
            checkpoint,
            input,
            seed,
            resize,
            no_dump,
            split,
            out,
        } => {
            let dir = required(&out.out, "--out")?;
            let split = split.as_deref().map(Split::parse).transpose().map_err(|e| usage(e.to_string()))?;
            infer(checkpoint, input, *seed, *resize, !*no_dump, split, &dir, out.force)
        }
        Command::Eval {
            pred,
            gt,
            split,
            report,
        } => {
            let split = split.as_deref().map(Split::parse).transpose().map_err(|e| usage(e.to_string()))?;
            eval(pred, gt, split, report.as_deref())
        }
        Command::Ablate {
            preset,
            data,
            vae,
            seed,
            out,
        } => {
            let cfg = resolve(
                &cli,
                vec![
                    ("seed", seed.map(|v| v.to_string())),
                    ("paths.data", path_flag(data)),
                    ("paths.vae_checkpoint", path_flag(vae)),
                    ("paths.out", path_flag(&out.out)),
                ],
            )?;
            let presets: Vec<Ablation> = if preset == "all" {
                Ablation::ALL.to_vec()
            } else {
                vec![Ablation::parse(preset).map_err(|e| usage(e.to_string()))?]
            };
            ablate(&cfg, &presets, out.force)
        }
        Command::CountParams { preset } => {
            let cfg = resolve(&cli, vec![])?;
            let model = match preset {
                Some(p) => ModelConfig::preset(p).map_err(|e| usage(e.to_string()))?,
                None => cfg.model,
            };
            print!("{}", count_table(&model)?);
            Ok(())
        }
    }
}

fn gen_data(cfg: &RunConfig, out: &OutArgs) -> Result<()> {
    let dir = required(&cfg.paths.out, "--out")?;
    let d = &cfg.data;
    if d.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let test_count = d.resolved_test_count();
    if test_count > d.count {
        return Err(usage("--test-count exceeds --count"));
    }
    if d.side < 16 {
        return Err(usage("--side must be at least 16"));
    }
    prepare_out(&dir, out.force)?;
    let progress = Progress::new();
    let scenes = data::synth_generate(cfg.seed, d.count, d.side);
    if out.force && dir.join("scenes").exists() {
        std::fs::remove_dir_all(dir.join("scenes"))?;
    }
    data::save_dataset(
        &dir,
        &scenes,
        test_count,
        &[
            ("seed", cfg.seed.to_string()),
            ("side", d.side.to_string()),
            ("count", d.count.to_string()),
        ],
    )?;
    write_resolved(&dir, cfg)?;
    progress.line("gen-data", &[("scenes", d.count.to_string())]);
    Ok(())
}

fn train_vae(cfg: &RunConfig, force: bool) -> Result<()> {
    let dir = required(&cfg.paths.out, "--out")?;
    let data_dir = required(&cfg.paths.data, "--data")?;
    if cfg.paths.resume.is_none() {
        prepare_out(&dir, force)?;
    } else {
        std::fs::create_dir_all(&dir)?;
    }
    let side = cfg.model.image_size;
    let train: Vec<ImagePlane> = load_scenes(&data_dir, Split::Train, side)?
        .into_iter()
        .map(|(_, s)| s.shading)
        .collect();
    let test: Vec<ImagePlane> = held_out(&data_dir, side)?.into_iter().map(|(_, s)| s.shading).collect();
    let mut stage = match &cfg.paths.resume {
        Some(p) => {
            let stage = VaeStage::from_checkpoint(&Checkpoint::load(p)?, &cfg.train)?;
            if stage.cfg != cfg.model {
                log::warn!("resuming with the checkpoint's model configuration");
            }
            stage
        }
        None => VaeStage::new(&cfg.model, cfg.effective_vae_weights(), &cfg.train, cfg.seed)?,
    };
    write_resolved(&dir, cfg)?;
    let progress = Progress::new();
    let state_path = dir.join("vae_state.ckpt");
    let every = cfg.train.checkpoint_every;
    let result = stage.run(
        &train,
        |r| {
            progress.line(
                "vae",
                &[
                    ("step", r.step.to_string()),
                    ("epoch", r.epoch.to_string()),
                    ("rec", format!("{:.6}", r.rec)),
                    ("kl", format!("{:.6}", r.kl)),
                    ("perc", format!("{:.6}", r.perc)),
                    ("adv", opt(r.adv)),
                    ("disc", opt(r.disc)),
                    ("total", format!("{:.6}", r.total)),
                ],
            )
        },
        |s| {
            if every > 0 && s.epoch % every == 0 {
                s.to_checkpoint(None)?.save(&state_path)?;
                std::fs::write(dir.join("vae_loss.csv"), vae_log_csv(&s.log))?;
            }
            Ok(())
        },
    );
    // Keep the log of whatever completed, even on failure.
    std::fs::write(dir.join("vae_loss.csv"), vae_log_csv(&stage.log))?;
    result?;
    let scale = compute_latent_scale(stage.vae(), &train, cfg.train.batch_size)?;
    let ckpt = stage.to_checkpoint(Some(scale))?;
    ckpt.save(&dir.join("vae.ckpt"))?;
    ckpt.save(&state_path)?;
    let mut summary = format!("latent_scale {scale}\nsteps {}\nepochs {}\n", stage.step, stage.epoch);
    if !test.is_empty() {
        let mse = vae_reconstruction_mse(stage.vae(), &test, cfg.train.batch_size)?;
        summary.push_str(&format!("heldout_mse {mse}\n"));
        progress.line("vae-eval", &[("heldout_mse", format!("{mse:.6}"))]);
    }
    std::fs::write(dir.join("vae_summary.txt"), summary)?;
    Ok(())
}

fn load_vae_for(cfg: &RunConfig) -> Result<(flowiid_core::Vae, f64)> {
    let path = required(&cfg.paths.vae_checkpoint, "--vae")?;
    let ckpt = Checkpoint::load(&path)?;
    let (vae, scale) = load_vae(&ckpt)?;
    Ok((vae, scale))
}

fn check_vae_compat(vae_cfg: &ModelConfig, model: &ModelConfig) -> Result<()> {
    if vae_cfg.image_size != model.image_size
        || vae_cfg.latent_channels != model.latent_channels
        || vae_cfg.vae_width != model.vae_width
    {
        return Err(usage(
            "VAE checkpoint disagrees with the model configuration (image_size, latent_channels or vae_width)",
        ));
    }
    Ok(())
}

fn vae_model_config(cfg: &RunConfig) -> Result<ModelConfig> {
    let path = required(&cfg.paths.vae_checkpoint, "--vae")?;
    let ckpt = Checkpoint::load(&path)?;
    Ok(flowiid_core::config::model_from_kv(
        ckpt.meta.iter().map(|(k, v)| (k.as_str(), v.as_str())),
    )?)
}

fn run_flow_stage(stage: &mut FlowStage, dir: &Path, every: usize, progress: &Progress, tag: &str) -> Result<()> {
    let state_path = dir.join("fm_state.ckpt");
    let result = stage.run(
        |r| {
            progress.line(
                tag,
                &[
                    ("step", r.step.to_string()),
                    ("epoch", r.epoch.to_string()),
                    ("loss", format!("{:.6}", r.loss)),
                ],
            )
        },
        |s| {
            if every > 0 && s.epoch % every == 0 {
                s.to_checkpoint(true)?.save(&state_path)?;
                std::fs::write(dir.join("fm_loss.csv"), flow_log_csv(&s.log))?;
            }
            Ok(())
        },
    );
    std::fs::write(dir.join("fm_loss.csv"), flow_log_csv(&stage.log))?;
    std::fs::write(dir.join("fm_time_hist.csv"), stage.histogram.to_csv())?;
    result?;
    stage.to_checkpoint(true)?.save(&state_path)?;
    stage.to_checkpoint(false)?.save(&dir.join("model.ckpt"))?;
    Ok(())
}

fn train_fm(cfg: &RunConfig, force: bool) -> Result<()> {
    let dir = required(&cfg.paths.out, "--out")?;
    let data_dir = required(&cfg.paths.data, "--data")?;
    if cfg.paths.resume.is_none() {
        prepare_out(&dir, force)?;
    } else {
        std::fs::create_dir_all(&dir)?;
    }
    check_vae_compat(&vae_model_config(cfg)?, &cfg.model)?;
    let (vae, scale) = load_vae_for(cfg)?;
    let scenes: Vec<ScenePair> = load_scenes(&data_dir, Split::Train, cfg.model.image_size)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let mut stage = match &cfg.paths.resume {
        Some(p) => FlowStage::from_checkpoint(&Checkpoint::load(p)?, &cfg.train, &vae, &scenes)?,
        None => FlowStage::new(&cfg.model, cfg.flow, &cfg.train, cfg.seed, &vae, scale, &scenes)?,
    };
    write_resolved(&dir, cfg)?;
    let progress = Progress::new();
    run_flow_stage(&mut stage, &dir, cfg.train.checkpoint_every, &progress, "fm")
}

/// `(stem, image)` inputs: a dataset directory, a directory of PNGs or one PNG.
fn collect_inputs(input: &Path, split: Option<Split>) -> Result<Vec<(String, ImagePlane)>> {
    if input.join(data::MANIFEST).exists() {
        let ds = data::load_dataset(input, split)?;
        return Ok(ds.entries.into_iter().map(|e| (e.stem, e.scene.image)).collect());
    }
    let mut paths = Vec::new();
    if input.is_dir() {
        for entry in std::fs::read_dir(input)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                paths.push(p);
            }
        }
        paths.sort();
    } else if input.exists() {
        paths.push(input.to_path_buf());
    } else {
        return Err(flowiid_core::Error::Data(format!("input {} does not exist", input.display())).into());
    }
    if paths.is_empty() {
        return Err(flowiid_core::Error::Data(format!("no PNG files in {}", input.display())).into());
    }
    paths
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((stem, data::read_png(&p, 3)?))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn infer(
    checkpoint: &Path,
    input: &Path,
    seed: u64,
    resize: bool,
    dump: bool,
    split: Option<Split>,
    dir: &Path,
    force: bool,
) -> Result<()> {
    let model = InferenceModel::load(checkpoint)?;
    let side = model.cfg.image_size;
    let mut inputs = collect_inputs(input, split)?;
    if resize {
        for (_, img) in &mut inputs {
            *img = fit(img, side)?;
        }
    }
    prepare_out(dir, force)?;
    let progress = Progress::new();
    let images: Vec<&ImagePlane> = inputs.iter().map(|(_, i)| i).collect();
    let results = model.decompose_many(&images, seed, 16)?;
    let mut summary = String::from("stem,clamped_fraction\n");
    for ((stem, _), r) in inputs.iter().zip(&results) {
        for (name, plane) in [("shading", &r.shading), ("albedo", &r.albedo), ("reconstruction", &r.reconstruction)] {
            data::write_png8(&dir.join(format!("{stem}_{name}.png")), plane)?;
            if dump {
                data::write_f32_dump(&dir.join(format!("{stem}_{name}.f32")), plane)?;
            }
        }
        summary.push_str(&format!("{stem},{}\n", r.clamped_fraction));
        progress.line("infer", &[("stem", stem.clone()), ("clamped", format!("{:.6}", r.clamped_fraction))]);
    }
    std::fs::write(dir.join("infer.csv"), summary)?;
    Ok(())
}

/// Loads `<stem>_<layer>`, preferring the exact float dump over the PNG.
fn load_prediction(pred: &Path, stem: &str, layer: &str, channels: usize) -> Result<Option<ImagePlane>> {
    let dump = pred.join(format!("{stem}_{layer}.f32"));
    if dump.exists() {
        return Ok(Some(data::read_f32_dump(&dump)?));
    }
    let png = pred.join(format!("{stem}_{layer}.png"));
    if png.exists() {
        return Ok(Some(data::read_png(&png, channels)?));
    }
    Ok(None)
}

fn eval(pred: &Path, gt: &Path, split: Option<Split>, report_path: Option<&Path>) -> Result<()> {
    let ds = data::load_dataset(gt, split)?;
    let mut missing = Vec::new();
    let mut pairs = Vec::new();
    for e in &ds.entries {
        let a = load_prediction(pred, &e.stem, "albedo", 3)?;
        let s = load_prediction(pred, &e.stem, "shading", 1)?;
        match (a, s) {
            (Some(a), Some(s)) => pairs.push((e, a, s)),
            _ => missing.push(e.stem.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(flowiid_core::Error::Data(format!(
            "{} of {} ground-truth stems have no prediction: {}",
            missing.len(),
            ds.entries.len(),
            missing.join(", ")
        ))
        .into());
    }
    let mut report = MetricReport::default();
    for (e, a, s) in &pairs {
        report.push(e.stem.clone(), (a, &e.scene.albedo), (s, &e.scene.shading))?;
    }
    match report_path {
        Some(p) => std::fs::write(p, report.to_csv())?,
        None => print!("{}", report.to_csv()),
    }
    eprint!("{}", report.to_table());
    Ok(())
}

fn count_table(model: &ModelConfig) -> Result<String> {
    let mut s = String::from(
        "ablation,condition_encoder,unet,vae_encoder,vae_decoder,discriminator,inference,training\n",
    );
    for a in Ablation::ALL {
        let c = count_parameters(&model.with_ablation(a))?;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            a.name(),
            c.condition_encoder,
            c.unet,
            c.vae_encoder,
            c.vae_decoder,
            c.discriminator,
            c.inference(),
            c.training()
        ));
    }
    Ok(s)
}

fn ablate(cfg: &RunConfig, presets: &[Ablation], force: bool) -> Result<()> {
    let dir = required(&cfg.paths.out, "--out")?;
    let data_dir = required(&cfg.paths.data, "--data")?;
    prepare_out(&dir, force)?;
    check_vae_compat(&vae_model_config(cfg)?, &cfg.model)?;
    let (vae, scale) = load_vae_for(cfg)?;
    let side = cfg.model.image_size;
    let train: Vec<ScenePair> = load_scenes(&data_dir, Split::Train, side)?.into_iter().map(|(_, s)| s).collect();
    let test = held_out(&data_dir, side)?;
    let eval_set: Vec<(String, &ScenePair)> = test.iter().map(|(n, s)| (n.clone(), s)).collect();
    write_resolved(&dir, cfg)?;
    let progress = Progress::new();
    let mut table = String::from(
        "preset,inference_params,training_params,final_loss,albedo_lmse,shading_lmse,albedo_ssim,shading_ssim\n",
    );
    for &p in presets {
        let model_cfg = cfg.model.with_ablation(p);
        let sub = dir.join(p.name());
        std::fs::create_dir_all(&sub)?;
        let mut stage = FlowStage::new(&model_cfg, cfg.flow, &cfg.train, cfg.seed, &vae, scale, &train)?;
        run_flow_stage(&mut stage, &sub, cfg.train.checkpoint_every, &progress, &format!("ablate-{}", p.name()))?;
        let counts = count_parameters(&model_cfg)?;
        let final_loss = stage.log.last().map_or(f64::NAN, |r| r.loss);
        let (albedo, shading) = if eval_set.is_empty() {
            (None, None)
        } else {
            let report = pipeline::evaluate_model(&stage.inference_model()?, &eval_set, cfg.seed)?;
            std::fs::write(sub.join("metrics.csv"), report.to_csv())?;
            let (a, s) = report.aggregate();
            (Some(a), Some(s))
        };
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            p.name(),
            counts.inference(),
            counts.training(),
            final_loss,
            opt(albedo.map(|m| m.lmse)),
            opt(shading.map(|m| m.lmse)),
            opt(albedo.map(|m| m.ssim)),
            opt(shading.map(|m| m.ssim)),
        ));
    }
    std::fs::write(dir.join("ablation.csv"), &table)?;
    print!("{table}");
    Ok(())
}
