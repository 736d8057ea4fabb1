//! Training stages, resume and inference on a handful of tiny scenes.

use flowiid_core::backbone::ModelConfig;
use flowiid_core::checkpoint::Checkpoint;
use flowiid_core::config::TrainSchedule;
use flowiid_core::data::{synth_generate, ScenePair};
use flowiid_core::flow::FlowConfig;
use flowiid_core::image_plane::ImagePlane;
use flowiid_core::pipeline::{compute_latent_scale, load_vae, FlowStage, InferenceModel, VaeStage, SHADING_FLOOR};
use flowiid_core::rng::derive_seed;
use flowiid_core::vae::{Vae, VaeLossWeights};
use flowiid_core::{DType, Error};

fn schedule(vae_epochs: usize, fm_epochs: usize) -> TrainSchedule {
    TrainSchedule {
        vae_epochs,
        fm_epochs,
        batch_size: 4,
        vae_lr: 1e-3,
        fm_lr: 1e-3,
        adversarial: true,
        checkpoint_every: 1,
        max_steps: None,
    }
}

fn weights() -> VaeLossWeights {
    VaeLossWeights {
        adv_start_epoch: 1,
        ..VaeLossWeights::default()
    }
}

fn scenes(n: usize) -> Vec<ScenePair> {
    synth_generate(31, n, 64)
}

fn shadings(s: &[ScenePair]) -> Vec<ImagePlane> {
    s.iter().map(|p| p.shading.clone()).collect()
}

fn round_trip(c: &Checkpoint) -> Checkpoint {
    Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap()
}

fn untrained_vae(s: &[ScenePair]) -> (Vae, f64) {
    let vae = Vae::new(&ModelConfig::tiny(), 5, DType::F32).unwrap();
    let scale = compute_latent_scale(&vae, &shadings(s), 8).unwrap();
    (vae, scale)
}

#[test]
fn vae_resume_reproduces_the_uninterrupted_curve() {
    let data = shadings(&scenes(8));
    let sched = schedule(2, 1);
    let mut straight = VaeStage::new(&ModelConfig::tiny(), weights(), &sched, 9).unwrap();
    straight.run(&data, |_| {}, |_| Ok(())).unwrap();

    let mut first = VaeStage::new(&ModelConfig::tiny(), weights(), &sched, 9).unwrap();
    first.run_epoch(&data, |_| {}).unwrap();
    let ck = round_trip(&first.to_checkpoint(None).unwrap());
    let mut resumed = VaeStage::from_checkpoint(&ck, &sched).unwrap();
    resumed.run(&data, |_| {}, |_| Ok(())).unwrap();

    assert_eq!(resumed.log, straight.log);
    assert_eq!(resumed.trainer.disc_store.snapshot().unwrap(), straight.trainer.disc_store.snapshot().unwrap());
    assert_eq!(resumed.vae().store.snapshot().unwrap(), straight.vae().store.snapshot().unwrap());
}

#[test]
fn flow_resume_reproduces_the_uninterrupted_curve() {
    let s = scenes(8);
    let (vae, scale) = untrained_vae(&s);
    let sched = schedule(1, 2);
    let cfg = ModelConfig::tiny();
    let mut straight = FlowStage::new(&cfg, FlowConfig::default(), &sched, 4, &vae, scale, &s).unwrap();
    straight.run(|_| {}, |_| Ok(())).unwrap();

    let mut first = FlowStage::new(&cfg, FlowConfig::default(), &sched, 4, &vae, scale, &s).unwrap();
    first.run_epoch(|_| {}).unwrap();
    let ck = round_trip(&first.to_checkpoint(true).unwrap());
    let mut resumed = FlowStage::from_checkpoint(&ck, &sched, &vae, &s).unwrap();
    resumed.run(|_| {}, |_| Ok(())).unwrap();

    assert_eq!(resumed.log, straight.log);
    assert_eq!(resumed.histogram, straight.histogram);
    assert_eq!(resumed.net.store.snapshot().unwrap(), straight.net.store.snapshot().unwrap());
}

#[test]
fn flow_loss_falls_and_vae_stays_frozen() {
    let s = scenes(16);
    let (vae, scale) = untrained_vae(&s);
    let before = vae.store.snapshot().unwrap();
    let mut sched = schedule(1, 100);
    sched.max_steps = Some(200);
    let mut stage = FlowStage::new(&ModelConfig::tiny(), FlowConfig::default(), &sched, 2, &vae, scale, &s).unwrap();
    stage.run(|_| {}, |_| Ok(())).unwrap();
    assert_eq!(stage.step, 200);
    let mean = |rows: &[flowiid_core::pipeline::FlowLogRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    let (head, tail) = (mean(&stage.log[..20]), mean(&stage.log[180..]));
    assert!(tail < 0.8 * head, "loss {head} -> {tail}");
    assert_eq!(vae.store.snapshot().unwrap(), before);

    let model = stage.inference_model().unwrap();
    let ck = stage.to_checkpoint(false).unwrap();
    for (name, var) in vae.store.iter().filter(|(n, _)| n.starts_with("vae.decoder.")) {
        let stored = &ck.get(name).expect("decoder tensor in checkpoint").data;
        let live = var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(stored, &live);
    }
    assert!(ck.tensors.iter().all(|t| !t.name.starts_with("vae.encoder.")));
    assert!(ck.tensors.iter().all(|t| !t.name.starts_with("opt.")));
    assert!(model.decoder_parameters() > 0);
}

fn small_model() -> (InferenceModel, Vec<ScenePair>) {
    let s = scenes(4);
    let (vae, scale) = untrained_vae(&s);
    let mut sched = schedule(1, 1);
    sched.max_steps = Some(1);
    let mut stage = FlowStage::new(&ModelConfig::tiny(), FlowConfig::default(), &sched, 3, &vae, scale, &s).unwrap();
    stage.run(|_| {}, |_| Ok(())).unwrap();
    (stage.inference_model().unwrap(), s)
}

#[test]
fn decompose_contracts() {
    let (model, s) = small_model();
    let img = &s[0].image;
    let a = model.decompose(img, 11).unwrap();
    let b = model.decompose(img, 11).unwrap();
    let c = model.decompose(img, 12).unwrap();
    assert_eq!(a.shading, b.shading);
    assert_eq!(a.albedo, b.albedo);
    assert_ne!(a.shading, c.shading);

    assert!(a.shading.min_max().0 >= SHADING_FLOOR);
    let (lo, hi) = a.albedo.min_max();
    assert!(lo >= 0.0 && hi <= 1.0);
    assert!((0.0..=1.0).contains(&a.clamped_fraction));
    assert_eq!(a.shading.shape(), [1, 64, 64]);
    assert_eq!(a.albedo.shape(), [3, 64, 64]);

    let images: Vec<&ImagePlane> = s.iter().map(|p| &p.image).collect();
    for batch in [1, 3] {
        let many = model.decompose_many(&images, 7, batch).unwrap();
        for (i, r) in many.iter().enumerate() {
            let single = model.decompose(images[i], derive_seed(7, i as u64)).unwrap();
            let diff = r
                .shading
                .data()
                .iter()
                .zip(single.shading.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(diff < 1e-5, "item {i}, batch {batch}: {diff}");
        }
    }
}

#[test]
fn decompose_rejects_bad_inputs() {
    let (model, _) = small_model();
    assert!(model.decompose(&ImagePlane::filled(3, 32, 32, 0.5), 0).is_err());
    assert!(model.decompose(&ImagePlane::filled(1, 64, 64, 0.5), 0).is_err());
    assert!(model.decompose(&ImagePlane::filled(3, 64, 64, 1.5), 0).is_err());
    let mut other = ModelConfig::tiny();
    other.base_width = 16;
    assert!(matches!(model.check_config(&other), Err(Error::Config(_))));
    assert!(model.check_config(&ModelConfig::tiny()).is_ok());
}

#[test]
fn checkpoints_of_the_wrong_kind_or_shape_are_rejected() {
    let stage = VaeStage::new(&ModelConfig::tiny(), weights(), &schedule(1, 1), 0).unwrap();
    let vae_ck = stage.to_checkpoint(Some(1.0)).unwrap();
    assert!(InferenceModel::from_checkpoint(&vae_ck).is_err());
    assert!(load_vae(&vae_ck).is_ok());

    let mut no_scale = stage.to_checkpoint(None).unwrap();
    no_scale.meta.remove("latent_scale");
    assert!(load_vae(&no_scale).is_err());

    // Training data at another resolution than the model.
    let (vae, _) = load_vae(&vae_ck).unwrap();
    let wrong = synth_generate(1, 2, 32);
    assert!(FlowStage::new(&ModelConfig::tiny(), FlowConfig::default(), &schedule(1, 1), 0, &vae, 1.0, &wrong).is_err());

    // Weights whose shapes disagree with the declared architecture.
    let s = scenes(2);
    let flow = FlowStage::new(&ModelConfig::tiny(), FlowConfig::default(), &schedule(1, 1), 0, &vae, 1.0, &s).unwrap();
    let mut ck = flow.to_checkpoint(false).unwrap();
    ck.set_meta("model.base_width", 16);
    assert!(InferenceModel::from_checkpoint(&ck).is_err());
}
