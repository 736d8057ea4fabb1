use flowiid_core::backbone::{FlowNetwork, ModelConfig};
use flowiid_core::data::synth_generate;
use flowiid_core::flow::{fm_loss, FlowConfig, FlowSample};
use flowiid_core::image_plane::ImagePlane;
use flowiid_core::rng::{seeded, standard_normal};
use flowiid_core::vae::{VaeLossWeights, VaeTrainer};
use flowiid_core::{DType, Device, Tensor};

/// Latent 4x4x4 at 32 px, width 8.
fn small() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        latent_channels: 4,
        base_width: 8,
        concat_channels: 32,
        time_embed_dim: 32,
        ..ModelConfig::tiny()
    }
}

#[test]
fn unet_gradients_match_finite_differences_in_f64() {
    let cfg = small();
    let dev = Device::Cpu;
    let net = FlowNetwork::new(&cfg, 3, DType::F64).unwrap();
    let mut rng = seeded(4);
    let w = net.store.get("unet.conv_out.weight").unwrap();
    w.set(&(standard_normal(w.dims(), &mut rng, &dev, DType::F64).unwrap() * 0.05).unwrap()).unwrap();

    let img = standard_normal((2, 3, 32, 32), &mut rng, &dev, DType::F64).unwrap().affine(0.2, 0.5).unwrap();
    let x0 = standard_normal((2, 4, 4, 4), &mut rng, &dev, DType::F64).unwrap();
    let x1 = standard_normal((2, 4, 4, 4), &mut rng, &dev, DType::F64).unwrap();
    let sample = FlowSample::from_parts(x0, x1, vec![0.25, 0.7], &FlowConfig::default()).unwrap();
    let loss = || {
        let bundle = net.encode(&img).unwrap();
        fm_loss(&net.velocity(&sample.x_t, &bundle, &sample.t).unwrap(), &sample.v_t).unwrap()
    };
    let grads = loss().backward().unwrap();

    let h = 1e-3;
    let mut worst = (0.0f64, String::new());
    for (name, var) in net.store.iter() {
        let g = grads.get(var.as_tensor()).unwrap();
        let dir = standard_normal(var.dims(), &mut rng, &dev, DType::F64).unwrap();
        let norm = dir.sqr().unwrap().sum_all().unwrap().sqrt().unwrap().to_scalar::<f64>().unwrap();
        let dir = (dir / norm).unwrap();
        let analytic = (g * &dir).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let orig = var.as_tensor().copy().unwrap();
        let central = |step: f64| {
            var.set(&(&orig + (&dir * step).unwrap()).unwrap()).unwrap();
            let lp = loss().to_scalar::<f64>().unwrap();
            var.set(&(&orig - (&dir * step).unwrap()).unwrap()).unwrap();
            let lm = loss().to_scalar::<f64>().unwrap();
            (lp - lm) / (2.0 * step)
        };
        let (d1, d2) = (central(h), central(h / 2.0));
        var.set(&orig).unwrap();
        // Richardson extrapolation cancels the O(h^2) truncation term.
        let fd = (4.0 * d2 - d1) / 3.0;
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-30);
        if rel > worst.0 {
            worst = (rel, name.to_string());
        }
    }
    assert!(worst.0 < 1e-6, "worst relative error {:.3e} at {}", worst.0, worst.1);
}

fn shading_batch() -> Tensor {
    let scenes = synth_generate(8, 4, 64);
    let planes: Vec<&ImagePlane> = scenes.iter().map(|s| &s.shading).collect();
    ImagePlane::stack(&planes, &Device::Cpu, DType::F32).unwrap()
}

#[test]
fn discriminator_is_frozen_until_the_adversarial_epoch() {
    let weights = VaeLossWeights {
        adv_start_epoch: 2,
        ..VaeLossWeights::default()
    };
    let mut trainer = VaeTrainer::new(&ModelConfig::tiny(), weights, 1e-3, 0).unwrap();
    let s0 = shading_batch();
    let initial = trainer.disc_store.snapshot().unwrap();
    for epoch in 0..2 {
        let b = trainer.step(&s0, epoch, &mut seeded(epoch as u64)).unwrap();
        assert!(b.adv.is_none() && b.disc.is_none());
        assert_eq!(trainer.disc_store.snapshot().unwrap(), initial, "epoch {epoch}");
    }
    let b = trainer.step(&s0, 2, &mut seeded(2)).unwrap();
    assert!(b.adv.is_some() && b.disc.is_some());
    assert_ne!(trainer.disc_store.snapshot().unwrap(), initial);
}

#[test]
fn one_small_step_lowers_the_batch_loss() {
    let s0 = shading_batch();
    for epoch in [0, 1] {
        let weights = VaeLossWeights {
            adv_start_epoch: 1,
            ..VaeLossWeights::default()
        };
        let mut trainer = VaeTrainer::new(&ModelConfig::tiny(), weights, 1e-5, 5).unwrap();
        let before = trainer.objective(&s0, epoch, &mut seeded(9)).unwrap().2.total;
        trainer.step(&s0, epoch, &mut seeded(9)).unwrap();
        let after = trainer.objective(&s0, epoch, &mut seeded(9)).unwrap().2.total;
        assert!(after < before, "epoch {epoch}: {before} -> {after}");
    }
}
