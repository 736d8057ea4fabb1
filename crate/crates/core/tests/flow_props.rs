use flowiid_core::flow::{
    conditional_path, conditional_path_batched, euler_integrate, fm_loss, fm_loss_per_item, target_velocity,
    FlowConfig, FlowSample,
};
use flowiid_core::rng::{seeded, standard_normal};
use flowiid_core::{DType, Device, Error, Tensor};
use proptest::prelude::*;

fn pair(seed: u64, shape: (usize, usize, usize, usize)) -> (Tensor, Tensor) {
    let mut rng = seeded(seed);
    let x0 = standard_normal(shape, &mut rng, &Device::Cpu, DType::F64).unwrap();
    let x1 = standard_normal(shape, &mut rng, &Device::Cpu, DType::F64).unwrap();
    (x0, x1)
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn endpoints(seed in any::<u64>(), sigma in 0.0f64..0.5) {
        let cfg = FlowConfig { sigma_min: sigma, num_steps: 1 };
        let (x0, x1) = pair(seed, (2, 3, 4, 4));
        prop_assert!(max_abs(&conditional_path(&x0, &x1, 0.0, &cfg).unwrap(), &x0) < 1e-12);
        let end = ((&x0 * sigma).unwrap() + &x1).unwrap();
        prop_assert!(max_abs(&conditional_path(&x0, &x1, 1.0, &cfg).unwrap(), &end) < 1e-12);
    }

    #[test]
    fn batched_path_matches_per_item(seed in any::<u64>(), t0 in 0.0f64..=1.0, t1 in 0.0f64..=1.0) {
        let cfg = FlowConfig::default();
        let (x0, x1) = pair(seed, (2, 2, 3, 3));
        let batched = conditional_path_batched(&x0, &x1, &[t0, t1], &cfg).unwrap();
        for (i, t) in [t0, t1].into_iter().enumerate() {
            let single = conditional_path(&x0.get(i).unwrap(), &x1.get(i).unwrap(), t, &cfg).unwrap();
            prop_assert!(max_abs(&batched.get(i).unwrap(), &single) < 1e-12);
        }
    }

    #[test]
    fn one_euler_step_along_the_target_reaches_the_endpoint(seed in any::<u64>(), steps in 1usize..8) {
        let cfg = FlowConfig { sigma_min: 1e-5, num_steps: steps };
        let (x0, x1) = pair(seed, (1, 2, 4, 4));
        let v = target_velocity(&x0, &x1, &cfg).unwrap();
        let out = euler_integrate(|_, _| Ok(v.clone()), &x0, &cfg).unwrap();
        let end = conditional_path(&x0, &x1, 1.0, &cfg).unwrap();
        prop_assert!(max_abs(&out, &end) < 1e-12);
    }

    #[test]
    fn loss_is_mean_of_per_item_losses(seed in any::<u64>()) {
        let (a, b) = pair(seed, (3, 2, 2, 2));
        let total = fm_loss(&a, &b).unwrap().to_scalar::<f64>().unwrap();
        let per = fm_loss_per_item(&a, &b).unwrap();
        prop_assert!((total - per.iter().sum::<f64>() / 3.0).abs() < 1e-12);
        prop_assert!(per.iter().all(|&p| p >= 0.0));
        prop_assert_eq!(fm_loss(&a, &a).unwrap().to_scalar::<f64>().unwrap(), 0.0);
    }

    #[test]
    fn drawn_times_lie_in_the_unit_interval(seed in any::<u64>()) {
        let (_, x1) = pair(seed, (8, 1, 2, 2));
        let s = FlowSample::draw(&x1, &mut seeded(seed), &FlowConfig::default()).unwrap();
        prop_assert!(s.t.iter().all(|t| (0.0..1.0).contains(t)));
        prop_assert_eq!(s.x_t.dims(), x1.dims());
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let cfg = FlowConfig::default();
    let (x0, x1) = pair(0, (1, 1, 2, 2));
    assert!(conditional_path(&x0, &x1, 1.5, &cfg).is_err());
    assert!(conditional_path_batched(&x0, &x1, &[0.1, 0.2], &cfg).is_err());
    let (y, _) = pair(1, (1, 2, 2, 2));
    assert!(target_velocity(&x0, &y, &cfg).is_err());
    let bad = FlowConfig { num_steps: 0, ..cfg };
    assert!(euler_integrate(|x, _| Ok(x.clone()), &x0, &bad).is_err());
    let nan = (x0.zeros_like().unwrap() / 0.0).unwrap();
    let err = euler_integrate(|_, _| Ok(nan.clone()), &x0, &cfg).unwrap_err();
    assert!(matches!(err, Error::NonFiniteVelocity { step: 0 }));
}
