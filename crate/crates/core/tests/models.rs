use mltn_core::data::synth_blobs;
use mltn_core::model::{LotenetConfig, MltnConfig, MpsInit, TenetXConfig};
use mltn_core::optim::cross_entropy_with_logits;
use mltn_core::{Classifier, FeatureMap, LotenetModel, Mode, MltnModel, TenetXModel, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_batch(rng: &mut ChaCha8Rng, b: usize, h: usize, w: usize) -> Tensor {
    Tensor::new(vec![b, h, w], (0..b * h * w).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn copy_params<A: Classifier, B: Classifier>(from: &A, to: &mut B) {
    let src: Vec<Tensor> = from.params().into_iter().map(|(_, t)| t.clone()).collect();
    let dst = to.params_mut();
    assert_eq!(src.len(), dst.len());
    for (d, s) in dst.into_iter().zip(src) {
        assert_eq!(d.shape(), s.shape());
        d.data_mut().copy_from_slice(s.data());
    }
}

fn loss<C: Classifier>(model: &mut C, x: &Tensor, y: &[usize]) -> f64 {
    let (logits, _) = model.forward(x, Mode::Train).unwrap();
    cross_entropy_with_logits(&logits, y).unwrap().0
}

#[test]
fn two_layer_mltn_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cfg = MltnConfig::new(8, 8, vec![2, 2], 2, 2);
    cfg.init = MpsInit { noise_std: 0.3, gain: 0.5 };
    let mut model = MltnModel::new(cfg, &mut rng).unwrap();
    let x = rand_batch(&mut rng, 3, 8, 8);
    let y = [0, 1, 1];
    let (logits, cache) = model.forward(&x, Mode::Train).unwrap();
    let (_, g) = cross_entropy_with_logits(&logits, &y).unwrap();
    let grads = model.backward(&cache, &g).unwrap();
    let h = 1e-6;
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    for (p, name) in names.iter().enumerate() {
        for q in 0..grads.params[p].len() {
            let orig = model.params()[p].1.data()[q];
            model.params_mut()[p].data_mut()[q] = orig + h;
            let up = loss(&mut model, &x, &y);
            model.params_mut()[p].data_mut()[q] = orig - h;
            let dn = loss(&mut model, &x, &y);
            model.params_mut()[p].data_mut()[q] = orig;
            let fd = (up - dn) / (2.0 * h);
            let an = grads.params[p].data()[q];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-6, "{name}[{q}]: fd {fd} vs analytic {an}");
        }
    }
}

#[test]
fn single_stride_one_layer_equals_tenetx() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut cfg = MltnConfig::new(4, 4, vec![1], 3, 2);
    cfg.feature_map = FeatureMap::Sinusoidal;
    cfg.init = MpsInit { noise_std: 0.2, gain: 1.0 };
    let mut mltn = MltnModel::new(cfg, &mut rng).unwrap();
    let mut tenetx = TenetXModel::new(TenetXConfig::new(4, 4, 3, 2), &mut rng).unwrap();
    copy_params(&mltn, &mut tenetx);
    let x = rand_batch(&mut rng, 5, 4, 4);
    let a = mltn.forward(&x, Mode::Eval).unwrap().0;
    let b = tenetx.forward(&x, Mode::Eval).unwrap().0;
    assert_eq!(a.data(), b.data());
}

#[test]
fn unpatched_lotenet_equals_single_layer_mltn() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut cfg = MltnConfig::new(4, 4, vec![1], 2, 3);
    cfg.feature_map = FeatureMap::Sinusoidal;
    cfg.init = MpsInit { noise_std: 0.2, gain: 1.0 };
    let mut mltn = MltnModel::new(cfg, &mut rng).unwrap();
    let mut lotenet = LotenetModel::new(LotenetConfig::new(4, 4, vec![], 2, 3), &mut rng).unwrap();
    copy_params(&mltn, &mut lotenet);
    let x = rand_batch(&mut rng, 4, 4, 4);
    let a = mltn.forward(&x, Mode::Eval).unwrap().0;
    let b = lotenet.forward(&x, Mode::Eval).unwrap().0;
    assert_eq!(a.data(), b.data());
}

#[test]
fn duplicated_batch_doubles_the_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut cfg = MltnConfig::new(8, 8, vec![2, 2], 2, 2);
    cfg.init = MpsInit { noise_std: 0.3, gain: 0.5 };
    let mut model = MltnModel::new(cfg, &mut rng).unwrap();
    let x = rand_batch(&mut rng, 1, 8, 8);
    let xx = Tensor::new(vec![2, 8, 8], [x.data(), x.data()].concat()).unwrap();
    let g1 = Tensor::new(vec![1, 2], vec![0.7, -0.2]).unwrap();
    let g2 = Tensor::new(vec![2, 2], vec![0.7, -0.2, 0.7, -0.2]).unwrap();
    let (_, c1) = model.forward(&x, Mode::Eval).unwrap();
    let (_, c2) = model.forward(&xx, Mode::Eval).unwrap();
    let single = model.backward(&c1, &g1).unwrap();
    let double = model.backward(&c2, &g2).unwrap();
    for (a, b) in single.params.iter().zip(&double.params) {
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((2.0 * u - v).abs() <= 1e-12 * v.abs().max(1e-300), "{u} vs {v}");
        }
    }
}

#[test]
fn eval_rows_are_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = MltnModel::new(MltnConfig::new(8, 8, vec![2, 2], 2, 2), &mut rng).unwrap();
    let x = rand_batch(&mut rng, 2, 8, 8);
    let both = model.forward(&x, Mode::Eval).unwrap().0;
    for r in 0..2 {
        let one = Tensor::new(vec![1, 8, 8], x.data()[r * 64..(r + 1) * 64].to_vec()).unwrap();
        assert_eq!(model.forward(&one, Mode::Eval).unwrap().0.data(), both.row(r));
    }
}

#[test]
fn full_size_model_is_finite_after_calibration() {
    let ds = synth_blobs(2, 128, 128, 4).unwrap();
    let mut cfg = MltnConfig::new(128, 128, vec![4, 4, 4], 5, 2);
    cfg.init = MpsInit { noise_std: 1e-2, gain: 2.0 / 16.0 };
    let mut model = MltnModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    assert_eq!(model.layers()[0].mps.n_sites(), 1024);
    model.calibrate(&ds.images).unwrap();
    let (logits, cache) = model.forward(&ds.images, Mode::Train).unwrap();
    assert!(logits.is_finite());
    let (_, g) = cross_entropy_with_logits(&logits, &ds.labels).unwrap();
    assert!(model.backward(&cache, &g).unwrap().is_finite());
}

fn stride_chain() -> impl Strategy<Value = (Vec<usize>, usize)> {
    proptest::collection::vec(1usize..=3, 1..=3).prop_flat_map(|strides| {
        let prod: usize = strides.iter().product();
        let max_r = (48 / prod).max(1);
        (Just(strides), 1..=max_r)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dimension_chain_follows_strides((strides, r) in stride_chain()) {
        let prod: usize = strides.iter().product();
        let side = prod * r;
        let cfg = MltnConfig::new(side, side, strides.clone(), 2, 2);
        match cfg.plan() {
            Ok(plan) => {
                let mut divisor = 1;
                for (l, p) in plan.iter().enumerate() {
                    divisor *= strides[l] * strides[l];
                    prop_assert_eq!(p.sites, side * side / divisor);
                    prop_assert_eq!(p.feature_dim, strides[l] * strides[l]);
                    if l + 1 < plan.len() {
                        prop_assert_eq!(p.output_dim, p.sites);
                        prop_assert_eq!(p.grid.0 * p.grid.1, p.sites);
                    } else {
                        prop_assert_eq!(p.output_dim, 2);
                    }
                }
            }
            // a chain that collapses to one site is refused, never truncated
            Err(_) => {
                let collapses = (0..strides.len()).any(|l| {
                    let d: usize = strides[..=l].iter().map(|k| k * k).product();
                    side * side / d < 2
                });
                prop_assert!(collapses);
            }
        }
    }
}
