use inpaint_core::datagen::{generate_dataset, split_of, DatasetConfig, Split, TextStyle};
use inpaint_core::imgcore::SegMap;
use inpaint_core::nnkit::*;
use inpaint_core::spm::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pair(seed: u64, h: usize, w: usize) -> (SegMap<f64>, SegMap<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = (0..h * w).map(|_| rng.random_bool(0.3) as u8 as f64).collect();
    let p = (0..h * w).map(|_| rng.random_range(0.02..0.98)).collect();
    (SegMap::new(h, w, s).unwrap(), SegMap::new(h, w, p).unwrap())
}

#[test]
fn seg_loss_closed_forms() {
    let ones = SegMap::<f64>::filled(8, 8, 1.0).unwrap();
    let zeros = SegMap::<f64>::zeros(8, 8);
    let half = SegMap::<f64>::filled(8, 8, 0.5).unwrap();
    assert!(loss_seg(&ones, &ones).unwrap().abs() < 1e-5);
    assert!((loss_seg(&ones, &half).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
    assert!((loss_seg(&zeros, &half).unwrap() - 2f64.ln()).abs() < 1e-12);
    // plain cross-entropy drops the factor on ink pixels
    assert!((loss_seg_with(&ones, &half, SegLossKind::Standard).unwrap() - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn seg_loss_argmin_over_constants() {
    let (s, _) = random_pair(4, 16, 16);
    let q = s.foreground_fraction();
    let grid: Vec<f64> = (1..10000).map(|i| i as f64 / 10000.0).collect();
    let best = grid
        .iter()
        .copied()
        .min_by(|&a, &b| {
            let la = loss_seg(&s, &SegMap::filled(16, 16, a).unwrap()).unwrap();
            let lb = loss_seg(&s, &SegMap::filled(16, 16, b).unwrap()).unwrap();
            la.partial_cmp(&lb).unwrap()
        })
        .unwrap();
    // d/dp [-(2q ln p + (1-q) ln(1-p))] = 0 at p = 2q / (1 + q)
    assert!((best - 2.0 * q / (1.0 + q)).abs() < 2e-4, "{best} vs {}", 2.0 * q / (1.0 + q));
}

#[test]
fn pix_loss_offset_and_identity() {
    let (s, p) = random_pair(1, 8, 16);
    assert_eq!(loss_pix(&p, &p).unwrap(), 0.0);
    let shifted = SegMap::new(8, 16, p.values().iter().map(|v| v * 0.8 + 0.1).collect()).unwrap();
    let base = SegMap::new(8, 16, p.values().iter().map(|v| v * 0.8).collect()).unwrap();
    assert!((loss_pix(&base, &shifted).unwrap() - 0.1).abs() < 1e-12);
    assert_eq!(loss_pix(&s, &p).unwrap(), loss_pix(&p, &s).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn pix_loss_is_symmetric_and_nonnegative(seed in 0u64..1000) {
        let (s, p) = random_pair(seed, 4, 8);
        let a = loss_pix(&s, &p).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert_eq!(a, loss_pix(&p, &s).unwrap());
    }

    #[test]
    fn seg_loss_nonnegative(seed in 0u64..1000) {
        let (s, p) = random_pair(seed, 4, 8);
        prop_assert!(loss_seg(&s, &p).unwrap() >= 0.0);
    }

    #[test]
    fn style_loss_ignores_spatial_permutation(seed in 0u64..200) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::<f64>::randn([1, 3, 4, 5], 1.0, &mut rng);
        let b = Tensor::<f64>::randn([1, 3, 4, 5], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..20).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let permute = |t: &Tensor<f64>| {
            let mut d = vec![0.0; 60];
            for c in 0..3 {
                for (k, &p) in perm.iter().enumerate() {
                    d[c * 20 + k] = t.data()[c * 20 + p];
                }
            }
            Tensor::from_vec([1, 3, 4, 5], d).unwrap()
        };
        let (ga, gb) = (gram(&a), gram(&b));
        let (pa, pb) = (gram(&permute(&a)), gram(&permute(&b)));
        for (x, y) in ga.data().iter().zip(pa.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        let l = |g1: &Tensor<f64>, g2: &Tensor<f64>| g1.data().iter().zip(g2.data()).map(|(x, y)| (x - y).abs()).sum::<f64>();
        prop_assert!((l(&ga, &gb) - l(&pa, &pb)).abs() < 1e-10);
    }
}

#[test]
fn gram_hand_values() {
    assert!(gram(&Tensor::<f64>::zeros([1, 2, 3, 3])).data().iter().all(|&v| v == 0.0));
    let f = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(gram(&f).data(), &[30.0 / 4.0]);
    let f = Tensor::from_vec([1, 2, 1, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
    // off-diagonal inner product is zero; normalizer C*H*W = 4
    assert_eq!(gram(&f).data(), &[0.25, 0.0, 0.0, 1.0]);
}

#[test]
fn character_loss_cases() {
    let (s, p) = random_pair(2, 8, 16);
    let id = FeatureExtractor::<f64>::Identity;
    assert_eq!(loss_cha(&s, &s, &id).unwrap(), 0.0);
    assert_eq!(loss_cha(&s, &p, &id).unwrap(), loss_pix(&s, &p).unwrap());

    let phi = FeatureExtractor::<f64>::seeded(0, 4).unwrap();
    let FeatureExtractor::Frozen { params, .. } = &phi else { unreachable!() };
    let direct = |m: &SegMap<f64>| naive_features(params, m);
    let (fa, fb) = (direct(&s), direct(&p));
    let want = fa.iter().zip(&fb).map(|(a, b)| (a - b).abs()).sum::<f64>() / fa.len() as f64;
    assert!((loss_cha(&s, &p, &phi).unwrap() - want).abs() < 1e-12);
}

/// Direct loops through the frozen stack: conv3x3, swish, stride-2 conv3x3, swish, conv3x3.
fn naive_features(p: &ParamStore<f64>, m: &SegMap<f64>) -> Vec<f64> {
    let conv = |x: &[f64], c: usize, h: usize, w: usize, name: &str, stride: usize| -> (Vec<f64>, usize, usize, usize) {
        let wt = p.get(&format!("{name}.weight")).unwrap();
        let b = p.value(&format!("{name}.bias")).unwrap();
        let co = wt.shape[0];
        let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b[o];
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (y * stride + ky) as isize - 1;
                                let ix = (xx * stride + kx) as isize - 1;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += wt.value[((o * c + ci) * 3 + ky) * 3 + kx] * x[(ci * h + iy as usize) * w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * ho + y) * wo + xx] = acc;
                }
            }
        }
        (out, co, ho, wo)
    };
    let swish = |v: Vec<f64>| v.into_iter().map(|x| x / (1.0 + (-x).exp())).collect::<Vec<_>>();
    let (x, c, h, w) = conv(m.values(), 1, m.height(), m.width(), "phi.c1", 1);
    let (x, c, h, w) = conv(&swish(x), c, h, w, "phi.c2", 2);
    conv(&swish(x), c, h, w, "phi.c3", 1).0
}

#[test]
fn total_loss_additivity_and_projection() {
    let (s, p) = random_pair(3, 8, 16);
    let phi = FeatureExtractor::<f64>::seeded(0, 4).unwrap();
    let unit = LossWeights::default();
    let sum = loss_pix(&s, &p).unwrap() + loss_seg(&s, &p).unwrap() + loss_cha(&s, &p, &phi).unwrap() + loss_sty(&s, &p, &phi).unwrap();
    assert!((loss_spm(&s, &p, &phi, &unit).unwrap() - sum).abs() < 1e-12);
    let only_pix = LossWeights { pix: 1.0, seg: 0.0, cha: 0.0, sty: 0.0 };
    assert_eq!(loss_spm(&s, &p, &phi, &only_pix).unwrap(), loss_pix(&s, &p).unwrap());
    assert!(loss_spm(&s, &s, &phi, &unit).unwrap().abs() < 1e-5);
    assert!(loss_spm(&s, &p, &phi, &LossWeights { pix: -1.0, ..unit }).is_err());
}

struct ObjectiveGrad {
    s: Tensor<f64>,
    phi: FeatureExtractor<f64>,
    kind: SegLossKind,
}

impl Objective for ObjectiveGrad {
    fn loss(&self, p: &ParamStore<f64>) -> inpaint_core::Result<f64> {
        let y = Tensor::from_vec(self.s.shape(), p.value("y")?.to_vec())?;
        Ok(spm_objective(&self.s, &y, &self.phi, &LossWeights::default(), self.kind)?.0.total)
    }
    fn loss_and_grad(&self, p: &mut ParamStore<f64>) -> inpaint_core::Result<f64> {
        let y = Tensor::from_vec(self.s.shape(), p.value("y")?.to_vec())?;
        let (t, g) = spm_objective(&self.s, &y, &self.phi, &LossWeights::default(), self.kind)?;
        p.accumulate("y", g.data())?;
        Ok(t.total)
    }
}

#[test]
fn objective_gradient_matches_finite_differences() {
    for seed in 0..5 {
        for kind in [SegLossKind::Weighted, SegLossKind::Standard] {
            let (s, y) = random_pair(seed, 8, 8);
            let obj = ObjectiveGrad {
                s: Tensor::from_segmaps(&[&s]).unwrap(),
                phi: FeatureExtractor::seeded(seed, 3).unwrap(),
                kind,
            };
            let mut p = ParamStore::new();
            p.insert("y", &[64], y.values().to_vec(), true).unwrap();
            let r = finite_diff_gradcheck(&obj, &mut p, 1e-4, None).unwrap();
            assert!(r.max_rel_error <= 1e-4, "{r:?}");
        }
    }
}

struct NetObjective {
    net: SpmNet,
    x: Tensor<f64>,
    s: Tensor<f64>,
    phi: FeatureExtractor<f64>,
}

impl Objective for NetObjective {
    fn loss(&self, p: &ParamStore<f64>) -> inpaint_core::Result<f64> {
        let (y, _) = self.net.forward(p, &self.x, Mode::Train)?;
        Ok(spm_objective(&self.s, &y, &self.phi, &LossWeights::default(), SegLossKind::Weighted)?.0.total)
    }
    fn loss_and_grad(&self, p: &mut ParamStore<f64>) -> inpaint_core::Result<f64> {
        let (y, cache) = self.net.forward(p, &self.x, Mode::Train)?;
        let (t, g) = spm_objective(&self.s, &y, &self.phi, &LossWeights::default(), SegLossKind::Weighted)?;
        self.net.backward(p, &cache, &g)?;
        Ok(t.total)
    }
}

#[test]
fn full_network_gradient_matches_finite_differences() {
    for (norm, batch, seed) in [(NormKind::Group, 1, 0u64), (NormKind::Group, 2, 1), (NormKind::Batch, 2, 2)] {
        let arch = SpmArch {
            in_channels: 3,
            widths: [2, 2, 2],
            norm,
            dilation: 2,
        };
        let net = SpmNet::new(arch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::<f64>::new();
        net.init_params(&mut p, seed).unwrap();
        randomize_params(&mut p, 0.6, &mut rng);
        let s = Tensor::from_vec(
            [batch, 1, 8, 16],
            (0..batch * 128).map(|_| rng.random_bool(0.3) as u8 as f64).collect(),
        )
        .unwrap();
        let obj = NetObjective {
            net,
            x: Tensor::randn([batch, 3, 8, 16], 1.0, &mut rng),
            s,
            phi: FeatureExtractor::seeded(seed, 2).unwrap(),
        };
        let r = finite_diff_gradcheck(&obj, &mut p, 1e-4, None).unwrap();
        println!("{norm:?} batch {batch}: {} coords, max rel err {:.2e}", r.checked, r.max_rel_error);
        assert!(r.max_rel_error <= 1e-4, "{r:?}");
    }
}

#[test]
fn desk_width_network_gradient_matches_finite_differences() {
    let net = SpmNet::new(SpmArch::desk(3, NormKind::Group)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut p = ParamStore::<f64>::new();
    net.init_params(&mut p, 7).unwrap();
    let s = Tensor::from_vec([2, 1, 16, 32], (0..2 * 512).map(|_| rng.random_bool(0.3) as u8 as f64).collect()).unwrap();
    let obj = NetObjective {
        net,
        x: Tensor::randn([2, 3, 16, 32], 1.0, &mut rng),
        s,
        phi: FeatureExtractor::seeded(7, DEFAULT_FEATURE_CHANNELS).unwrap(),
    };
    // every entry, a strided subset of its coordinates
    let r = finite_diff_gradcheck(&obj, &mut p, 1e-4, Some(6)).unwrap();
    println!("desk widths: {} coords, max rel err {:.2e}", r.checked, r.max_rel_error);
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn prediction_is_a_probability_map_and_deterministic() {
    let cfg = toy_config(4, 3);
    let recs = generate_dataset(&cfg).unwrap();
    let model = SpmModel::<f32>::new(SpmArch::desk(3, NormKind::Group), 0).unwrap();
    let a = spm_predict(&model, &recs[0].corrupted_image).unwrap();
    let b = spm_predict(&model, &recs[0].corrupted_image).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.height(), a.width()), (32, 128));
    assert!(a.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let bad = inpaint_core::imgcore::ImageTensor::filled(30, 128, 3, inpaint_core::imgcore::ValueRange::Unit, 0.5).unwrap();
    assert!(spm_predict(&model, &bad).is_err());
}

fn toy_config(records: usize, seed: u64) -> DatasetConfig {
    DatasetConfig {
        records,
        height: 32,
        width: 128,
        data_seed: seed,
        style: TextStyle::Scene,
        ..Default::default()
    }
}

#[test]
fn overfits_a_single_record() {
    let recs = generate_dataset(&toy_config(1, 7)).unwrap();
    let refs: Vec<_> = recs.iter().collect();
    let mut model = SpmModel::<f32>::new(SpmArch::desk(3, NormKind::Group), 1).unwrap();
    let phi = FeatureExtractor::seeded(0, DEFAULT_FEATURE_CHANNELS).unwrap();
    let cfg = SpmTrainConfig {
        epochs: 300,
        batch_size: 1,
        lr: 3e-3,
        ..Default::default()
    };
    let report = train_spm(&mut model, &refs, &phi, &cfg).unwrap();
    assert_eq!(report.steps, 300);
    let pred = spm_predict(&model, &recs[0].corrupted_image).unwrap();
    let l = loss_pix(&recs[0].intact_segmask, &pred).unwrap();
    assert!(l < 0.05, "L_pix after overfitting: {l}");
    assert!(report.final_loss < report.initial_loss);
}

#[test]
fn zero_learning_rate_keeps_losses_constant() {
    let recs = generate_dataset(&toy_config(4, 8)).unwrap();
    let refs: Vec<_> = recs.iter().collect();
    let mut model = SpmModel::<f32>::new(SpmArch::desk(3, NormKind::Group), 2).unwrap();
    let before = model.params.clone();
    let phi = FeatureExtractor::seeded(0, 4).unwrap();
    let cfg = SpmTrainConfig {
        epochs: 3,
        batch_size: 4,
        lr: 0.0,
        ..Default::default()
    };
    let report = train_spm(&mut model, &refs, &phi, &cfg).unwrap();
    let l0 = report.epochs[0].mean.total;
    // identical parameters; epochs differ only in summation order
    assert!(report.epochs.iter().all(|e| (e.mean.total - l0).abs() <= 1e-6 * l0.abs()));
    for ((_, a), (_, b)) in before.iter().zip(model.params.iter()) {
        assert_eq!(a.value, b.value);
    }
}

#[test]
fn training_improves_held_out_pixel_loss() {
    let mut cfg = toy_config(240, 9);
    cfg.test_fraction = 40.0 / 240.0;
    let recs = generate_dataset(&cfg).unwrap();
    let train = split_of(&recs, Split::Train);
    let test = split_of(&recs, Split::Test);
    assert_eq!(train.len(), 200);
    let phi = FeatureExtractor::seeded(0, DEFAULT_FEATURE_CHANNELS).unwrap();
    let mut model = SpmModel::<f32>::new(SpmArch::desk(3, NormKind::for_batch_size(8)), 3).unwrap();
    let w = LossWeights::default();
    let before = evaluate_spm(&model, &test, &phi, &w, 8).unwrap();
    let tc = SpmTrainConfig {
        epochs: 3,
        batch_size: 8,
        lr: 2e-3,
        ..Default::default()
    };
    train_spm(&mut model, &train, &phi, &tc).unwrap();
    let after = evaluate_spm(&model, &test, &phi, &w, 8).unwrap();
    println!("held-out L_pix {:.4} -> {:.4}", before.pix, after.pix);
    assert!(after.pix < before.pix);
}

#[test]
fn nan_loss_aborts_with_diagnostic() {
    let recs = generate_dataset(&toy_config(2, 10)).unwrap();
    let refs: Vec<_> = recs.iter().collect();
    let mut model = SpmModel::<f32>::new(SpmArch::desk(3, NormKind::Group), 2).unwrap();
    model.params.get_mut("spm.head.conv.bias").unwrap().value[0] = f32::NAN;
    let phi = FeatureExtractor::seeded(0, 4).unwrap();
    let err = train_spm(&mut model, &refs, &phi, &SpmTrainConfig { epochs: 1, batch_size: 2, ..Default::default() }).unwrap_err();
    assert!(matches!(err, inpaint_core::Error::Divergence { step: 0, .. }), "{err}");
}
