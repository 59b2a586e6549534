use mcl_core::head::{softmax, FC_B, FC_W};
use mcl_core::model::{
    classification_objective, decode_checkpoint, encode_checkpoint, reconstruction_mse,
    reconstruction_objective, PairedSamples,
};
use mcl_core::optim::finite_diff_check;
use mcl_core::{
    evaluate, hosvd, init_hosvd, init_reconstruction, init_task_head, make_synthetic, train_joint,
    ConfigPoint, DenseTensor, Error, FactorMatrix, HeadConfig, LabeledDataset, MclModel,
    OptimizerConfig, SensingOperator, SplitPart, SynthesisOperator, SyntheticSpec, TaskHead,
    TensorShape,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn shape(d: &[usize]) -> TensorShape {
    TensorShape::new(d.to_vec()).unwrap()
}

fn identity_ops(dims: &[usize]) -> (SensingOperator, SynthesisOperator) {
    let f: Vec<FactorMatrix> = dims.iter().map(|&n| FactorMatrix::identity(n)).collect();
    (
        SensingOperator::new(f.clone()).unwrap(),
        SynthesisOperator::new(f).unwrap(),
    )
}

fn random_dataset(n: usize, dims: &[usize], classes: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| {
            let data = (0..dims.iter().product::<usize>()).map(|_| rng.random::<f64>()).collect();
            DenseTensor::new(shape(dims), data).unwrap()
        })
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    LabeledDataset::new(samples, labels, classes).unwrap()
}

/// Two classes of near-constant images, dark and bright.
fn brightness_dataset(per_class: usize, dims: &[usize], seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let numel: usize = dims.iter().product();
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for i in 0..2 * per_class {
        let c = i % 2;
        let base = if c == 0 { 0.2 } else { 0.8 };
        let data = (0..numel).map(|_| base + 0.05 * (rng.random::<f64>() - 0.5)).collect();
        samples.push(DenseTensor::new(shape(dims), data).unwrap());
        labels.push(c);
    }
    LabeledDataset::new(samples, labels, 2).unwrap()
}

fn quick(epochs: usize, lr: f64) -> OptimizerConfig {
    OptimizerConfig::joint().with_epochs(epochs).with_stages(&[(1, lr)])
}

#[test]
fn sense_shapes_and_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let y = DenseTensor::gaussian(shape(&[8, 8, 3]), 1.0, &mut rng);
    let (cs, _) = identity_ops(&[8, 8, 3]);
    assert_eq!(cs.apply(&y).unwrap(), y);

    let cfg = ConfigPoint::from_dims(&[8, 8, 3], &[2, 2, 1]).unwrap();
    let cs = SensingOperator::gaussian(&cfg, &mut rng);
    let z = cs.apply(&y).unwrap();
    assert_eq!(z.dims(), &[2, 2, 1]);
    let direct = mcl_core::multilinear_map(&y, cs.factors()).unwrap();
    assert!(z.data().iter().zip(direct.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(cs.apply(&DenseTensor::zeros(shape(&[8, 4, 3]))).is_err());
}

#[test]
fn synthesis_inverts_full_rank_hosvd() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let y = DenseTensor::gaussian(shape(&[5, 4, 3]), 1.0, &mut rng);
    let h = hosvd(&y, &shape(&[5, 4, 3])).unwrap();
    let fs = SynthesisOperator::new(h.factors.iter().map(|f| f.transpose()).collect()).unwrap();
    let back = fs.apply(&h.core).unwrap();
    let err = back.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-10);

    let cfg = ConfigPoint::from_dims(&[8, 8, 3], &[2, 2, 1]).unwrap();
    let fs = SynthesisOperator::gaussian(&cfg, &shape(&[8, 8, 3]), &mut rng);
    let z = DenseTensor::gaussian(shape(&[2, 2, 1]), 1.0, &mut rng);
    let t = fs.apply(&z).unwrap();
    assert_eq!(t.dims(), &[8, 8, 3]);
    let direct = mcl_core::multilinear_map(&z, fs.factors()).unwrap();
    assert!(t.data().iter().zip(direct.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

fn small_model(seed: u64) -> MclModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ConfigPoint::from_dims(&[6, 6, 2], &[3, 3, 1]).unwrap();
    let cs = SensingOperator::gaussian(&cfg, &mut rng);
    let fs = SynthesisOperator::gaussian(&cfg, &shape(&[8, 8, 2]), &mut rng);
    let head = TaskHead::new(2, 3, HeadConfig::default(), seed).unwrap();
    MclModel::new(cs, fs, head, cfg).unwrap()
}

#[test]
fn forward_is_a_deterministic_distribution() {
    let m = small_model(3);
    let y = DenseTensor::gaussian(shape(&[6, 6, 2]), 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let a = m.forward(&y).unwrap();
    let b = m.forward(&y).unwrap();
    assert_eq!(a.len(), 3);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    let p = softmax(&a);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let mut zero = m.clone();
    zero.head.params.iter_mut().for_each(|b| b.fill(0.0));
    for v in softmax(&zero.forward(&y).unwrap()) {
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn model_rejects_inconsistent_parts() {
    let m = small_model(5);
    let other = ConfigPoint::from_dims(&[6, 6, 2], &[2, 2, 1]).unwrap();
    assert!(MclModel::new(m.cs.clone(), m.fs.clone(), m.head.clone(), other).is_err());
    let head1 = TaskHead::new(1, 3, HeadConfig::default(), 0).unwrap();
    assert!(MclModel::new(m.cs.clone(), m.fs.clone(), head1, m.config().clone()).is_err());
}

#[test]
fn hosvd_init_single_sample_matches_per_sample_hosvd() {
    let ds = random_dataset(1, &[6, 5, 3], 2, 6);
    let cfg = ConfigPoint::from_dims(&[6, 5, 3], &[3, 2, 2]).unwrap();
    let (cs, fs) = init_hosvd(&ds.view_all(), &cfg).unwrap();
    let h = hosvd(&ds.samples()[0], &shape(&[3, 2, 2])).unwrap();
    for (a, b) in cs.factors().iter().zip(&h.factors) {
        assert!(a.max_abs_diff(b) < 1e-10);
    }
    for (a, b) in fs.factors().iter().zip(&h.factors) {
        assert!(a.max_abs_diff(&b.transpose()) < 1e-10);
    }
}

#[test]
fn hosvd_init_is_exact_at_full_rank_and_orthonormal() {
    let ds = random_dataset(12, &[6, 5, 3], 2, 7);
    let cfg = ConfigPoint::from_dims(&[6, 5, 3], &[6, 5, 3]).unwrap();
    let (cs, fs) = init_hosvd(&ds.view_all(), &cfg).unwrap();
    let paired = PairedSamples::new(&ds.view_all(), &cfg.input).unwrap();
    assert!(reconstruction_mse(&cs, &fs, &paired).unwrap() <= 1e-10);

    let cfg = ConfigPoint::from_dims(&[6, 5, 3], &[3, 2, 2]).unwrap();
    let (cs, _) = init_hosvd(&ds.view_all(), &cfg).unwrap();
    for f in cs.factors() {
        let g = f.gram();
        let eye = FactorMatrix::identity(f.rows());
        assert!(g.max_abs_diff(&eye) < 1e-10);
    }

    let low = ConfigPoint::from_dims(&[4, 5, 3], &[3, 2, 2]).unwrap();
    assert!(matches!(init_hosvd(&ds.view_all(), &low), Err(Error::InvalidConfig(_))));
}

#[test]
fn hosvd_init_beats_gaussian_init() {
    let cfg = ConfigPoint::from_dims(&[8, 8, 3], &[4, 4, 2]).unwrap();
    let mut wins = 0;
    for trial in 0..20u64 {
        let spec = SyntheticSpec::new(2, 5, shape(&[8, 8, 3]), shape(&[3, 3, 2]), 0.3, 100 + trial);
        let ds = make_synthetic(&spec).unwrap();
        let view = ds.view_all();
        let paired = PairedSamples::new(&view, &cfg.input).unwrap();
        let (cs, fs) = init_hosvd(&view, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let gcs = SensingOperator::gaussian(&cfg, &mut rng);
        let gfs = SynthesisOperator::gaussian(&cfg, &shape(&[8, 8, 3]), &mut rng);
        if reconstruction_mse(&cs, &fs, &paired).unwrap() < reconstruction_mse(&gcs, &gfs, &paired).unwrap() {
            wins += 1;
        }
    }
    assert!(wins >= 19, "HOSVD won {wins}/20");
}

#[test]
fn reconstruction_init_lossless_and_low_rank() {
    let ds = random_dataset(50, &[8, 8, 3], 2, 8);
    let cfg = ConfigPoint::from_dims(&[8, 8, 3], &[8, 8, 3]).unwrap();
    let opt = OptimizerConfig::reconstruction().with_epochs(3);
    let r = init_reconstruction(&ds.view_all(), &cfg, &opt).unwrap();
    assert_eq!(r.history.len(), 3);
    assert!(r.history.iter().all(|&l| l <= 1e-3), "{:?}", r.history);

    let mut spec = SyntheticSpec::new(2, 10, shape(&[16, 16, 3]), shape(&[2, 2, 1]), 0.0, 9);
    spec.class_spread = 0.0;
    let ds = make_synthetic(&spec).unwrap();
    let cfg = ConfigPoint::from_dims(&[16, 16, 3], &[2, 2, 1]).unwrap();
    let r = init_reconstruction(&ds.view_all(), &cfg, &OptimizerConfig::reconstruction()).unwrap();
    assert!(*r.history.last().unwrap() <= 1e-4, "{:?}", r.history);
}

#[test]
fn reconstruction_init_from_gaussian_improves() {
    let spec = SyntheticSpec::new(2, 20, shape(&[8, 8, 3]), shape(&[2, 2, 1]), 0.1, 10);
    let ds = make_synthetic(&spec).unwrap();
    let cfg = ConfigPoint::from_dims(&[6, 6, 3], &[3, 3, 2]).unwrap();
    let opt = OptimizerConfig::reconstruction().with_epochs(30).with_stages(&[(1, 1e-2)]);
    let r = init_reconstruction(&ds.view_all(), &cfg, &opt).unwrap();
    assert!(r.history.last().unwrap() < &(0.5 * r.history[0]), "{:?}", r.history);
}

#[test]
fn reconstruction_divergence_names_the_epoch() {
    let ds = random_dataset(8, &[4, 4, 2], 2, 11);
    let cfg = ConfigPoint::from_dims(&[3, 3, 2], &[2, 2, 1]).unwrap();
    let opt = OptimizerConfig::reconstruction().with_epochs(50).with_stages(&[(1, 1e150)]);
    match init_reconstruction(&ds.view_all(), &cfg, &opt) {
        Err(Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn task_head_learns_separable_data() {
    let ds = brightness_dataset(20, &[8, 8, 3], 12);
    let opt = quick(30, 1e-2);
    let head = init_task_head(&ds.view_all(), &opt, HeadConfig::default()).unwrap();
    let acc = mcl_core::model::head_accuracy(&head, &ds.view_all()).unwrap();
    assert!(acc >= 0.99, "accuracy {acc}");
    let again = init_task_head(&ds.view_all(), &opt, HeadConfig::default()).unwrap();
    assert_eq!(head, again);
}

#[test]
fn task_head_on_random_labels_is_at_chance() {
    let ds = random_dataset(600, &[4, 4, 1], 2, 13);
    let train: Vec<usize> = (0..200).collect();
    let test: Vec<usize> = (200..600).collect();
    let head = init_task_head(&ds.view_indices(&train), &quick(10, 1e-3), HeadConfig::default()).unwrap();
    let acc = mcl_core::model::head_accuracy(&head, &ds.view_indices(&test)).unwrap();
    assert!((acc - 0.5).abs() <= 0.1, "accuracy {acc}");
}

#[test]
fn task_head_needs_two_classes() {
    let ds = random_dataset(4, &[4, 4, 1], 1, 14);
    assert!(init_task_head(&ds.view_all(), &quick(1, 1e-3), HeadConfig::default()).is_err());
}

fn lossless_setup() -> (LabeledDataset, MclModel, f64) {
    let spec = SyntheticSpec::new(3, 30, shape(&[8, 8, 3]), shape(&[2, 2, 1]), 0.3, 15);
    let ds = make_synthetic(&spec).unwrap();
    let cfg = ConfigPoint::from_dims(&[8, 8, 3], &[8, 8, 3]).unwrap();
    let (cs, fs) = init_hosvd(&ds.view(SplitPart::Train), &cfg).unwrap();
    let head = init_task_head(&ds.view(SplitPart::Train), &quick(15, 3e-3), HeadConfig::default()).unwrap();
    let head_acc = mcl_core::model::head_accuracy(&head, &ds.view(SplitPart::Test)).unwrap();
    let model = MclModel::new(cs, fs, head, cfg).unwrap();
    (ds, model, head_acc)
}

#[test]
fn joint_training_lossless_keeps_head_accuracy() {
    let (ds, model, head_acc) = lossless_setup();
    let opt = quick(8, 1e-3);
    let out = train_joint(&model, &ds.view(SplitPart::Train), &ds.view(SplitPart::Val), &opt).unwrap();
    assert_eq!(out.val_accuracy.len(), 9);
    assert_eq!(out.train_loss.len(), 8);
    let acc = evaluate(&out.model, &ds.view(SplitPart::Test)).unwrap().accuracy;
    assert!(acc >= head_acc - 0.02, "joint {acc} vs head {head_acc}");

    let again = train_joint(&model, &ds.view(SplitPart::Train), &ds.view(SplitPart::Val), &opt).unwrap();
    assert_eq!(out.model, again.model);
    assert_eq!(out.best_epoch, again.best_epoch);
}

#[test]
fn joint_training_no_op_cases() {
    let (ds, model, _) = lossless_setup();
    let (train, val) = (ds.view(SplitPart::Train), ds.view(SplitPart::Val));
    let out = train_joint(&model, &train, &val, &quick(0, 1e-3)).unwrap();
    assert_eq!(out.model, model);
    assert_eq!(out.best_epoch, 0);

    let mut frozen = quick(2, 0.0);
    frozen.weight_decay = 0.0;
    let out = train_joint(&model, &train, &ds.view_indices(&[]), &frozen).unwrap();
    let (a, b) = (out.model.flat_params(), model.flat_params());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

/// Head whose logit difference grows with mean brightness, with the
/// threshold placed at 0.5.
fn brightness_head(dims: &[usize]) -> TaskHead {
    let c = dims[2];
    let cfg = HeadConfig::default();
    let sizes = TaskHead::block_sizes(c, 2, cfg);
    let mut params: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![1.0; n]).collect();
    params[1].fill(0.0);
    params[3].fill(0.0);
    params[FC_B].fill(0.0);
    params[FC_W][..cfg.conv2_channels].fill(0.0);
    let probe = TaskHead::from_params(c, 2, cfg, params.clone()).unwrap();
    let mid = probe.scores(&DenseTensor::filled(shape(dims), 0.5)).unwrap();
    params[FC_B][1] = -(mid[1] - mid[0]);
    TaskHead::from_params(c, 2, cfg, params).unwrap()
}

#[test]
fn evaluate_perfect_identity_pipeline() {
    let dims = [6, 6, 2];
    let ds = brightness_dataset(10, &dims, 16);
    let (cs, fs) = identity_ops(&dims);
    let cfg = ConfigPoint::from_dims(&dims, &dims).unwrap();
    let model = MclModel::new(cs, fs, brightness_head(&dims), cfg).unwrap();
    let e = evaluate(&model, &ds.view_all()).unwrap();
    assert_eq!(e.accuracy, 1.0);
    assert_eq!(e.ce, 0.0);
    assert_eq!(e.mse, 0.0);

    let rev: Vec<usize> = (0..ds.len()).rev().collect();
    assert_eq!(evaluate(&model, &ds.view_indices(&rev)).unwrap(), e);
    assert!(evaluate(&model, &ds.view_indices(&[])).is_err());
}

#[test]
fn evaluate_is_order_invariant() {
    let m = small_model(17);
    let mut ds = random_dataset(40, &[8, 8, 2], 3, 18);
    ds.ensure_split(1).unwrap();
    let test = ds.indices(SplitPart::Test).to_vec();
    let mut shuffled = test.clone();
    shuffled.rotate_left(3);
    let a = evaluate(&m, &ds.view_indices(&test)).unwrap();
    let b = evaluate(&m, &ds.view_indices(&shuffled)).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert!((a.mse - b.mse).abs() <= 1e-12 * a.mse);
    assert!((a.ce - (1.0 - a.accuracy)).abs() < 1e-15);
}

fn grad_instance() -> (LabeledDataset, ConfigPoint) {
    (random_dataset(3, &[4, 4, 2], 3, 19), ConfigPoint::from_dims(&[3, 4, 2], &[2, 3, 1]).unwrap())
}

#[test]
fn reconstruction_gradients_match_finite_differences() {
    let (ds, cfg) = grad_instance();
    let view = ds.view_all();
    let paired = PairedSamples::new(&view, &cfg.input).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let cs = SensingOperator::gaussian(&cfg, &mut rng);
    let fs = SynthesisOperator::gaussian(&cfg, &shape(&[4, 4, 2]), &mut rng);
    let idx: Vec<usize> = (0..paired.len()).collect();
    let split_at: usize = cs.factors().iter().map(|f| f.data().len()).sum();
    let rebuild = |p: &[f64]| {
        let mut c = cs.clone();
        let mut f = fs.clone();
        let mut off = 0;
        for m in c.factors_mut().iter_mut().chain(f.factors_mut().iter_mut()) {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&p[off..off + n]);
            off += n;
        }
        (c, f)
    };
    let params: Vec<f64> = cs.factors().iter().chain(fs.factors()).flat_map(|f| f.data().to_vec()).collect();
    assert!(split_at < params.len());
    let report = finite_diff_check(
        |p| {
            let (c, f) = rebuild(p);
            let (loss, gc, gf) = reconstruction_objective(&c, &f, &paired.inputs, &paired.targets, &idx);
            (loss, gc.iter().chain(&gf).flat_map(|g| g.data().to_vec()).collect())
        },
        &params,
        1e-5,
        1e-5,
    );
    assert!(report.passed, "{report:?}");
}

#[test]
fn classification_gradients_match_finite_differences() {
    let (ds, cfg) = grad_instance();
    let view = ds.view_all();
    let paired = PairedSamples::new(&view, &cfg.input).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cs = SensingOperator::gaussian(&cfg, &mut rng);
    let fs = SynthesisOperator::gaussian(&cfg, &shape(&[4, 4, 2]), &mut rng);
    let mut head = TaskHead::new(2, 3, HeadConfig { conv1_channels: 2, conv2_channels: 3 }, 22).unwrap();
    // Nonzero biases keep every ReLU clear of its kink at this scale.
    head.params.iter_mut().skip(1).step_by(2).for_each(|b| b.iter_mut().for_each(|v| *v = 0.05));
    let model = MclModel::new(cs, fs, head, cfg).unwrap();
    let idx: Vec<usize> = (0..paired.len()).collect();
    let report = finite_diff_check(
        |p| {
            let mut m = model.clone();
            m.set_flat_params(p).unwrap();
            let (loss, g) = classification_objective(&m, &paired.inputs, &paired.labels, &idx).unwrap();
            (loss, g.flat())
        },
        &model.flat_params(),
        1e-5,
        1e-5,
    );
    assert!(report.passed, "{report:?}");
}

#[test]
fn checkpoint_roundtrip() {
    let m = small_model(23);
    let bytes = encode_checkpoint(&m);
    let back = decode_checkpoint(&bytes).unwrap();
    assert_eq!(back, m);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 8]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_checkpoint(&extra).is_err());

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.mclm");
    mcl_core::model::save_checkpoint(&m, &p).unwrap();
    assert_eq!(mcl_core::model::load_checkpoint(&p).unwrap(), m);
}
