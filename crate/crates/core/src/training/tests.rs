use ndarray::{array, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::data::{synth_generate, SyntheticSpec};

fn random(t: usize, c: usize, seed: u64) -> SeqTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    SeqTensor::new(Array2::from_shape_simple_fn((t, c), || StandardNormal.sample(&mut rng))).unwrap()
}

fn tiny_config(levels: usize) -> TrainConfig {
    TrainConfig {
        lambda_rec: 0.3,
        epochs: 2,
        seed: 3,
        hvq: HvqConfig {
            k: 2,
            alpha: 2,
            levels,
            ..HvqConfig::default()
        },
        tcn: TcnConfig {
            stages: 2,
            layers_per_stage: 2,
            hidden_channels: 4,
            latent_dim: 3,
            input_dim: 4,
            ..TcnConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn tiny_dataset(videos: usize, seed: u64) -> ActivityDataset {
    ActivityDataset {
        name: "tiny".into(),
        videos: (0..videos)
            .map(|v| VideoFeatures::new(format!("v{v}"), random(12 + v, 4, seed + v as u64)))
            .collect(),
        labels: None,
        label_names: Vec::new(),
        k: 2,
        background: None,
    }
}

#[test]
fn reconstruction_loss_cases() {
    let x = SeqTensor::new(array![[1.0, 0.0]]).unwrap();
    let zero = SeqTensor::new(array![[0.0, 0.0]]).unwrap();
    assert_eq!(reconstruction_loss(&x, &x).unwrap().0, 0.0);
    let (l, g) = reconstruction_loss(&x, &zero).unwrap();
    assert_eq!(l, 1.0);
    assert_eq!(g, array![[-2.0, 0.0]]);
    let wide = SeqTensor::new(array![[1.0, 0.0, 0.0]]).unwrap();
    assert!(matches!(reconstruction_loss(&x, &wide), Err(HvqError::Data(_))));
}

#[test]
fn reconstruction_gradient_matches_finite_differences() {
    let x = random(5, 3, 1);
    let xh = random(5, 3, 2);
    let (_, g) = reconstruction_loss(&x, &xh).unwrap();
    let eps = 1e-5;
    for t in 0..5 {
        for c in 0..3 {
            let mut p = xh.as_array().clone();
            p[[t, c]] += eps;
            let mut m = xh.as_array().clone();
            m[[t, c]] -= eps;
            let lp = reconstruction_loss(&x, &SeqTensor::new(p).unwrap()).unwrap().0;
            let lm = reconstruction_loss(&x, &SeqTensor::new(m).unwrap()).unwrap().0;
            let numeric = (lp - lm) / (2.0 * eps);
            let rel = (numeric - g[[t, c]]).abs() / g[[t, c]].abs().max(numeric.abs()).max(1e-12);
            assert!(rel < 1e-8, "relative error {rel}");
        }
    }
}

#[test]
fn total_loss_cases() {
    let cfg = TrainConfig::default();
    let terms = StepLosses {
        commit_z: 1.0,
        commit_q: 2.0,
        rec: 500.0,
    };
    assert!((total_loss(&terms, &cfg) - 4.0).abs() < 1e-12);
    let rec_only = TrainConfig {
        loss_terms: LossTerms {
            rec: true,
            commit_z: false,
            commit_q: false,
        },
        ..TrainConfig::default()
    };
    assert!((total_loss(&terms, &rec_only) - 1.0).abs() < 1e-12);
    assert_eq!(total_loss(&StepLosses::default(), &cfg), 0.0);
}

#[test]
fn config_validation() {
    let mut cfg = tiny_config(2);
    assert!(cfg.validate().is_ok());
    cfg.loss_terms = LossTerms {
        rec: false,
        commit_z: false,
        commit_q: false,
    };
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_config(2);
    cfg.lambda_rec = -1.0;
    assert!(cfg.validate().is_err());
    let mut cfg = tiny_config(2);
    cfg.epochs = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn composite_gradient_matches_finite_differences() {
    for levels in 1..=3 {
        let cfg = tiny_config(levels);
        let ds = tiny_dataset(1, 10 + levels as u64);
        let mut state = initialize(&ds, &cfg).unwrap();
        // nonzero biases keep pre-activations off the ReLU kink
        let mut rng = ChaCha8Rng::seed_from_u64(levels as u64);
        for net in [&mut state.model.encoder, &mut state.model.decoder] {
            for p in net.params.params.iter_mut().filter(|p| p.name.ends_with("bias")) {
                for v in &mut p.value {
                    *v = 0.1 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                }
            }
        }
        let err = training_gradient_check(&state, &ds.videos[0].frames, &cfg, 1e-5).unwrap();
        assert!(err < 1e-4, "levels {levels}: relative error {err}");
    }
}

#[test]
fn train_step_is_deterministic() {
    let mut cfg = tiny_config(2);
    cfg.tcn.dropout_rate = 0.2;
    let ds = tiny_dataset(2, 0);
    let init = initialize(&ds, &cfg).unwrap();
    let mut a = init.clone();
    let mut b = init.clone();
    let oa = train_step(&mut a, &ds.videos[1], &cfg, 99).unwrap();
    let ob = train_step(&mut b, &ds.videos[1], &cfg, 99).unwrap();
    assert_eq!(a, b);
    assert_eq!(oa.losses, ob.losses);
    assert_ne!(a, init);
}

#[test]
fn zero_gradient_step_only_decays() {
    let mut cfg = tiny_config(2);
    cfg.lambda_rec = 0.0;
    cfg.loss_terms = LossTerms {
        rec: true,
        commit_z: false,
        commit_q: false,
    };
    let ds = tiny_dataset(1, 4);
    let mut state = initialize(&ds, &cfg).unwrap();
    let before = state.model.clone();
    train_step(&mut state, &ds.videos[0], &cfg, 1).unwrap();
    let factor = 1.0 - cfg.optimizer.learning_rate * cfg.optimizer.weight_decay;
    for (net_after, net_before) in [
        (&state.model.encoder, &before.encoder),
        (&state.model.decoder, &before.decoder),
    ] {
        for (pa, pb) in net_after.params.params.iter().zip(&net_before.params.params) {
            for (a, b) in pa.value.iter().zip(&pb.value) {
                assert_eq!(*a, b * factor);
            }
        }
    }
}

#[test]
fn step_keeps_codebook_invariants() {
    let cfg = tiny_config(2);
    let ds = tiny_dataset(3, 8);
    let mut state = initialize(&ds, &cfg).unwrap();
    for v in &ds.videos {
        let out = train_step(&mut state, v, &cfg, 5).unwrap();
        assert_eq!(out.consistency_violations, 0);
        for row in state.books[0].prototypes.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-9);
        }
        assert!(state.books.iter().all(|b| b.mass.iter().all(|&m| m >= 0.0)));
    }
}

#[test]
fn one_video_one_epoch_is_one_step() {
    let mut cfg = tiny_config(2);
    cfg.epochs = 1;
    let ds = tiny_dataset(1, 2);
    let (_, _, report) = train_activity(&ds, &cfg, &mut Silent).unwrap();
    assert_eq!(report.steps, 1);
    assert_eq!(report.epochs.len(), 1);
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny_config(2);
    let ds = tiny_dataset(3, 6);
    let (a, _, ra) = train_activity(&ds, &cfg, &mut Silent).unwrap();
    let (b, _, rb) = train_activity(&ds, &cfg, &mut Silent).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra.epochs, rb.epochs);
}

#[test]
fn empty_dataset_is_config_error() {
    let ds = tiny_dataset(0, 0);
    assert!(matches!(train_activity(&ds, &tiny_config(2), &mut Silent), Err(HvqError::Config(_))));
}

#[test]
fn epoch_zero_keeps_dataset_order() {
    assert_eq!(epoch_order(5, 0, 9), vec![0, 1, 2, 3, 4]);
    let mut later = epoch_order(5, 1, 9);
    assert_eq!(later, epoch_order(5, 1, 9));
    later.sort_unstable();
    assert_eq!(later, vec![0, 1, 2, 3, 4]);
}

#[test]
fn progress_line_format() {
    let s = EpochSummary {
        epoch: 3,
        mean_loss: 1.5,
        mean_terms: StepLosses::default(),
        resets_z: 2,
        resets_q: 0,
    };
    assert_eq!(s.progress_line(), "epoch=3 loss=1.500000 resets_z=2 resets_q=0");
}

#[test]
fn loss_decreases_on_small_synthetic_activity() {
    let spec = SyntheticSpec {
        videos: 3,
        ..SyntheticSpec::default()
    };
    let ds = synth_generate(&spec).unwrap().activity;
    for seed in 0..5 {
        let cfg = TrainConfig {
            epochs: 20,
            seed,
            tcn: TcnConfig {
                hidden_channels: 16,
                layers_per_stage: 6,
                ..TcnConfig::default()
            },
            ..TrainConfig::default()
        };
        let (_, _, report) = train_activity(&ds, &cfg, &mut Silent).unwrap();
        let first = report.epochs[0].mean_loss;
        let last = report.epochs.last().unwrap().mean_loss;
        assert!(last < first, "seed {seed}: {first} -> {last}");
    }
}
