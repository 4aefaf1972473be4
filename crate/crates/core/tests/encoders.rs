use cytopair::data::{Modality, NUM_CHANNELS};
use cytopair::encoders::{
    DualEncoder, EncoderConfig, ImageEncoderKind, IntermediateRep, ProfileEncoderKind,
};
use cytopair::nn::Tensor;
use cytopair::preprocess::{ImageTensor, ProfileTensor, INPUT_SIZE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut impl Rng) -> ImageTensor {
    ImageTensor {
        values: (0..INPUT_SIZE * INPUT_SIZE)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
        size_feature: rng.gen_range(0.1..1.5),
    }
}

fn random_profile(rng: &mut impl Rng) -> ProfileTensor {
    ProfileTensor {
        values: (0..INPUT_SIZE * NUM_CHANNELS)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
        length_feature: rng.gen_range(0.1..1.5),
    }
}

fn with_profile(kind: ProfileEncoderKind) -> EncoderConfig {
    EncoderConfig {
        profile: kind,
        ..EncoderConfig::default()
    }
}

#[test]
fn profile_encoder_sizes() {
    // (kind, output dim, reference parameter count, tolerance)
    let cases = [
        (ProfileEncoderKind::Conv1d, 257, 963_000.0, 0.10),
        (ProfileEncoderKind::Bilstm, 257, 264_000.0, 0.10),
        (ProfileEncoderKind::Transformer1d, 129, 1_100_000.0, 0.15),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batch: Vec<ProfileTensor> = (0..3).map(|_| random_profile(&mut rng)).collect();
    for (kind, dim, params, tol) in cases {
        let cfg = with_profile(kind);
        assert_eq!(cfg.profile_rep_dim(), dim);
        let m = DualEncoder::<f32>::new(&cfg, 1).unwrap();
        let n = m.param_count("profile_encoder") as f64;
        assert!((n - params).abs() <= tol * params, "{kind}: {n} parameters");
        let reps = m.profile_reps(&batch).unwrap();
        assert_eq!(reps.len(), 3);
        for (r, p) in reps.iter().zip(&batch) {
            assert_eq!(r.values.len(), dim);
            assert_eq!(*r.values.last().unwrap(), p.length_feature as f32 as f64);
        }
    }
}

#[test]
fn image_encoders_pass_size_feature_through() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch: Vec<ImageTensor> = (0..2).map(|_| random_image(&mut rng)).collect();
    for kind in [
        ImageEncoderKind::SmallConv,
        ImageEncoderKind::SmallTransformer,
    ] {
        let cfg = EncoderConfig {
            image: kind,
            ..EncoderConfig::default()
        }
        .scaled(4);
        let m = DualEncoder::<f64>::new(&cfg, 2).unwrap();
        let reps = m.image_reps(&batch).unwrap();
        for (r, t) in reps.iter().zip(&batch) {
            assert_eq!(r.values.len(), cfg.image_rep_dim());
            assert_eq!(*r.values.last().unwrap(), t.size_feature);
        }
        let single = m.image_reps(&batch[..1]).unwrap();
        assert_eq!(single[0], m.image_reps(&batch[..1]).unwrap()[0]);
    }
}

#[test]
fn duplicated_input_gives_identical_reps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = random_profile(&mut rng);
    for kind in [
        ProfileEncoderKind::Conv1d,
        ProfileEncoderKind::Bilstm,
        ProfileEncoderKind::Transformer1d,
    ] {
        let m = DualEncoder::<f32>::new(&with_profile(kind).scaled(4), 3).unwrap();
        let reps = m.profile_reps(&[p.clone(), p.clone()]).unwrap();
        assert_eq!(reps[0], reps[1], "{kind}");
    }
}

#[test]
fn tied_bilstm_reversal_swaps_direction_blocks() {
    let cfg = with_profile(ProfileEncoderKind::Bilstm);
    let h = cfg.bilstm.hidden;
    let mut m = DualEncoder::<f64>::new(&cfg, 4).unwrap();
    m.tie_lstm_directions().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = random_profile(&mut rng);
    let mut rev = p.clone();
    for t in 0..INPUT_SIZE {
        for c in 0..NUM_CHANNELS {
            rev.values[t * NUM_CHANNELS + c] = p.get(INPUT_SIZE - 1 - t, c);
        }
    }
    let reps = m.profile_reps(&[p, rev]).unwrap();
    let (a, b) = (&reps[0].values, &reps[1].values);
    for i in 0..h {
        assert!((a[i] - b[h + i]).abs() < 1e-5, "forward block {i}");
        assert!((a[h + i] - b[i]).abs() < 1e-5, "backward block {i}");
    }
}

#[test]
fn transformer_zero_batch_is_constant() {
    let m = DualEncoder::<f32>::new(
        &with_profile(ProfileEncoderKind::Transformer1d).scaled(4),
        5,
    )
    .unwrap();
    let zero = ProfileTensor {
        values: vec![0.0; INPUT_SIZE * NUM_CHANNELS],
        length_feature: 1.0,
    };
    let reps = m.profile_reps(&vec![zero; 4]).unwrap();
    assert!(reps.iter().all(|r| *r == reps[0]));
}

#[test]
fn identity_head_maps_basis_vector_to_itself() {
    let mut cfg = with_profile(ProfileEncoderKind::Conv1d).scaled(8);
    cfg.embed_dim = cfg.profile_rep_dim();
    let d = cfg.embed_dim;
    let mut m = DualEncoder::<f64>::new(&cfg, 6).unwrap();
    let w = m.store.id("profile_head.weight").unwrap();
    let b = m.store.id("profile_head.bias").unwrap();
    *m.store.get_mut(w) = Tensor::from_vec(
        &[d, d],
        (0..d * d)
            .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
            .collect(),
    );
    *m.store.get_mut(b) = Tensor::from_vec(&[d], vec![0.0; d]);
    let mut basis = vec![0.0; d];
    basis[3] = 1.0;
    let e = m
        .project_and_normalize(
            &IntermediateRep {
                values: basis.clone(),
            },
            Modality::Profile,
        )
        .unwrap();
    assert_eq!(e.modality, Modality::Profile);
    assert!(e.normalized);
    assert_eq!(
        e.values,
        basis.iter().map(|&v| v as f32).collect::<Vec<_>>()
    );

    *m.store.get_mut(w) = Tensor::from_vec(
        &[d, d],
        (0..d * d).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect(),
    );
    let x: Vec<f64> = (0..d).map(|i| (i as f64 * 0.37).sin()).collect();
    let e1 = m
        .project_and_normalize(&IntermediateRep { values: x.clone() }, Modality::Profile)
        .unwrap();
    let e2 = m
        .project_and_normalize(
            &IntermediateRep {
                values: x.iter().map(|v| 2.0 * v).collect(),
            },
            Modality::Profile,
        )
        .unwrap();
    for (u, v) in e1.values.iter().zip(&e2.values) {
        assert!((u - v).abs() < 1e-6);
    }
}

#[test]
fn zero_projection_is_reported() {
    let cfg = with_profile(ProfileEncoderKind::Conv1d).scaled(8);
    let d = cfg.profile_rep_dim();
    let mut m = DualEncoder::<f64>::new(&cfg, 7).unwrap();
    let b = m.store.id("profile_head.bias").unwrap();
    *m.store.get_mut(b) = Tensor::from_vec(&[cfg.embed_dim], vec![0.0; cfg.embed_dim]);
    let err = m
        .project_and_normalize(
            &IntermediateRep {
                values: vec![0.0; d],
            },
            Modality::Profile,
        )
        .unwrap_err();
    assert!(matches!(err, cytopair::Error::ZeroVector(_)), "{err}");
}

#[test]
fn embeddings_are_unit_norm() {
    let m = DualEncoder::<f32>::new(&EncoderConfig::default().scaled(4), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let imgs: Vec<ImageTensor> = (0..5).map(|_| random_image(&mut rng)).collect();
    let profs: Vec<ProfileTensor> = (0..5).map(|_| random_profile(&mut rng)).collect();
    let all = m
        .embed_images(&imgs, 2)
        .unwrap()
        .into_iter()
        .chain(m.embed_profiles(&profs, 3).unwrap());
    for e in all {
        assert!(e.normalized);
        assert!((e.norm() - 1.0).abs() < 1e-6);
    }
}
