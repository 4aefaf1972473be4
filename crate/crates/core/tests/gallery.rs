use cytopair::data::{Modality, ModalitySet};
use cytopair::encoders::{DualEncoder, EmbeddingVector, EncoderConfig};
use cytopair::gallery::{
    build_gallery, classify, classify_embeddings, cosine_distance, gallery_from_bytes,
    gallery_to_bytes, load_gallery, save_gallery, select_per_class, GalleryEntry, LabeledGallery,
};
use cytopair::preprocess::AugmentConfig;
use cytopair::synthetic::{default_classes, generate_samples, GeneratorOptions};
use cytopair_oracles::oracle_knn;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(values: Vec<f32>, modality: Modality) -> EmbeddingVector {
    let n = values
        .iter()
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        .sqrt();
    EmbeddingVector {
        values: values.iter().map(|&v| (v as f64 / n) as f32).collect(),
        modality,
        normalized: true,
    }
}

fn random_unit(rng: &mut impl Rng, dim: usize) -> EmbeddingVector {
    let m = if rng.gen() {
        Modality::Image
    } else {
        Modality::Profile
    };
    unit((0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), m)
}

fn random_gallery(rng: &mut impl Rng, n: usize, dim: usize, classes: usize) -> LabeledGallery {
    let entries = (0..n)
        .map(|i| GalleryEntry {
            embedding: random_unit(rng, dim),
            label: format!("c{}", rng.gen_range(0..classes)),
            id: format!("s{i}"),
        })
        .collect();
    LabeledGallery::new(entries, ModalitySet::BOTH).unwrap()
}

fn agrees_with_oracle(g: &LabeledGallery, queries: &[EmbeddingVector], k: usize) -> bool {
    let flat: Vec<(Vec<f32>, String)> = g
        .entries()
        .iter()
        .map(|e| (e.embedding.values.clone(), e.label.clone()))
        .collect();
    let qs: Vec<Vec<f32>> = queries.iter().map(|q| q.values.clone()).collect();
    let ours = classify_embeddings(queries, g, k).unwrap();
    let oracle = oracle_knn(&flat, &qs, k);
    let same_neighbors = ours
        .neighbors
        .iter()
        .map(|n| n.index)
        .eq(oracle.neighbors.iter().map(|n| n.2));
    ours.label == oracle.label && ours.tally == oracle.tally && same_neighbors
}

#[test]
fn distance_examples() {
    let a = unit(vec![1.0, 0.0], Modality::Image);
    let b = unit(vec![-1.0, 0.0], Modality::Image);
    let c = unit(vec![0.5, 3f32.sqrt() / 2.0], Modality::Image);
    assert_eq!(cosine_distance(&a, &a).unwrap(), 0.0);
    assert_eq!(cosine_distance(&a, &b).unwrap(), 2.0);
    assert!((cosine_distance(&a, &c).unwrap() - 0.5).abs() < 1e-7);
}

#[test]
fn vote_examples() {
    let e = |v: Vec<f32>, l: &str| GalleryEntry {
        embedding: unit(v, Modality::Image),
        label: l.into(),
        id: l.into(),
    };
    let single = LabeledGallery::new(vec![e(vec![0.0, 1.0], "only")], ModalitySet::IMAGE).unwrap();
    assert_eq!(
        classify_embeddings(&[unit(vec![1.0, 0.0], Modality::Image)], &single, 3)
            .unwrap()
            .label,
        "only"
    );

    let g = LabeledGallery::new(
        vec![
            e(vec![1.0, 0.1], "A"),
            e(vec![1.0, -0.1], "A"),
            e(vec![1.0, 0.2], "B"),
            e(vec![-1.0, 0.0], "B"),
        ],
        ModalitySet::IMAGE,
    )
    .unwrap();
    let p = classify_embeddings(&[unit(vec![1.0, 0.0], Modality::Image)], &g, 3).unwrap();
    assert_eq!(p.label, "A");
    assert_eq!(p.tally["A"], 2);
    assert_eq!(p.tally["B"], 1);
}

#[test]
fn fifty_queries_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = random_gallery(&mut rng, 100, 8, 5);
    for _ in 0..50 {
        let q = random_unit(&mut rng, 8);
        assert!(agrees_with_oracle(&g, &[q], 3));
    }
}

#[test]
fn pooled_vote_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = random_gallery(&mut rng, 40, 6, 3);
    let qi = unit(random_unit(&mut rng, 6).values, Modality::Image);
    let qp = unit(random_unit(&mut rng, 6).values, Modality::Profile);
    let both = classify_embeddings(&[qi.clone(), qp], &g, 3).unwrap();
    assert_eq!(both.tally.values().sum::<usize>(), 6);
    let one = classify_embeddings(&[qi], &g, 3).unwrap();
    assert_eq!(one.tally.values().sum::<usize>(), 3);
    let clamped = classify_embeddings(&[random_unit(&mut rng, 6)], &g, 1000).unwrap();
    assert_eq!(clamped.neighbors.len(), 40);
}

#[test]
fn dimension_mismatch_and_zero_k_are_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let g = random_gallery(&mut rng, 5, 4, 2);
    assert!(classify_embeddings(&[random_unit(&mut rng, 5)], &g, 1).is_err());
    assert!(classify_embeddings(&[random_unit(&mut rng, 4)], &g, 0).is_err());
    let not_unit = EmbeddingVector {
        values: vec![2.0, 0.0],
        modality: Modality::Image,
        normalized: false,
    };
    assert!(LabeledGallery::new(
        vec![GalleryEntry {
            embedding: not_unit,
            label: "a".into(),
            id: "a".into()
        }],
        ModalitySet::IMAGE
    )
    .is_err());
}

#[test]
fn per_class_selection_warns_on_short_class() {
    let mut labels = vec!["big"; 40];
    labels.extend(["small"; 3]);
    let (chosen, warnings) = select_per_class(&labels, 16, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(chosen.len(), 19);
    assert_eq!(chosen.iter().filter(|&&i| labels[i] == "small").count(), 3);
    assert_eq!(warnings.len(), 1);
    assert!(warnings[0].contains("small"));
    let again = select_per_class(&labels, 16, &mut ChaCha8Rng::seed_from_u64(0)).0;
    assert_eq!(again, chosen);
}

#[test]
fn built_gallery_counts_and_self_query() {
    let samples =
        generate_samples(&default_classes(), 17, 3, &GeneratorOptions::default()).unwrap();
    let model = DualEncoder::<f32>::new(&EncoderConfig::default().scaled(8), 0).unwrap();
    let aug = AugmentConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (g, warnings) =
        build_gallery(&samples, &model, ModalitySet::BOTH, 16, &aug, &mut rng).unwrap();
    assert!(warnings.is_empty());
    assert_eq!(g.len(), 128);
    assert!(g.class_counts().values().all(|&c| c == 32));

    let (p_only, _) =
        build_gallery(&samples, &model, ModalitySet::PROFILE, 16, &aug, &mut rng).unwrap();
    assert_eq!(p_only.len(), 64);
    assert!(p_only
        .entries()
        .iter()
        .all(|e| e.embedding.modality == Modality::Profile));

    let member = samples
        .iter()
        .find(|s| s.id == p_only.entries()[0].id)
        .unwrap();
    let pred = classify(member, ModalitySet::PROFILE, &p_only, &model, 1, &aug).unwrap();
    assert_eq!(pred.label, *member.label.as_ref().unwrap());
    assert!(pred.neighbors[0].distance.abs() < 1e-6);
    assert_eq!(
        pred,
        classify(member, ModalitySet::PROFILE, &p_only, &model, 1, &aug).unwrap()
    );
    let pooled = classify(member, ModalitySet::BOTH, &g, &model, 3, &aug).unwrap();
    assert_eq!(pooled.neighbors.len(), 6);
}

#[test]
fn gallery_bytes_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = random_gallery(&mut rng, 30, 12, 4);
    let bytes = gallery_to_bytes(&g);
    let back = gallery_from_bytes(&bytes).unwrap();
    assert_eq!(back, g);
    assert_eq!(gallery_to_bytes(&back), bytes);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g.bin");
    save_gallery(&g, &p).unwrap();
    assert_eq!(load_gallery(&p).unwrap(), g);
    assert!(gallery_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut newer = bytes.clone();
    newer[8] = 99;
    assert!(gallery_from_bytes(&newer).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn classify_matches_oracle(seed in any::<u64>(), n in 1usize..40, dim in 2usize..10, classes in 1usize..5, k in 1usize..8, nq in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_gallery(&mut rng, n, dim, classes);
        let queries: Vec<EmbeddingVector> = (0..nq).map(|_| random_unit(&mut rng, dim)).collect();
        prop_assert!(agrees_with_oracle(&g, &queries, k));
    }

    #[test]
    fn scaling_query_keeps_prediction(seed in any::<u64>(), c in 0.01f32..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_gallery(&mut rng, 20, 5, 3);
        let raw: Vec<f32> = (0..5).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let a = classify_embeddings(&[unit(raw.clone(), Modality::Image)], &g, 3).unwrap();
        let b = classify_embeddings(&[unit(raw.iter().map(|v| v * c).collect(), Modality::Image)], &g, 3).unwrap();
        prop_assert_eq!(a.label, b.label);
    }
}
