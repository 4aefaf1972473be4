use cytopair::data::NUM_CHANNELS;
use cytopair::synthetic::{
    default_classes, foreground_extent, generate_dataset, generate_sample_with, generate_samples,
    GeneratorOptions, FOREGROUND_THRESHOLD,
};

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn fixed_length_sets_extent_and_profile_length() {
    let opts = GeneratorOptions {
        length_scale: 1.5,
        ..Default::default()
    };
    for spec in default_classes() {
        let mut spec = spec.clone();
        spec.mean_length = 200.0;
        spec.length_jitter = 0.0;
        for seed in 0..5 {
            let s = generate_sample_with(&spec, &opts, seed, "x".into());
            let ext = foreground_extent(&s.image, FOREGROUND_THRESHOLD) as i64;
            assert!((ext - 200).abs() <= 1, "{}: extent {ext}", spec.name);
            assert_eq!(s.profile.len(), 300);
        }
    }
}

#[test]
fn extent_tracks_profile_length() {
    let mut specs = default_classes();
    for s in &mut specs {
        s.noise = 0.0;
        s.length_jitter = 0.3;
    }
    let samples = generate_samples(&specs, 40, 5, &GeneratorOptions::default()).unwrap();
    let ext: Vec<f64> = samples
        .iter()
        .map(|s| foreground_extent(&s.image, FOREGROUND_THRESHOLD) as f64)
        .collect();
    let len: Vec<f64> = samples.iter().map(|s| s.profile.len() as f64).collect();
    let r = pearson(&ext, &len);
    assert!(r >= 0.99, "correlation {r}");
}

#[test]
fn nearest_centroid_on_channel_means_separates_classes() {
    let samples =
        generate_samples(&default_classes(), 100, 9, &GeneratorOptions::default()).unwrap();
    let feat = |s: &cytopair::data::ParticleSample| -> [f64; NUM_CHANNELS] {
        std::array::from_fn(|c| s.profile.channel(c).iter().sum::<f64>() / s.profile.len() as f64)
    };
    let (fit, held): (Vec<_>, Vec<_>) = samples.iter().enumerate().partition(|(i, _)| i % 2 == 0);
    let names: Vec<String> = default_classes().into_iter().map(|c| c.name).collect();
    let centroids: Vec<[f64; NUM_CHANNELS]> = names
        .iter()
        .map(|n| {
            let members: Vec<_> = fit
                .iter()
                .filter(|(_, s)| s.label.as_ref() == Some(n))
                .map(|(_, s)| feat(s))
                .collect();
            std::array::from_fn(|c| {
                members.iter().map(|m| m[c]).sum::<f64>() / members.len() as f64
            })
        })
        .collect();
    let correct = held
        .iter()
        .filter(|(_, s)| {
            let f = feat(s);
            let best = (0..names.len())
                .min_by(|&a, &b| {
                    let d = |k: usize| {
                        (0..NUM_CHANNELS)
                            .map(|c| (f[c] - centroids[k][c]).powi(2))
                            .sum::<f64>()
                    };
                    d(a).total_cmp(&d(b))
                })
                .unwrap();
            s.label.as_ref() == Some(&names[best])
        })
        .count();
    let acc = correct as f64 / held.len() as f64;
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn same_seed_same_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let specs = &default_classes()[..2];
    let opts = GeneratorOptions::default();
    let ma = generate_dataset(specs, 5, 42, &opts, a.path()).unwrap();
    let mb = generate_dataset(specs, 5, 42, &opts, b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma.entries.len(), 10);
    for e in &ma.entries {
        for rel in [&e.image_path, &e.profile_path] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap()
            );
        }
    }
    assert_eq!(
        std::fs::read(a.path().join("manifest.tsv")).unwrap(),
        std::fs::read(b.path().join("manifest.tsv")).unwrap()
    );
}

#[test]
fn invalid_spec_reports_field_path() {
    let mut specs = default_classes();
    specs[1].blob_count = 0;
    let err = generate_samples(&specs, 1, 0, &GeneratorOptions::default()).unwrap_err();
    assert!(err.to_string().contains("classes.beta.blob_count"), "{err}");
}
