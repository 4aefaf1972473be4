//! Acceptance suite. Prints one line per criterion and exits non-zero when
//! any criterion fails. Numeric arguments select a subset, e.g.
//! `cargo test --test acceptance -- 3 7`.

use std::cell::{Cell, RefCell};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use cytopair::config::SyntheticConfig;
use cytopair::data::{load_dataset, Modality, ModalitySet, ParticleSample};
use cytopair::encoders::{
    DualEncoder, EmbeddingVector, EncoderConfig, ImageEncoderKind, IntermediateRep,
    ProfileEncoderKind,
};
use cytopair::evaluation::{
    evaluate, report_records, report_table, spearman, sweep, EvalConfig, ModelEmbedder,
};
use cytopair::gallery::{classify_embeddings, GalleryEntry, LabeledGallery};
use cytopair::losses::{infonce_loss, sigmoid_loss, LossKind, SimilarityMatrix};
use cytopair::nn::{Graph, Mode, ParamKind};
use cytopair::preprocess::{ImageTensor, ProfileTensor, INPUT_SIZE};
use cytopair::synthetic::{generate_dataset, write_split_manifests};
use cytopair::training::{batch_loss, lr_at, train, EarlyStopping, StopDecision, TrainConfig};
use cytopair_oracles::{finite_difference_grad, oracle_infonce, oracle_knn, oracle_sigmoid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn random_matrix(rng: &mut impl Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect())
        .collect()
}

fn loss_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=16);
        let rows = random_matrix(&mut rng, n);
        let tau = 10f64.powf(rng.gen_range(-1.0..=2.0));
        let bias = rng.gen_range(-10.0..10.0);
        let s = SimilarityMatrix::from_rows(&rows).unwrap();
        let a = infonce_loss(&s, tau).unwrap();
        let b = sigmoid_loss(&s, tau, bias).unwrap();
        worst = worst
            .max(rel_err(a, oracle_infonce(&rows, tau).value, 1e-300))
            .max(rel_err(b, oracle_sigmoid(&rows, tau, bias).value, 1e-300));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-9 && secs < 10.0,
        format!("max relative error {worst:.2e} (limit 1e-9), {secs:.2}s (limit 10s)"),
    )
}

fn anchors() -> Outcome {
    let constant = SimilarityMatrix::from_rows(&vec![vec![0.3; 4]; 4]).unwrap();
    let zero = SimilarityMatrix::from_rows(&vec![vec![0.0; 2]; 2]).unwrap();
    let identity = SimilarityMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let a = (infonce_loss(&constant, 7.0).unwrap() - 4f64.ln()).abs();
    let b = (sigmoid_loss(&zero, 1.0, 0.0).unwrap() - 2.0 * 2f64.ln()).abs();
    let c = (infonce_loss(&identity, 1.0).unwrap() - (1.0 + (-1f64).exp()).ln()).abs();
    outcome(
        a <= 1e-9 && b <= 1e-9 && c <= 1e-6,
        format!("|log 4 err| {a:.1e}, |2 log 2 err| {b:.1e}, |log(1+1/e) err| {c:.1e}"),
    )
}

/// Gradient-check results for one model.
#[derive(Default)]
struct GradCheck {
    worst: f64,
    tensors: usize,
    draws: usize,
    resampled: usize,
    unresolved: Vec<String>,
}

/// Checks the gradient of every parameter tensor of one model against central
/// differences: along a random unit direction inside the tensor and at one
/// random coordinate. A sample is only used when every ReLU stays on the same
/// side of zero over the whole stencil; otherwise the loss is not
/// differentiable there and a new direction or coordinate is drawn.
fn check_model(cfg: &EncoderConfig, loss: LossKind, rng: &mut ChaCha8Rng) -> GradCheck {
    const STEP: f64 = 1e-4;
    const TRIES: usize = 20;
    const MAX_DRAWS: usize = 500;
    let mut model = DualEncoder::<f64>::new(cfg, rng.gen()).unwrap();
    // Zero-initialized biases put whole feature maps exactly on a ReLU kink
    // (a one-channel map that is all zeros stays zero through the next conv).
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        if model.store.entry(id).name.ends_with(".bias") {
            for v in model.store.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.1..0.1);
            }
        }
    }
    // Inputs are redrawn until no ReLU input lies within one step of zero;
    // otherwise a single borderline activation flips under every perturbation
    // of the layers before it.
    let mut draws = 0;
    let (images, profiles, graph_seed, analytic, pattern) = loop {
        draws += 1;
        let images: Vec<ImageTensor> = (0..3)
            .map(|_| ImageTensor {
                values: (0..INPUT_SIZE * INPUT_SIZE)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
                size_feature: rng.gen_range(0.2..1.2),
            })
            .collect();
        let profiles: Vec<ProfileTensor> = (0..3)
            .map(|_| ProfileTensor {
                values: (0..INPUT_SIZE * 6)
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect(),
                length_feature: rng.gen_range(0.2..1.2),
            })
            .collect();
        let graph_seed: u64 = rng.gen();
        let mut g = Graph::new(&model.store, Mode::Train, graph_seed);
        let l = batch_loss(&model, &mut g, &images, &profiles, loss).unwrap();
        if g.kink_margin() >= STEP || draws == MAX_DRAWS {
            let pattern = g.activation_pattern();
            let analytic = g.backward(l).param_grads();
            break (images, profiles, graph_seed, analytic, pattern);
        }
    };
    let smooth = Cell::new(true);
    let eval = |m: &DualEncoder<f64>| {
        let mut g = Graph::new(&m.store, Mode::Train, graph_seed);
        let l = batch_loss(m, &mut g, &images, &profiles, loss).unwrap();
        if g.activation_pattern() != pattern {
            smooth.set(false);
        }
        g.value(l).item()
    };
    let ids: Vec<_> = model
        .store
        .ids()
        .filter(|&id| !matches!(model.store.entry(id).kind, ParamKind::Buffer))
        .collect();
    let mut out = GradCheck {
        tensors: ids.len(),
        draws,
        ..GradCheck::default()
    };
    let cell = RefCell::new(&mut model);
    for &id in &ids {
        let base = cell.borrow().store.get(id).data().to_vec();
        let len = base.len();
        let grad: Vec<f64> = analytic
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, t)| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; len]);
        for directional in [true, false] {
            let mut done = false;
            for attempt in 0..TRIES {
                let dir: Vec<f64> = if directional {
                    let d: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
                    d.iter().map(|v| v / norm).collect()
                } else {
                    let mut d = vec![0.0; len];
                    d[rng.gen_range(0..len)] = 1.0;
                    d
                };
                let expected = grad.iter().zip(&dir).map(|(g, d)| g * d).sum::<f64>();
                let along = |x: &[f64]| {
                    let mut m = cell.borrow_mut();
                    for ((p, b), d) in m
                        .store
                        .get_mut(id)
                        .data_mut()
                        .iter_mut()
                        .zip(&base)
                        .zip(&dir)
                    {
                        *p = b + x[0] * d;
                    }
                    eval(&m)
                };
                smooth.set(true);
                let fd = finite_difference_grad(along, &[0.0], STEP).unwrap()[0];
                cell.borrow_mut()
                    .store
                    .get_mut(id)
                    .data_mut()
                    .copy_from_slice(&base);
                if smooth.get() {
                    out.worst = out.worst.max(rel_err(expected, fd, 1e-6));
                    out.resampled += attempt;
                    done = true;
                    break;
                }
            }
            if !done {
                let name = cell.borrow().store.entry(id).name.clone();
                out.unresolved.push(format!(
                    "{name}{}",
                    if directional { "" } else { "[coord]" }
                ));
            }
        }
    }
    out
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let models = [
        (ImageEncoderKind::SmallConv, ProfileEncoderKind::Conv1d),
        (
            ImageEncoderKind::SmallTransformer,
            ProfileEncoderKind::Bilstm,
        ),
        (
            ImageEncoderKind::SmallConv,
            ProfileEncoderKind::Transformer1d,
        ),
    ];
    let mut total = GradCheck::default();
    let mut parts = Vec::new();
    for (image, profile) in models {
        let cfg = EncoderConfig {
            image,
            profile,
            ..EncoderConfig::default()
        }
        .scaled(8);
        for loss in [LossKind::Infonce, LossKind::Sigmoid] {
            let c = check_model(&cfg, loss, &mut rng);
            parts.push(format!("{image}+{profile}/{loss} {:.1e}", c.worst));
            total.worst = total.worst.max(c.worst);
            total.tensors += c.tensors;
            total.resampled += c.resampled;
            total.draws += c.draws;
            total.unresolved.extend(c.unresolved);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        total.worst < 1e-3 && total.unresolved.is_empty() && secs < 120.0,
        format!(
            "{} parameter tensors, max relative error {:.2e} (limit 1e-3), {} input batches drawn, {} samples redrawn across a ReLU kink, unsampled {:?}, {secs:.1}s (limit 120s) [{}]",
            total.tensors,
            total.worst,
            total.draws,
            total.resampled,
            total.unresolved,
            parts.join(", ")
        ),
    )
}

fn shapes() -> Outcome {
    let cases = [
        (ProfileEncoderKind::Conv1d, 257, 963_000.0, 0.10),
        (ProfileEncoderKind::Bilstm, 257, 264_000.0, 0.10),
        (ProfileEncoderKind::Transformer1d, 129, 1_100_000.0, 0.15),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    let profile = ProfileTensor {
        values: vec![0.25; INPUT_SIZE * 6],
        length_feature: 0.7,
    };
    for (kind, dim, reference, tol) in cases {
        let m = DualEncoder::<f32>::new(
            &EncoderConfig {
                profile: kind,
                ..EncoderConfig::default()
            },
            0,
        )
        .unwrap();
        let out = m.profile_reps(std::slice::from_ref(&profile)).unwrap()[0]
            .values
            .len();
        let n = m.param_count("profile_encoder");
        let ok = out == dim && (n as f64 - reference).abs() <= tol * reference;
        pass &= ok;
        parts.push(format!(
            "{kind}: dim {out} (want {dim}), {n} params (want {reference} ±{:.0}%)",
            tol * 100.0
        ));
    }
    outcome(pass, parts.join("; "))
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = EncoderConfig::default();
    let m = DualEncoder::<f32>::new(&cfg, 1).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..10_000 {
        let (modality, dim) = if i % 2 == 0 {
            (Modality::Image, cfg.image_rep_dim())
        } else {
            (Modality::Profile, cfg.profile_rep_dim())
        };
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        let rep = IntermediateRep {
            values: (0..dim).map(|_| scale * rng.gen_range(-1.0..1.0)).collect(),
        };
        let e = m.project_and_normalize(&rep, modality).unwrap();
        worst = worst.max((e.norm() - 1.0).abs());
    }
    outcome(
        worst < 1e-6,
        format!("10000 embeddings, max |norm - 1| {worst:.2e} (limit 1e-6)"),
    )
}

fn knn_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let unit = |rng: &mut ChaCha8Rng, dim: usize, modality: Modality| {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        EmbeddingVector {
            values: v.iter().map(|x| (x / n) as f32).collect(),
            modality,
            normalized: true,
        }
    };
    let mut agree = 0;
    for _ in 0..1000 {
        let dim = rng.gen_range(2..16);
        let n = rng.gen_range(1..60);
        let classes = rng.gen_range(1..6);
        let entries: Vec<GalleryEntry> = (0..n)
            .map(|i| GalleryEntry {
                embedding: unit(
                    &mut rng,
                    dim,
                    if i % 2 == 0 {
                        Modality::Image
                    } else {
                        Modality::Profile
                    },
                ),
                label: format!("class{}", rng.gen_range(0..classes)),
                id: format!("g{i}"),
            })
            .collect();
        let g = LabeledGallery::new(entries, ModalitySet::BOTH).unwrap();
        let queries: Vec<EmbeddingVector> = (0..rng.gen_range(1..=2))
            .map(|_| unit(&mut rng, dim, Modality::Image))
            .collect();
        let k = rng.gen_range(1..10);
        let ours = classify_embeddings(&queries, &g, k).unwrap();
        let flat: Vec<(Vec<f32>, String)> = g
            .entries()
            .iter()
            .map(|e| (e.embedding.values.clone(), e.label.clone()))
            .collect();
        let qs: Vec<Vec<f32>> = queries.iter().map(|q| q.values.clone()).collect();
        agree += (ours.label == oracle_knn(&flat, &qs, k).label) as usize;
    }
    outcome(agree == 1000, format!("{agree}/1000 predictions agree"))
}

struct Splits {
    train: Vec<ParticleSample>,
    val: Vec<ParticleSample>,
    test: Vec<ParticleSample>,
}

/// Writes the dataset described by `synthetic` to `dir` and reads the three
/// splits back, as `cytopair generate` would.
fn dataset(synthetic: &SyntheticConfig, dir: &Path) -> Splits {
    let manifest = generate_dataset(
        &synthetic.classes,
        synthetic.per_class,
        synthetic.seed,
        &synthetic.options,
        dir,
    )
    .unwrap();
    write_split_manifests(&manifest, synthetic.split, synthetic.seed, dir).unwrap();
    let load = |name: &str| load_dataset(&dir.join(format!("{name}.tsv"))).unwrap();
    Splits {
        train: load("train"),
        val: load("val"),
        test: load("test"),
    }
}

const EPOCHS: usize = 15;

fn alignment() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&SyntheticConfig::default(), dir.path());
    let cells = [
        (ModalitySet::BOTH, ModalitySet::BOTH),
        (ModalitySet::IMAGE, ModalitySet::IMAGE),
        (ModalitySet::PROFILE, ModalitySet::PROFILE),
        (ModalitySet::IMAGE, ModalitySet::PROFILE),
        (ModalitySet::PROFILE, ModalitySet::IMAGE),
    ];
    let mut sums = [0.0; 5];
    let seeds = 5;
    for seed in 0..seeds {
        let cfg = TrainConfig {
            max_epochs: EPOCHS,
            seed,
            ..TrainConfig::default()
        };
        let (model, _) = train::<f32>(&data.train, &data.val, &cfg).unwrap();
        let embedder = ModelEmbedder {
            model: &model,
            augment: &cfg.augment,
            chunk: 64,
        };
        let eval = EvalConfig {
            seed,
            ..EvalConfig::default()
        };
        let report = evaluate(&data.train, &data.test, &embedder, &eval).unwrap();
        for (s, (g, q)) in sums.iter_mut().zip(cells) {
            *s += report.mean(g, q).unwrap();
        }
    }
    let [both, ii, pp, ip, pi] = sums.map(|s| s / seeds as f64);
    let secs = start.elapsed().as_secs_f64();
    let pass = both >= 90.0 && both >= ii.max(pp) && ip >= 50.0 && pi >= 50.0 && secs < 900.0;
    outcome(
        pass,
        format!(
            "means over {seeds} seeds, {EPOCHS} epochs: I+P->I+P {both:.2} (>= 90), I->I {ii:.2}, P->P {pp:.2}, \
             I->P {ip:.2} (>= 50), P->I {pi:.2} (>= 50), {secs:.0}s (limit 900s)"
        ),
    )
}

/// Classes whose cues overlap enough that small galleries make mistakes.
const OVERLAPPING_CLASSES: &str = include_str!("data/overlapping_classes.toml");

fn gallery_trend() -> Outcome {
    let mut synthetic = SyntheticConfig::default();
    let parsed: SyntheticConfig = toml::from_str(OVERLAPPING_CLASSES).unwrap();
    synthetic.classes = parsed.classes;
    synthetic.options = parsed.options;
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&synthetic, dir.path());
    let cfg = TrainConfig {
        max_epochs: EPOCHS,
        ..TrainConfig::default()
    };
    let (model, _) = train::<f32>(&data.train, &data.val, &cfg).unwrap();
    let embedder = ModelEmbedder {
        model: &model,
        augment: &cfg.augment,
        chunk: 64,
    };
    let sizes = [1, 2, 4, 8, 16];
    let report = sweep(
        &data.train,
        &data.test,
        &embedder,
        &EvalConfig::default(),
        &sizes,
    )
    .unwrap();
    let means: Vec<f64> = report
        .reports
        .iter()
        .map(|r| r.mean(ModalitySet::BOTH, ModalitySet::BOTH).unwrap())
        .collect();
    let x: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let rho = spearman(&x, &means);
    let curve: Vec<String> = sizes
        .iter()
        .zip(&means)
        .map(|(s, m)| format!("{s}:{m:.2}"))
        .collect();
    outcome(
        rho > 0.8,
        format!(
            "I+P->I+P by gallery size [{}], Spearman {rho:.3} (> 0.8)",
            curve.join(" ")
        ),
    )
}

fn protocol() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&SyntheticConfig::default(), dir.path());
    let cfg = TrainConfig::default();
    let model = DualEncoder::<f32>::new(&cfg.encoder, 0).unwrap();
    let embedder = ModelEmbedder {
        model: &model,
        augment: &cfg.augment,
        chunk: 64,
    };
    let eval = EvalConfig::default();
    let a = evaluate(&data.train, &data.test, &embedder, &eval).unwrap();
    let b = evaluate(&data.train, &data.test, &embedder, &eval).unwrap();
    let (ta, tb) = (report_table(&a), report_table(&b));
    let identical = ta == tb
        && report_records(&a) == report_records(&b)
        && serde_json::to_string(&a).unwrap() == serde_json::to_string(&b).unwrap();
    let order = [ModalitySet::IMAGE, ModalitySet::PROFILE, ModalitySet::BOTH];
    let expected: Vec<(ModalitySet, ModalitySet)> = order
        .iter()
        .flat_map(|&g| order.iter().map(move |&q| (g, q)))
        .collect();
    let cell_order = a.cells.iter().map(|c| (c.gallery, c.query)).eq(expected);
    let lines: Vec<&str> = ta.lines().collect();
    let table_order = lines.len() == 4
        && lines[0] == "Gallery\\Test\tI\tP\tI+P"
        && lines[1].starts_with("I\t")
        && lines[2].starts_with("P\t")
        && lines[3].starts_with("I+P\t");
    let counts = a.resamples == 10
        && a.n_per_class == 16
        && a.k == 3
        && a.cells.iter().all(|c| c.accuracies.len() == 10);
    outcome(
        identical && cell_order && table_order && counts,
        format!(
            "resamples {}, n_per_class {}, k {}, cell order ok {cell_order}, table order ok {table_order}, byte-identical {identical}",
            a.resamples, a.n_per_class, a.k
        ),
    )
}

fn schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let warm = lr_at(4, &cfg).unwrap();
    let tail = lr_at(99, &cfg).unwrap();
    let expected_tail = 0.005 * 0.5 * (1.0 + (94.0 * std::f64::consts::PI / 95.0).cos());
    let mut cosine_ok = true;
    for e in 5..100 {
        let want = 0.005 * 0.5 * (1.0 + (std::f64::consts::PI * (e - 5) as f64 / 95.0).cos());
        cosine_ok &= (lr_at(e, &cfg).unwrap() - want).abs() < 1e-15;
    }
    let mut stopper = EarlyStopping::new(30);
    let mut stopped_at = None;
    for epoch in 0..100 {
        let val = if epoch < 10 {
            5.0 - epoch as f64 * 0.1
        } else {
            4.2
        };
        if stopper.update(epoch, val) == StopDecision::Stop {
            stopped_at = Some(epoch);
            break;
        }
    }
    let pass = (warm - 0.005).abs() < 1e-15
        && (tail - expected_tail).abs() < 1e-18
        && cosine_ok
        && stopped_at == Some(39);
    outcome(
        pass,
        format!(
            "lr(4) {warm}, lr(99) {tail:.3e}, cosine tail ok {cosine_ok}, best epoch 9, stop at {stopped_at:?} (want 39: 30 non-improving epochs)"
        ),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("loss oracle equivalence", loss_oracles),
        ("analytic anchors", anchors),
        ("gradient correctness", gradients),
        ("profile encoder shapes and sizes", shapes),
        ("embedding normalization", normalization),
        ("k-NN oracle equivalence", knn_oracle),
        ("end-to-end synthetic alignment", alignment),
        ("gallery-size trend", gallery_trend),
        ("evaluation protocol fidelity", protocol),
        ("training protocol", schedule),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let elapsed: Duration = start.elapsed();
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {n:>2} {verdict} {name} ({:.1}s): {}",
            elapsed.as_secs_f64(),
            result.detail
        );
        failed += (!result.pass) as usize;
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
