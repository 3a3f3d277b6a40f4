//! End-to-end acceptance checks at desk scale. Each test prints one
//! `[acceptance] criterion N: PASS|FAIL (...)` line and then asserts.

mod common;

use std::time::Instant;

use common::{grad_check, random_images, report, LossKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylekit::classifier::{train_artist_classifier, ClassifierSpec, ClassifierTrainConfig};
use stylekit::evaluation::{
    deception_rate, evaluate_suite, EvalStyle, IdentityStylizer, SyntheticOracleStylizer,
};
use stylekit::grouping::{self, build_style_set, distance, quantile_threshold, EmbeddingIndex};
use stylekit::io::{list_images, load_image, save_image, stylize_any_size, stylize_frames, stylize_video};
use stylekit::losses::{self, uniform_output, GeneratorLoss};
use stylekit::model::{discriminator_aux_sides, discriminator_main_side, ENCODER_FACTOR};
use stylekit::synthetic;
use stylekit::training::{self, checkpoint_path, Branch, TrainConfig, TrainState, Trainer};
use stylekit::{ImageBatch, LatentCode, NetworkSpec, Networks, Tensor};

fn elapsed(t: Instant) -> String {
    format!("{:.1}s", t.elapsed().as_secs_f64())
}

#[test]
fn criterion_1_shape_laws() {
    let t0 = Instant::now();
    let spec = NetworkSpec::with_width_scale(0.125);
    let nets = Networks::new(spec, 1).unwrap();
    let mut failures = Vec::new();
    for &h in &[64usize, 128, 256] {
        for &w in &[64usize, 128, 256] {
            let x = random_images(1, h, w, (h * 1000 + w) as u64);
            let z = nets.encode(&x).unwrap();
            if z.tensor().shape() != [1, 32, h / 16, w / 16] {
                failures.push(format!("encode {h}x{w} -> {:?}", z.tensor().shape()));
            }
            let y = nets.decode(&z).unwrap();
            if y.tensor().shape() != [1, 3, h, w] || !y.tensor().data().iter().all(|&v| v > 0.0 && v < 1.0) {
                failures.push(format!("decode {h}x{w} -> {:?}", y.tensor().shape()));
            }
            if nets.stylize(&x).unwrap().tensor().shape() != x.tensor().shape() {
                failures.push(format!("stylize {h}x{w}"));
            }
            let d = nets.discriminate(&x).unwrap();
            let main = [discriminator_main_side(h), discriminator_main_side(w)];
            if d.main.shape() != [1, 1, main[0], main[1]] {
                failures.push(format!("main logits {h}x{w} -> {:?}", d.main.shape()));
            }
            let (ah, aw) = (discriminator_aux_sides(h), discriminator_aux_sides(w));
            for k in 0..4 {
                if d.aux[k].shape() != [1, 1, ah[k], aw[k]] {
                    failures.push(format!("aux {k} at {h}x{w} -> {:?}", d.aux[k].shape()));
                }
            }
            if nets.transform(&x).unwrap().shape() != x.tensor().shape() {
                failures.push(format!("transform {h}x{w}"));
            }
        }
    }
    // Reference-size arithmetic, checked symbolically.
    if 768 / ENCODER_FACTOR != 48 || discriminator_main_side(768) != 6 {
        failures.push("768 arithmetic".into());
    }
    if discriminator_aux_sides(768)[0] != 384 || discriminator_aux_sides(256) != [128, 64, 16, 4] {
        failures.push("aux arithmetic".into());
    }
    let full = NetworkSpec::default();
    if full.latent_channels() != 256 || spec.latent_channels() != 32 {
        failures.push("latent channels".into());
    }
    // Batch members are processed independently.
    let batch = random_images(4, 64, 64, 9);
    let joint = nets.stylize(&batch).unwrap();
    for i in 0..4 {
        let single = nets.stylize(&batch.sample(i).unwrap()).unwrap();
        if single != joint.sample(i).unwrap() {
            failures.push(format!("batch independence, sample {i}"));
        }
    }
    let pass = failures.is_empty() && t0.elapsed().as_secs() < 60;
    report("criterion 1", pass, &format!("shape laws, {} failures, {}", failures.len(), elapsed(t0)));
    assert!(pass, "{failures:?}");
}

#[test]
fn criterion_2_loss_closed_forms() {
    let t0 = Instant::now();
    let tol = 1e-6;
    let mut checks: Vec<(&str, f64, f64)> = Vec::new();
    let latent = |v: Vec<f64>| LatentCode::new(Tensor::new(&[1, v.len(), 1, 1], v).unwrap()).unwrap();

    let a = latent(vec![0.3, -1.2, 2.5, 0.0]);
    checks.push(("content, identical", losses::style_aware_content_loss(&a, &a).unwrap(), 0.0));
    checks.push((
        "content, zeros vs ones",
        losses::style_aware_content_loss(&latent(vec![0.0; 7]), &latent(vec![1.0; 7])).unwrap(),
        1.0,
    ));
    checks.push((
        "content, [1,2] vs [1,0]",
        losses::style_aware_content_loss(&latent(vec![1.0, 2.0]), &latent(vec![1.0, 0.0])).unwrap(),
        2.0,
    ));

    // Single-scale adversarial terms.
    let one = |logit: f64| stylekit::autograd::Var::constant(Tensor::full(&[1, 1, 3, 3], logit));
    let single_d = |r: f64, f: f64| {
        stylekit::ops::mean_log_sigmoid(&one(r), 1.0).value().item()
            + stylekit::ops::mean_log_sigmoid(&one(f), -1.0).value().item()
    };
    let logit = |p: f64| (p / (1.0 - p)).ln();
    checks.push(("D, single scale at 0.5", single_d(0.0, 0.0), -1.3862943611198906));
    checks.push(("D, single scale 0.9/0.1", single_d(logit(0.9), logit(0.1)), 2.0 * 0.9f64.ln()));
    let sizes = ([2, 2], [[32, 32], [16, 16], [4, 4], [1, 1]]);
    let half = uniform_output(0.0, sizes.0, sizes.1);
    checks.push(("D, five scales at 0.5", losses::adversarial_d_loss(&half, &half).unwrap(), -6.931471805599453));
    let g_single = |p: f64, form| {
        let v = one(logit(p));
        match form {
            GeneratorLoss::NonSaturating => -stylekit::ops::mean_log_sigmoid(&v, 1.0).value().item(),
            GeneratorLoss::Saturating => stylekit::ops::mean_log_sigmoid(&v, -1.0).value().item(),
        }
    };
    checks.push(("G non-saturating, single scale at 0.5", g_single(0.5, GeneratorLoss::NonSaturating), 0.6931471805599453));
    checks.push(("G saturating, single scale at 0.5", g_single(0.5, GeneratorLoss::Saturating), -0.6931471805599453));
    checks.push((
        "G non-saturating, five scales at 0.5",
        losses::adversarial_g_loss(&half, GeneratorLoss::NonSaturating).unwrap(),
        5.0 * 0.6931471805599453,
    ));
    let confident = uniform_output(40.0, sizes.0, sizes.1);
    let g_conf = losses::adversarial_g_loss(&confident, GeneratorLoss::NonSaturating).unwrap();
    checks.push(("G non-saturating as D(fake) -> 1", g_conf, 0.0));

    checks.push(("total (1, 0.5, 10, 0.001)", losses::total_loss(1.0, 0.5, 10.0, 0.001), 1.51));
    checks.push(("total (0, 0, 3.7, 1)", losses::total_loss(0.0, 0.0, 3.7, 1.0), 3.7));
    checks.push(("total, lambda 0", losses::total_loss(0.2, 0.3, 99.0, 0.0), 0.5));

    let nets = Networks::new(NetworkSpec::with_width_scale(0.0625), 5).unwrap();
    let x = random_images(1, 16, 16, 1);
    let y = random_images(1, 16, 16, 2);
    checks.push(("transformed, x == y", losses::transformed_image_loss(&x, &x, &nets).unwrap(), 0.0));
    checks.push(("conv1, x == y", losses::conv1_feature_loss(&x, &x, &nets).unwrap(), 0.0));
    let lt = losses::transformed_image_loss(&x, &y, &nets).unwrap();
    let mut shifted = nets.clone();
    let bias = shifted.transformer.params.len() - 1;
    *shifted.transformer.params.get_mut(bias) = Tensor::new(&[3], vec![0.7, -3.0, 12.0]).unwrap();
    checks.push(("transformed, bias invariance", losses::transformed_image_loss(&x, &y, &shifted).unwrap(), lt));

    let mut failures: Vec<String> = checks
        .iter()
        .filter(|(_, got, want)| !((got - want).abs() <= tol))
        .map(|(name, got, want)| format!("{name}: got {got}, want {want}"))
        .collect();
    if !(g_conf >= 0.0) {
        failures.push("non-saturating loss must approach 0 from above".into());
    }
    if !(losses::conv1_feature_loss(&x, &y, &nets).unwrap() >= 0.0) {
        failures.push("conv1 loss negative".into());
    }
    let pass = failures.is_empty() && t0.elapsed().as_secs() < 60;
    report(
        "criterion 2",
        pass,
        &format!("{} closed forms to {tol:e}, {} failures, {}", checks.len(), failures.len(), elapsed(t0)),
    );
    assert!(pass, "{failures:?}");
}

#[test]
fn criterion_3_gradient_check() {
    let t0 = Instant::now();
    let nets = Networks::new(NetworkSpec::with_width_scale(0.0625), 3).unwrap();
    let x = random_images(1, 16, 16, 30).into_tensor();
    let style = random_images(1, 16, 16, 31).into_tensor();
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (i, kind) in LossKind::ALL.into_iter().enumerate() {
        let r = grad_check(&nets, kind, &x, &style, 100, 1e-5, 100 + i as u64);
        worst = worst.max(r.max_rel_err);
        parts.push(format!("{kind:?} err {:.1e} max|g| {:.1e}", r.max_rel_err, r.max_abs_grad));
    }
    let pass = worst <= 1e-3 && t0.elapsed().as_secs() < 300;
    report(
        "criterion 3",
        pass,
        &format!("100 coords per loss, max rel err {worst:.2e} [{}], {}", parts.join(", "), elapsed(t0)),
    );
    assert!(pass);
}

fn smoke_corpora() -> (Vec<ImageBatch>, Vec<ImageBatch>) {
    let content = (0..4).map(|i| synthetic::content_image(64, 64, 10 + i)).collect();
    let styles = (0..4)
        .map(|i| synthetic::apply_style(&synthetic::content_image(64, 64, 50 + i), 0, 2).unwrap())
        .collect();
    (content, styles)
}

fn smoke_config() -> TrainConfig {
    TrainConfig {
        seed: 7,
        checkpoint_every: 100,
        ..TrainConfig::desk()
    }
}

#[test]
fn criterion_4_overfit_smoke_test() {
    let t0 = Instant::now();
    let config = smoke_config();
    assert_eq!((config.total_iters, config.patch_size, config.width_scale), (200, 64, 0.125));
    let (content, styles) = smoke_corpora();
    let mut trainer = Trainer::new(config, &content, &styles).unwrap();
    let mut history = Vec::new();
    let mut worst_norm_dev = 0.0f64;
    let mut error = None;
    while trainer.state.iter < 200 {
        match trainer.step() {
            Ok(rec) => history.push(rec),
            Err(e) => {
                error = Some(e.to_string());
                break;
            }
        }
        let k = trainer.state.nets.transformer.effective_kernel().unwrap();
        worst_norm_dev = worst_norm_dev.max((k.sq_norm().sqrt() - 1.0).abs());
    }
    let finite = error.is_none() && history.iter().all(|r| r.report.all_finite());
    let at = |iter: u64| history.iter().find(|r| r.iter == iter).map(|r| r.report.l_content);
    let (l10, l200) = (at(10).unwrap_or(f64::NAN), at(200).unwrap_or(f64::NAN));
    let n_d = history.iter().filter(|r| r.branch == Branch::Discriminator).count();
    let n_eg = history.len() - n_d;
    let pass = finite && l200 < l10 && n_d > 0 && n_eg > 0 && worst_norm_dev <= 1e-6 && t0.elapsed().as_secs() < 600;
    report(
        "criterion 4",
        pass,
        &format!(
            "l_content iter 10 = {l10:.4e}, iter 200 = {l200:.4e}; D steps {n_d}, EG steps {n_eg}; \
             max |‖T‖-1| {worst_norm_dev:.1e}; error {error:?}; {}",
            elapsed(t0)
        ),
    );
    assert!(pass);
}

fn brute_force_threshold(index: &EmbeddingIndex, q: f64) -> f64 {
    let m = index.len();
    let mut all = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            all.push(distance(&index.vector(i), &index.vector(j)).unwrap());
        }
    }
    all.sort_by(f64::total_cmp);
    let p = all.len();
    let k = (1..=p).find(|&k| k as f64 / p as f64 >= q).unwrap();
    all[k - 1]
}

#[test]
fn criterion_5_grouping_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut failures = Vec::new();
    let mut corpora = 0;
    for m in [2usize, 3, 5, 17, 64, 120, 200] {
        for rep in 0..3 {
            corpora += 1;
            let dim = [2, 8, 32][rep];
            // Clustered points so thresholds separate real structure.
            let centres: Vec<Vec<f64>> = (0..4).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let rows: Vec<Vec<f64>> = (0..m)
                .map(|_| {
                    let c = &centres[rng.random_range(0..4)];
                    c.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect()
                })
                .collect();
            let ids: Vec<String> = (0..m).map(|i| format!("p{i:03}")).collect();
            let index = EmbeddingIndex::new(ids.clone(), &rows, "synthetic").unwrap();
            let mut previous: Option<Vec<Vec<String>>> = None;
            let mut sets_by_q = Vec::new();
            for q in [0.05, 0.10, 0.20] {
                let t = quantile_threshold(&index, q).unwrap();
                let oracle_t = brute_force_threshold(&index, q);
                if t.to_bits() != oracle_t.to_bits() {
                    failures.push(format!("M={m} q={q}: threshold {t} vs {oracle_t}"));
                }
                let mut sets = Vec::new();
                for (qi, query) in ids.iter().enumerate() {
                    let set = build_style_set(query, &index, q).unwrap();
                    let mut expect: Vec<String> = (0..m)
                        .filter(|&j| j == qi || distance(&index.vector(qi), &index.vector(j)).unwrap() < oracle_t)
                        .map(|j| ids[j].clone())
                        .collect();
                    expect.sort();
                    let mut got = set.member_ids.clone();
                    got.sort();
                    if got != expect {
                        failures.push(format!("M={m} q={q} query {query}: membership differs"));
                    }
                    sets.push(got);
                }
                if let Some(prev) = &previous {
                    for (small, big) in prev.iter().zip(&sets) {
                        if !small.iter().all(|id| big.contains(id)) {
                            failures.push(format!("M={m}: nesting violated at q={q}"));
                        }
                    }
                }
                previous = Some(sets.clone());
                sets_by_q.push(sets);
            }
        }
    }
    // Five points give ten pairs; q = 0.10 selects the single smallest distance.
    let five: Vec<Vec<f64>> = vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0], vec![-1.0, 0.2], vec![0.3, -1.0]];
    let idx5 = EmbeddingIndex::new((0..5).map(|i| i.to_string()).collect(), &five, "five").unwrap();
    let smallest = (0..5)
        .flat_map(|i| (i + 1..5).map(move |j| (i, j)))
        .map(|(i, j)| idx5.pair_distance(i, j).unwrap())
        .fold(f64::INFINITY, f64::min);
    if quantile_threshold(&idx5, 0.10).unwrap() != smallest {
        failures.push("five-point example".into());
    }
    let _ = grouping::DEFAULT_QUANTILE;
    let pass = failures.is_empty() && t0.elapsed().as_secs() < 60;
    report(
        "criterion 5",
        pass,
        &format!("{corpora} corpora, M <= 200, {} failures, {}", failures.len(), elapsed(t0)),
    );
    assert!(pass, "{:?}", &failures[..failures.len().min(10)]);
}

#[test]
fn criterion_6_deception_rate_pipeline() {
    let t0 = Instant::now();
    let corpus = synthetic::style_corpus(2, 50, 32, 2024).unwrap();
    let cfg = ClassifierTrainConfig {
        seed: 1001,
        ..ClassifierTrainConfig::default()
    };
    let (clf, summary) = train_artist_classifier(&corpus, ClassifierSpec::desk(0.125, 32), &cfg).unwrap();
    let content: Vec<(String, ImageBatch)> = (0..30)
        .map(|i| (format!("content{i}"), synthetic::content_image(32, 32, 90_000 + i)))
        .collect();
    let oracle0 = SyntheticOracleStylizer { artist: 0, n_artists: 2 };
    let oracle1 = SyntheticOracleStylizer { artist: 1, n_artists: 2 };
    let styles = [
        EvalStyle { style_id: "oracle-artist0".into(), target_artist: "artist0".into(), stylizer: &oracle0 },
        EvalStyle { style_id: "oracle-artist1".into(), target_artist: "artist1".into(), stylizer: &oracle1 },
    ];
    let n = 30;
    let oracle = evaluate_suite(&styles, &content, &clf, summary.holdout_accuracy, n, 4).unwrap();
    let identity_styles = [
        EvalStyle { style_id: "identity-artist0".into(), target_artist: "artist0".into(), stylizer: &IdentityStylizer },
        EvalStyle { style_id: "identity-artist1".into(), target_artist: "artist1".into(), stylizer: &IdentityStylizer },
    ];
    let identity = evaluate_suite(&identity_styles, &content, &clf, summary.holdout_accuracy, n, 4).unwrap();
    let raw: Vec<ImageBatch> = content.iter().map(|(_, img)| img.clone()).collect();
    let baseline = [
        deception_rate(&raw, "artist0", &clf).unwrap(),
        deception_rate(&raw, "artist1", &clf).unwrap(),
    ];
    let identity_rates = [identity.per_style["identity-artist0"], identity.per_style["identity-artist1"]];
    let mut ok = summary.holdout_accuracy >= 0.95;
    ok &= oracle.per_style.values().all(|&r| r >= 0.9);
    ok &= identity_rates.iter().zip(&baseline).all(|(a, b)| (a - b).abs() <= 0.1);
    for rep in [&oracle, &identity] {
        ok &= rep.per_style.values().all(|r| (0.0..=1.0).contains(r));
        let mean = rep.per_style.values().sum::<f64>() / rep.per_style.len() as f64;
        ok &= (rep.mean_rate - mean).abs() <= 1e-12;
    }
    let pass = ok && t0.elapsed().as_secs() < 600;
    report(
        "criterion 6",
        pass,
        &format!(
            "holdout acc {:.3} (n={}); oracle rates {:?}; identity {:?} vs raw {:?}; {}",
            summary.holdout_accuracy,
            summary.holdout_size,
            oracle.per_style.values().collect::<Vec<_>>(),
            identity_rates,
            baseline,
            elapsed(t0)
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_determinism_and_resume() {
    let t0 = Instant::now();
    let config = smoke_config();
    let (content, styles) = smoke_corpora();
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let run = |dir: &std::path::Path| {
        let mut t = Trainer::new(config.clone(), &content, &styles).unwrap();
        t.run(Some(dir), |_| {}).unwrap();
        t.state
    };
    let final_a = run(dir_a.path());
    run(dir_b.path());
    let mut ok = true;
    for iter in [100, 200] {
        let a = std::fs::read(checkpoint_path(dir_a.path(), iter)).unwrap();
        let b = std::fs::read(checkpoint_path(dir_b.path(), iter)).unwrap();
        ok &= a == b;
    }
    let identical_runs = ok;

    let resumed_state = TrainState::load(&checkpoint_path(dir_a.path(), 100), &config).unwrap();
    let mut resumed = Trainer::resume(config.clone(), &content, &styles, resumed_state).unwrap();
    assert_eq!(resumed.state.iter, 100);
    resumed.run(None, |_| {}).unwrap();
    let resume_equal = resumed.state == final_a
        && resumed.state.to_container(&config).to_bytes() == final_a.to_container(&config).to_bytes();
    let pass = identical_runs && resume_equal;
    report(
        "criterion 7",
        pass,
        &format!("identical checkpoints {identical_runs}, resume-at-100 equals uninterrupted {resume_equal}, {}", elapsed(t0)),
    );
    let _ = training::CHECKPOINT_KIND;
    assert!(pass);
}

#[test]
fn criterion_8_video_independence() {
    let t0 = Instant::now();
    let nets = Networks::new(NetworkSpec::with_width_scale(0.125), 8).unwrap();
    let input = tempfile::tempdir().unwrap();
    let output = tempfile::tempdir().unwrap();
    for k in 0..10u64 {
        let frame = synthetic::content_image(40, 56, 300 + k);
        save_image(&frame, &input.path().join(format!("frame{k}.png"))).unwrap();
    }
    let count = stylize_video(&nets, input.path(), output.path()).unwrap();
    let frames = list_images(input.path()).unwrap();
    let frame5 = load_image(&frames[5]).unwrap();
    let standalone = stylize_any_size(&nets, &frame5).unwrap();
    let standalone_path = output.path().join("standalone.png");
    save_image(&standalone, &standalone_path).unwrap();
    let from_sequence = std::fs::read(output.path().join("frame5.png")).unwrap();
    let files_equal = from_sequence == std::fs::read(&standalone_path).unwrap();

    let mut in_memory = Vec::new();
    stylize_frames(&nets, frames.iter().map(|p| load_image(p)), |_, img| {
        in_memory.push(img);
        Ok(())
    })
    .unwrap();
    let tensors_equal = in_memory[5] == standalone;
    let empty = stylize_frames(&nets, std::iter::empty(), |_, _| Ok(())).unwrap();
    let pass = count == 10 && files_equal && tensors_equal && empty == 0;
    report(
        "criterion 8",
        pass,
        &format!("{count} frames; frame 5 file identical {files_equal}, tensor identical {tensors_equal}, {}", elapsed(t0)),
    );
    assert!(pass);
}

#[test]
fn criterion_9_padding_round_trip() {
    let t0 = Instant::now();
    let nets = Networks::new(NetworkSpec::with_width_scale(0.125), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut mismatches = Vec::new();
    for i in 0..50 {
        let (h, w) = (rng.random_range(16..=300), rng.random_range(16..=300));
        let x = random_images(1, h, w, 1000 + i);
        let y = stylize_any_size(&nets, &x).unwrap();
        if (y.height(), y.width()) != (h, w) {
            mismatches.push((h, w, y.height(), y.width()));
        }
    }
    let pass = mismatches.is_empty();
    report(
        "criterion 9",
        pass,
        &format!("50 random sizes in [16, 300]^2, {} mismatches, {}", mismatches.len(), elapsed(t0)),
    );
    assert!(pass, "{mismatches:?}");
}
