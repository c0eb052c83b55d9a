//! The acceptance gate: ten numbered checks, one test each, at their
//! stated tolerances. Nine run in a normal `cargo test`; the tenth needs
//! the real essay dataset and roughly a day of single-core compute, so it
//! is ignored unless invoked by hand:
//!
//! ```text
//! ASAP_TSV=/path/to/training_set_rel3.tsv \
//!   cargo test --test acceptance -- --ignored criterion_10
//! ```

use aeg_core::dataset::{
    asap_prompt_specs, denormalize_score, normalize_score, parse_asap_tsv, Essay,
};
use aeg_core::eval::{paired_ttest_2tailed, qwk};
use aeg_core::experiment::{
    make_zero_shot_splits, run_experiment, verify_plan, ExperimentConfig, ExperimentReport,
    RunHooks, RunMode,
};
use aeg_core::gaze::{align_gaze, bin_and_scale, synth_gaze, GazeAttribute};
use aeg_core::model::{
    forward, init_params, multitask_loss, predict, ForwardMode, ModelConfig, WordPooling,
};
use aeg_core::optim::{rmsprop_step, OptimState, RmsPropConfig};
use aeg_core::selftest::run_selftest;
use aeg_core::synth::{pick_gaze_essays, synth_corpus, SynthCorpusConfig};
use aeg_core::tensor::Tensor;
use aeg_core::text::{build_vocab, encode_essay, EmbeddingMatrix, EncodeLimits};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

fn aeg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aeg"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawning aeg");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

/// Criterion 1: every primitive op and the composed network pass the
/// finite-difference gradient check at 1e-4, inside 30 seconds.
#[test]
fn criterion_01_gradient_checks_pass_under_30s() {
    let started = Instant::now();
    let results = run_selftest();
    let grads: Vec<_> = results
        .iter()
        .filter(|r| r.name.starts_with("grad-"))
        .collect();
    assert!(
        grads.len() >= 9,
        "expected per-op checks plus the full network, found {}",
        grads.len()
    );
    assert!(
        grads.iter().any(|r| r.name == "grad-full-network"),
        "composed-network check missing"
    );
    for r in &grads {
        assert!(r.passed, "{} failed: {}", r.name, r.detail);
    }
    let elapsed = started.elapsed().as_secs_f64();
    assert!(elapsed < 30.0, "gradient checks took {elapsed:.1}s");
}

/// Scoped-down deterministic generator for oracle test cases, independent
/// of the library's seeding scheme.
struct Mix(u64);

impl Mix {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }
}

/// Brute-force quadratic weighted kappa over the full confusion matrix,
/// written without reference to the library implementation.
fn oracle_qwk(gold: &[i32], pred: &[i32], min: i32, max: i32) -> f64 {
    let k = (max - min + 1) as usize;
    let n = gold.len() as f64;
    let mut observed = vec![0.0; k * k];
    let mut gold_marginal = vec![0.0; k];
    let mut pred_marginal = vec![0.0; k];
    for (&g, &p) in gold.iter().zip(pred) {
        let gi = (g - min) as usize;
        let pi = (p - min) as usize;
        observed[gi * k + pi] += 1.0;
        gold_marginal[gi] += 1.0;
        pred_marginal[pi] += 1.0;
    }
    let denom_scale = ((k - 1) * (k - 1)) as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64) * (i as f64 - j as f64)) / denom_scale;
            num += w * observed[i * k + j];
            den += w * gold_marginal[i] * pred_marginal[j] / n;
        }
    }
    1.0 - num / den
}

/// Criterion 2: agreement with the brute-force oracle to 1e-12 on 1000
/// random rating pairs, plus the three exact landmark values.
#[test]
fn criterion_02_qwk_matches_brute_force_oracle() {
    assert_eq!(qwk(&[1, 2, 3, 4], &[1, 2, 3, 4], 0, 4).unwrap(), 1.0);
    assert_eq!(qwk(&[0, 0, 1, 1], &[1, 1, 0, 0], 0, 1).unwrap(), -1.0);
    assert_eq!(qwk(&[0, 0, 1, 1], &[0, 1, 0, 1], 0, 1).unwrap(), 0.0);

    let mut rng = Mix(2024);
    let mut checked = 0usize;
    while checked < 1000 {
        let len = 2 + rng.below(199) as usize;
        let min = rng.below(5) as i32;
        let span = 1 + rng.below(60) as i32;
        let max = min + span;
        let gold: Vec<i32> = (0..len).map(|_| min + rng.below(span as u64 + 1) as i32).collect();
        let pred: Vec<i32> = (0..len).map(|_| min + rng.below(span as u64 + 1) as i32).collect();
        // chance agreement is undefined when both raters sit constant on
        // one shared category; redraw those
        let degenerate = gold.iter().chain(&pred).all(|&v| v == gold[0]);
        if degenerate {
            continue;
        }
        let ours = qwk(&gold, &pred, min, max).unwrap();
        let reference = oracle_qwk(&gold, &pred, min, max);
        assert!(
            (ours - reference).abs() < 1e-12,
            "case {checked}: {ours} vs oracle {reference} (len {len}, range {min}..={max})"
        );
        checked += 1;
    }
}

/// Criterion 3: the optimizer matches an inline scalar reference on
/// f(t) = t^2 / 2 to 1e-12 over three steps, and the first step moves by
/// about -0.0031623.
#[test]
fn criterion_03_rmsprop_matches_scalar_reference() {
    let config = ModelConfig {
        embed_dim: 3,
        cnn_kernel: 3,
        cnn_filters: 4,
        lstm_hidden: 4,
        word_attn_dim: 4,
        sent_attn_dim: 4,
        ..ModelConfig::default()
    };
    let embeddings = EmbeddingMatrix::random(6, 3, 1).unwrap();
    let mut params = init_params(&config, &embeddings, 1).unwrap();
    for tensor in params.tensors_mut() {
        for v in tensor.data_mut() {
            *v = 1.0;
        }
    }
    let mut state = OptimState::new(&params, RmsPropConfig::default()).unwrap();

    // hand-rolled reference with the published defaults
    let (mut acc, mut vel, mut theta) = (0.0_f64, 0.0_f64, 1.0_f64);
    let mut first_step = 0.0;
    for step in 0..3 {
        let grads: Vec<Tensor> = params.tensors().to_vec();
        rmsprop_step(&mut params, &grads, &mut state).unwrap();

        let g = theta;
        acc = 0.9 * acc + 0.1 * g * g;
        vel = 0.9 * vel + 0.001 * g / (acc + 1e-8).sqrt();
        theta -= vel;
        if step == 0 {
            first_step = -vel;
        }

        for tensor in params.tensors() {
            for &v in tensor.data() {
                assert!(
                    (v - theta).abs() < 1e-12,
                    "step {step}: {v} vs reference {theta}"
                );
            }
        }
    }
    assert!(
        (first_step - (-0.0031623)).abs() < 1e-6,
        "first step was {first_step}"
    );
}

/// Criterion 4: normalize/denormalize is the identity on every integer
/// score of all eight rating ranges.
#[test]
fn criterion_04_score_round_trip_is_exhaustive() {
    let specs = asap_prompt_specs();
    let mut checked = 0;
    for spec in specs.iter() {
        for score in spec.min_score..=spec.max_score {
            let unit = normalize_score(score, spec).unwrap();
            assert!((0.0..=1.0).contains(&unit));
            assert_eq!(
                denormalize_score(unit, spec).unwrap(),
                score,
                "prompt {} score {score}",
                spec.prompt_id
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 11 + 6 + 4 + 4 + 5 + 5 + 31 + 61);
}

/// Criterion 5: across all eight target prompts and five folds of a
/// synthetic corpus, no train or dev split touches a target-prompt essay.
#[test]
fn criterion_05_zero_shot_purity_all_targets() {
    let specs = asap_prompt_specs();
    let corpus = synth_corpus(
        &SynthCorpusConfig {
            prompts: (1..=8).collect(),
            essays_per_prompt: 25,
            seed: 3,
            noise: 0.08,
        },
        &specs,
    )
    .unwrap();
    let prompt_of: BTreeMap<u32, u8> = corpus.iter().map(|e| (e.essay_id, e.prompt_id)).collect();

    let mut folds_checked = 0;
    for target in 1..=8u8 {
        let plan = make_zero_shot_splits(&corpus, target, 42).unwrap();
        verify_plan(&plan, &corpus).unwrap();
        assert_eq!(plan.folds.len(), 5);
        // independent scan, not trusting verify_plan
        for fold in &plan.folds {
            for id in fold.train.iter().chain(&fold.dev) {
                assert_ne!(prompt_of[id], target, "essay {id} leaked into target {target}");
            }
            folds_checked += 1;
        }
        assert!(plan.test.iter().all(|id| prompt_of[id] == target));
        assert_eq!(plan.test.len(), 25);
    }
    assert_eq!(folds_checked, 40);
}

/// Criterion 6: the training objective equals
/// score + 0.05 DT + 0.05 FFD + 0.01 IR + 0.01 RC + 0.1 Skip
/// over per-task MSEs recomputed independently, within 1e-12.
#[test]
fn criterion_06_loss_composition_matches_weighted_sum() {
    let specs = asap_prompt_specs();
    let essay = Essay {
        essay_id: 12,
        prompt_id: 3,
        gold_score: 2,
        text: "The river bends east past the mill. Old maps still show the ford. \
               Nobody crosses there now."
            .into(),
    };
    let vocab = build_vocab(std::slice::from_ref(&essay), 1).unwrap();
    let limits = EncodeLimits {
        max_sentences: 4,
        max_tokens: 10,
    };
    let mut enc = encode_essay(&essay, &vocab, &specs, limits).unwrap();
    let labels = bin_and_scale(&synth_gaze(&essay, 8), 5).unwrap();
    let targets = align_gaze(&labels, &enc).unwrap();
    assert!(targets.labeled_count() > 0);
    enc.gaze = Some(targets.clone());

    let config = ModelConfig {
        embed_dim: 5,
        cnn_kernel: 3,
        cnn_filters: 6,
        lstm_hidden: 5,
        word_attn_dim: 6,
        sent_attn_dim: 5,
        gaze_enabled: true,
        ..ModelConfig::default()
    };
    let embeddings = EmbeddingMatrix::random(vocab.len(), 5, 21).unwrap();
    let params = init_params(&config, &embeddings, 21).unwrap();

    let mut pass = forward(&params, &config, &enc, ForwardMode::Eval).unwrap();
    let (_, components) = multitask_loss(&mut pass, &enc, &config).unwrap();
    let prediction = predict(&params, &config, &enc).unwrap();

    // the independent route: per-task MSEs from the eval-mode prediction
    let score_mse = (prediction.score_unit - enc.target).powi(2);
    assert!((components.score - score_mse).abs() < 1e-12);
    let mut expected_total = score_mse;
    for attr in GazeAttribute::ALL {
        let mut acc = 0.0;
        let mut labeled = 0usize;
        for s in 0..enc.n_sentences() {
            for t in 0..enc.sentence_len(s) {
                if targets.mask[s * enc.max_tokens + t] {
                    let d = prediction.gaze_at(attr, s, t) - targets.value_at(attr, s, t);
                    acc += d * d;
                    labeled += 1;
                }
            }
        }
        assert!(labeled > 0, "{attr:?} has no labels");
        let mse = acc / labeled as f64;
        assert!(
            (components.gaze[attr.index()] - mse).abs() < 1e-12,
            "{attr:?} MSE drifted"
        );
        expected_total += config.gaze_loss_weights[attr.index()] * mse;
    }
    assert!(
        (components.total - expected_total).abs() < 1e-12,
        "total {} vs weighted sum {}",
        components.total,
        expected_total
    );

    // the published example: all five auxiliary MSEs at 0.1 and the score
    // term at 0.04 compose to 0.062
    let weights = ModelConfig::default().gaze_loss_weights;
    let example = 0.04 + 0.1 * weights.iter().sum::<f64>();
    assert!((example - 0.062).abs() < 1e-12);
}

/// Criterion 7: on ~800 synthetic essays over 4 prompts with default
/// hyperparameters, the no-gaze run reaches mean test QWK >= 0.5 with
/// falling training loss, and the gaze run completes finite on an
/// identical split; both legs inside 20 minutes.
#[test]
fn criterion_07_multitask_sanity_on_synthetic_data() {
    let dir = fresh_dir("criterion7");
    let corpus = dir.join("corpus.json");
    let gaze = dir.join("gaze.tsv");
    run_ok(
        aeg()
            .args(["synth-corpus", "--prompts", "3,4,5,6", "--per-prompt", "200", "--seed", "1"])
            .arg("--out")
            .arg(&corpus),
    );
    run_ok(
        aeg()
            .args(["synth-gaze", "--seed", "1", "--essays", "48"])
            .arg("--corpus")
            .arg(&corpus)
            .arg("--out")
            .arg(&gaze),
    );

    let started = Instant::now();
    let ng_run = dir.join("run_nogaze");
    run_ok(
        aeg()
            .args(["train", "--target-prompt", "4", "--config", "nogaze", "--seed", "42"])
            .arg("--corpus")
            .arg(&corpus)
            .arg("--out")
            .arg(&ng_run),
    );
    let gz_run = dir.join("run_gaze");
    run_ok(
        aeg()
            .args(["train", "--target-prompt", "4", "--config", "gaze", "--seed", "42"])
            .arg("--corpus")
            .arg(&corpus)
            .arg("--gaze")
            .arg(&gaze)
            .arg("--out")
            .arg(&gz_run),
    );
    let elapsed = started.elapsed().as_secs_f64();

    let report = |run: &Path, name: &str| -> ExperimentReport {
        let path = dir.join(name);
        run_ok(
            aeg()
                .arg("evaluate")
                .arg("--run")
                .arg(run)
                .arg("--out")
                .arg(&path),
        );
        serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap()
    };
    let ng = report(&ng_run, "nogaze_report.json");
    let gz = report(&gz_run, "gaze_report.json");

    assert!(
        ng.mean_test_qwk >= 0.5,
        "no-gaze mean test QWK {:.3} under 0.5",
        ng.mean_test_qwk
    );
    for fold in &ng.folds {
        let first = &fold.history[0];
        let last = fold.history.last().unwrap();
        assert_eq!(first.epoch, 1);
        assert_eq!(last.epoch, 50);
        assert!(
            last.train_loss < first.train_loss,
            "fold {}: loss rose from {} to {}",
            fold.fold,
            first.train_loss,
            last.train_loss
        );
    }

    assert!(gz.mean_test_qwk.is_finite());
    for fold in &gz.folds {
        for rec in &fold.history {
            assert!(rec.train_loss.is_finite() && rec.score_loss.is_finite());
            assert!(rec.gaze_losses.iter().all(|l| l.is_finite()));
        }
    }
    // the gaze-labeled essays actually reached training folds
    let labeled: usize = gz.folds.iter().map(|f| f.history[0].labeled_essays).sum();
    assert!(labeled > 0, "no fold trained on a gaze-labeled essay");
    // fold pairing: both runs planned the identical split
    assert_eq!(
        fs::read(ng_run.join("split.json")).unwrap(),
        fs::read(gz_run.join("split.json")).unwrap(),
        "gaze and no-gaze splits differ"
    );

    assert!(
        elapsed < 1200.0,
        "both training legs took {elapsed:.0}s, over the 20 minute budget"
    );
}

/// Criterion 8: the paired t-test reproduces the frozen d = [1,2,3]
/// oracle, is antisymmetric, and returns (0, 1) on identical samples.
#[test]
fn criterion_08_paired_ttest_oracle() {
    let x = [2.0, 4.0, 6.0];
    let y = [1.0, 2.0, 3.0];
    let (t, p) = paired_ttest_2tailed(&x, &y).unwrap();
    assert!((t - 3.464_101_615_137_754_4).abs() < 1e-12, "t = {t}");
    assert!((p - 0.0742).abs() < 1e-3, "p = {p}");
    assert!((p - 0.074_179_900_227_448_58).abs() < 1e-12, "p = {p}");

    let (t_rev, p_rev) = paired_ttest_2tailed(&y, &x).unwrap();
    assert!((t_rev + t).abs() < 1e-12);
    assert!((p_rev - p).abs() < 1e-12);

    let (t0, p0) = paired_ttest_2tailed(&y, &y).unwrap();
    assert_eq!((t0, p0), (0.0, 1.0));
}

/// Criterion 9: two end-to-end runs with the same seed write byte-equal
/// report JSON, gaze mode included.
#[test]
fn criterion_09_end_to_end_determinism() {
    let dir = fresh_dir("criterion9");
    let corpus = dir.join("corpus.json");
    let gaze = dir.join("gaze.tsv");
    run_ok(
        aeg()
            .args(["synth-corpus", "--prompts", "3,4,5", "--per-prompt", "15", "--seed", "9"])
            .arg("--out")
            .arg(&corpus),
    );
    run_ok(
        aeg()
            .args(["synth-gaze", "--seed", "5", "--essays", "10"])
            .arg("--corpus")
            .arg(&corpus)
            .arg("--out")
            .arg(&gaze),
    );
    let hyper = dir.join("quick.cfg");
    fs::write(
        &hyper,
        "batch_size = 16\nepochs = 2\nembed_dim = 8\ncnn_kernel = 3\ncnn_filters = 6\n\
         lstm_hidden = 6\nword_attn_dim = 6\nsent_attn_dim = 6\ndropout_rate = 0.2\n\
         max_sentences = 8\nmax_tokens = 12\nmin_count = 1\n",
    )
    .unwrap();

    let mut reports = Vec::new();
    for tag in ["first", "second"] {
        let run = dir.join(format!("run_{tag}"));
        run_ok(
            aeg()
                .args(["train", "--target-prompt", "4", "--config", "gaze", "--seed", "7"])
                .arg("--corpus")
                .arg(&corpus)
                .arg("--gaze")
                .arg(&gaze)
                .arg("--hyper")
                .arg(&hyper)
                .arg("--out")
                .arg(&run),
        );
        let report = dir.join(format!("report_{tag}.json"));
        run_ok(
            aeg()
                .arg("evaluate")
                .arg("--run")
                .arg(&run)
                .arg("--out")
                .arg(&report),
        );
        reports.push(fs::read(&report).unwrap());
    }
    assert!(!reports[0].is_empty());
    assert_eq!(reports[0], reports[1], "same-seed reports differ");
}

/// Criterion 10 (optional, needs the downloaded essay TSV): zero-shot
/// no-gaze runs over all eight target prompts with default settings land
/// above mean QWK 0.30. Expect roughly a day of single-core compute.
#[test]
#[ignore = "needs ASAP_TSV pointing at training_set_rel3.tsv and many hours"]
fn criterion_10_full_data_directional_check() {
    let path = std::env::var("ASAP_TSV")
        .expect("set ASAP_TSV to the training_set_rel3.tsv path to run this check");
    let bytes = fs::read(&path).expect("reading the essay TSV");
    let specs = asap_prompt_specs();
    let corpus = parse_asap_tsv(&bytes, &specs).expect("parsing the essay TSV");
    assert!(corpus.len() > 10_000, "unexpectedly small corpus: {}", corpus.len());

    let cfg = ExperimentConfig::default();
    let mut means = Vec::new();
    for target in 1..=8u8 {
        let report = run_experiment(
            &corpus,
            None,
            None,
            &specs,
            target,
            RunMode::NoGaze,
            &cfg,
            RunHooks::none(),
        )
        .unwrap();
        println!("target {target}: mean test QWK {:.3}", report.mean_test_qwk);
        means.push(report.mean_test_qwk);
    }
    let overall = means.iter().sum::<f64>() / means.len() as f64;
    println!("overall mean QWK {overall:.3}");
    assert!(overall > 0.30, "overall mean QWK {overall:.3} under 0.30");
}

/// The auxiliary-task machinery must not be reachable from a no-gaze
/// objective: this pins the weights the criterion 6 sum relies on.
#[test]
fn default_loss_weights_are_the_published_ones() {
    let config = ModelConfig::default();
    assert_eq!(config.gaze_loss_weights, [0.05, 0.05, 0.01, 0.01, 0.1]);
    assert_eq!(config.word_pooling, WordPooling::Attention);
    assert!(!config.gaze_enabled);
}

/// Keeps the synthetic sampler honest: the gaze selection used by the
/// acceptance runs is reproducible and inside the corpus.
#[test]
fn synthetic_gaze_selection_is_seeded_and_valid() {
    let specs = asap_prompt_specs();
    let corpus = synth_corpus(
        &SynthCorpusConfig {
            prompts: vec![3, 4],
            essays_per_prompt: 30,
            seed: 2,
            noise: 0.08,
        },
        &specs,
    )
    .unwrap();
    let a = pick_gaze_essays(&corpus, 12, 4).unwrap();
    let b = pick_gaze_essays(&corpus, 12, 4).unwrap();
    assert_eq!(a, b);
    let ids: Vec<u32> = corpus.iter().map(|e| e.essay_id).collect();
    assert!(a.iter().all(|id| ids.contains(id)));
}
