//! Built-in diagnostics: finite-difference checks for every autodiff op
//! and the composed network, plus oracle checks for the metrics, the
//! optimizer, and score normalization. The CLI exposes these as a
//! subcommand so a binary can vouch for itself on the machine it runs on.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::dataset::{asap_prompt_specs, denormalize_score, normalize_score, Essay};
use crate::error::Result;
use crate::eval::{paired_ttest_2tailed, qwk};
use crate::gaze::{align_gaze, bin_and_scale, quantile_bin, synth_gaze};
use crate::model::{init_params, network_grad_check, ModelConfig};
use crate::rng;
use crate::tape::{grad_check, grad_check_multi, GRAD_CHECK_EPS, GRAD_CHECK_EPS_DEEP, GRAD_CHECK_TOL};
use crate::tensor::Tensor;
use crate::text::{build_vocab, encode_essay, EmbeddingMatrix, EncodeLimits};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn pass(name: &str, detail: String) -> Self {
        CheckResult {
            name: String::from(name),
            passed: true,
            detail,
        }
    }

    fn fail(name: &str, detail: String) -> Self {
        CheckResult {
            name: String::from(name),
            passed: false,
            detail,
        }
    }
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

fn grade(name: &str, outcome: Result<f64>) -> CheckResult {
    match outcome {
        Ok(err) if err <= GRAD_CHECK_TOL => {
            CheckResult::pass(name, format!("max rel err {err:.3e} (tol {GRAD_CHECK_TOL:.0e})"))
        }
        Ok(err) => CheckResult::fail(
            name,
            format!("max rel err {err:.3e} exceeds tol {GRAD_CHECK_TOL:.0e}"),
        ),
        Err(e) => CheckResult::fail(name, format!("{e}")),
    }
}

fn filled(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[0xC0FFEE]);
    Tensor::uniform(shape, -0.8, 0.8, &mut r)
}

fn op_gradient_checks(out: &mut Vec<CheckResult>) {
    out.push(grade(
        "grad-scalar-chain",
        grad_check(
            |tape, x| {
                let s = tape.sigmoid(x)?;
                let t = tape.tanh(s)?;
                let r = tape.relu(t)?;
                let sc = tape.scale(r, 1.7)?;
                tape.mse(sc, &Tensor::full(&[6], 0.3), None)
            },
            &filled(&[6], 1),
            GRAD_CHECK_EPS,
        ),
    ));
    out.push(grade(
        "grad-linear",
        grad_check_multi(
            |tape, vars| {
                let y = tape.linear(vars[0], vars[1], vars[2])?;
                tape.mse(y, &Tensor::full(&[3, 2], 0.1), None)
            },
            &[filled(&[3, 4], 2), filled(&[4, 2], 3), filled(&[2], 4)],
            GRAD_CHECK_EPS,
        ),
    ));
    out.push(grade(
        "grad-conv1d",
        grad_check_multi(
            |tape, vars| {
                let y = tape.conv1d_same(vars[0], vars[1], vars[2])?;
                tape.mse(y, &Tensor::full(&[5, 3], -0.2), None)
            },
            &[filled(&[5, 2], 5), filled(&[3, 2, 3], 6), filled(&[3], 7)],
            GRAD_CHECK_EPS,
        ),
    ));
    out.push(grade(
        "grad-lstm",
        grad_check_multi(
            |tape, vars| {
                let h = tape.lstm_seq(vars[0], vars[1], vars[2], vars[3])?;
                tape.mse(h, &Tensor::full(&[4, 3], 0.05), None)
            },
            &[
                filled(&[4, 2], 8),
                filled(&[2, 12], 9),
                filled(&[3, 12], 10),
                filled(&[12], 11),
            ],
            GRAD_CHECK_EPS,
        ),
    ));
    out.push(grade(
        "grad-attention-pool",
        grad_check_multi(
            |tape, vars| {
                let (pooled, _) = tape.attention_pool(vars[0], vars[1], vars[2], None)?;
                tape.mse(pooled, &Tensor::full(&[3], 0.2), None)
            },
            &[filled(&[5, 3], 12), filled(&[3, 4], 13), filled(&[4], 14)],
            GRAD_CHECK_EPS,
        ),
    ));
    out.push(grade(
        "grad-mean-pool",
        grad_check(
            |tape, x| {
                let pooled = tape.mean_pool(x, None)?;
                tape.mse(pooled, &Tensor::full(&[3], -0.1), None)
            },
            &filled(&[4, 3], 15),
            GRAD_CHECK_EPS,
        ),
    ));
    out.push(grade(
        "grad-embed",
        grad_check(
            |tape, table| {
                let x = tape.embed(table, &[2, 0, 1, 2], &[true, true, true, true])?;
                tape.mse(x, &Tensor::full(&[4, 3], 0.15), None)
            },
            &filled(&[4, 3], 16),
            GRAD_CHECK_EPS,
        ),
    ));
    out.push(grade(
        "grad-dropout",
        grad_check(
            |tape, x| {
                // fixed stream per rebuild so the mask is identical on
                // every finite-difference evaluation
                let mut r = rng::stream(99, &[rng::domain::DROPOUT]);
                let d = tape.dropout(x, 0.4, true, &mut r)?;
                tape.mse(d, &Tensor::full(&[8], 0.0), None)
            },
            &filled(&[8], 17),
            GRAD_CHECK_EPS,
        ),
    ));
}

fn toy_essay_check() -> CheckResult {
    let name = "grad-full-network";
    let essay = Essay {
        essay_id: 1,
        prompt_id: 5,
        gold_score: 3,
        text: String::from("Readers weigh the cogent case. Second thoughts arrive slowly."),
    };
    let run = || -> Result<f64> {
        let corpus = [essay.clone()];
        let vocab = build_vocab(&corpus, 1)?;
        let specs = asap_prompt_specs();
        let limits = EncodeLimits {
            max_sentences: 2,
            max_tokens: 6,
        };
        let mut enc = encode_essay(&essay, &vocab, &specs, limits)?;
        let labels = bin_and_scale(&synth_gaze(&essay, 3), 4)?;
        enc.gaze = Some(align_gaze(&labels, &enc)?);
        let config = ModelConfig {
            embed_dim: 3,
            cnn_kernel: 3,
            cnn_filters: 4,
            lstm_hidden: 4,
            word_attn_dim: 4,
            sent_attn_dim: 4,
            gaze_enabled: true,
            ..ModelConfig::default()
        };
        let emb = EmbeddingMatrix::random(vocab.len(), config.embed_dim, 21)?;
        let mut params = init_params(&config, &emb, 21)?;
        // widen the weights well past the init scale: tiny products leave
        // gradients near the finite-difference noise floor otherwise
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let mut r = rng::stream(77, &[i as u64]);
            *t = Tensor::uniform(t.shape(), -0.4, 0.4, &mut r);
        }
        network_grad_check(&params, &config, &enc, GRAD_CHECK_EPS_DEEP)
    };
    grade(name, run())
}

/// Chance-corrected agreement computed the long way: expected
/// disagreement from marginal counts, observed from the item list, no
/// shared code with the production metric.
fn qwk_pairwise_oracle(gold: &[i32], pred: &[i32], min: i32, max: i32) -> f64 {
    let n = gold.len() as f64;
    let w = |a: i32, b: i32| {
        let d = f64::from(a - b);
        let span = f64::from(max - min);
        d * d / (span * span)
    };
    let observed: f64 = gold.iter().zip(pred).map(|(&g, &p)| w(g, p)).sum::<f64>() / n;
    let mut expected = 0.0;
    for i in min..=max {
        for j in min..=max {
            let gi = gold.iter().filter(|&&g| g == i).count() as f64;
            let pj = pred.iter().filter(|&&p| p == j).count() as f64;
            expected += w(i, j) * gi * pj / (n * n);
        }
    }
    if expected == 0.0 {
        1.0
    } else {
        1.0 - observed / expected
    }
}

fn qwk_checks(out: &mut Vec<CheckResult>) {
    let name = "qwk-known-values";
    let run = || -> Result<(f64, f64, f64)> {
        let perfect = qwk(&[1, 2, 3, 4], &[1, 2, 3, 4], 0, 4)?;
        let inverted = qwk(&[0, 0, 1, 1], &[1, 1, 0, 0], 0, 1)?;
        let chance = qwk(&[0, 0, 1, 1], &[0, 1, 0, 1], 0, 1)?;
        Ok((perfect, inverted, chance))
    };
    out.push(match run() {
        Ok((1.0, -1.0, 0.0)) => CheckResult::pass(name, String::from("1.0 / -1.0 / 0.0")),
        Ok(got) => CheckResult::fail(name, format!("got {got:?}, want (1.0, -1.0, 0.0)")),
        Err(e) => CheckResult::fail(name, format!("{e}")),
    });

    let name = "qwk-vs-pairwise-oracle";
    let run = || -> Result<f64> {
        let mut worst = 0.0f64;
        let mut r = rng::stream(7, &[0xBEEF]);
        for _ in 0..50 {
            let min = r.gen_range(0..3);
            let max = min + r.gen_range(1..8);
            let n = r.gen_range(2..40);
            let gold: Vec<i32> = (0..n).map(|_| r.gen_range(min..=max)).collect();
            let pred: Vec<i32> = (0..n).map(|_| r.gen_range(min..=max)).collect();
            let a = qwk(&gold, &pred, min, max)?;
            let b = qwk_pairwise_oracle(&gold, &pred, min, max);
            worst = worst.max((a - b).abs());
        }
        Ok(worst)
    };
    out.push(match run() {
        Ok(worst) if worst < 1e-12 => {
            CheckResult::pass(name, format!("max abs diff {worst:.3e} over 50 cases"))
        }
        Ok(worst) => CheckResult::fail(name, format!("max abs diff {worst:.3e} >= 1e-12")),
        Err(e) => CheckResult::fail(name, format!("{e}")),
    });
}

fn ttest_check() -> CheckResult {
    let name = "paired-t-test-oracle";
    match paired_ttest_2tailed(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]) {
        Ok((t, p)) => {
            let t_ok = (t - 3.464_101_615_137_754_4).abs() < 1e-9;
            let p_ok = (p - 0.074_179_900_227_448_58).abs() < 1e-3;
            if t_ok && p_ok {
                CheckResult::pass(name, format!("t = {t:.4}, p = {p:.4}"))
            } else {
                CheckResult::fail(name, format!("t = {t}, p = {p}"))
            }
        }
        Err(e) => CheckResult::fail(name, format!("{e}")),
    }
}

fn optimizer_check() -> CheckResult {
    use crate::model::ModelParams;
    use crate::optim::{rmsprop_step, OptimState, RmsPropConfig};
    let name = "rmsprop-scalar-reference";
    let run = || -> Result<f64> {
        let config = ModelConfig {
            embed_dim: 2,
            cnn_kernel: 3,
            cnn_filters: 2,
            lstm_hidden: 2,
            word_attn_dim: 2,
            sent_attn_dim: 2,
            ..ModelConfig::default()
        };
        let emb = EmbeddingMatrix::random(3, 2, 1)?;
        let mut params = init_params(&config, &emb, 1)?;
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                *v = 1.0;
            }
        }
        let mut state = OptimState::new(&params, RmsPropConfig::default())?;
        let (mut theta, mut acc, mut vel) = (1.0f64, 0.0f64, 0.0f64);
        let mut worst = 0.0f64;
        for _ in 0..3 {
            let grads: Vec<Tensor> = params.tensors().iter().map(Tensor::clone).collect();
            rmsprop_step(&mut params, &grads, &mut state)?;
            let g = theta;
            acc = 0.9 * acc + 0.1 * g * g;
            vel = 0.9 * vel + 0.001 * g / libm::sqrt(acc + 1e-8);
            theta -= vel;
            for t in params.tensors() {
                for &v in t.data() {
                    worst = worst.max((v - theta).abs());
                }
            }
        }
        let _ = ModelParams::from_named(params.named().map(|(n, t)| (String::from(n), t.clone())).collect::<Vec<_>>())?;
        Ok(worst)
    };
    match run() {
        Ok(worst) if worst < 1e-12 => {
            CheckResult::pass(name, format!("max abs dev {worst:.3e} over 3 steps"))
        }
        Ok(worst) => CheckResult::fail(name, format!("max abs dev {worst:.3e} >= 1e-12")),
        Err(e) => CheckResult::fail(name, format!("{e}")),
    }
}

fn round_trip_check() -> CheckResult {
    let name = "score-round-trip";
    let run = || -> Result<usize> {
        let specs = asap_prompt_specs();
        let mut count = 0usize;
        for spec in specs.iter() {
            for s in spec.min_score..=spec.max_score {
                let unit = normalize_score(s, spec)?;
                if denormalize_score(unit, spec)? != s {
                    return Err(crate::Error::Validation(format!(
                        "round trip broke at prompt {} rating {s}",
                        spec.prompt_id
                    )));
                }
                count += 1;
            }
        }
        Ok(count)
    };
    match run() {
        Ok(count) => CheckResult::pass(name, format!("{count} ratings round-tripped exactly")),
        Err(e) => CheckResult::fail(name, format!("{e}")),
    }
}

fn binning_check() -> CheckResult {
    let name = "quantile-bin-oracle";
    match quantile_bin(&[3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0], 4) {
        Ok(bins) if bins == vec![1, 0, 2, 0, 2, 3, 1, 3] => {
            CheckResult::pass(name, String::from("matches the frozen 8-value assignment"))
        }
        Ok(bins) => CheckResult::fail(name, format!("got {bins:?}")),
        Err(e) => CheckResult::fail(name, format!("{e}")),
    }
}

/// Runs every diagnostic and returns the individual results.
pub fn run_selftest() -> Vec<CheckResult> {
    let mut out = Vec::new();
    op_gradient_checks(&mut out);
    out.push(toy_essay_check());
    qwk_checks(&mut out);
    out.push(ttest_check());
    out.push(optimizer_check());
    out.push(round_trip_check());
    out.push(binning_check());
    out
}
