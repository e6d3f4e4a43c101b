//! Acceptance suite: one test per criterion, each printing a PASS line.
//!
//! Run with `cargo test -p dialectid --test acceptance -- --nocapture`.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use dialectid::corpus::{self, EncodedExample, LabelSet, RawExample};
use dialectid::encoder::{
    init_model, ForwardSession, Model, ModelConfig, Phase, TrainMode,
};
use dialectid::eval::{self, ProbDist};
use dialectid::numerics::{grad_check, CoordSelection, NumericsError, Tape};
use dialectid::training::{
    self, early_stop_update, lr_multiplier, trainable_mask, EarlyStopState, Schedule,
    StopDecision, TrainConfig,
};

// ---------------------------------------------------------------------------
// Shared fixtures
// ---------------------------------------------------------------------------

/// The toy architecture used across criteria:
/// L=2, d=32, h=2, ffn=64, m=8, C=5 over a 100-token vocabulary.
fn toy_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden: 32,
        heads: 2,
        ffn_dim: 64,
        vocab_size: 100,
        max_positions: 64,
        num_classes: 5,
        adapter_enabled: true,
        adapter_bottleneck: 8,
        vatt_enabled: true,
        dropout_hidden: 0.0,
        dropout_cls: 0.0,
        mode: TrainMode::FineTune,
    }
}

/// Synthetic corpus: class `c` draws from its own word pool, optionally
/// mixed with a shared pool, with label noise on a fraction of rows.
fn make_corpus(
    examples: usize,
    classes: usize,
    shared_words: usize,
    own_words: usize,
    noise: f64,
    seed: u64,
) -> Vec<RawExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared: Vec<String> = (0..shared_words).map(|j| format!("com{j}")).collect();
    let pools: Vec<Vec<String>> = (0..classes)
        .map(|c| (0..own_words).map(|j| format!("w{c}x{j}")).collect())
        .collect();
    (0..examples)
        .map(|i| {
            let class = i % classes;
            let len = rng.gen_range(4..=9);
            let words: Vec<String> = (0..len)
                .map(|_| {
                    if !shared.is_empty() && rng.gen::<f64>() < 0.5 {
                        shared[rng.gen_range(0..shared.len())].clone()
                    } else {
                        pools[class][rng.gen_range(0..own_words)].clone()
                    }
                })
                .collect();
            let label = if rng.gen::<f64>() < noise {
                format!("C{}", rng.gen_range(0..classes))
            } else {
                format!("C{class}")
            };
            RawExample {
                id: format!("{i}"),
                text: words.join(" "),
                label,
            }
        })
        .collect()
}

fn encode_all(
    examples: &[RawExample],
    vocab: &corpus::Vocab,
    labels: &LabelSet,
    max_len: usize,
) -> Vec<EncodedExample> {
    examples
        .iter()
        .map(|e| corpus::encode(e, vocab, labels, max_len).unwrap())
        .collect()
}

fn fixture_model_config(
    classes: usize,
    vocab: usize,
    mode: TrainMode,
    adapters: bool,
    vatt: bool,
    bottleneck: usize,
) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden: 32,
        heads: 2,
        ffn_dim: 64,
        vocab_size: vocab,
        max_positions: 24,
        num_classes: classes,
        adapter_enabled: adapters,
        adapter_bottleneck: bottleneck,
        vatt_enabled: vatt,
        dropout_hidden: 0.0,
        dropout_cls: 0.0,
        mode,
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient fidelity
// ---------------------------------------------------------------------------

#[test]
fn acceptance_01_gradient_fidelity() {
    let start = Instant::now();
    let config = toy_config();
    let mut model: Model<f64> = init_model(&config, 17).unwrap();
    // Check at a generic parameter point. At the 0.02-sigma init, attention
    // is near-uniform and the query/key gradients sit at ~1e-7, where the
    // finite-difference quotient loses to its own truncation error.
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    for p in model.params_mut() {
        for v in p.data.iter_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }

    // One fixed example with a padded tail, gold class 3.
    let ids: Vec<usize> = vec![2, 11, 37, 54, 9, 71, 23, 88, 0, 0];
    let mask: Vec<u8> = vec![1, 1, 1, 1, 1, 1, 1, 1, 0, 0];
    let gold = 3usize;

    let mut worst = 0.0f64;
    let mut worst_tensor = String::new();
    for param in model.params() {
        let check_at = |h: f64| -> f64 {
            let name = param.name.clone();
            let model_ref = &model;
            let ids_ref = &ids;
            let mask_ref = &mask;
            grad_check(
                move |tape, probe| {
                    let mut sess = ForwardSession::new(tape, None, Phase::Eval);
                    sess.preload(&name, probe);
                    let out = model_ref
                        .forward_example(&mut sess, ids_ref, mask_ref)
                        .map_err(|e| match e {
                            dialectid::encoder::EncoderError::Numerics(n) => n,
                            other => NumericsError::InvalidArgument {
                                op: "forward",
                                detail: other.to_string(),
                            },
                        })?;
                    sess.tape.cross_entropy(out.logits, &[gold])
                },
                &param.data,
                &param.shape,
                h,
                &CoordSelection::Random {
                    count: 20,
                    seed: dialectid::encoder::stable_hash64(&param.name),
                },
            )
            .unwrap()
        };
        // Two step widths: h=1e-5 is the accurate choice for curved
        // directions; the attention key bias is a softmax-null direction
        // (its exact gradient is zero) whose quotient at small h is pure
        // f64 roundoff against the 1e-8 denominator floor, and the larger
        // width settles it. A wrong backward fails at every width.
        let err = check_at(1e-5).min(check_at(1e-3));
        if err > worst {
            worst = err;
            worst_tensor = param.name.clone();
        }
        assert!(
            err < 1e-4,
            "tensor {} failed grad check: relative error {}",
            param.name,
            err
        );
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 60,
        "grad check took {:?}, budget is 60 s",
        elapsed
    );
    println!(
        "ACCEPTANCE 1 (gradient fidelity): PASS (worst rel err {:.2e} at {}, {:.1?})",
        worst, worst_tensor, elapsed
    );
}

// ---------------------------------------------------------------------------
// 2. Adapter near-identity at initialization
// ---------------------------------------------------------------------------

#[test]
fn acceptance_02_adapter_near_identity() {
    let with_adapters = toy_config();
    let mut without_adapters = toy_config();
    without_adapters.adapter_enabled = false;

    let a: Model<f64> = init_model(&with_adapters, 23).unwrap();
    let b: Model<f64> = init_model(&without_adapters, 23).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..100 {
        let real = rng.gen_range(3..=12);
        let padded = real + rng.gen_range(0..3);
        let mut ids: Vec<usize> = (0..real).map(|_| rng.gen_range(4..100)).collect();
        ids.resize(padded, 0);
        let mut mask = vec![1u8; real];
        mask.resize(padded, 0);

        let logits = |model: &Model<f64>| -> Vec<u64> {
            let mut tape: Tape<f64> = Tape::new();
            let mut sess = ForwardSession::new(&mut tape, None, Phase::Eval);
            let out = model.forward_example(&mut sess, &ids, &mask).unwrap();
            tape.value(out.logits).iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(logits(&a), logits(&b), "trial {trial} differs bitwise");
    }
    println!("ACCEPTANCE 2 (adapter near-identity): PASS (100 inputs bitwise identical)");
}

// ---------------------------------------------------------------------------
// 3. Freezing contract
// ---------------------------------------------------------------------------

fn frozen_digest(model: &Model<f32>, frozen: impl Fn(&str) -> bool) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for p in model.params() {
        if frozen(&p.name) {
            hasher.update(p.name.as_bytes());
            for v in &p.data {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    hasher.finalize().into()
}

#[test]
fn acceptance_03_freezing_contract() {
    let raw = make_corpus(64, 4, 0, 6, 0.0, 42);
    let labels = corpus::build_label_set(&raw);
    let vocab = corpus::build_vocab(&raw, 256).unwrap();
    let encoded = encode_all(&raw, &vocab, &labels, 16);

    let mc = fixture_model_config(4, vocab.len(), TrainMode::Adapter, true, true, 8);
    let model: Model<f32> = init_model(&mc, 31).unwrap();
    let mask: BTreeSet<String> = trainable_mask(&model, TrainMode::Adapter).unwrap();
    let before = frozen_digest(&model, |n| !mask.contains(n));
    let trainable_before: Vec<Vec<f32>> = model
        .params()
        .iter()
        .filter(|p| mask.contains(&p.name))
        .map(|p| p.data.clone())
        .collect();

    let tc = TrainConfig {
        batch_size: 8,
        eval_every: 100,
        lr_rest: 3e-3,
        max_steps: Some(200),
        seed: 31,
        ..TrainConfig::default()
    };
    // The last optimizer state belongs to the final model, not the restored
    // best; compare against the final weights by training with dev = train
    // and reading the returned model only for trainables.
    let outcome = training::train(model, &encoded, &encoded, &tc).unwrap();

    let after = frozen_digest(&outcome.model, |n| !mask.contains(n));
    assert_eq!(before, after, "frozen tensors changed during adapter training");

    let trainable_after: Vec<Vec<f32>> = outcome
        .model
        .params()
        .iter()
        .filter(|p| mask.contains(&p.name))
        .map(|p| p.data.clone())
        .collect();
    let changed = trainable_before
        .iter()
        .zip(&trainable_after)
        .any(|(a, b)| a != b);
    assert!(changed, "no trainable tensor moved in 200 steps");
    println!("ACCEPTANCE 3 (freezing contract): PASS (sha256 of frozen set unchanged after 200 steps)");
}

// ---------------------------------------------------------------------------
// 4. Vertical attention laws
// ---------------------------------------------------------------------------

#[test]
fn acceptance_04_vatt_laws() {
    use dialectid::encoder::{Param, ParamKind};
    use dialectid::heads::{vertical_attention, VAttParams};

    let param = |name: &str, shape: &[usize], data: Vec<f64>| Param {
        name: name.into(),
        shape: shape.to_vec(),
        data,
        kind: ParamKind::VAtt,
        decay: true,
    };

    // 1,000 random instances: alpha is always a distribution.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..1000 {
        let d = *[2usize, 4, 8].iter().nth(trial % 3).unwrap();
        let levels = 1 + trial % 4;
        let mut rand_vec = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()
        };
        let params = VAttParams {
            level_embeddings: (0..levels)
                .map(|n| param(&format!("v.level{n}"), &[1, d], rand_vec(d)))
                .collect(),
            wq: param("v.wq", &[d, d], rand_vec(d * d)),
            wk: param("v.wk", &[d, d], rand_vec(d * d)),
            wv: (0..levels)
                .map(|n| param(&format!("v.wv{n}"), &[1 * d, d], rand_vec(d * d)))
                .collect(),
        };
        let mut tape: Tape<f64> = Tape::new();
        let mut sess = ForwardSession::new(&mut tape, None, Phase::Eval);
        let z: Vec<_> = (0..levels)
            .map(|_| {
                let data = (0..d).map(|_| rand::Rng::gen_range(&mut rng, -3.0..3.0)).collect();
                sess.tape.input(data, &[1, d]).unwrap()
            })
            .collect();
        let (_, alpha) = vertical_attention(&mut sess, &params, &z).unwrap();
        let a = tape.value(alpha);
        assert!(a.iter().all(|&v| v > 0.0), "trial {trial}: {:?}", a);
        let sum: f64 = a.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6, "trial {trial}: sum {sum}");
    }

    // L = 1 reduces to the single value projection.
    let mut tape: Tape<f64> = Tape::new();
    let mut sess = ForwardSession::new(&mut tape, None, Phase::Eval);
    let wv = vec![0.5, 1.0, -0.25, 0.75];
    let params = VAttParams {
        level_embeddings: vec![param("v.level0", &[1, 2], vec![0.3, -0.9])],
        wq: param("v.wq", &[2, 2], vec![1.0, 0.0, 0.0, 1.0]),
        wk: param("v.wk", &[2, 2], vec![1.0, 0.0, 0.0, 1.0]),
        wv: vec![param("v.wv0", &[2, 2], wv.clone())],
    };
    let z0 = sess.tape.input(vec![2.0, -1.0], &[1, 2]).unwrap();
    let (pooled, alpha) = vertical_attention(&mut sess, &params, &[z0]).unwrap();
    assert_eq!(tape.value(alpha), &[1.0]);
    let expected = [2.0 * wv[0] - 1.0 * wv[2], 2.0 * wv[1] - 1.0 * wv[3]];
    for (got, want) in tape.value(pooled).iter().zip(expected) {
        assert!((got - want).abs() < 1e-12);
    }

    // Identical keys give uniform alpha regardless of content.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let d = 4;
        let levels = 3;
        let k: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut rand_vec = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
        };
        let params = VAttParams {
            level_embeddings: (0..levels)
                .map(|n| param(&format!("v.level{n}"), &[1, d], k.clone()))
                .collect(),
            wq: param("v.wq", &[d, d], rand_vec(d * d)),
            wk: param("v.wk", &[d, d], rand_vec(d * d)),
            wv: (0..levels)
                .map(|n| param(&format!("v.wv{n}"), &[d, d], rand_vec(d * d)))
                .collect(),
        };
        let mut tape: Tape<f64> = Tape::new();
        let mut sess = ForwardSession::new(&mut tape, None, Phase::Eval);
        let z: Vec<_> = (0..levels)
            .map(|_| {
                let data = (0..d).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
                sess.tape.input(data, &[1, d]).unwrap()
            })
            .collect();
        let (_, alpha) = vertical_attention(&mut sess, &params, &z).unwrap();
        for &a in tape.value(alpha) {
            assert!((a - 1.0 / levels as f64).abs() < 1e-12);
        }
    }
    println!("ACCEPTANCE 4 (vertical attention laws): PASS (1000 random inputs + degenerate laws)");
}

// ---------------------------------------------------------------------------
// 5. Schedule oracle
// ---------------------------------------------------------------------------

#[test]
fn acceptance_05_schedule_oracle() {
    let config = TrainConfig::default();
    assert_eq!(config.warmup_steps, 250);
    assert_eq!(config.decay_quantum, 10);
    assert_eq!(config.lr_floor_ratio, 0.01);

    assert_eq!(lr_multiplier(125, &config).unwrap(), 0.5);
    assert_eq!(lr_multiplier(250, &config).unwrap(), 1.0);
    assert_eq!(lr_multiplier(1000, &config).unwrap(), 0.5);
    assert_eq!(lr_multiplier(1004, &config).unwrap(), 0.5);
    assert_eq!(lr_multiplier(1_000_000_000, &config).unwrap(), 0.01);
    println!("ACCEPTANCE 5 (schedule oracle): PASS (warmup/quantized decay/floor table exact)");
}

// ---------------------------------------------------------------------------
// 6. Early stopping oracle
// ---------------------------------------------------------------------------

#[test]
fn acceptance_06_early_stopping_oracle() {
    // Strictly improving never halts.
    let mut state = EarlyStopState::new(10);
    for i in 1..=200 {
        assert_eq!(
            early_stop_update(&mut state, i as f64 / 1000.0),
            StopDecision::Continue { improved: true }
        );
    }

    // A best of 0.5 followed by ten values <= 0.5 halts exactly on the
    // tenth, with the best score preserved for restoration.
    let mut state = EarlyStopState::new(10);
    early_stop_update(&mut state, 0.5);
    let plateau = [0.4, 0.5, 0.3, 0.5, 0.49, 0.2, 0.5, 0.45, 0.1];
    for (i, &f1) in plateau.iter().enumerate() {
        assert_eq!(
            early_stop_update(&mut state, f1),
            StopDecision::Continue { improved: false },
            "halted early at non-improvement {}",
            i + 1
        );
    }
    assert_eq!(early_stop_update(&mut state, 0.5), StopDecision::Halt);
    assert_eq!(state.best_f1(), Some(0.5));

    // An improvement inside the plateau resets the counter.
    let mut state = EarlyStopState::new(3);
    early_stop_update(&mut state, 0.5);
    early_stop_update(&mut state, 0.4);
    early_stop_update(&mut state, 0.4);
    assert_eq!(
        early_stop_update(&mut state, 0.6),
        StopDecision::Continue { improved: true }
    );
    early_stop_update(&mut state, 0.1);
    early_stop_update(&mut state, 0.1);
    assert_eq!(early_stop_update(&mut state, 0.1), StopDecision::Halt);
    println!("ACCEPTANCE 6 (early stopping oracle): PASS (halts exactly at patience 10, best retained)");
}

// ---------------------------------------------------------------------------
// 7. Metric oracles
// ---------------------------------------------------------------------------

/// Brute-force per-example oracle: count tp/fp/fn per class directly.
fn oracle_metrics(gold: &[usize], pred: &[usize], classes: usize) -> (f64, f64, Vec<f64>) {
    let mut tp = vec![0u64; classes];
    let mut fp = vec![0u64; classes];
    let mut fn_ = vec![0u64; classes];
    let mut correct = 0u64;
    for (&g, &p) in gold.iter().zip(pred) {
        if g == p {
            correct += 1;
            tp[g] += 1;
        } else {
            fp[p] += 1;
            fn_[g] += 1;
        }
    }
    let accuracy = correct as f64 / gold.len() as f64;
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let precision = if tp[c] + fp[c] > 0 {
            tp[c] as f64 / (tp[c] + fp[c]) as f64
        } else {
            0.0
        };
        let recall = if tp[c] + fn_[c] > 0 {
            tp[c] as f64 / (tp[c] + fn_[c]) as f64
        } else {
            0.0
        };
        per_class.push(if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        });
    }
    let macro_f1 = per_class.iter().sum::<f64>() / classes as f64;
    (accuracy, macro_f1, per_class)
}

#[test]
fn acceptance_07_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..1000 {
        let classes = rng.gen_range(2..=21);
        let n = rng.gen_range(1..=200);
        let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let report = eval::report(&gold, &pred, classes).unwrap();
        let (acc, macro_f1, per_class) = oracle_metrics(&gold, &pred, classes);
        assert_eq!(report.accuracy, acc, "trial {trial} accuracy");
        assert_eq!(report.macro_f1, macro_f1, "trial {trial} macro f1");
        assert_eq!(report.per_class_f1, per_class, "trial {trial} per-class");
    }
    println!("ACCEPTANCE 7 (metric oracles): PASS (1000 random instances, exact agreement)");
}

// ---------------------------------------------------------------------------
// 8. Ensemble laws
// ---------------------------------------------------------------------------

#[test]
fn acceptance_08_ensemble_laws() {
    use rand::seq::SliceRandom;
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    // Order invariance within 1e-12 on random member sets.
    for _ in 0..200 {
        let members = rng.gen_range(2..=6);
        let classes = rng.gen_range(2..=8);
        let dists: Vec<ProbDist> = (0..members)
            .map(|_| {
                let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(1e-4..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                ProbDist::new(raw.into_iter().map(|v| v / sum).collect()).unwrap()
            })
            .collect();
        let reference = eval::ensemble(&dists).unwrap();
        let mut shuffled = dists.clone();
        shuffled.shuffle(&mut rng);
        let permuted = eval::ensemble(&shuffled).unwrap();
        for (a, b) in reference.probs().iter().zip(permuted.probs()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    // Single-member identity.
    let d = ProbDist::new(vec![0.2, 0.5, 0.3]).unwrap();
    let out = eval::ensemble(std::slice::from_ref(&d)).unwrap();
    for (a, b) in out.probs().iter().zip(d.probs()) {
        assert!((a - b).abs() <= 1e-12);
    }

    // Hand-computed product.
    let combined = eval::ensemble(&[
        ProbDist::new(vec![0.6, 0.4]).unwrap(),
        ProbDist::new(vec![0.3, 0.7]).unwrap(),
    ])
    .unwrap();
    assert!((combined.probs()[0] - 0.3913).abs() < 1e-4, "{:?}", combined);
    assert!((combined.probs()[1] - 0.6087).abs() < 1e-4, "{:?}", combined);
    println!("ACCEPTANCE 8 (ensemble laws): PASS (order invariance, identity, hand product)");
}

// ---------------------------------------------------------------------------
// 9. Erlang fit
// ---------------------------------------------------------------------------

#[test]
fn acceptance_09_erlang_fit() {
    // Exact method-of-moments arithmetic.
    let fit = eval::fit_erlang(&[2.0, 4.0, 4.0, 6.0]).unwrap();
    assert_eq!(fit.lambda, 2.0);
    assert_eq!(fit.k, 8);
    assert_eq!(fit.median, 4.0);

    // Monte Carlo recovery of Erlang(k=2, lambda=1): the sum of two unit
    // exponentials, 10^4 seeded draws.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let samples: Vec<f64> = (0..10_000)
        .map(|_| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            -u1.ln() - u2.ln()
        })
        .collect();
    let fit = eval::fit_erlang(&samples).unwrap();
    assert!(
        (0.9..=1.1).contains(&fit.lambda),
        "lambda estimate {} outside 10%",
        fit.lambda
    );
    assert_eq!(fit.k, 2, "shape estimate {} (gamma {})", fit.k, fit.gamma_shape);
    println!(
        "ACCEPTANCE 9 (erlang fit): PASS (lambda {:.4}, k {}, median oracle exact)",
        fit.lambda, fit.k
    );
}

// ---------------------------------------------------------------------------
// 10. End-to-end overfit, all four member architectures
// ---------------------------------------------------------------------------

#[test]
fn acceptance_10_end_to_end_overfit() {
    let start = Instant::now();
    let raw = make_corpus(64, 4, 0, 6, 0.0, 42);
    let labels = corpus::build_label_set(&raw);
    assert_eq!(labels.len(), 4);
    let vocab = corpus::build_vocab(&raw, 256).unwrap();
    let encoded = encode_all(&raw, &vocab, &labels, 16);

    for (name, mode, adapters, vatt) in [
        ("fine_tune", TrainMode::FineTune, false, false),
        ("fine_tune+vatt", TrainMode::FineTune, false, true),
        ("adapter", TrainMode::Adapter, true, false),
        ("adapter+vatt", TrainMode::Adapter, true, true),
    ] {
        let mc = fixture_model_config(4, vocab.len(), mode, adapters, vatt, 8);
        let model: Model<f32> = init_model(&mc, 7).unwrap();
        let tc = TrainConfig {
            eval_every: 50,
            lr_rest: 3e-3,
            max_steps: Some(2000),
            seed: 7,
            ..TrainConfig::default()
        };
        let outcome = training::train(model, &encoded, &encoded, &tc).unwrap();
        let reached = outcome
            .log
            .records
            .iter()
            .find(|r| r.dev_accuracy == 1.0)
            .map(|r| r.step);
        assert_eq!(
            outcome.best_report.accuracy, 1.0,
            "{name}: best train accuracy {} after {} evals",
            outcome.best_report.accuracy,
            outcome.log.records.len()
        );
        let step = reached.unwrap();
        assert!(step <= 2000, "{name}: reached 100% only at step {step}");
        println!("  {name}: 100% train accuracy at step {step}");
    }
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 600,
        "overfit suite took {:?}, budget 10 min",
        elapsed
    );
    println!(
        "ACCEPTANCE 10 (end-to-end overfit): PASS (4 architectures, {:.1?} total)",
        elapsed
    );
}

// ---------------------------------------------------------------------------
// 11. Ensemble improvement property
// ---------------------------------------------------------------------------

#[test]
fn acceptance_11_ensemble_improvement() {
    let start = Instant::now();
    let mut beats_mean = 0;
    for seed in [11u64, 12, 13, 14, 15] {
        let train_raw = make_corpus(192, 4, 6, 6, 0.10, 1000 + seed);
        let dev_raw = make_corpus(96, 4, 6, 6, 0.0, 2000 + seed);
        let labels = corpus::build_label_set(&train_raw);
        let vocab = corpus::build_vocab(&train_raw, 512).unwrap();
        let train_enc = encode_all(&train_raw, &vocab, &labels, 16);
        let dev_enc = encode_all(&dev_raw, &vocab, &labels, 16);

        // The reference four-member recipe: plain fine-tuning,
        // adapters + vertical attention, fine-tuning + vertical attention,
        // and fine-tuning under the linear LR schedule.
        let variants: [(TrainMode, bool, bool, Schedule); 4] = [
            (TrainMode::FineTune, false, false, Schedule::InvSqrt),
            (TrainMode::Adapter, true, true, Schedule::InvSqrt),
            (TrainMode::FineTune, false, true, Schedule::InvSqrt),
            (TrainMode::FineTune, false, false, Schedule::Linear),
        ];

        let mut member_f1 = Vec::new();
        let mut member_dists: Vec<Vec<ProbDist>> = Vec::new();
        for (mode, adapters, vatt, schedule) in variants {
            let mc = fixture_model_config(4, vocab.len(), mode, adapters, vatt, 16);
            let model: Model<f32> = init_model(&mc, seed).unwrap();
            let tc = TrainConfig {
                eval_every: 25,
                patience: 12,
                warmup_steps: 50,
                lr_rest: 3e-3,
                schedule,
                max_steps: Some(1000),
                seed,
                ..TrainConfig::default()
            };
            let outcome = training::train(model, &train_enc, &dev_enc, &tc).unwrap();
            member_f1.push(outcome.best_report.macro_f1);
            member_dists.push(
                training::predict_probs(&outcome.model, &dev_enc)
                    .unwrap()
                    .into_iter()
                    .map(|(d, _)| d)
                    .collect(),
            );
        }

        let gold: Vec<usize> = dev_enc.iter().map(|e| e.label_id).collect();
        let combined: Vec<usize> = (0..dev_enc.len())
            .map(|i| {
                let dists: Vec<ProbDist> = member_dists.iter().map(|m| m[i].clone()).collect();
                eval::ensemble(&dists).unwrap().argmax()
            })
            .collect();
        let ensemble_f1 = eval::report(&gold, &combined, 4).unwrap().macro_f1;
        let max_f1 = member_f1.iter().cloned().fold(f64::MIN, f64::max);
        let mean_f1 = member_f1.iter().sum::<f64>() / member_f1.len() as f64;

        println!(
            "  seed {seed}: members {:?}, ensemble {:.4}",
            member_f1
                .iter()
                .map(|f| (f * 1e4).round() / 1e4)
                .collect::<Vec<_>>(),
            ensemble_f1
        );
        assert!(
            ensemble_f1 >= max_f1 - 0.005,
            "seed {seed}: ensemble {ensemble_f1:.4} below max member {max_f1:.4} - 0.5pp"
        );
        if ensemble_f1 > mean_f1 {
            beats_mean += 1;
        }
    }
    assert!(
        beats_mean >= 4,
        "ensemble beat the member mean in only {beats_mean}/5 seeds"
    );
    println!(
        "ACCEPTANCE 11 (ensemble improvement): PASS (5 seeds, beats mean in {}/5, {:.1?} total)",
        beats_mean,
        start.elapsed()
    );
}
