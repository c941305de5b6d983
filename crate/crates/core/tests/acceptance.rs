//! Acceptance suite. Every test prints one `PASS`/`FAIL`/`SKIP` line for its
//! criterion, then asserts. Tolerances are the constants below.
//!
//! Run with `cargo test -p dre-core --test acceptance -- --nocapture` to see
//! the lines.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::{Arc, LazyLock, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use dre_core::autograd::{Graph, ParamGrads, ParamId, ParamStore};
use dre_core::corpus::{canonical_relation, default_split, load_dialogre, Corpus, RelationSplit, INVENTORY};
use dre_core::evaluate::{evaluate_splits, micro_f1_topk, EvalReport, Golds};
use dre_core::inference::{predict_corpus, InferenceMode, RankedPrediction, RelationScore};
use dre_core::model::{KeySource, Model};
use dre_core::reformulate::build_training_set;
use dre_core::relation_head::{binary_loss_var, RelationHead};
use dre_core::synthetic::{generate_corpus, test_seed, SynthSpec};
use dre_core::optim::Adam;
use dre_core::trainer::{fit, train, train_multiclass_baseline, train_step, LossBundle, StepOptions, TrainConfig};
use dre_core::trigger_head::{decode_span, trigger_loss_var, Span, SpanLogits};
use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SYNTH_SEED: u64 = 7;
const ORDERING_SEEDS: [u64; 3] = [7, 8, 9];
const UNSEEN_TOP2_MIN: f64 = 0.50;
const SEEN_TOP1_MIN: f64 = 0.90;
const RUNTIME_MAX: Duration = Duration::from_secs(300);
const ORDERING_SLACK: f64 = 0.02;
const F1_TOL: f64 = 1e-12;
const ATTN_SUM_TOL: f64 = 1e-5;
const ATTN_EXACT_TOL: f64 = 1e-6;
const FD_STEP: f64 = 1e-4;
const FD_REL_TOL: f64 = 1e-3;
/// Denominator floor of the relative error, for gradients that are zero.
const FD_FLOOR: f64 = 1e-6;
const FD_PROBES: usize = 20;
const OVERFIT_LOSS: f64 = 0.05;
const OVERFIT_STEPS: usize = 500;

/// Held by every test so the timed training run has the CPU to itself.
static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn line(pass: bool, id: &str, text: String) {
    println!("{}  {id:>2}  {text}", if pass { "PASS" } else { "FAIL" });
}

struct SynthRun {
    split: RelationSplit,
    test: Corpus,
    model: Model,
    train_time: Duration,
}

impl SynthRun {
    fn evaluate(&self, mode: InferenceMode) -> EvalReport {
        let records = predict_corpus(&self.model, &self.test, &self.split.all(), mode, 2).unwrap();
        let ranked: Vec<RankedPrediction> = records.iter().map(|r| r.ranked()).collect();
        let golds: Golds = records
            .iter()
            .map(|r| (r.query_id.clone(), r.gold_relations.iter().cloned().collect()))
            .collect();
        evaluate_splits(&ranked, &golds, &self.split).unwrap()
    }
}

/// Trained synthetic models by seed.
static RUNS: LazyLock<Mutex<BTreeMap<u64, Arc<SynthRun>>>> = LazyLock::new(|| Mutex::new(BTreeMap::new()));

fn synth_run(seed: u64) -> Arc<SynthRun> {
    let mut runs = RUNS.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(r) = runs.get(&seed) {
        return r.clone();
    }
    let spec = SynthSpec::acceptance(seed);
    let train_set = generate_corpus(&spec).unwrap();
    let test = generate_corpus(&SynthSpec {
        seed: test_seed(seed),
        ..spec
    })
    .unwrap()
    .corpus;
    let config = TrainConfig {
        seed,
        epochs: 10,
        negatives_k: 3,
        loss_weight_lambda: 1.0,
        ..TrainConfig::tiny()
    };
    let start = Instant::now();
    let run = train(&train_set.corpus, &train_set.split, &config, None).unwrap();
    let r = Arc::new(SynthRun {
        split: train_set.split,
        test,
        model: run.model,
        train_time: start.elapsed(),
    });
    runs.insert(seed, r.clone());
    r
}

#[test]
fn c01_full_scale_reproduction_is_optional() {
    let _serial = serial();
    let dirs = (std::env::var_os("DRE_PRETRAINED_DIR"), std::env::var_os("DRE_DIALOGRE_DIR"));
    let (Some(model_dir), Some(data_dir)) = dirs else {
        println!(
            "SKIP   1  full-scale DialogRE run with a pretrained encoder: not desk-reproducible, non-gating \
             (set DRE_PRETRAINED_DIR and DRE_DIALOGRE_DIR to run it)"
        );
        return;
    };
    let data_dir = PathBuf::from(data_dir);
    let split = default_split();
    let train_corpus = load_dialogre(&data_dir.join("train.json")).unwrap();
    let test_corpus = load_dialogre(&data_dir.join("test.json")).unwrap();
    let run = train(&train_corpus, &split, &TrainConfig::pretrained(model_dir), None).unwrap();
    let r = SynthRun {
        split,
        test: test_corpus,
        model: run.model,
        train_time: Duration::ZERO,
    }
    .evaluate(InferenceMode::GeneralEmbedding);
    let pass = (r.seen.top1 * 100.0 - 65.6).abs() <= 3.0 && (r.unseen.top1 * 100.0 - 32.5).abs() <= 5.0;
    // reported only; this criterion never fails the suite
    line(
        pass,
        "1",
        format!(
            "full-scale (non-gating): seen top-1 {:.1}, unseen top-1 {:.1}",
            100.0 * r.seen.top1,
            100.0 * r.unseen.top1
        ),
    );
}

#[test]
fn c02_synthetic_zero_shot_transfer() {
    let _serial = serial();
    let run = synth_run(SYNTH_SEED);
    let eval_start = Instant::now();
    let report = run.evaluate(InferenceMode::GeneralEmbedding);
    let elapsed = run.train_time + eval_start.elapsed();
    let spec = SynthSpec::acceptance(SYNTH_SEED);
    let train_corpus = generate_corpus(&spec).unwrap();
    let baseline = train_multiclass_baseline(
        &train_corpus.corpus,
        &train_corpus.split,
        &TrainConfig {
            seed: SYNTH_SEED,
            ..TrainConfig::tiny()
        },
        None,
    )
    .unwrap();
    let base = SynthRun {
        split: run.split.clone(),
        test: run.test.clone(),
        model: baseline.model,
        train_time: Duration::ZERO,
    }
    .evaluate(InferenceMode::GeneralEmbedding);
    let ok_top2 = report.unseen.top2 >= UNSEEN_TOP2_MIN;
    let ok_top1 = base.unseen.top1 == 0.0 && report.unseen.top1 > base.unseen.top1;
    let ok_seen = report.seen.top1 >= SEEN_TOP1_MIN;
    let ok_time = elapsed <= RUNTIME_MAX;
    let pass = ok_top2 && ok_top1 && ok_seen && ok_time;
    line(
        pass,
        "2",
        format!(
            "synthetic zero-shot (seed {SYNTH_SEED}, general embedding): unseen top-2 {:.3} (min {UNSEEN_TOP2_MIN}), \
             unseen top-1 {:.3} vs baseline {:.3}, seen top-1 {:.3} (min {SEEN_TOP1_MIN}), train+eval {:.0}s (max {}s)",
            report.unseen.top2,
            report.unseen.top1,
            base.unseen.top1,
            report.seen.top1,
            elapsed.as_secs_f64(),
            RUNTIME_MAX.as_secs()
        ),
    );
    assert!(pass);
}

#[test]
fn c03_gold_trigger_bounds_predicted_trigger() {
    let _serial = serial();
    let mut worst = f64::INFINITY;
    let mut parts = Vec::new();
    for seed in ORDERING_SEEDS {
        let run = synth_run(seed);
        let gold = run.evaluate(InferenceMode::GoldTrigger).seen.top1;
        let pred = run.evaluate(InferenceMode::PredictedTrigger).seen.top1;
        worst = worst.min(gold - pred);
        parts.push(format!("seed {seed}: gold {gold:.3} / predicted {pred:.3}"));
    }
    let pass = worst >= -ORDERING_SLACK;
    line(
        pass,
        "3",
        format!(
            "mode ordering, seen top-1 ({}); worst gold - predicted {worst:+.3} (min -{ORDERING_SLACK})",
            parts.join(", ")
        ),
    );
    assert!(pass);
}

/// Pools TP/FP/FN by visiting every (query, relation) cell.
fn brute_force_f1(rankings: &[Vec<String>], golds: &[BTreeSet<String>], universe: &[String], k: usize) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (ranking, gold) in rankings.iter().zip(golds) {
        for r in universe {
            let predicted = ranking.iter().take(k).any(|x| x == r);
            let actual = gold.contains(r);
            match (predicted, actual) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if tp + fp + fn_ == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

fn ranked(id: usize, order: &[String]) -> RankedPrediction {
    RankedPrediction {
        query_id: id.to_string(),
        mode: InferenceMode::GeneralEmbedding,
        k: 1,
        candidates: order
            .iter()
            .enumerate()
            .map(|(i, r)| RelationScore {
                relation_id: r.clone(),
                probability: 1.0 / (i + 2) as f64,
                span: None,
                span_text: None,
            })
            .collect(),
    }
}

#[test]
fn c04_micro_f1_matches_brute_force() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut max_diff: f64 = 0.0;
    for _ in 0..1000 {
        let n_rel = rng.random_range(2..=12);
        let universe: Vec<String> = (0..n_rel).map(|i| format!("per:r{i}")).collect();
        let n_queries = rng.random_range(1..=20);
        let k = rng.random_range(1..=3.min(n_rel));
        let mut rankings = Vec::new();
        let mut gold_sets = Vec::new();
        for _ in 0..n_queries {
            let mut order = universe.clone();
            order.shuffle(&mut rng);
            let n_gold = rng.random_range(1..=3.min(n_rel));
            let gold: BTreeSet<String> = universe.choose_multiple(&mut rng, n_gold).cloned().collect();
            rankings.push(order);
            gold_sets.push(gold);
        }
        let preds: Vec<RankedPrediction> = rankings.iter().enumerate().map(|(i, o)| ranked(i, o)).collect();
        let golds: Golds = gold_sets.iter().enumerate().map(|(i, g)| (i.to_string(), g.clone())).collect();
        let got = micro_f1_topk(&preds, &golds, k).unwrap();
        let want = brute_force_f1(&rankings, &gold_sets, &universe, k);
        max_diff = max_diff.max((got - want).abs());
    }
    // single-gold queries, every top-1 correct, k = 2
    let universe: Vec<String> = ["per:a", "per:b", "per:c"].iter().map(|s| s.to_string()).collect();
    let preds: Vec<RankedPrediction> = (0..5)
        .map(|i| {
            let mut o = universe.clone();
            o.rotate_left(i % 3);
            ranked(i, &o)
        })
        .collect();
    let golds: Golds = preds
        .iter()
        .map(|p| (p.query_id.clone(), BTreeSet::from([p.candidates[0].relation_id.clone()])))
        .collect();
    let forced = micro_f1_topk(&preds, &golds, 2).unwrap();
    let pass = max_diff <= F1_TOL && forced == 2.0 / 3.0;
    line(
        pass,
        "4",
        format!("micro-F1 vs brute force on 1000 fixtures: max |diff| {max_diff:.1e} (tol {F1_TOL:.0e}); forced top-2 case {forced:.12}"),
    );
    assert!(pass);
}

/// Every admissible span scored, ties resolved by the lexicographically
/// smallest (start, end), with (0, 0) first.
fn exhaustive_decode(start: &[f64], end: &[f64], mask: &[bool], max_len: usize) -> Span {
    let mut candidates = vec![(0usize, 0usize)];
    for i in 1..start.len() {
        for j in i..start.len() {
            if j - i < max_len && (i..=j).all(|p| mask[p]) {
                candidates.push((i, j));
            }
        }
    }
    let score = |&(i, j): &(usize, usize)| start[i] + end[j];
    let best = candidates.iter().map(score).fold(f64::NEG_INFINITY, f64::max);
    let (i, j) = *candidates.iter().find(|c| score(c) == best).unwrap();
    Span { start: i, end: j }
}

#[test]
fn c05_decode_span_matches_enumeration() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut ties = 0;
    for trial in 0..1000 {
        let n = rng.random_range(5..=64);
        let max_len = rng.random_range(1..=10);
        let coarse = trial % 2 == 0;
        let mut draw = || {
            if coarse {
                rng.random_range(-2..=2) as f64
            } else {
                rng.random_range(-5.0..5.0)
            }
        };
        let start: Vec<f64> = (0..n).map(|_| draw()).collect();
        let end: Vec<f64> = (0..n).map(|_| draw()).collect();
        let dialogue_start = rng.random_range(1..n);
        let mask: Vec<bool> = (0..n).map(|i| i == 0 || i >= dialogue_start).collect();
        let want = exhaustive_decode(&start, &end, &mask, max_len);
        let got = decode_span(
            &SpanLogits {
                start: start.clone(),
                end: end.clone(),
                mask: mask.clone(),
            },
            max_len,
        );
        if coarse {
            ties += 1;
        }
        if got != want {
            mismatches += 1;
        }
    }
    let pass = mismatches == 0;
    line(
        pass,
        "5",
        format!("span decode vs exhaustive enumeration: {mismatches} mismatches in 1000 ({ties} tie-heavy integer cases)"),
    );
    assert!(pass);
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

#[test]
fn c06_attention_invariants() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut sum_err, mut ident_err, mut perm_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for trial in 0..200 {
        let hidden = [4, 8, 16, 32][trial % 4];
        let mut store = ParamStore::new();
        let head = RelationHead::init(hidden, 0.1, 0.5, &mut store, &mut rng).unwrap();
        let q = random_matrix(1, hidden, &mut rng);
        let n = rng.random_range(2..=12);
        let keys = random_matrix(n, hidden, &mut rng);

        let mut g = Graph::new(&store);
        let qv = g.input(q.clone());
        let kv = g.input(keys.clone());
        let w = head.attention_weights(&mut g, qv, kv).unwrap();
        sum_err = sum_err.max((g.value(w).sum() - 1.0).abs());

        let one = keys.slice(ndarray::s![0..1, ..]).to_owned();
        let ov = g.input(one.clone());
        let ctx = head.attend(&mut g, qv, ov).unwrap();
        let d = (g.value(ctx) - &one).mapv(f64::abs).fold(0.0_f64, |a, &b| a.max(b));
        ident_err = ident_err.max(d);

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permuted = keys.select(ndarray::Axis(0), &perm);
        let a = head.predict_relation(&store, &q, &keys).unwrap();
        let b = head.predict_relation(&store, &q, &permuted).unwrap();
        perm_err = perm_err.max((a - b).abs());
    }
    let pass = sum_err <= ATTN_SUM_TOL && ident_err <= ATTN_EXACT_TOL && perm_err <= ATTN_EXACT_TOL;
    line(
        pass,
        "6",
        format!(
            "attention over 200 draws: |sum - 1| {sum_err:.1e} (tol {ATTN_SUM_TOL:.0e}), single-key {ident_err:.1e}, \
             permutation {perm_err:.1e} (tol {ATTN_EXACT_TOL:.0e})"
        ),
    );
    assert!(pass);
}

/// Worst relative error of analytic against central-difference gradients
/// at the probed parameter entries.
fn gradient_check(
    store: &mut ParamStore,
    analytic: &ParamGrads,
    probes: &[(ParamId, (usize, usize))],
    loss: &dyn Fn(&ParamStore) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for &(id, (r, c)) in probes {
        let x = store.get(id)[[r, c]];
        store.get_mut(id)[[r, c]] = x + FD_STEP;
        let up = loss(store);
        store.get_mut(id)[[r, c]] = x - FD_STEP;
        let down = loss(store);
        store.get_mut(id)[[r, c]] = x;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.get(id).map_or(0.0, |g| g[[r, c]]);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
        worst = worst.max(rel);
    }
    worst
}

fn draw_probes(
    store: &ParamStore,
    eligible: &dyn Fn(&str) -> bool,
    rows_of: &dyn Fn(&str, usize) -> Vec<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<(ParamId, (usize, usize))> {
    let params: Vec<(ParamId, String, (usize, usize))> = store
        .iter()
        .filter(|(_, name, _)| eligible(name))
        .map(|(id, name, v)| (id, name.to_string(), v.dim()))
        .collect();
    (0..FD_PROBES)
        .map(|_| {
            let (id, name, (rows, cols)) = params.choose(rng).unwrap();
            let allowed = rows_of(name, *rows);
            let r = *allowed.choose(rng).unwrap();
            (*id, (r, rng.random_range(0..*cols)))
        })
        .collect()
}

#[test]
fn c07_gradient_checks() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut model, _, _, examples) = common::small_model(17);
    let ex = examples.iter().find(|e| e.target == 1 && !e.seq.trigger_tokens.is_none()).unwrap();
    let seq = ex.seq.clone();
    let used_ids: Vec<usize> = seq.ids.iter().map(|&i| i as usize).collect();
    let len = seq.len();
    let rows_of = move |name: &str, rows: usize| -> Vec<usize> {
        if name.contains("word_embeddings") {
            used_ids.clone()
        } else if name.contains("position_embeddings") {
            (0..len.min(rows)).collect()
        } else {
            (0..rows).collect()
        }
    };

    // trigger loss through encoder and trigger head
    let trigger_loss = |m: &Model| -> (f64, ParamGrads) {
        let mut g = Graph::new(&m.store);
        let f = m
            .forward_binary::<ChaCha8Rng>(&mut g, &seq, KeySource::Span(seq.trigger_tokens), None)
            .unwrap();
        let lt = trigger_loss_var(&mut g, f.start, f.end, &seq.span_mask(), seq.trigger_tokens).unwrap();
        (g.scalar(lt), g.backward(lt).into_param_grads())
    };
    let (_, grads) = trigger_loss(&model);
    let probes = draw_probes(&model.store, &|n| !n.starts_with("relation."), &rows_of, &mut rng);
    let trig_err = {
        let snapshot = model.clone();
        let mut store = model.store.clone();
        gradient_check(&mut store, &grads, &probes, &|s| {
            let mut m = snapshot.clone();
            m.store = s.clone();
            trigger_loss(&m).0
        })
    };

    // binary loss of the relation head on fixed inputs
    let hidden = 8;
    let mut hstore = ParamStore::new();
    let head = RelationHead::init(hidden, 0.1, 0.5, &mut hstore, &mut rng).unwrap();
    let q = random_matrix(1, hidden, &mut rng);
    let k = random_matrix(3, hidden, &mut rng);
    let head_loss = |s: &ParamStore| -> (f64, ParamGrads) {
        let mut g = Graph::new(s);
        let qv = g.input(q.clone());
        let kv = g.input(k.clone());
        let p = head.predict::<ChaCha8Rng>(&mut g, qv, kv, None).unwrap();
        let l = binary_loss_var(&mut g, p, 1);
        (g.scalar(l), g.backward(l).into_param_grads())
    };
    let (_, hgrads) = head_loss(&hstore);
    let hprobes = draw_probes(&hstore, &|_| true, &|_, rows| (0..rows).collect(), &mut rng);
    let head_err = gradient_check(&mut hstore, &hgrads, &hprobes, &|s| head_loss(s).0);

    // combined objective over every parameter
    let objective = |m: &Model| -> (f64, ParamGrads) {
        let mut g = Graph::new(&m.store);
        let (total, _, _) = m.binary_objective::<ChaCha8Rng>(&mut g, &seq, 1, 0.7, false, None).unwrap();
        (g.scalar(total), g.backward(total).into_param_grads())
    };
    let (_, cgrads) = objective(&model);
    let cprobes = draw_probes(&model.store, &|_| true, &rows_of, &mut rng);
    let snapshot = model.clone();
    let combined_err = gradient_check(&mut model.store, &cgrads, &cprobes, &|s| {
        let mut m = snapshot.clone();
        m.store = s.clone();
        objective(&m).0
    });

    let pass = trig_err <= FD_REL_TOL && head_err <= FD_REL_TOL && combined_err <= FD_REL_TOL;
    line(
        pass,
        "7",
        format!(
            "gradient checks, {FD_PROBES} probes each, h = {FD_STEP:.0e}: trigger loss {trig_err:.1e}, \
             binary∘predict_relation {head_err:.1e}, combined {combined_err:.1e} (tol {FD_REL_TOL:.0e})"
        ),
    );
    assert!(pass);
}

#[test]
fn c08_training_contracts() {
    let _serial = serial();
    // lambda = 0: relation head untouched by one step
    let (mut model, _, _, examples) = common::small_model(8);
    let before = model.store.clone();
    let head_names: Vec<String> = model
        .store
        .iter()
        .filter(|(_, n, _)| n.starts_with("relation."))
        .map(|(_, n, _)| n.to_string())
        .collect();
    let batch: Vec<_> = examples.iter().take(8).collect();
    let mut opt = Adam::new(1e-3);
    let opts = StepOptions {
        lambda: 0.0,
        general_key_rate: 0.5,
        rng_seed: Some((8, 0)),
    };
    train_step(&mut model, &mut opt, &batch, &opts).unwrap();
    let head_same = head_names
        .iter()
        .all(|n| before.by_name(n).unwrap().iter().zip(model.store.by_name(n).unwrap()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let encoder_moved = before.by_name("embeddings.word_embeddings.weight") != model.store.by_name("embeddings.word_embeddings.weight");

    // overfit a 16-instance fixture
    let (fresh, _, _, _) = common::small_model(8);
    let fixture: Vec<_> = examples.iter().take(16).cloned().collect();
    let config = TrainConfig {
        epochs: OVERFIT_STEPS,
        batch_size: 16,
        general_key_rate: 0.0,
        ..common::small_config(8)
    };
    let (_, steps, _) = fit(fresh, &fixture, &config, None).unwrap();
    let reached = steps.iter().position(|s| s.total < OVERFIT_LOSS);

    // same seed, same trace
    let (c, s) = common::small_synth(3, 3);
    let cfg = TrainConfig {
        epochs: 2,
        ..common::small_config(3)
    };
    let a = train(&c, &s, &cfg, None).unwrap();
    let b = train(&c, &s, &cfg, None).unwrap();
    let bits = |v: &[LossBundle]| -> Vec<[u64; 3]> {
        v.iter()
            .map(|l| [l.trigger.to_bits(), l.binary.to_bits(), l.total.to_bits()])
            .collect()
    };
    let same_trace = bits(&a.steps) == bits(&b.steps) && !a.steps.is_empty();

    // negative ratio and gold exclusion on the full acceptance corpus
    let full = generate_corpus(&SynthSpec::acceptance(SYNTH_SEED)).unwrap();
    let set = build_training_set(&full.corpus, &full.split, 3, SYNTH_SEED).unwrap();
    let ratio_ok = set.negatives() == 3 * set.positives();
    let leaked = set
        .instances
        .iter()
        .filter(|i| i.is_negative)
        .filter(|i| full.corpus.instances[i.pair].gold_set().contains(&i.relation_id))
        .count();

    let pass = head_same && encoder_moved && reached.is_some() && same_trace && ratio_ok && leaked == 0;
    line(
        pass,
        "8",
        format!(
            "training contracts: lambda=0 head bit-identical {head_same} (encoder moved {encoder_moved}); \
             overfit < {OVERFIT_LOSS} at step {} (max {OVERFIT_STEPS}); identical traces {same_trace}; \
             negatives {} = 3 x {} positives, {leaked} negatives in gold",
            reached.map_or("never".to_string(), |s| (s + 1).to_string()),
            set.negatives(),
            set.positives()
        ),
    );
    assert!(pass);
}

const REFERENCE_SEEN: [&str; 20] = [
    "per:positive_impression",
    "per:client",
    "per:origin",
    "per:works",
    "per:place_of_work",
    "per:title",
    "per:alternate_names",
    "per:acquaintance",
    "per:alumni",
    "per:friends",
    "per:girl/boyfriend",
    "per:neighbor",
    "per:roommate",
    "per:boss",
    "per:children",
    "gpe:residents_of_place",
    "per:place_of_birth",
    "per:visited_place",
    "per:employee/member_of",
    "org:students",
];

const REFERENCE_UNSEEN: [&str; 16] = [
    "per:subordinate",
    "gpe:visitors_of_place",
    "per:place_of_residence",
    "per:schools_attended",
    "per:parents",
    "gpe:births_in_place",
    "org:employees/members",
    "per:dates",
    "per:other_family",
    "per:siblings",
    "per:spouse",
    "per:negative_impression",
    "per:age",
    "per:date_of_birth",
    "per:major",
    "per:pet",
];

const SIMILAR_REFERENCE_PAIRS: [(&str, &str); 7] = [
    ("per:positive_impression", "per:negative_impression"),
    ("per:boss", "per:subordinate"),
    ("per:children", "per:parents"),
    ("gpe:residents_of_place", "per:place_of_residence"),
    ("per:place_of_birth", "gpe:births_in_place"),
    ("per:employee_or_member_of", "org:employees_or_members"),
    ("org:students", "per:schools_attended"),
];

#[test]
fn c09_split_fidelity() {
    let _serial = serial();
    let split = default_split();
    let seen: BTreeSet<String> = REFERENCE_SEEN.iter().map(|s| s.to_string()).collect();
    let unseen: BTreeSet<String> = REFERENCE_UNSEEN.iter().map(|s| s.to_string()).collect();
    let exact = split.seen == seen && split.unseen == unseen;
    let inventory: BTreeSet<String> = INVENTORY.iter().map(|s| s.to_string()).collect();
    let covers = seen.union(&unseen).cloned().collect::<BTreeSet<_>>() == inventory;
    let straddle = SIMILAR_REFERENCE_PAIRS.iter().all(|(a, b)| {
        let (a, b) = (canonical_relation(a), canonical_relation(b));
        (split.seen.contains(a) && split.unseen.contains(b)) || (split.seen.contains(b) && split.unseen.contains(a))
    });
    let pass = exact && covers && straddle && split.seen.len() == 20 && split.unseen.len() == 16;
    line(
        pass,
        "9",
        format!(
            "default split {} seen / {} unseen, matches reference lists {exact}, covers inventory {covers}, all 7 similar pairs straddle {straddle}",
            split.seen.len(),
            split.unseen.len()
        ),
    );
    assert!(pass);
}
