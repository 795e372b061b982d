//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if any
//! criterion fails.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use llc_core::analysis::{agglomerate, inner_product_heatmap, spearman_rowwise, HeatSource, Linkage};
use llc_core::bitcode::{BitCode, Codebook};
use llc_core::data::{generate_hierarchical, LabeledDataset, Split, SyntheticSpec};
use llc_core::decode::{evaluate_classification, ClassificationEval, DecodeIndex};
use llc_core::diffcore::{DenseMatrix, Tape};
use llc_core::ood::{f1_sweep, hamming_max_probability, max_softmax_probability, ExactMissDetector, F1Score};
use llc_core::retrieval::{average_precision_corrected, average_precision_reported, RetrievalIndex};
use llc_core::train::{random_codebook, run_llc, TrainConfig, TrainOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn fixture() -> &'static Value {
    static FIXTURE: OnceLock<Value> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        serde_json::from_str(include_str!("fixtures/synthetic16_reference.json")).expect("fixture parses")
    })
}

fn num(v: &Value, path: &[&str]) -> f64 {
    path.iter()
        .fold(v, |acc, key| &acc[*key])
        .as_f64()
        .unwrap_or_else(|| panic!("fixture field {path:?}"))
}

fn synthetic16_spec() -> SyntheticSpec {
    let f = fixture();
    SyntheticSpec {
        seed: num(f, &["dataset", "seed"]) as u64,
        depth: num(f, &["dataset", "depth"]) as usize,
        branching: num(f, &["dataset", "branching"]) as usize,
        samples_per_class: num(f, &["dataset", "samples_per_class"]) as usize,
        dim: num(f, &["dataset", "dim"]) as usize,
        noise_scale: num(f, &["dataset", "noise_scale"]),
        test_fraction: num(f, &["dataset", "test_fraction"]),
        ..SyntheticSpec::default()
    }
}

fn synthetic16_config() -> TrainConfig {
    let f = fixture();
    TrainConfig {
        bits: num(f, &["train", "bits"]) as usize,
        hidden: f["train"]["hidden"]
            .as_array()
            .expect("hidden list")
            .iter()
            .map(|v| v.as_u64().expect("width") as usize)
            .collect(),
        phase1_epochs: num(f, &["train", "phase1_epochs"]) as usize,
        phase2_epochs: num(f, &["train", "phase2_epochs"]) as usize,
        batch_size: num(f, &["train", "batch_size"]) as usize,
        phase1_lr: num(f, &["train", "phase1_lr"]),
        phase2_lr: num(f, &["train", "phase2_lr"]),
        seed: num(f, &["train", "seed"]) as u64,
        ..TrainConfig::default()
    }
}

struct Synthetic16 {
    data: LabeledDataset,
    outcome: TrainOutcome,
    test_eval: ClassificationEval,
    elapsed: Duration,
}

fn synthetic16() -> &'static Result<Synthetic16, String> {
    static RUN: OnceLock<Result<Synthetic16, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let data = generate_hierarchical(&synthetic16_spec()).map_err(|e| e.to_string())?;
        let outcome = run_llc(&data, &synthetic16_config()).map_err(|e| e.to_string())?;
        let elapsed = start.elapsed();
        let test = data.view(Split::Test);
        let test_eval = evaluate_classification(&outcome.model, &outcome.codebook, &test.features, &test.labels, &test.indices)
            .map_err(|e| e.to_string())?;
        Ok(Synthetic16 {
            data,
            outcome,
            test_eval,
            elapsed,
        })
    })
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ap_fixture() -> Outcome {
    let start = Instant::now();
    let cases = [([1u8, 0, 0, 0, 0], 0.2, 1.0), ([1, 0, 0, 1, 1], 0.42, 0.7)];
    for (rels, corrected, reported) in cases {
        let c = average_precision_corrected(&rels, 10).map_err(|e| e.to_string())?;
        let r = average_precision_reported(&rels, 10).map_err(|e| e.to_string())?;
        ensure((c - corrected).abs() < 1e-12 && (r - reported).abs() < 1e-12, || {
            format!("{rels:?}: corrected {c}, reported {r}")
        })?;
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(1), || format!("took {elapsed:?}"))?;
    Ok("0.2/1.0 and 0.42/0.7".into())
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
        .expect("shape")
}

fn ste_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..100 {
        let (rows, cols, out) = (rng.random_range(1..6), rng.random_range(1..12), rng.random_range(2..5));
        let mut tape = Tape::new();
        let real = tape.leaf(random_matrix(&mut rng, rows, cols, 2.0));
        let binary = tape.ste_binarize(real);
        let weight = tape.leaf(random_matrix(&mut rng, out, cols, 1.0));
        let logits = tape.linear(binary, weight).map_err(|e| e.to_string())?;
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..out)).collect();
        let loss = tape.softmax_cross_entropy(logits, &labels).map_err(|e| e.to_string())?;
        let grads = tape.backward(loss).map_err(|e| e.to_string())?;
        let upstream = grads.get(binary).ok_or("no gradient at the binarized node")?;
        let passed = grads.get(real).ok_or("no gradient at the real node")?;
        ensure(
            upstream.values().iter().zip(passed.values()).all(|(a, b)| a.to_bits() == b.to_bits()),
            || format!("case {case}: gradients differ"),
        )?;
    }
    Ok("100 tensors bit-exact".into())
}

fn naive_cross_entropy(z: &DenseMatrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let denom: f64 = z.row(r).iter().map(|v| v.exp()).sum();
        total -= (z.get(r, y).exp() / denom).ln();
    }
    total / labels.len() as f64
}

fn naive_bce(z: &DenseMatrix, t: &DenseMatrix) -> f64 {
    let mut total = 0.0;
    for (zv, tv) in z.values().iter().zip(t.values()) {
        let p = 1.0 / (1.0 + (-zv).exp());
        total -= tv * p.ln() + (1.0 - tv) * (1.0 - p).ln();
    }
    total / z.values().len() as f64
}

/// Central differences of `loss(x @ w^T)` with respect to `w`.
fn fd_weight_gradient(x: &DenseMatrix, w: &DenseMatrix, loss: &dyn Fn(&DenseMatrix) -> f64) -> DenseMatrix {
    let h = 1e-5;
    let forward = |w: &DenseMatrix| {
        let mut z = DenseMatrix::zeros(x.rows(), w.rows());
        for i in 0..x.rows() {
            for j in 0..w.rows() {
                z.set(i, j, (0..x.cols()).map(|t| x.get(i, t) * w.get(j, t)).sum());
            }
        }
        loss(&z)
    };
    let mut g = DenseMatrix::zeros(w.rows(), w.cols());
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            let mut plus = w.clone();
            plus.set(i, j, w.get(i, j) + h);
            let mut minus = w.clone();
            minus.set(i, j, w.get(i, j) - h);
            g.set(i, j, (forward(&plus) - forward(&minus)) / (2.0 * h));
        }
    }
    g
}

fn max_relative_error(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let (n, d, k) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(2..5));
        let x = random_matrix(&mut rng, n, d, 1.5);
        let w = random_matrix(&mut rng, k, d, 1.5);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let targets = DenseMatrix::from_vec(n, k, (0..n * k).map(|_| f64::from(rng.random_range(0..2u8))).collect())
            .expect("shape");
        for use_bce in [false, true] {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let wv = tape.leaf(w.clone());
            let z = tape.linear(xv, wv).map_err(|e| e.to_string())?;
            let loss = if use_bce {
                tape.sigmoid_bce(z, &targets)
            } else {
                tape.softmax_cross_entropy(z, &labels)
            }
            .map_err(|e| e.to_string())?;
            let grads = tape.backward(loss).map_err(|e| e.to_string())?;
            let analytic = grads.get_or_zeros(wv);
            let numeric = if use_bce {
                fd_weight_gradient(&x, &w, &|z| naive_bce(z, &targets))
            } else {
                fd_weight_gradient(&x, &w, &|z| naive_cross_entropy(z, &labels))
            };
            let err = max_relative_error(&analytic, &numeric);
            worst = worst.max(err);
            ensure(err < 1e-4, || {
                format!("case {case} ({}): relative error {err:e}", if use_bce { "bce" } else { "ce" })
            })?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!("50 cases x 2 losses, worst relative error {worst:.2e}"))
}

fn random_signs(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    (0..k).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect()
}

fn code(signs: &[f64]) -> BitCode {
    BitCode::from_signs(signs).expect("signs")
}

fn hamming_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(130);
    for _ in 0..10_000 {
        let k = rng.random_range(1..=130);
        let (a, b) = (random_signs(&mut rng, k), random_signs(&mut rng, k));
        let naive = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0;
        let packed = code(&a).hamming(&code(&b)).map_err(|e| e.to_string())?;
        ensure(f64::from(packed) == naive, || format!("k={k}: packed {packed} vs naive {naive}"))?;
    }
    for _ in 0..1000 {
        let k = rng.random_range(1..=130);
        let [a, b, c] = [0, 1, 2].map(|_| code(&random_signs(&mut rng, k)));
        let d = |x: &BitCode, y: &BitCode| x.hamming(y).expect("same length");
        ensure(d(&a, &b) == d(&b, &a), || "symmetry".into())?;
        ensure(d(&a, &a) == 0, || "identity".into())?;
        ensure(d(&a, &c) <= d(&a, &b) + d(&b, &c), || "triangle inequality".into())?;
    }
    Ok("10000 pairs, 1000 triples".into())
}

fn end_to_end() -> Outcome {
    let run = synthetic16().as_ref()?;
    let f = fixture();
    let eval = &run.test_eval;
    let unique = run.outcome.codebook.unique_count();
    ensure(unique == 16, || format!("{unique} unique codes"))?;
    let (mhd_min, ed_min) = (num(f, &["thresholds", "test_mhd_accuracy"]), num(f, &["thresholds", "test_ed_accuracy"]));
    ensure(eval.mhd_accuracy >= mhd_min, || format!("test MHD {:.3} < {mhd_min}", eval.mhd_accuracy))?;
    ensure(eval.ed_accuracy >= ed_min, || format!("test ED {:.3} < {ed_min}", eval.ed_accuracy))?;
    ensure(eval.ed_accuracy <= eval.mhd_accuracy, || "ED above MHD".into())?;
    ensure(run.elapsed < Duration::from_secs(120), || format!("took {:?}", run.elapsed))?;
    Ok(format!(
        "16 unique, test ED {:.3} MHD {:.3} (reference {:.3}/{:.3}), {:.1}s",
        eval.ed_accuracy,
        eval.mhd_accuracy,
        num(f, &["reference_run", "test_ed_accuracy"]),
        num(f, &["reference_run", "test_mhd_accuracy"]),
        run.elapsed.as_secs_f64()
    ))
}

fn decoding_consistency() -> Outcome {
    let run = synthetic16().as_ref()?;
    ensure(run.outcome.codebook.is_unique(), || "codebook has collisions".into())?;
    let counterexamples = run
        .test_eval
        .per_instance
        .iter()
        .filter(|r| r.ed_result == [r.label] && r.mhd_result != r.label)
        .count();
    ensure(counterexamples == 0, || format!("{counterexamples} counterexamples"))?;
    Ok(format!("0 counterexamples over {} test instances", run.test_eval.n))
}

fn retrieval_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let k = 16;
    let db: Vec<u64> = (0..500).map(|_| rng.random::<u64>() & 0xffff).collect();
    let labels: Vec<usize> = (0..500).map(|_| rng.random_range(0..10)).collect();
    let index = RetrievalIndex::new(db.iter().map(|&v| BitCode::from_u64(v, k)).collect(), labels.clone())
        .map_err(|e| e.to_string())?;
    let mut compared = 0;
    for q in 0..50 {
        let query = rng.random::<u64>() & 0xffff;
        let label = rng.random_range(0..10);
        let mut oracle: Vec<(u32, usize)> = db.iter().enumerate().map(|(i, &v)| ((v ^ query).count_ones(), i)).collect();
        oracle.sort();
        let ranked = index.query(&BitCode::from_u64(query, k), label, 500).map_err(|e| e.to_string())?;
        ensure(ranked.ids == oracle.iter().map(|&(_, i)| i).collect::<Vec<_>>(), || format!("query {q}: ranking differs"))?;
        let top: Vec<u8> = ranked.relevance[..100].to_vec();
        let total = labels.iter().filter(|&&l| l == label).count();
        if top.contains(&1) {
            let c = average_precision_corrected(&top, total).map_err(|e| e.to_string())?;
            let r = average_precision_reported(&top, total).map_err(|e| e.to_string())?;
            ensure(c <= r, || format!("query {q}: corrected {c} > reported {r}"))?;
            compared += 1;
        }
    }
    Ok(format!("50 rankings identical, corrected <= reported on {compared} queries"))
}

fn ood_rule() -> Outcome {
    // Exhaustive at 10 bits over a codebook of 16 random codes.
    let book = random_codebook(16, 10, 3).map_err(|e| e.to_string())?;
    let detector = ExactMissDetector::new(&book);
    let members: BTreeSet<&BitCode> = book.codes().iter().collect();
    let (mut absent_flagged, mut present_flagged) = (0usize, 0usize);
    for v in 0..1024u64 {
        let c = BitCode::from_u64(v, 10);
        let flagged = detector.is_ood(&c).map_err(|e| e.to_string())?;
        if members.contains(&c) {
            present_flagged += usize::from(flagged);
        } else {
            absent_flagged += usize::from(flagged);
        }
    }
    let absent = 1024 - members.len();
    ensure(absent_flagged == absent && present_flagged == 0, || {
        format!("flagged {absent_flagged}/{absent} absent and {present_flagged} present codes")
    })?;

    // Hold out one whole top-level branch as the OOD set.
    let data = generate_hierarchical(&synthetic16_spec()).map_err(|e| e.to_string())?;
    let (kept, held) = data.hold_out_classes(&[12, 13, 14, 15]).map_err(|e| e.to_string())?;
    let run = run_llc(&kept, &synthetic16_config()).map_err(|e| e.to_string())?;
    let (inside, outside) = (kept.view(Split::Test), held.view(Split::Test));
    let index = DecodeIndex::new(&run.codebook);
    let detector = ExactMissDetector::from_index(index.clone());
    let codes_in = run.model.encode(&inside.features).map_err(|e| e.to_string())?.codes;
    let codes_out = run.model.encode(&outside.features).map_err(|e| e.to_string())?.codes;
    let count = |codes: &[BitCode]| codes.iter().filter(|c| detector.is_ood(c).expect("length")).count();
    let (tp, fp) = (count(&codes_out), count(&codes_in));
    let exact = F1Score::from_counts(tp, fp, codes_out.len() - tp, codes_in.len() - fp).f1;

    let best_f1 = |a: &[f64], b: &[f64]| -> Result<f64, String> {
        Ok(f1_sweep(a, b).map_err(|e| e.to_string())?.iter().map(|p| p.f1).fold(0.0, f64::max))
    };
    let head = |m: &DenseMatrix| -> Result<Vec<f64>, String> {
        Ok(max_softmax_probability(&run.phase1_model.class_scores(m).map_err(|e| e.to_string())?))
    };
    let tuned_head = best_f1(&head(&inside.features)?, &head(&outside.features)?)?;
    let hamming = |codes: &[BitCode]| -> Vec<f64> {
        codes.iter().map(|c| hamming_max_probability(&index.distances(c).expect("length"))).collect()
    };
    let tuned_hamming = best_f1(&hamming(&codes_in), &hamming(&codes_out))?;
    let tuned = tuned_head.max(tuned_hamming);
    let gap = num(fixture(), &["thresholds", "ood_f1_gap"]);
    ensure(exact >= tuned - gap, || format!("exact-miss F1 {exact:.3} vs tuned {tuned:.3}"))?;
    Ok(format!(
        "exhaustive k=10 exact; held-out branch F1 exact-miss {exact:.3}, tuned head {tuned_head:.3}, tuned hamming {tuned_hamming:.3}"
    ))
}

fn top_split_respects_branches(branching: usize, depth: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>), String> {
    let spec = SyntheticSpec {
        seed,
        branching,
        depth,
        noise_scale: 0.0,
        samples_per_class: 4,
        ..SyntheticSpec::default()
    };
    let data = generate_hierarchical(&spec).map_err(|e| e.to_string())?;
    let codes = Codebook::from_real_rows(&data.class_means(Split::Train));
    let dendrogram = agglomerate(&codes, Linkage::Average).map_err(|e| e.to_string())?;
    let tree = data.tree().ok_or("no tree")?;
    let (left, right) = dendrogram.top_split();
    let branches = |g: &[usize]| g.iter().map(|&c| tree.top_branch(c)).collect::<Vec<_>>();
    let (lb, rb) = (branches(&left), branches(&right));
    let ls: BTreeSet<usize> = lb.iter().copied().collect();
    let rs: BTreeSet<usize> = rb.iter().copied().collect();
    ensure(ls.is_disjoint(&rs), || {
        format!("b={branching} d={depth}: split {left:?} | {right:?} mixes branches {ls:?} / {rs:?}")
    })?;
    Ok((lb, rb))
}

fn taxonomy() -> Outcome {
    // With two first-level branches the top split must equal them exactly.
    let (l, r) = top_split_respects_branches(2, 3, 7)?;
    ensure(
        l.iter().all(|&b| b == l[0]) && r.iter().all(|&b| b == r[0]) && l[0] != r[0],
        || "binary tree top split is not the first branch".into(),
    )?;
    // With four, every first-level branch must sit wholly on one side.
    let (l, r) = top_split_respects_branches(4, 2, 7)?;
    Ok(format!(
        "binary tree exact; 4-way tree groups {:?} | {:?}",
        l.iter().collect::<BTreeSet<_>>(),
        r.iter().collect::<BTreeSet<_>>()
    ))
}

fn spearman() -> Outcome {
    let run = synthetic16().as_ref()?;
    let real = inner_product_heatmap(&run.data.class_means(Split::Train), HeatSource::RealRepresentations);
    let self_corr = spearman_rowwise(&real, &real).map_err(|e| e.to_string())?.mean;
    ensure(self_corr == 1.0, || format!("spearman(H, H) = {self_corr}"))?;
    let learned = inner_product_heatmap(&run.outcome.codebook.sign_matrix(), HeatSource::BitCodes);
    let learned_corr = spearman_rowwise(&learned, &real).map_err(|e| e.to_string())?.mean;
    let mut random_total = 0.0;
    let draws = 10;
    for seed in 0..draws {
        let book = random_codebook(16, 8, seed).map_err(|e| e.to_string())?;
        let heat = inner_product_heatmap(&book.sign_matrix(), HeatSource::BitCodes);
        random_total += spearman_rowwise(&heat, &real).map_err(|e| e.to_string())?.mean;
    }
    let random_corr = random_total / draws as f64;
    let gap = num(fixture(), &["thresholds", "spearman_gap"]);
    ensure(learned_corr - random_corr >= gap, || {
        format!("learned {learned_corr:.3} vs random {random_corr:.3}")
    })?;
    Ok(format!("self 1.0; learned {learned_corr:.3} vs random codebooks {random_corr:.3}"))
}

fn determinism() -> Outcome {
    let data = generate_hierarchical(&synthetic16_spec()).map_err(|e| e.to_string())?;
    let again = generate_hierarchical(&synthetic16_spec()).map_err(|e| e.to_string())?;
    ensure(data.features().values() == again.features().values(), || "datasets differ".into())?;
    let a = run_llc(&data, &synthetic16_config()).map_err(|e| e.to_string())?;
    let b = run_llc(&again, &synthetic16_config()).map_err(|e| e.to_string())?;
    ensure(a.model.to_checkpoint_bytes() == b.model.to_checkpoint_bytes(), || "checkpoints differ".into())?;
    ensure(a.codebook.to_text() == b.codebook.to_text(), || "codebooks differ".into())?;
    ensure(a.report.to_jsonl() == b.report.to_jsonl(), || "reports differ".into())?;
    Ok("checkpoint, codebook and report byte-identical".into())
}

#[test]
fn acceptance() {
    let criteria: [Criterion; 11] = [
        ("average precision fixture", ap_fixture),
        ("straight-through identity", ste_identity),
        ("gradient suite", gradient_suite),
        ("hamming oracle", hamming_oracle),
        ("end-to-end synthetic-16", end_to_end),
        ("decoding consistency", decoding_consistency),
        ("retrieval oracle", retrieval_oracle),
        ("exact-miss OOD rule", ood_rule),
        ("taxonomy recovery", taxonomy),
        ("spearman sanity", spearman),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                println!("FAIL {name}: {why}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
