//! Two-phase training: codebook learning through a sign-binarized code
//! matrix, then per-bit instance training against the frozen codebook.
//! Also the random and SVD baseline codebooks.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitcode::{BitCode, Codebook};
use crate::data::{LabeledDataset, Split, SplitView};
use crate::decode::{evaluate_classification, ClassificationEval};
use crate::diffcore::{minibatches, DenseMatrix, OptimizerState, Schedule, Tape};
use crate::error::{Error, Result};
use crate::linalg::right_singular_vectors;
use crate::model::LlcModel;

// RNG streams split off the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_PHASE1: u64 = 1;
const STREAM_PHASE2: u64 = 2;

/// Hyperparameters of one training run.
///
/// `momentum` and `weight_decay` are not fixed by the method itself; the
/// defaults (0.9 and 0.0) are conventional choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub bits: usize,
    /// Widths of the backbone's hidden layers; empty means `F` is the identity.
    pub hidden: Vec<usize>,
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub phase1_lr: f64,
    pub phase2_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    /// Also binarize `P F(x)` (straight-through) while learning the codebook.
    pub phase1_binarize_instances: bool,
    /// Prefix lengths whose uniqueness is reported after training.
    pub nested_prefixes: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            bits: 20,
            hidden: vec![64],
            phase1_epochs: 100,
            phase2_epochs: 25,
            batch_size: 256,
            phase1_lr: 0.1,
            phase2_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            schedule: Schedule::Cosine,
            seed: 0,
            phase1_binarize_instances: false,
            nested_prefixes: Vec::new(),
        }
    }
}

impl TrainConfig {
    /// Hard errors for unusable settings; soft findings are returned as warnings.
    pub fn validate(&self, num_classes: usize) -> Result<Vec<String>> {
        if self.bits == 0 {
            return Err(Error::Validation("bits must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch size must be >= 1".into()));
        }
        for (name, lr) in [("phase1_lr", self.phase1_lr), ("phase2_lr", self.phase2_lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Validation(format!("{name} must be > 0 (got {lr})")));
            }
        }
        if let Some(&m) = self.nested_prefixes.iter().find(|&&m| m == 0 || m > self.bits) {
            return Err(Error::Validation(format!(
                "nested prefix {m} outside 1..={}",
                self.bits
            )));
        }
        let mut warnings = Vec::new();
        let needed = min_bits(num_classes);
        if self.bits < needed {
            warnings.push(format!(
                "{} bits cannot give {num_classes} classes distinct codes (need at least {needed})",
                self.bits
            ));
        }
        if self.phase2_lr >= self.phase1_lr {
            warnings.push(format!(
                "phase2_lr {} is not below phase1_lr {}",
                self.phase2_lr, self.phase1_lr
            ));
        }
        Ok(warnings)
    }
}

/// `ceil(log2 L)`.
pub fn min_bits(num_classes: usize) -> usize {
    if num_classes <= 1 {
        0
    } else {
        (usize::BITS - (num_classes - 1).leading_zeros()) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: u8,
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    /// Learning rate in effect at the last step of the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub n: usize,
    pub ed_accuracy: f64,
    pub mhd_accuracy: f64,
    pub mean_bits_correct: f64,
}

impl From<&ClassificationEval> for SplitStats {
    fn from(e: &ClassificationEval) -> Self {
        Self {
            n: e.n,
            ed_accuracy: e.ed_accuracy,
            mhd_accuracy: e.mhd_accuracy,
            mean_bits_correct: e.mean_bits_correct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixUniqueness {
    pub bits: usize,
    pub unique_codes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub classes: usize,
    pub bits: usize,
    pub unique_codes: usize,
    /// Class-id groups sharing one code.
    pub collisions: Vec<Vec<usize>>,
    pub train: SplitStats,
    pub test: Option<SplitStats>,
    pub prefixes: Vec<PrefixUniqueness>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub summary: Option<TrainSummary>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum ReportLine<'a> {
    Epoch(&'a EpochRecord),
    Summary(&'a TrainSummary),
}

impl TrainReport {
    /// One JSON object per epoch, then the summary.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let lines = self
            .epochs
            .iter()
            .map(ReportLine::Epoch)
            .chain(self.summary.iter().map(ReportLine::Summary));
        for line in lines {
            out.push_str(&serde_json::to_string(&line).expect("report serializes"));
            out.push('\n');
        }
        out
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fresh model sized for `data` and `cfg`.
pub fn init_model(data: &LabeledDataset, cfg: &TrainConfig) -> Result<LlcModel> {
    let mut rng = stream_rng(cfg.seed, STREAM_INIT);
    LlcModel::new_random(data.dim(), &cfg.hidden, cfg.bits, data.num_classes(), &mut rng)
}

fn check_data(data: &SplitView, model: &LlcModel) -> Result<()> {
    if model.classes() < 2 {
        return Err(Error::Validation(format!(
            "codebook learning needs at least 2 classes (got {})",
            model.classes()
        )));
    }
    if data.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    if data.features.cols() != model.input_dim() {
        return Err(Error::len("training features vs model input", model.input_dim(), data.features.cols()));
    }
    if let Some(&bad) = data.labels.iter().find(|&&y| y >= model.classes()) {
        return Err(Error::Index {
            context: "training label",
            index: bad,
            bound: model.classes(),
        });
    }
    Ok(())
}

/// Outcome of codebook learning.
#[derive(Debug, Clone)]
pub struct Phase1Outcome {
    pub codebook: Codebook,
    pub epochs: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

/// Minimizes softmax cross-entropy of `sign(C) (P F(x))` over `C`, `P` and the
/// backbone, with straight-through gradients for the sign. Returns `sign(C)`.
pub fn phase1_learn_codebook(
    data: &SplitView,
    model: &mut LlcModel,
    cfg: &TrainConfig,
) -> Result<Phase1Outcome> {
    check_data(data, model)?;
    let mut warnings = cfg.validate(model.classes())?;
    let mut rng = stream_rng(cfg.seed, STREAM_PHASE1);
    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut opt = OptimizerState::new(
        cfg.phase1_lr,
        cfg.momentum,
        cfg.weight_decay,
        cfg.schedule,
        cfg.phase1_epochs * steps_per_epoch,
        &model.param_shapes(true),
    )?;
    let mut epochs = Vec::with_capacity(cfg.phase1_epochs);
    for epoch in 0..cfg.phase1_epochs {
        let mut total = 0.0;
        let batches = minibatches(n, cfg.batch_size, &mut rng);
        for (step, batch) in batches.iter().enumerate() {
            let x = data.features.select_rows(batch);
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();

            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let input = tape.leaf(x);
            let mut z = model.forward_projection(&mut tape, &vars, input)?;
            if cfg.phase1_binarize_instances {
                z = tape.ste_binarize(z);
            }
            let class_codes = tape.ste_binarize(vars.codes);
            let scores = tape.linear(z, class_codes)?;
            let loss = tape.softmax_cross_entropy(scores, &labels)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "codebook learning loss at epoch {epoch} step {step}"
                )));
            }
            total += value;
            let grads = tape.backward(loss)?;
            let grads: Vec<DenseMatrix> = vars
                .params(true)
                .into_iter()
                .map(|v| grads.get_or_zeros(v))
                .collect();
            opt.step(&mut model.params_mut(true), &grads)?;
        }
        if !model.is_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        epochs.push(EpochRecord {
            phase: 1,
            epoch,
            loss: total / batches.len() as f64,
            lr: opt.learning_rate_at(opt.step_index().saturating_sub(1)),
        });
    }
    let codebook = model.codebook();
    let audit = codebook.audit();
    if !audit.collisions.is_empty() {
        let msg = format!(
            "codebook has {} unique codes for {} classes",
            audit.unique_count,
            codebook.len()
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    Ok(Phase1Outcome {
        codebook,
        epochs,
        warnings,
    })
}

/// `(B(C_{y,j}) + 1) / 2` for every instance and bit.
pub fn bit_targets(codebook: &Codebook, labels: &[usize]) -> DenseMatrix {
    let mut t = DenseMatrix::zeros(labels.len(), codebook.k());
    for (i, &y) in labels.iter().enumerate() {
        let code = codebook.code(y);
        for (j, v) in t.row_mut(i).iter_mut().enumerate() {
            *v = if code.bit(j) { 1.0 } else { 0.0 };
        }
    }
    t
}

/// Trains `P` and the backbone as `k` independent logistic problems whose
/// targets are the bits of each instance's class code. `C` is not touched.
pub fn phase2_learn_instances(
    data: &SplitView,
    model: &mut LlcModel,
    codebook: &Codebook,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    if codebook.k() != model.bits() {
        return Err(Error::len("codebook k vs model bits", model.bits(), codebook.k()));
    }
    if codebook.len() != model.classes() {
        return Err(Error::len("codebook classes vs model classes", model.classes(), codebook.len()));
    }
    check_data(data, model)?;
    cfg.validate(model.classes())?;
    if !codebook.is_unique() {
        warn!(
            "training instance codes against a codebook with {} unique codes for {} classes",
            codebook.unique_count(),
            codebook.len()
        );
    }
    if cfg.phase2_epochs == 0 {
        return Ok(Vec::new());
    }
    let mut rng = stream_rng(cfg.seed, STREAM_PHASE2);
    let n = data.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut opt = OptimizerState::new(
        cfg.phase2_lr,
        cfg.momentum,
        cfg.weight_decay,
        cfg.schedule,
        cfg.phase2_epochs * steps_per_epoch,
        &model.param_shapes(false),
    )?;
    let targets_all = bit_targets(codebook, &data.labels);
    let mut epochs = Vec::with_capacity(cfg.phase2_epochs);
    for epoch in 0..cfg.phase2_epochs {
        let mut total = 0.0;
        let batches = minibatches(n, cfg.batch_size, &mut rng);
        for (step, batch) in batches.iter().enumerate() {
            let x = data.features.select_rows(batch);
            let targets = targets_all.select_rows(batch);
            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let input = tape.leaf(x);
            let z = model.forward_projection(&mut tape, &vars, input)?;
            let loss = tape.sigmoid_bce(z, &targets)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "instance code loss at epoch {epoch} step {step}"
                )));
            }
            total += value;
            let grads = tape.backward(loss)?;
            let grads: Vec<DenseMatrix> = vars
                .params(false)
                .into_iter()
                .map(|v| grads.get_or_zeros(v))
                .collect();
            opt.step(&mut model.params_mut(false), &grads)?;
        }
        if !model.is_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        epochs.push(EpochRecord {
            phase: 2,
            epoch,
            loss: total / batches.len() as f64,
            lr: opt.learning_rate_at(opt.step_index().saturating_sub(1)),
        });
    }
    Ok(epochs)
}

/// Mean BCE loss of the per-bit problems for the given instances, without training.
pub fn instance_code_loss(model: &LlcModel, codebook: &Codebook, features: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.leaf(model.projection_logits(features)?);
    let loss = tape.sigmoid_bce(z, &bit_targets(codebook, labels))?;
    Ok(tape.scalar(loss))
}

/// Mean over instances of `k - hamming(code(x), codebook[y])`.
pub fn bits_correct_statistic(model: &LlcModel, data: &SplitView, codebook: &Codebook) -> Result<f64> {
    if model.bits() != codebook.k() {
        return Err(Error::len("model bits vs codebook k", model.bits(), codebook.k()));
    }
    let encoded = model.encode(&data.features)?;
    let mut total = 0u64;
    for (code, &y) in encoded.codes.iter().zip(&data.labels) {
        total += u64::from(codebook.k() as u32 - code.hamming(codebook.code(y))?);
    }
    Ok(total as f64 / data.len().max(1) as f64)
}

/// Which phases [`run_llc`] executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phases {
    CodebookOnly,
    InstancesOnly,
    Both,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: LlcModel,
    /// Snapshot taken right after codebook learning.
    pub phase1_model: LlcModel,
    pub codebook: Codebook,
    pub report: TrainReport,
}

/// Full pipeline on `data`'s training split, evaluated on both splits.
pub fn run_llc(data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let model = init_model(data, cfg)?;
    run_phases(data, model, cfg, Phases::Both, None)
}

/// Runs the selected phases starting from `model`. `InstancesOnly` uses
/// `codebook` when given and `sign(C)` of the model otherwise.
pub fn run_phases(
    data: &LabeledDataset,
    mut model: LlcModel,
    cfg: &TrainConfig,
    phases: Phases,
    codebook: Option<Codebook>,
) -> Result<TrainOutcome> {
    let train = data.view(Split::Train);
    let mut report = TrainReport::default();
    let mut warnings = cfg.validate(data.num_classes())?;
    for w in &warnings {
        warn!("{w}");
    }
    let missing = data.classes_missing_from_train();
    if !missing.is_empty() {
        warnings.push(format!("classes without training data: {missing:?}"));
    }

    let codebook = match phases {
        Phases::CodebookOnly | Phases::Both => {
            let out = phase1_learn_codebook(&train, &mut model, cfg)?;
            report.epochs.extend(out.epochs);
            for w in out.warnings {
                if !warnings.contains(&w) {
                    warnings.push(w);
                }
            }
            out.codebook
        }
        Phases::InstancesOnly => codebook.unwrap_or_else(|| model.codebook()),
    };
    let phase1_model = model.clone();
    if phases != Phases::CodebookOnly {
        report
            .epochs
            .extend(phase2_learn_instances(&train, &mut model, &codebook, cfg)?);
    }

    let train_eval = evaluate_classification(&model, &codebook, &train.features, &train.labels, &train.indices)?;
    let test = data.view(Split::Test);
    let test_eval = if test.is_empty() {
        None
    } else {
        Some(evaluate_classification(&model, &codebook, &test.features, &test.labels, &test.indices)?)
    };
    let audit = codebook.audit();
    let prefixes = cfg
        .nested_prefixes
        .iter()
        .map(|&m| {
            Ok(PrefixUniqueness {
                bits: m,
                unique_codes: codebook.prefix(m)?.unique_count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    report.summary = Some(TrainSummary {
        classes: codebook.len(),
        bits: codebook.k(),
        unique_codes: audit.unique_count,
        collisions: audit.collisions.into_iter().map(|c| c.classes).collect(),
        train: SplitStats::from(&train_eval),
        test: test_eval.as_ref().map(SplitStats::from),
        prefixes,
        warnings,
    });
    Ok(TrainOutcome {
        model,
        phase1_model,
        codebook,
        report,
    })
}

const RANDOM_CODEBOOK_ATTEMPTS: u64 = 100;

/// I.i.d. uniform codes, redrawn from a fresh stream until all `L` are
/// distinct or the attempt budget runs out (the last draw is then returned
/// with its collisions).
pub fn random_codebook(classes: usize, bits: usize, seed: u64) -> Result<Codebook> {
    if classes == 0 || bits == 0 {
        return Err(Error::Validation("random codebook needs L >= 1 and k >= 1".into()));
    }
    if bits < usize::BITS as usize && (1usize << bits) < classes {
        return Err(Error::Validation(format!(
            "{classes} distinct codes cannot fit in {bits} bits"
        )));
    }
    let mut last = None;
    for attempt in 0..RANDOM_CODEBOOK_ATTEMPTS {
        let mut rng = stream_rng(seed, attempt);
        let codes = (0..classes)
            .map(|_| {
                let bits: Vec<bool> = (0..bits).map(|_| rng.random::<bool>()).collect();
                BitCode::from_bools(&bits)
            })
            .collect();
        let cb = Codebook::new(bits, codes)?;
        if cb.is_unique() {
            return Ok(cb);
        }
        last = Some(cb);
    }
    let cb = last.expect("at least one attempt");
    warn!(
        "random codebook still has {} unique codes for {classes} classes after {RANDOM_CODEBOOK_ATTEMPTS} draws",
        cb.unique_count()
    );
    Ok(cb)
}

/// Projections of each classifier row onto its top-`k` right singular
/// directions. Each direction has its first nonzero component positive.
pub fn svd_projections(classifier: &DenseMatrix, bits: usize) -> Result<DenseMatrix> {
    let (l, d) = classifier.shape();
    if bits == 0 || bits > l.min(d) {
        return Err(Error::Validation(format!(
            "SVD codebook needs 1 <= k <= min(L, d) = {} (got {bits})",
            l.min(d)
        )));
    }
    let top = right_singular_vectors(classifier)?.vectors.leading_columns(bits);
    classifier.matmul(&top)
}

pub fn svd_codebook(classifier: &DenseMatrix, bits: usize) -> Result<Codebook> {
    Ok(Codebook::from_real_rows(&svd_projections(classifier, bits)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_hierarchical, SyntheticSpec};

    #[test]
    fn min_bits_is_ceil_log2() {
        assert_eq!(min_bits(1), 0);
        assert_eq!(min_bits(2), 1);
        assert_eq!(min_bits(16), 4);
        assert_eq!(min_bits(17), 5);
        assert_eq!(min_bits(1000), 10);
    }

    #[test]
    fn config_warns_below_information_limit() {
        let cfg = TrainConfig {
            bits: 3,
            ..TrainConfig::default()
        };
        let w = cfg.validate(16).unwrap();
        assert!(w.iter().any(|m| m.contains("need at least 4")));
        assert!(TrainConfig { batch_size: 0, ..cfg.clone() }.validate(16).is_err());
        assert!(TrainConfig { phase1_lr: 0.0, ..cfg }.validate(16).is_err());
    }

    #[test]
    fn bit_targets_map_signs_to_zero_one() {
        let cb = Codebook::new(3, vec![BitCode::parse_bitstring("101").unwrap()]).unwrap();
        let t = bit_targets(&cb, &[0, 0]);
        assert_eq!(t.row(1), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn random_codebook_properties() {
        let a = random_codebook(1000, 20, 3).unwrap();
        assert_eq!(a.unique_count(), 1000);
        assert_eq!(a, random_codebook(1000, 20, 3).unwrap());
        assert!(random_codebook(5, 2, 0).is_err());
        // 4 classes in 2 bits: only a permutation of all codes works
        assert_eq!(random_codebook(4, 2, 1).unwrap().len(), 4);
    }

    #[test]
    fn svd_identity_classifier() {
        let cb = svd_codebook(&DenseMatrix::identity(4), 4).unwrap();
        assert_eq!(cb.len(), 4);
        assert_eq!(cb.audit().unique_count, cb.unique_count());
    }

    #[test]
    fn svd_rank_one_collides() {
        let u = [1.0, -2.0, 0.5, 3.0, -1.0];
        let v = [0.3, 0.1, -0.7];
        let rows: Vec<Vec<f64>> = u.iter().map(|a| v.iter().map(|b| a * b).collect()).collect();
        let cb = svd_codebook(&DenseMatrix::from_rows(&rows).unwrap(), 2).unwrap();
        assert!(!cb.audit().collisions.is_empty());
    }

    #[test]
    fn svd_rejects_too_many_bits() {
        assert!(svd_codebook(&DenseMatrix::identity(3), 4).is_err());
    }

    #[test]
    fn single_class_is_rejected() {
        let spec = SyntheticSpec {
            branching: 2,
            depth: 1,
            samples_per_class: 4,
            dim: 3,
            ..SyntheticSpec::default()
        };
        let ds = generate_hierarchical(&spec).unwrap();
        let (one_class, _) = ds.hold_out_classes(&[1]).unwrap();
        let cfg = TrainConfig {
            bits: 2,
            hidden: vec![],
            phase1_epochs: 1,
            ..TrainConfig::default()
        };
        let mut model = init_model(&one_class, &cfg).unwrap();
        let err = phase1_learn_codebook(&one_class.view(Split::Train), &mut model, &cfg).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn zero_phase2_epochs_leave_model_unchanged() {
        let spec = SyntheticSpec {
            samples_per_class: 5,
            dim: 4,
            ..SyntheticSpec::default()
        };
        let ds = generate_hierarchical(&spec).unwrap();
        let cfg = TrainConfig {
            bits: 6,
            hidden: vec![5],
            phase2_epochs: 0,
            ..TrainConfig::default()
        };
        let mut model = init_model(&ds, &cfg).unwrap();
        let before = model.clone();
        let cb = model.codebook();
        let rec = phase2_learn_instances(&ds.view(Split::Train), &mut model, &cb, &cfg).unwrap();
        assert!(rec.is_empty());
        assert_eq!(model, before);
    }

    #[test]
    fn report_jsonl_shape() {
        let report = TrainReport {
            epochs: vec![EpochRecord { phase: 1, epoch: 0, loss: 0.5, lr: 0.1 }],
            summary: None,
        };
        assert_eq!(
            report.to_jsonl(),
            "{\"record\":\"epoch\",\"phase\":1,\"epoch\":0,\"loss\":0.5,\"lr\":0.1}\n"
        );
    }
}
