use std::fs;
use std::path::{Path, PathBuf};

use llc_core::analysis::{agglomerate, bit_split_report, codebook_names, inner_product_heatmap, spearman_rowwise, HeatSource, Linkage};
use llc_core::bitcode::{BitCode, Codebook};
use llc_core::data::{generate_hierarchical, load_csv, load_idx, DatasetSidecar, LabeledDataset, Split, SplitView};
use llc_core::decode::{evaluate_classification, DecodeIndex};
use llc_core::model::LlcModel;
use llc_core::ood::{
    conservative_threshold, f1_sweep, hamming_max_probability, max_softmax_probability, sweep_csv, tune_threshold_max_f1,
    verdicts_jsonl, ExactMissDetector, OodRule, OodVerdict, ThresholdModel,
};
use llc_core::retrieval::{evaluate_map, RetrievalIndex};
use llc_core::train::{init_model, run_phases, Phases};
use llc_core::Error;
use log::info;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

fn write(path: &Path, contents: &str) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    info!("wrote {}", path.display());
    Ok(())
}

fn json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("report serializes") + "\n"
}

fn sidecar_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("json")
}

fn save_dataset(data: &LabeledDataset, path: &Path) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            path: parent.to_path_buf(),
            source: e,
        })?;
    }
    data.write_csv(path)?;
    data.sidecar().save(&sidecar_path(path))?;
    info!("wrote {} ({} instances)", path.display(), data.len());
    Ok(())
}

/// Reads a dataset CSV plus its sidecar when present; without a sidecar the
/// data is split and standardized from the configuration.
fn load_dataset(cfg: &RunConfig, key: &str) -> CliResult<LabeledDataset> {
    let path = cfg.path(key);
    let mut data = load_csv(&path, cfg.raw("label_column"))?;
    let sidecar = sidecar_path(&path);
    if sidecar.is_file() {
        data.apply_sidecar(DatasetSidecar::load(&sidecar)?)?;
    } else {
        data.resplit(cfg.get("data_seed")?, cfg.get("test_fraction")?)?;
        if cfg.get("standardize")? {
            data.standardize();
        }
    }
    Ok(data)
}

fn select(data: &LabeledDataset, split: Option<Split>) -> SplitView {
    match split {
        Some(s) => data.view(s),
        None => data.view_all(),
    }
}

fn check_model_fits(model: &LlcModel, data: &LabeledDataset, codebook: Option<&Codebook>) -> CliResult<()> {
    if model.input_dim() != data.dim() {
        return Err(Error::Dimension {
            context: "checkpoint input vs dataset features",
            left: model.input_dim().to_string(),
            right: data.dim().to_string(),
        }
        .into());
    }
    if let Some(book) = codebook {
        if book.k() != model.bits() {
            return Err(Error::Dimension {
                context: "codebook bits vs checkpoint bits",
                left: book.k().to_string(),
                right: model.bits().to_string(),
            }
            .into());
        }
        if book.len() != data.num_classes() {
            return Err(Error::Dimension {
                context: "codebook classes vs dataset classes",
                left: book.len().to_string(),
                right: data.num_classes().to_string(),
            }
            .into());
        }
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig) -> CliResult<()> {
    let held_out = cfg.list("held_out_classes")?;
    let data = if cfg.is_set("idx_images") || cfg.is_set("idx_labels") {
        cfg.require_inputs(&["idx_images", "idx_labels"])?;
        let mut data = load_idx(&cfg.path("idx_images"), &cfg.path("idx_labels"))?;
        data.resplit(cfg.get("data_seed")?, cfg.get("test_fraction")?)?;
        if cfg.get("standardize")? {
            data.standardize();
        }
        data
    } else {
        generate_hierarchical(&cfg.synthetic_spec()?)?
    };
    if held_out.is_empty() {
        return save_dataset(&data, &cfg.path("dataset"));
    }
    let (kept, ood) = data.hold_out_classes(&held_out)?;
    save_dataset(&kept, &cfg.path("dataset"))?;
    save_dataset(&ood, &cfg.path("ood_dataset"))
}

pub fn train(cfg: &RunConfig) -> CliResult<()> {
    let phases = match cfg.raw("phase") {
        "1" => Phases::CodebookOnly,
        "2" => Phases::InstancesOnly,
        "both" => Phases::Both,
        other => return Err(CliError::config(format!("key `phase`: expected 1, 2 or both, got `{other}`"))),
    };
    let train_cfg = cfg.train_config()?;
    let mut inputs = vec!["dataset"];
    if phases == Phases::InstancesOnly {
        inputs.extend(["phase1_checkpoint", "codebook"]);
    }
    cfg.require_inputs(&inputs)?;
    let data = load_dataset(cfg, "dataset")?;
    let (model, codebook) = if phases == Phases::InstancesOnly {
        let model = LlcModel::load_checkpoint(&cfg.path("phase1_checkpoint"))?;
        let codebook = Codebook::load(&cfg.path("codebook"))?;
        check_model_fits(&model, &data, Some(&codebook))?;
        (model, Some(codebook))
    } else {
        (init_model(&data, &train_cfg)?, None)
    };
    let outcome = run_phases(&data, model, &train_cfg, phases, codebook)?;
    if phases != Phases::InstancesOnly {
        outcome.phase1_model.save_checkpoint(&cfg.path("phase1_checkpoint"))?;
        write(&cfg.path("codebook"), &outcome.codebook.to_text())?;
    }
    if phases != Phases::CodebookOnly {
        outcome.model.save_checkpoint(&cfg.path("checkpoint"))?;
    }
    let report = outcome.report.to_jsonl();
    write(&cfg.report_dir().join("train_report.jsonl"), &report)?;
    print!("{}", report.lines().last().map(|l| format!("{l}\n")).unwrap_or_default());
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    split: &'a str,
    n: usize,
    ed_accuracy: f64,
    mhd_accuracy: f64,
    mean_bits_correct: f64,
    classes: usize,
    bits: usize,
    unique_codes: usize,
    collisions: Vec<Vec<usize>>,
}

pub fn eval(cfg: &RunConfig) -> CliResult<()> {
    let split = cfg.split("split")?;
    cfg.require_inputs(&["dataset", "checkpoint", "codebook"])?;
    let data = load_dataset(cfg, "dataset")?;
    let model = LlcModel::load_checkpoint(&cfg.path("checkpoint"))?;
    let codebook = Codebook::load(&cfg.path("codebook"))?;
    check_model_fits(&model, &data, Some(&codebook))?;
    let view = select(&data, split);
    let eval = evaluate_classification(&model, &codebook, &view.features, &view.labels, &view.indices)?;
    let audit = codebook.audit();
    let summary = json_line(&EvalSummary {
        split: cfg.raw("split"),
        n: eval.n,
        ed_accuracy: eval.ed_accuracy,
        mhd_accuracy: eval.mhd_accuracy,
        mean_bits_correct: eval.mean_bits_correct,
        classes: codebook.len(),
        bits: codebook.k(),
        unique_codes: audit.unique_count,
        collisions: audit.collisions.into_iter().map(|c| c.classes).collect(),
    });
    let dir = cfg.report_dir();
    write(&dir.join("eval_report.jsonl"), &summary)?;
    write(&dir.join("eval_instances.jsonl"), &eval.per_instance_jsonl())?;
    print!("{summary}");
    Ok(())
}

/// Lines of `id<TAB>bits<TAB>label`; `#` starts a comment.
pub fn parse_codes_file(text: &str, origin: &str) -> CliResult<Vec<(BitCode, usize)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| {
            CliError::from(Error::Parse {
                location: format!("{origin}:{}", i + 1),
                message: what.to_string(),
            })
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(bad("expected `id bits label`"));
        }
        let id: usize = fields[0].parse().map_err(|_| bad("id is not an integer"))?;
        if id != out.len() {
            return Err(bad(&format!("ids must run 0,1,2,...; found {id} at entry {}", out.len())));
        }
        let code = BitCode::parse_bitstring(fields[1]).map_err(|e| bad(&e.to_string()))?;
        let label: usize = fields[2].parse().map_err(|_| bad("label is not an integer"))?;
        out.push((code, label));
    }
    Ok(out)
}

fn read_codes(cfg: &RunConfig, key: &str) -> CliResult<Vec<(BitCode, usize)>> {
    let path = cfg.path(key);
    let text = fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    parse_codes_file(&text, &path.display().to_string())
}

pub fn retrieve(cfg: &RunConfig) -> CliResult<()> {
    let topk: usize = cfg.get("topk")?;
    let (database, queries) = if cfg.is_set("database_codes") || cfg.is_set("query_codes") {
        cfg.require_inputs(&["database_codes", "query_codes"])?;
        (read_codes(cfg, "database_codes")?, read_codes(cfg, "query_codes")?)
    } else {
        let (db_split, query_split) = (cfg.split("database_split")?, cfg.split("query_split")?);
        cfg.require_inputs(&["dataset", "checkpoint"])?;
        let data = load_dataset(cfg, "dataset")?;
        let model = LlcModel::load_checkpoint(&cfg.path("checkpoint"))?;
        check_model_fits(&model, &data, None)?;
        let encode = |split| -> CliResult<Vec<(BitCode, usize)>> {
            let view = select(&data, split);
            let codes = model.encode(&view.features)?.codes;
            Ok(codes.into_iter().zip(view.labels).collect())
        };
        (encode(db_split)?, encode(query_split)?)
    };
    if topk > database.len() {
        return Err(CliError::config(format!(
            "key `topk`: {topk} exceeds the database size {}",
            database.len()
        )));
    }
    let (codes, labels) = database.into_iter().unzip();
    let index = RetrievalIndex::new(codes, labels)?;
    let report = evaluate_map(&index, &queries, topk)?;
    write(&cfg.report_dir().join("retrieval.jsonl"), &report.to_jsonl())?;
    print!("{}", json_line(&report.summary));
    Ok(())
}

#[derive(Serialize)]
struct RuleReport {
    rule: OodRule,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    calibration_samples: usize,
    precision: f64,
    recall: f64,
    f1: f64,
}

fn rule_report(rule: OodRule, model: Option<ThresholdModel>, verdicts: &[OodVerdict], truth: &[(usize, bool)]) -> CliResult<RuleReport> {
    let score = llc_core::ood::evaluate_f1(verdicts, truth)?;
    Ok(RuleReport {
        rule,
        threshold: model.map(|m| m.threshold),
        calibration_samples: model.map_or(0, |m| m.calibration_samples),
        precision: score.precision,
        recall: score.recall,
        f1: score.f1,
    })
}

/// The in-distribution test split followed by the OOD dataset's test split
/// (all of it when it has none); instance ids count through both in order.
pub fn ood(cfg: &RunConfig) -> CliResult<()> {
    let head = match cfg.raw("score_source") {
        "hamming" => false,
        "head" => true,
        other => return Err(CliError::config(format!("key `score_source`: expected hamming or head, got `{other}`"))),
    };
    let samples: usize = cfg.get("conservative_samples")?;
    let mut inputs = vec!["dataset", "ood_dataset", "checkpoint", "codebook"];
    if head {
        inputs.push("phase1_checkpoint");
    }
    cfg.require_inputs(&inputs)?;
    let data = load_dataset(cfg, "dataset")?;
    let ood_data = load_dataset(cfg, "ood_dataset")?;
    let model = LlcModel::load_checkpoint(&cfg.path("checkpoint"))?;
    let codebook = Codebook::load(&cfg.path("codebook"))?;
    check_model_fits(&model, &data, Some(&codebook))?;
    let inside = data.view(Split::Test);
    let outside = match ood_data.view(Split::Test) {
        v if v.is_empty() => ood_data.view_all(),
        v => v,
    };
    if inside.is_empty() || outside.is_empty() {
        return Err(Error::Validation("OOD evaluation needs in-distribution test instances and OOD instances".into()).into());
    }

    let index = DecodeIndex::new(&codebook);
    let codes_in = model.encode(&inside.features)?.codes;
    let codes_out = model.encode(&outside.features)?.codes;
    let (scores_in, scores_out) = if head {
        let p1 = LlcModel::load_checkpoint(&cfg.path("phase1_checkpoint"))?;
        check_model_fits(&p1, &data, None)?;
        (
            max_softmax_probability(&p1.class_scores(&inside.features)?),
            max_softmax_probability(&p1.class_scores(&outside.features)?),
        )
    } else {
        let score = |codes: &[BitCode]| -> CliResult<Vec<f64>> {
            codes.iter().map(|c| Ok(hamming_max_probability(&index.distances(c)?))).collect()
        };
        (score(&codes_in)?, score(&codes_out)?)
    };

    let truth: Vec<(usize, bool)> = (0..codes_in.len())
        .map(|i| (i, false))
        .chain((0..codes_out.len()).map(|i| (codes_in.len() + i, true)))
        .collect();
    let all_codes: Vec<&BitCode> = codes_in.iter().chain(&codes_out).collect();
    let all_scores: Vec<f64> = scores_in.iter().chain(&scores_out).copied().collect();

    let detector = ExactMissDetector::from_index(index);
    let exact: Vec<OodVerdict> = all_codes
        .iter()
        .enumerate()
        .map(|(i, c)| detector.verdict(i, c))
        .collect::<llc_core::Result<_>>()?;
    let tuned = tune_threshold_max_f1(&scores_in, &scores_out)?;
    let tuned_verdicts = tuned.verdicts(OodRule::TunedThreshold, &all_scores);
    let conservative = conservative_threshold(&scores_out[..samples.min(scores_out.len())])?;
    let conservative_verdicts = conservative.verdicts(OodRule::ConservativeThreshold, &all_scores);

    let reports = [
        rule_report(OodRule::ExactMiss, None, &exact, &truth)?,
        rule_report(OodRule::TunedThreshold, Some(tuned), &tuned_verdicts, &truth)?,
        rule_report(OodRule::ConservativeThreshold, Some(conservative), &conservative_verdicts, &truth)?,
    ];
    let dir = cfg.report_dir();
    let mut verdicts = verdicts_jsonl(&exact);
    verdicts.push_str(&verdicts_jsonl(&tuned_verdicts));
    verdicts.push_str(&verdicts_jsonl(&conservative_verdicts));
    write(&dir.join("ood_verdicts.jsonl"), &verdicts)?;
    write(&dir.join("ood_sweep.csv"), &sweep_csv(&f1_sweep(&scores_in, &scores_out)?))?;
    let summary: String = reports.iter().map(json_line).collect();
    write(&dir.join("ood_report.jsonl"), &summary)?;
    print!("{summary}");
    Ok(())
}

pub fn taxonomy(cfg: &RunConfig) -> CliResult<()> {
    let linkage: Linkage = cfg.get("linkage")?;
    let split_bit: Option<usize> = if cfg.is_set("split_bit") { Some(cfg.get("split_bit")?) } else { None };
    let mut inputs = vec!["dataset", "codebook"];
    if split_bit.is_some() {
        inputs.push("checkpoint");
    }
    cfg.require_inputs(&inputs)?;
    let data = load_dataset(cfg, "dataset")?;
    let codebook = Codebook::load(&cfg.path("codebook"))?;
    if codebook.len() != data.num_classes() {
        return Err(Error::Dimension {
            context: "codebook classes vs dataset classes",
            left: codebook.len().to_string(),
            right: data.num_classes().to_string(),
        }
        .into());
    }
    let dir = cfg.report_dir();
    let dendrogram = agglomerate(&codebook, linkage)?;
    write(&dir.join("taxonomy.nwk"), &dendrogram.to_newick(&codebook_names(&codebook)))?;
    let codes = inner_product_heatmap(&codebook.sign_matrix(), HeatSource::BitCodes);
    let real = inner_product_heatmap(&data.class_means(Split::Train), HeatSource::RealRepresentations);
    write(&dir.join("heatmap_codes.csv"), &codes.to_csv())?;
    write(&dir.join("heatmap_real.csv"), &real.to_csv())?;
    let spearman = if codebook.len() >= 3 {
        let report = spearman_rowwise(&codes, &real)?;
        write(&dir.join("spearman.csv"), &report.to_csv())?;
        Some(report.mean)
    } else {
        log::warn!("fewer than 3 classes; Spearman table skipped");
        None
    };
    if let Some(bit) = split_bit {
        let model = LlcModel::load_checkpoint(&cfg.path("checkpoint"))?;
        check_model_fits(&model, &data, Some(&codebook))?;
        let view = data.view(Split::Test);
        let split = bit_split_report(&model, &view.features, &view.indices, bit)?;
        write(&dir.join("bit_split.json"), &json_line(&split))?;
    }
    #[derive(Serialize)]
    struct Summary {
        classes: usize,
        top_split: (Vec<usize>, Vec<usize>),
        spearman_mean: Option<f64>,
    }
    print!(
        "{}",
        json_line(&Summary {
            classes: codebook.len(),
            top_split: dendrogram.top_split(),
            spearman_mean: spearman,
        })
    );
    Ok(())
}
