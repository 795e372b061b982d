//! WebAssembly bindings for the static demo page. Each export takes plain
//! arguments and returns a JSON string; the `*_json` functions hold the
//! logic so it can be tested natively.

use llc_core::analysis::{agglomerate, codebook_names, inner_product_heatmap, spearman_rowwise, HeatSource, Linkage};
use llc_core::bitcode::{BitCode, Codebook};
use llc_core::data::{generate_hierarchical, Split, SyntheticSpec};
use llc_core::decode::DecodeIndex;
use llc_core::ood::ExactMissDetector;
use llc_core::retrieval::{average_precision_corrected, average_precision_reported};
use llc_core::train::{run_llc, TrainConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("demo output serializes")
}

#[derive(Serialize)]
struct ApComparison {
    k: usize,
    relevant_retrieved: usize,
    corrected: f64,
    reported: f64,
}

/// `relevance` is a string of 0/1 characters (separators ignored).
pub fn average_precision_json(relevance: &str, total_relevant: usize) -> Result<String, String> {
    let rels: Vec<u8> = relevance
        .chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            other => Err(format!("unexpected `{other}` in relevance list")),
        })
        .collect::<Result<_, _>>()?;
    let corrected = average_precision_corrected(&rels, total_relevant).map_err(|e| e.to_string())?;
    let reported = average_precision_reported(&rels, total_relevant).map_err(|e| e.to_string())?;
    Ok(to_json(&ApComparison {
        k: rels.len(),
        relevant_retrieved: rels.iter().map(|&r| usize::from(r)).sum(),
        corrected,
        reported,
    }))
}

#[derive(Serialize)]
struct TrainedHierarchy {
    classes: usize,
    bits: usize,
    unique_codes: usize,
    test_ed_accuracy: f64,
    test_mhd_accuracy: f64,
    codebook: Vec<String>,
    codebook_text: String,
    newick: String,
    heatmap_codes: Vec<Vec<f64>>,
    heatmap_real: Vec<Vec<f64>>,
    spearman_mean: Option<f64>,
    first_branch: Vec<usize>,
}

pub fn train_hierarchy_json(depth: usize, branching: usize, bits: usize, noise: f64, seed: u64) -> Result<String, String> {
    let spec = SyntheticSpec {
        seed,
        depth,
        branching,
        noise_scale: noise,
        samples_per_class: 80,
        ..SyntheticSpec::default()
    };
    if spec.num_classes() > 64 {
        return Err(format!("{} classes is too many for the demo (limit 64)", spec.num_classes()));
    }
    let data = generate_hierarchical(&spec).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        bits,
        hidden: vec![32],
        phase1_epochs: 30,
        phase2_epochs: 10,
        batch_size: 64,
        seed,
        ..TrainConfig::default()
    };
    let out = run_llc(&data, &cfg).map_err(|e| e.to_string())?;
    let book = &out.codebook;
    let summary = out.report.summary.as_ref().ok_or("training produced no summary")?;
    let test = summary.test.as_ref().ok_or("no test split")?;
    let rows = |h: &llc_core::analysis::HeatMatrix| h.values.row_iter().map(<[f64]>::to_vec).collect::<Vec<_>>();
    let codes_heat = inner_product_heatmap(&book.sign_matrix(), HeatSource::BitCodes);
    let real_heat = inner_product_heatmap(&data.class_means(Split::Train), HeatSource::RealRepresentations);
    let spearman_mean = if book.len() >= 3 {
        Some(spearman_rowwise(&codes_heat, &real_heat).map_err(|e| e.to_string())?.mean)
    } else {
        None
    };
    let tree = data.tree().ok_or("synthetic data has a tree")?;
    let newick = agglomerate(book, Linkage::Average)
        .map_err(|e| e.to_string())?
        .to_newick(&codebook_names(book));
    Ok(to_json(&TrainedHierarchy {
        classes: book.len(),
        bits: book.k(),
        unique_codes: book.unique_count(),
        test_ed_accuracy: test.ed_accuracy,
        test_mhd_accuracy: test.mhd_accuracy,
        codebook: book.codes().iter().map(BitCode::to_bitstring).collect(),
        codebook_text: book.to_text(),
        newick,
        heatmap_codes: rows(&codes_heat),
        heatmap_real: rows(&real_heat),
        spearman_mean,
        first_branch: (0..book.len()).map(|c| tree.top_branch(c)).collect(),
    }))
}

#[derive(Serialize)]
struct DecodeResult {
    exact: Vec<usize>,
    out_of_distribution: bool,
    nearest: usize,
    nearest_distance: u32,
    distances: Vec<u32>,
}

/// Decodes one bit string against a codebook in its text format.
pub fn decode_json(codebook_text: &str, code: &str) -> Result<String, String> {
    let book = Codebook::from_text(codebook_text).map_err(|e| e.to_string())?;
    let code = BitCode::parse_bitstring(code.trim()).map_err(|e| e.to_string())?;
    let index = DecodeIndex::new(&book);
    let exact = index.exact_decode(&code).map_err(|e| e.to_string())?.to_vec();
    let (nearest, nearest_distance) = index.mhd_decode_with_distance(&code).map_err(|e| e.to_string())?;
    Ok(to_json(&DecodeResult {
        out_of_distribution: ExactMissDetector::from_index(index.clone())
            .is_ood(&code)
            .map_err(|e| e.to_string())?,
        exact,
        nearest,
        nearest_distance,
        distances: index.distances(&code).map_err(|e| e.to_string())?,
    }))
}

#[wasm_bindgen]
pub fn average_precision(relevance: &str, total_relevant: usize) -> Result<String, JsValue> {
    average_precision_json(relevance, total_relevant).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn train_hierarchy(depth: usize, branching: usize, bits: usize, noise: f64, seed: u32) -> Result<String, JsValue> {
    train_hierarchy_json(depth, branching, bits, noise, u64::from(seed)).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn decode(codebook_text: &str, code: &str) -> Result<String, JsValue> {
    decode_json(codebook_text, code).map_err(|e| JsValue::from_str(&e))
}
