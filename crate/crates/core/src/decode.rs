//! Classification by exact code lookup and by minimum Hamming distance.

use std::collections::HashMap;

use serde::Serialize;

use crate::bitcode::{BitCode, Codebook};
use crate::error::{Error, Result};
use crate::model::LlcModel;

/// Lookup structures built once from a [`Codebook`].
#[derive(Debug, Clone)]
pub struct DecodeIndex {
    k: usize,
    table: HashMap<BitCode, Vec<usize>>,
    flat: Vec<BitCode>,
}

impl DecodeIndex {
    pub fn new(codebook: &Codebook) -> Self {
        let mut table: HashMap<BitCode, Vec<usize>> = HashMap::with_capacity(codebook.len());
        for (class, code) in codebook.codes().iter().enumerate() {
            table.entry(code.clone()).or_default().push(class);
        }
        Self {
            k: codebook.k(),
            table,
            flat: codebook.codes().to_vec(),
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn classes(&self) -> usize {
        self.flat.len()
    }

    fn check(&self, code: &BitCode) -> Result<()> {
        if code.len() != self.k {
            return Err(Error::len("decode code length", self.k, code.len()));
        }
        Ok(())
    }

    /// Every class whose code equals `code`, ascending; empty when none does.
    pub fn exact_decode(&self, code: &BitCode) -> Result<&[usize]> {
        self.check(code)?;
        Ok(self.table.get(code).map_or(&[], Vec::as_slice))
    }

    /// Nearest class code, lowest class id on ties, with its distance.
    pub fn mhd_decode_with_distance(&self, code: &BitCode) -> Result<(usize, u32)> {
        self.check(code)?;
        let mut best = (usize::MAX, u32::MAX);
        for (class, c) in self.flat.iter().enumerate() {
            let d = c.hamming_unchecked(code);
            if d < best.1 {
                best = (class, d);
                if d == 0 {
                    break;
                }
            }
        }
        if best.0 == usize::MAX {
            return Err(Error::Validation("decoding against an empty codebook".into()));
        }
        Ok(best)
    }

    pub fn mhd_decode(&self, code: &BitCode) -> Result<usize> {
        Ok(self.mhd_decode_with_distance(code)?.0)
    }

    /// Hamming distance from `code` to every class code.
    pub fn distances(&self, code: &BitCode) -> Result<Vec<u32>> {
        self.check(code)?;
        Ok(self.flat.iter().map(|c| c.hamming_unchecked(code)).collect())
    }
}

/// Decoding outcome for one instance (one line of the per-instance dump).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceDecode {
    pub instance_id: usize,
    pub code: String,
    pub label: usize,
    pub ed_result: Vec<usize>,
    pub mhd_result: usize,
    pub bits_correct: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationEval {
    pub n: usize,
    pub ed_accuracy: f64,
    pub mhd_accuracy: f64,
    pub mean_bits_correct: f64,
    #[serde(skip)]
    pub per_instance: Vec<InstanceDecode>,
}

impl ClassificationEval {
    pub fn per_instance_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.per_instance {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Scores already-computed instance codes. An ED hit requires the matched
/// set to be exactly `{label}`.
pub fn evaluate_codes(
    codebook: &Codebook,
    codes: &[BitCode],
    labels: &[usize],
    instance_ids: &[usize],
) -> Result<ClassificationEval> {
    if codes.len() != labels.len() || instance_ids.len() != labels.len() {
        return Err(Error::len("evaluate codes/labels", codes.len(), labels.len()));
    }
    let index = DecodeIndex::new(codebook);
    let mut per_instance = Vec::with_capacity(codes.len());
    let (mut ed_hits, mut mhd_hits, mut bits) = (0usize, 0usize, 0u64);
    for ((code, &label), &id) in codes.iter().zip(labels).zip(instance_ids) {
        if label >= codebook.len() {
            return Err(Error::Index {
                context: "evaluation label",
                index: label,
                bound: codebook.len(),
            });
        }
        let ed = index.exact_decode(code)?.to_vec();
        let mhd = index.mhd_decode(code)?;
        let correct = codebook.k() as u32 - codebook.code(label).hamming_unchecked(code);
        ed_hits += usize::from(ed.as_slice() == [label]);
        mhd_hits += usize::from(mhd == label);
        bits += u64::from(correct);
        per_instance.push(InstanceDecode {
            instance_id: id,
            code: code.to_bitstring(),
            label,
            ed_result: ed,
            mhd_result: mhd,
            bits_correct: correct,
        });
    }
    let n = codes.len();
    let denom = n.max(1) as f64;
    Ok(ClassificationEval {
        n,
        ed_accuracy: ed_hits as f64 / denom,
        mhd_accuracy: mhd_hits as f64 / denom,
        mean_bits_correct: bits as f64 / denom,
        per_instance,
    })
}

/// Encodes `features` with `model` and scores ED/MHD accuracy against `codebook`.
pub fn evaluate_classification(
    model: &LlcModel,
    codebook: &Codebook,
    features: &crate::diffcore::DenseMatrix,
    labels: &[usize],
    instance_ids: &[usize],
) -> Result<ClassificationEval> {
    if model.bits() != codebook.k() {
        return Err(Error::len("model bits vs codebook k", model.bits(), codebook.k()));
    }
    let encoded = model.encode(features)?;
    evaluate_codes(codebook, &encoded.codes, labels, instance_ids)
}
