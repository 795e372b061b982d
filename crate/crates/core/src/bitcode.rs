//! Packed binary codes and the class codebook.
//!
//! Bit `i` of a [`BitCode`] lives in word `i / 64` at position `i % 64`; a set
//! bit is the `+1` component, a clear bit is `-1`. Bits past the code length
//! are always zero so word-wise equality and hashing are exact.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::diffcore::DenseMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitCode {
    len: usize,
    words: Vec<u64>,
}

#[inline]
fn word_count(len: usize) -> usize {
    len.div_ceil(64)
}

impl BitCode {
    /// All components `-1`.
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; word_count(len)],
        }
    }

    /// Packs a `±1` vector. Any other entry is rejected.
    pub fn from_signs(values: &[f64]) -> Result<Self> {
        let mut code = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            if v == 1.0 {
                code.set(i, true);
            } else if v != -1.0 {
                return Err(Error::Validation(format!(
                    "code component {i} is {v}, expected +1 or -1"
                )));
            }
        }
        Ok(code)
    }

    /// Binarizes a real vector with `sign(0) = +1` and packs it.
    pub fn from_real(values: &[f64]) -> Self {
        let mut code = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            if v >= 0.0 {
                code.set(i, true);
            }
        }
        code
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut code = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            code.set(i, b);
        }
        code
    }

    /// Builds a code from the low `len` bits of `value` (bit 0 first).
    pub fn from_u64(value: u64, len: usize) -> Self {
        assert!(len <= 64, "from_u64 supports at most 64 bits");
        let mut code = Self::zeros(len);
        if len > 0 {
            let mask = if len == 64 { u64::MAX } else { (1u64 << len) - 1 };
            code.words[0] = value & mask;
        }
        code
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// `true` when component `i` is `+1`.
    #[inline]
    pub fn bit(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    #[inline]
    fn set(&mut self, i: usize, value: bool) {
        let mask = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn to_signs(&self) -> Vec<f64> {
        (0..self.len)
            .map(|i| if self.bit(i) { 1.0 } else { -1.0 })
            .collect()
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    /// Number of differing components.
    pub fn hamming(&self, other: &BitCode) -> Result<u32> {
        if self.len != other.len {
            return Err(Error::len("hamming code length", self.len, other.len));
        }
        Ok(self.hamming_unchecked(other))
    }

    #[inline]
    pub(crate) fn hamming_unchecked(&self, other: &BitCode) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    /// The first `m` components.
    pub fn prefix(&self, m: usize) -> Result<BitCode> {
        if m > self.len {
            return Err(Error::Validation(format!(
                "prefix length {m} exceeds code length {}",
                self.len
            )));
        }
        let mut words = self.words[..word_count(m)].to_vec();
        if !m.is_multiple_of(64) {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << (m % 64)) - 1;
            }
        }
        Ok(BitCode { len: m, words })
    }

    /// `'1'` for `+1`, `'0'` for `-1`, component 0 first.
    pub fn to_bitstring(&self) -> String {
        (0..self.len)
            .map(|i| if self.bit(i) { '1' } else { '0' })
            .collect()
    }

    pub fn parse_bitstring(s: &str) -> Result<BitCode> {
        let mut code = Self::zeros(s.chars().count());
        for (i, ch) in s.chars().enumerate() {
            match ch {
                '1' => code.set(i, true),
                '0' => {}
                other => {
                    return Err(Error::Parse {
                        location: format!("bitstring position {i}"),
                        message: format!("unexpected character {other:?}"),
                    })
                }
            }
        }
        Ok(code)
    }
}

impl fmt::Display for BitCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bitstring())
    }
}

/// Free-function form of [`BitCode::hamming`].
pub fn hamming(a: &BitCode, b: &BitCode) -> Result<u32> {
    a.hamming(b)
}

/// A code shared by two or more classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Collision {
    pub code: BitCode,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UniquenessAudit {
    pub unique_count: usize,
    pub collisions: Vec<Collision>,
}

/// One `k`-bit code per class.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    codes: Vec<BitCode>,
    names: Vec<Option<String>>,
    unique_count: usize,
}

const CODEBOOK_HEADER: &str = "#llc-codebook";

impl Codebook {
    pub fn new(k: usize, codes: Vec<BitCode>) -> Result<Self> {
        if let Some(bad) = codes.iter().find(|c| c.len() != k) {
            return Err(Error::len("codebook code length", k, bad.len()));
        }
        let names = vec![None; codes.len()];
        let mut cb = Self {
            k,
            codes,
            names,
            unique_count: 0,
        };
        cb.unique_count = cb.audit().unique_count;
        Ok(cb)
    }

    /// Signs of each row of an `L x k` real matrix.
    pub fn from_real_rows(matrix: &DenseMatrix) -> Self {
        let codes = matrix.row_iter().map(BitCode::from_real).collect();
        Self::new(matrix.cols(), codes).expect("rows share one length")
    }

    pub fn with_names(mut self, names: Vec<Option<String>>) -> Result<Self> {
        if names.len() != self.codes.len() {
            return Err(Error::len("codebook names", self.codes.len(), names.len()));
        }
        self.names = names;
        Ok(self)
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of classes `L`.
    #[inline]
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    #[inline]
    pub fn codes(&self) -> &[BitCode] {
        &self.codes
    }

    #[inline]
    pub fn code(&self, class: usize) -> &BitCode {
        &self.codes[class]
    }

    pub fn name(&self, class: usize) -> Option<&str> {
        self.names[class].as_deref()
    }

    #[inline]
    pub fn unique_count(&self) -> usize {
        self.unique_count
    }

    pub fn is_unique(&self) -> bool {
        self.unique_count == self.codes.len()
    }

    /// Counts distinct codes and lists every code held by more than one class.
    pub fn audit(&self) -> UniquenessAudit {
        let mut holders: BTreeMap<&BitCode, Vec<usize>> = BTreeMap::new();
        for (class, code) in self.codes.iter().enumerate() {
            holders.entry(code).or_default().push(class);
        }
        let unique_count = holders.len();
        let mut collisions: Vec<Collision> = holders
            .into_iter()
            .filter(|(_, classes)| classes.len() > 1)
            .map(|(code, classes)| Collision {
                code: code.clone(),
                classes,
            })
            .collect();
        collisions.sort_by_key(|c| c.classes[0]);
        UniquenessAudit {
            unique_count,
            collisions,
        }
    }

    /// Codebook made of the first `m` bits of every code, `0 < m <= k`.
    pub fn prefix(&self, m: usize) -> Result<Codebook> {
        if m == 0 || m > self.k {
            return Err(Error::Validation(format!(
                "prefix length {m} outside 1..={}",
                self.k
            )));
        }
        let codes = self
            .codes
            .iter()
            .map(|c| c.prefix(m))
            .collect::<Result<Vec<_>>>()?;
        Codebook::new(m, codes)?.with_names(self.names.clone())
    }

    /// `L x k` matrix of `±1` entries.
    pub fn sign_matrix(&self) -> DenseMatrix {
        let rows: Vec<Vec<f64>> = self.codes.iter().map(BitCode::to_signs).collect();
        if rows.is_empty() {
            return DenseMatrix::zeros(0, self.k);
        }
        DenseMatrix::from_rows(&rows).expect("codes share one length")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{CODEBOOK_HEADER} k={} L={}\n", self.k, self.codes.len());
        for (class, code) in self.codes.iter().enumerate() {
            out.push_str(&class.to_string());
            out.push('\t');
            out.push_str(&code.to_bitstring());
            if let Some(name) = &self.names[class] {
                out.push('\t');
                out.push_str(name);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Codebook> {
        let mut lines = text.lines().enumerate();
        let (k, l) = match lines.next() {
            Some((_, header)) => parse_header(header)?,
            None => {
                return Err(Error::Parse {
                    location: "line 1".into(),
                    message: "empty codebook file".into(),
                })
            }
        };
        let mut codes: Vec<Option<BitCode>> = vec![None; l];
        let mut names: Vec<Option<String>> = vec![None; l];
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let loc = || format!("line {}", lineno + 1);
            let mut fields = line.split('\t');
            let id: usize = fields
                .next()
                .unwrap_or_default()
                .trim()
                .parse()
                .map_err(|e| Error::Parse {
                    location: loc(),
                    message: format!("class id: {e}"),
                })?;
            let bits = fields.next().ok_or_else(|| Error::Parse {
                location: loc(),
                message: "missing bitstring".into(),
            })?;
            let code = BitCode::parse_bitstring(bits.trim()).map_err(|e| Error::Parse {
                location: loc(),
                message: e.to_string(),
            })?;
            if code.len() != k {
                return Err(Error::len("codebook code length", k, code.len()));
            }
            if id >= l {
                return Err(Error::Index {
                    context: "codebook class id",
                    index: id,
                    bound: l,
                });
            }
            if codes[id].is_some() {
                return Err(Error::Parse {
                    location: loc(),
                    message: format!("class {id} listed twice"),
                });
            }
            codes[id] = Some(code);
            names[id] = fields.next().map(str::to_string).filter(|s| !s.is_empty());
        }
        let codes = codes
            .into_iter()
            .enumerate()
            .map(|(id, c)| {
                c.ok_or_else(|| Error::Parse {
                    location: "codebook".into(),
                    message: format!("class {id} missing"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Codebook::new(k, codes)?.with_names(names)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Codebook> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn parse_header(line: &str) -> Result<(usize, usize)> {
    let bad = |msg: &str| Error::Parse {
        location: "line 1".into(),
        message: msg.to_string(),
    };
    let mut parts = line.split_whitespace();
    if parts.next() != Some(CODEBOOK_HEADER) {
        return Err(bad("expected `#llc-codebook k=<k> L=<L>` header"));
    }
    let mut k = None;
    let mut l = None;
    for part in parts {
        match part.split_once('=') {
            Some(("k", v)) => k = v.parse().ok(),
            Some(("L", v)) => l = v.parse().ok(),
            _ => return Err(bad(&format!("unexpected header field `{part}`"))),
        }
    }
    match (k, l) {
        (Some(k), Some(l)) => Ok((k, l)),
        _ => Err(bad("header needs numeric k= and L=")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_signs(rng: &mut impl Rng, k: usize) -> Vec<f64> {
        (0..k).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
    }

    fn naive_distance(a: &[f64], b: &[f64]) -> u32 {
        let l1: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
        (l1 / 2.0) as u32
    }

    #[test]
    fn pack_layout_bit_zero_first() {
        let c = BitCode::from_signs(&[1.0, 1.0, -1.0, -1.0]).unwrap();
        assert_eq!(c.to_bitstring(), "1100");
        assert_eq!(c.words(), &[0b0011]);
    }

    #[test]
    fn pack_empty() {
        let c = BitCode::from_signs(&[]).unwrap();
        assert!(c.is_empty());
        assert!(c.words().is_empty());
    }

    #[test]
    fn pack_rejects_non_sign_entries() {
        assert!(matches!(
            BitCode::from_signs(&[1.0, 0.0]),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn round_trip_67_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let v = random_signs(&mut rng, 67);
        assert_eq!(BitCode::from_signs(&v).unwrap().to_signs(), v);
    }

    #[test]
    fn hamming_extremes() {
        let a = BitCode::from_signs(&[1.0; 20]).unwrap();
        let b = BitCode::from_signs(&[-1.0; 20]).unwrap();
        assert_eq!(a.hamming(&a).unwrap(), 0);
        assert_eq!(a.hamming(&b).unwrap(), 20);
    }

    #[test]
    fn hamming_length_mismatch() {
        let a = BitCode::zeros(3);
        let b = BitCode::zeros(4);
        assert!(matches!(a.hamming(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn hamming_matches_unpacked_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &k in &[10, 20, 64, 130] {
            for _ in 0..250 {
                let a = random_signs(&mut rng, k);
                let b = random_signs(&mut rng, k);
                let pa = BitCode::from_signs(&a).unwrap();
                let pb = BitCode::from_signs(&b).unwrap();
                assert_eq!(pa.hamming(&pb).unwrap(), naive_distance(&a, &b));
            }
        }
    }

    #[test]
    fn audit_reports_shared_codes() {
        let codes = vec![
            BitCode::parse_bitstring("1010").unwrap(),
            BitCode::parse_bitstring("0110").unwrap(),
            BitCode::parse_bitstring("1010").unwrap(),
        ];
        let cb = Codebook::new(4, codes).unwrap();
        assert_eq!(cb.unique_count(), 2);
        let audit = cb.audit();
        assert_eq!(audit.collisions.len(), 1);
        assert_eq!(audit.collisions[0].classes, vec![0, 2]);
    }

    #[test]
    fn prefix_full_length_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let codes = (0..10)
            .map(|_| BitCode::from_signs(&random_signs(&mut rng, 12)).unwrap())
            .collect();
        let cb = Codebook::new(12, codes).unwrap();
        assert_eq!(cb.prefix(12).unwrap(), cb);
    }

    #[test]
    fn prefix_forced_collision() {
        let cb = Codebook::new(
            2,
            vec![
                BitCode::from_signs(&[1.0, 1.0]).unwrap(),
                BitCode::from_signs(&[1.0, -1.0]).unwrap(),
            ],
        )
        .unwrap();
        let p = cb.prefix(1).unwrap();
        assert_eq!(p.unique_count(), 1);
        assert!(p.code(0).bit(0) && p.code(1).bit(0));
    }

    #[test]
    fn prefix_matches_per_code_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let raw: Vec<Vec<f64>> = (0..40).map(|_| random_signs(&mut rng, 30)).collect();
        let codes = raw.iter().map(|v| BitCode::from_signs(v).unwrap()).collect();
        let p = Codebook::new(30, codes).unwrap().prefix(20).unwrap();
        for (code, v) in p.codes().iter().zip(&raw) {
            assert_eq!(code.to_signs(), v[..20].to_vec());
        }
    }

    #[test]
    fn prefix_out_of_range() {
        let cb = Codebook::new(3, vec![BitCode::zeros(3)]).unwrap();
        assert!(cb.prefix(0).is_err());
        assert!(cb.prefix(4).is_err());
    }

    #[test]
    fn text_format_round_trip_with_names() {
        let cb = Codebook::new(
            3,
            vec![
                BitCode::parse_bitstring("101").unwrap(),
                BitCode::parse_bitstring("011").unwrap(),
            ],
        )
        .unwrap()
        .with_names(vec![Some("tabby cat".into()), None])
        .unwrap();
        let text = cb.to_text();
        assert_eq!(text, "#llc-codebook k=3 L=2\n0\t101\ttabby cat\n1\t011\n");
        assert_eq!(Codebook::from_text(&text).unwrap(), cb);
    }

    #[test]
    fn text_format_errors() {
        assert!(Codebook::from_text("").is_err());
        assert!(Codebook::from_text("#llc-codebook k=3 L=1\n0\t10\n").is_err());
        assert!(Codebook::from_text("#llc-codebook k=2 L=2\n0\t10\n").is_err());
        assert!(Codebook::from_text("#llc-codebook k=2 L=1\n0\t1x\n").is_err());
        assert!(Codebook::from_text("#codebook k=2 L=1\n0\t10\n").is_err());
    }

    proptest! {
        #[test]
        fn pack_round_trip(bits in proptest::collection::vec(any::<bool>(), 1..=256)) {
            let signs: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
            let code = BitCode::from_signs(&signs).unwrap();
            prop_assert_eq!(code.to_signs(), signs);
            // padding bits stay clear
            if !code.len().is_multiple_of(64) {
                let last = *code.words().last().unwrap();
                prop_assert_eq!(last >> (code.len() % 64), 0);
            }
        }

        #[test]
        fn hamming_is_a_metric(
            seed in any::<u64>(),
            k in 1usize..=130,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = BitCode::from_signs(&random_signs(&mut rng, k)).unwrap();
            let b = BitCode::from_signs(&random_signs(&mut rng, k)).unwrap();
            let c = BitCode::from_signs(&random_signs(&mut rng, k)).unwrap();
            let ab = a.hamming(&b).unwrap();
            prop_assert_eq!(ab, b.hamming(&a).unwrap());
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(a.hamming(&c).unwrap() <= ab + b.hamming(&c).unwrap());
        }
    }
}
