//! Embeddings from co-occurrence counts.
//!
//! Counts are turned into a shifted positive PMI matrix with context
//! smoothing, factorized by a truncated SVD and row-normalized onto the sphere.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{norm, svd, DenseMatrix};
use crate::spherical_regression::SphericalMatrix;

pub const DEFAULT_SHIFT: u32 = 10;
pub const DEFAULT_SMOOTHING: f64 = 0.75;
/// `max |M − Mᵀ|` below this selects the symmetric factorization.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Singular values below this fraction of the largest do not count toward rank.
pub const RANK_REL_TOL: f64 = 1e-10;

/// Sparse co-occurrence counts `#(w, c)` over a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceTable {
    vocab: Vec<String>,
    /// `(w, c, count)` with duplicates merged, sorted by `(w, c)`.
    counts: Vec<(usize, usize, u64)>,
    total: u64,
}

impl CooccurrenceTable {
    pub fn new(vocab: Vec<String>, triplets: Vec<(usize, usize, u64)>) -> Result<Self> {
        let v = vocab.len();
        let mut merged: HashMap<(usize, usize), u64> = HashMap::new();
        for (w, c, n) in triplets {
            if w >= v || c >= v {
                return Err(invalid(
                    "cooccurrence",
                    format!("pair ({w}, {c}) is outside the vocabulary of {v} items"),
                ));
            }
            *merged.entry((w, c)).or_default() += n;
        }
        let mut counts: Vec<(usize, usize, u64)> = merged
            .into_iter()
            .filter(|&(_, n)| n > 0)
            .map(|((w, c), n)| (w, c, n))
            .collect();
        counts.sort_unstable();
        let total = counts.iter().map(|t| t.2).sum();
        if total == 0 {
            return Err(invalid("cooccurrence", "total count |D| must be positive"));
        }
        Ok(Self {
            vocab,
            counts,
            total,
        })
    }

    /// Reads `item_i<TAB>item_j<TAB>count` lines. Blank lines and lines
    /// starting with `#` are skipped. Without a vocabulary, items are indexed in
    /// order of first appearance.
    pub fn from_tsv<R: BufRead>(reader: R, vocabulary: Option<&[String]>) -> Result<Self> {
        let mut vocab: Vec<String> = vocabulary.map(<[String]>::to_vec).unwrap_or_default();
        let mut index: HashMap<String, usize> =
            vocab.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        if index.len() != vocab.len() {
            return Err(invalid("vocabulary", "duplicate item in vocabulary"));
        }
        let fixed = vocabulary.is_some();
        let mut triplets = Vec::new();
        for (ln, line) in reader.lines().enumerate() {
            let line_no = ln + 1;
            let line = line?;
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let count: u64 = fields[2].trim().parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("count {:?} is not a nonnegative integer", fields[2]),
            })?;
            let mut lookup = |item: &str| -> Result<usize> {
                if let Some(&i) = index.get(item) {
                    return Ok(i);
                }
                if fixed {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("item {item:?} is not in the vocabulary"),
                    });
                }
                vocab.push(item.to_string());
                index.insert(item.to_string(), vocab.len() - 1);
                Ok(vocab.len() - 1)
            };
            let w = lookup(fields[0])?;
            let c = lookup(fields[1])?;
            triplets.push((w, c, count));
        }
        Self::new(vocab, triplets)
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn counts(&self) -> &[(usize, usize, u64)] {
        &self.counts
    }

    /// `|D| = Σ #(w, c)`.
    pub fn total(&self) -> u64 {
        self.total
    }
}

/// Shifted positive PMI matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SppmiMatrix {
    matrix: DenseMatrix,
    vocab: Vec<String>,
    pub shift: u32,
    pub smoothing: f64,
    /// Items with a zero row or column marginal.
    pub zero_marginal: Vec<usize>,
}

impl SppmiMatrix {
    /// Wraps an existing nonnegative square matrix.
    pub fn from_matrix(matrix: DenseMatrix, vocab: Vec<String>, shift: u32, smoothing: f64) -> Result<Self> {
        if matrix.rows() != matrix.cols() || matrix.rows() != vocab.len() {
            return Err(Error::DimensionMismatch {
                context: "SppmiMatrix::from_matrix",
                expected: format!("{0}x{0}", vocab.len()),
                got: format!("{}x{}", matrix.rows(), matrix.cols()),
            });
        }
        if matrix.data().iter().any(|&v| v < 0.0) {
            return Err(invalid("sppmi", "entries must be nonnegative"));
        }
        let zero_marginal = (0..matrix.rows())
            .filter(|&i| matrix.row(i).iter().all(|&v| v == 0.0) || matrix.column(i).iter().all(|&v| v == 0.0))
            .collect();
        Ok(Self {
            matrix,
            vocab,
            shift,
            smoothing,
            zero_marginal,
        })
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }
}

/// `max(log(#(w,c) / (Σ_c' #(w,c') · (Σ_w' #(w',c) / |D|)^α)) − log k, 0)`.
pub fn build_sppmi(table: &CooccurrenceTable, k: u32, alpha: f64) -> Result<SppmiMatrix> {
    if k < 1 {
        return Err(invalid("k", "shift must be at least 1"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(invalid("alpha", format!("smoothing must lie in (0, 1], got {alpha}")));
    }
    let v = table.vocab.len();
    let mut row_sum = vec![0u64; v];
    let mut col_sum = vec![0u64; v];
    for &(w, c, n) in &table.counts {
        row_sum[w] += n;
        col_sum[c] += n;
    }
    let ln_d = (table.total as f64).ln();
    let ln_k = (k as f64).ln();
    let mut m = DenseMatrix::zeros(v, v);
    for &(w, c, n) in &table.counts {
        // grouped so that α = 1 is symmetric under (w, c) ↔ (c, w) bit for bit
        let denom = (row_sum[w] as f64).ln() + alpha * (col_sum[c] as f64).ln();
        let pmi = (n as f64).ln() - denom + alpha * ln_d;
        m[(w, c)] = (pmi - ln_k).max(0.0);
    }
    let zero_marginal = (0..v).filter(|&i| row_sum[i] == 0 || col_sum[i] == 0).collect();
    Ok(SppmiMatrix {
        matrix: m,
        vocab: table.vocab.clone(),
        shift: k,
        smoothing: alpha,
        zero_marginal,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedItem {
    pub index: usize,
    pub item: String,
    pub reason: String,
}

/// Unit-norm embedding rows for the retained items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub items: Vec<String>,
    /// Row `r` embeds `items[r]`; original vocabulary indices in `source_index`.
    pub vectors: SphericalMatrix,
    pub source_index: Vec<usize>,
    pub excluded: Vec<ExcludedItem>,
    pub singular_values: Vec<f64>,
    pub symmetric: bool,
}

/// Rank-`p` embedding: `U_p √Σ_p` for symmetric input, `U_p √Σ_p + V_p √Σ_p`
/// otherwise, followed by row normalization. Items whose row vanishes are
/// listed in `excluded`.
pub fn embed(sppmi: &SppmiMatrix, p: usize) -> Result<Embedding> {
    let m = &sppmi.matrix;
    let v = m.rows();
    if p == 0 || p > v {
        return Err(invalid("dim", format!("need 1 <= dim <= |V| = {v}, got {p}")));
    }
    let dec = svd(m)?;
    let effective = dec.effective_rank(RANK_REL_TOL);
    if effective < p {
        return Err(Error::InsufficientRank {
            requested: p,
            effective,
        });
    }
    let symmetric = m.is_symmetric(SYMMETRY_TOL);
    let roots: Vec<f64> = dec.singular_values[..p].iter().map(|s| s.sqrt()).collect();
    let mut raw = DenseMatrix::zeros(v, p);
    for i in 0..v {
        let dst = raw.row_mut(i);
        for (j, r) in roots.iter().enumerate() {
            let mut val = dec.u[(i, j)];
            if !symmetric {
                val += dec.vt[(j, i)];
            }
            dst[j] = val * r;
        }
    }
    let top = raw.row_iter().map(norm).fold(0.0, f64::max);
    let mut keep = Vec::new();
    let mut excluded = Vec::new();
    for i in 0..v {
        let nr = norm(raw.row(i));
        if nr > RANK_REL_TOL * top && nr > 0.0 {
            keep.push(i);
        } else {
            let reason = if sppmi.zero_marginal.contains(&i) {
                "zero marginal count"
            } else {
                "zero embedding vector"
            };
            excluded.push(ExcludedItem {
                index: i,
                item: sppmi.vocab[i].clone(),
                reason: reason.into(),
            });
        }
    }
    let kept = raw.select_rows(&keep);
    let vectors = crate::linalg::row_normalize(&kept)?;
    Ok(Embedding {
        items: keep.iter().map(|&i| sppmi.vocab[i].clone()).collect(),
        vectors,
        source_index: keep,
        excluded,
        singular_values: dec.singular_values[..p].to_vec(),
        symmetric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("item{i}")).collect()
    }

    #[test]
    fn uniform_two_item_table_is_zero() {
        let t = CooccurrenceTable::new(names(2), vec![(0, 0, 1), (0, 1, 1), (1, 0, 1), (1, 1, 1)]).unwrap();
        let s = build_sppmi(&t, 1, 1.0).unwrap();
        assert!(s.matrix().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_item_hand_values() {
        // rows: a: 4 to b, 1 to c ; b: 4 to a ; c: 1 to a ; |D| = 10
        let t = CooccurrenceTable::new(
            names(3),
            vec![(0, 1, 4), (0, 2, 1), (1, 0, 4), (2, 0, 1)],
        )
        .unwrap();
        let s = build_sppmi(&t, 1, 1.0).unwrap();
        // PMI(a,b) = ln(4·10 / (5·4)) = ln 2; PMI(b,a) = ln(4·10/(4·5)) = ln 2
        assert_relative_eq!(s.matrix()[(0, 1)], 2f64.ln(), max_relative = 1e-12);
        assert_relative_eq!(s.matrix()[(1, 0)], 2f64.ln(), max_relative = 1e-12);
        // PMI(a,c) = ln(1·10/(5·1)) = ln 2
        assert_relative_eq!(s.matrix()[(0, 2)], 2f64.ln(), max_relative = 1e-12);
        assert_eq!(s.matrix()[(0, 0)], 0.0);
        assert_eq!(s.matrix()[(1, 2)], 0.0);
        // a shift of 2 cancels ln 2 exactly
        let s2 = build_sppmi(&t, 2, 1.0).unwrap();
        assert!(s2.matrix().max_abs() < 1e-15);
        // smoothing: ln(4 / (5·(4/10)^0.75))
        let s3 = build_sppmi(&t, 1, 0.75).unwrap();
        let expect = (4.0f64 / (5.0 * 0.4f64.powf(0.75))).ln();
        assert!((s3.matrix()[(0, 1)] - expect).abs() < 1e-12);
    }

    #[test]
    fn parameter_validation() {
        let t = CooccurrenceTable::new(names(2), vec![(0, 1, 3)]).unwrap();
        assert!(build_sppmi(&t, DEFAULT_SHIFT, DEFAULT_SMOOTHING).is_ok());
        assert!(build_sppmi(&t, 0, 0.75).is_err());
        assert!(build_sppmi(&t, 10, 0.0).is_err());
        assert!(build_sppmi(&t, 10, 1.5).is_err());
        assert!(CooccurrenceTable::new(names(2), vec![(0, 1, 0)]).is_err());
        assert!(CooccurrenceTable::new(names(2), vec![(0, 2, 1)]).is_err());
    }

    #[test]
    fn tsv_parsing() {
        let text = "# header\na\tb\t3\nb\ta\t3\n\na\tc\t1\n";
        let t = CooccurrenceTable::from_tsv(text.as_bytes(), None).unwrap();
        assert_eq!(t.vocab(), ["a", "b", "c"]);
        assert_eq!(t.total(), 7);
        let err = CooccurrenceTable::from_tsv("a\tb\t3\na\tb\n".as_bytes(), None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        let err = CooccurrenceTable::from_tsv("a\tb\t-1\n".as_bytes(), None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let vocab: Vec<String> = vec!["z".into(), "a".into(), "b".into()];
        let t = CooccurrenceTable::from_tsv("a\tb\t2\n".as_bytes(), Some(&vocab)).unwrap();
        assert_eq!(t.counts(), &[(1, 2, 2)]);
        let s = build_sppmi(&t, 1, 1.0).unwrap();
        assert_eq!(s.zero_marginal, [0, 1, 2]);
        assert!(CooccurrenceTable::from_tsv("q\tb\t2\n".as_bytes(), Some(&vocab)).is_err());
    }

    #[test]
    fn identity_embeds_to_orthogonal_rows() {
        let s = SppmiMatrix::from_matrix(DenseMatrix::identity(4), names(4), 1, 1.0).unwrap();
        let e = embed(&s, 4).unwrap();
        assert!(e.symmetric);
        for i in 0..4 {
            for j in 0..4 {
                let c = dot(e.vectors.row(i), e.vectors.row(j));
                assert!((c - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_deficiency_reports_effective_rank() {
        let mut m = DenseMatrix::zeros(4, 4);
        m[(0, 0)] = 1.0;
        m[(1, 1)] = 2.0;
        let s = SppmiMatrix::from_matrix(m, names(4), 1, 1.0).unwrap();
        assert_eq!(
            embed(&s, 3).unwrap_err(),
            Error::InsufficientRank { requested: 3, effective: 2 }
        );
        let e = embed(&s, 2).unwrap();
        assert_eq!(e.items, ["item0", "item1"]);
        assert_eq!(e.excluded.len(), 2);
        assert_eq!(e.excluded[0].reason, "zero marginal count");
    }

    fn community_table() -> CooccurrenceTable {
        // two communities of 6 items; dense within, nothing across
        let mut trip = Vec::new();
        for block in 0..2 {
            for a in 0..6 {
                for b in 0..6 {
                    if a != b {
                        let (i, j) = (block * 6 + a, block * 6 + b);
                        trip.push((i, j, 5 + ((a * 7 + b * 3 + block) % 11) as u64));
                    }
                }
            }
        }
        CooccurrenceTable::new(names(12), trip).unwrap()
    }

    #[test]
    fn communities_separate_in_embedding() {
        let s = build_sppmi(&community_table(), 1, 1.0).unwrap();
        let e = embed(&s, 4).unwrap();
        let mut within = Vec::new();
        let mut across = Vec::new();
        for i in 0..12 {
            for j in (i + 1)..12 {
                let c = dot(e.vectors.row(i), e.vectors.row(j));
                if i / 6 == j / 6 {
                    within.push(c);
                } else {
                    across.push(c);
                }
            }
        }
        let median = |v: &mut Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        assert!(median(&mut across) < median(&mut within));
    }

    #[test]
    fn smoothing_breaks_symmetry_and_uses_both_factors() {
        let t = community_table();
        let sym = build_sppmi(&symmetrized(&t), 1, 0.75).unwrap();
        let e = embed(&sym, 3).unwrap();
        // unequal marginals make the smoothed matrix asymmetric
        assert!(!sym.matrix().is_symmetric(SYMMETRY_TOL));
        assert!(!e.symmetric);
        assert!(e.vectors.as_matrix().row_iter().all(|r| (norm(r) - 1.0).abs() < 1e-12));
    }

    fn symmetrized(t: &CooccurrenceTable) -> CooccurrenceTable {
        let mut trip = Vec::new();
        for &(w, c, n) in t.counts() {
            trip.push((w, c, n));
            trip.push((c, w, n));
        }
        CooccurrenceTable::new(t.vocab().to_vec(), trip).unwrap()
    }

    #[test]
    fn reconstruction_error_is_nonincreasing_in_rank() {
        let s = build_sppmi(&community_table(), 1, 0.75).unwrap();
        let dec = svd(s.matrix()).unwrap();
        let mut prev = f64::INFINITY;
        for p in 1..=dec.effective_rank(RANK_REL_TOL) {
            let tail: f64 = dec.singular_values[p..].iter().map(|v| v * v).sum();
            let mut approx_m = DenseMatrix::zeros(12, 12);
            for i in 0..12 {
                for j in 0..12 {
                    approx_m[(i, j)] = (0..p).map(|r| dec.u[(i, r)] * dec.singular_values[r] * dec.vt[(r, j)]).sum();
                }
            }
            let err = s.matrix().sub(&approx_m).unwrap().frobenius_norm();
            assert!(err <= prev + 1e-12);
            assert!((err * err - tail).abs() < 1e-9);
            prev = err;
        }
    }

    proptest! {
        #[test]
        fn symmetric_counts_give_symmetric_sppmi_at_unit_smoothing(
            counts in prop::collection::vec(0u64..20, 15),
            k in 1u32..4,
        ) {
            // upper triangle (with diagonal) of a 5×5 table
            let mut trip = Vec::new();
            let mut idx = 0;
            for i in 0..5 {
                for j in i..5 {
                    trip.push((i, j, counts[idx]));
                    if i != j {
                        trip.push((j, i, counts[idx]));
                    }
                    idx += 1;
                }
            }
            prop_assume!(counts.iter().any(|&c| c > 0));
            let t = CooccurrenceTable::new(names(5), trip).unwrap();
            let s = build_sppmi(&t, k, 1.0).unwrap();
            let m = s.matrix();
            prop_assert!(m.data().iter().all(|&v| v >= 0.0));
            for i in 0..5 {
                for j in 0..5 {
                    prop_assert_eq!(m[(i, j)], m[(j, i)]);
                }
            }
        }
    }
}
