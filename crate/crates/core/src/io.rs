//! Plain-text file formats for matrices, group labels and mapping matrices.
//!
//! Matrix files start with `#rows<TAB>cols` followed by one tab-separated row
//! per line. Values are written in shortest round-trip scientific notation, so
//! a write/read cycle reproduces every `f64` exactly. Parsing never depends on
//! the locale.
//!
//! Group files hold `row_id<TAB>group_id` per line with rows in order and
//! each group contiguous. Mapping files hold one line per row of Π:
//!
//! ```text
//! #rows<TAB>4
//! 0<TAB>identity
//! 1<TAB>permuted<TAB>2
//! 2<TAB>weighted<TAB>1:0.6<TAB>2:0.8
//! 3<TAB>unmapped
//! ```
//!
//! Column indices in `permuted` and `weighted` lines are global row indices.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::mapping_recovery::{BlockMappingMatrix, GroupPartition, RowMap};

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_usize(s: &str, line: usize, what: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(line, format!("expected a non-negative integer for {what}, got {s:?}")))
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("expected a decimal number, got {s:?}")))?;
    if !v.is_finite() {
        return Err(parse_err(line, format!("non-finite value {s:?}")));
    }
    Ok(v)
}

/// Nonblank lines with their 1-based line numbers.
fn content_lines<R: BufRead>(reader: R) -> impl Iterator<Item = Result<(usize, String)>> {
    reader
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|s| (i + 1, s)).map_err(Error::from))
        .filter(|r| !matches!(r, Ok((_, s)) if s.trim().is_empty()))
}

pub fn write_matrix<W: Write>(mut out: W, m: &DenseMatrix) -> Result<()> {
    writeln!(out, "#{}\t{}", m.rows(), m.cols())?;
    let mut line = String::new();
    for row in m.row_iter() {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push('\t');
            }
            line.push_str(&format!("{v:e}"));
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_matrix<R: BufRead>(reader: R) -> Result<DenseMatrix> {
    let mut lines = content_lines(reader);
    let (hl, header) = lines.next().ok_or_else(|| parse_err(1, "empty matrix file"))??;
    let shape = header
        .strip_prefix('#')
        .ok_or_else(|| parse_err(hl, "header must have the form #rows<TAB>cols"))?;
    let dims: Vec<&str> = shape.split('\t').collect();
    if dims.len() != 2 {
        return Err(parse_err(hl, "header must have the form #rows<TAB>cols"));
    }
    let rows = parse_usize(dims[0], hl, "rows")?;
    let cols = parse_usize(dims[1], hl, "cols")?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for item in lines {
        let (ln, text) = item?;
        seen += 1;
        if seen > rows {
            return Err(parse_err(ln, format!("more than the declared {rows} rows")));
        }
        let before = data.len();
        for field in text.split('\t') {
            data.push(parse_f64(field, ln)?);
        }
        if data.len() - before != cols {
            return Err(parse_err(
                ln,
                format!("expected {cols} values, found {}", data.len() - before),
            ));
        }
    }
    if seen != rows {
        return Err(parse_err(seen + 1, format!("declared {rows} rows, found {seen}")));
    }
    DenseMatrix::new(rows, cols, data)
}

pub fn write_groups<W: Write>(mut out: W, partition: &GroupPartition) -> Result<()> {
    for (g, range) in partition.ranges().enumerate() {
        for i in range {
            writeln!(out, "{i}\t{g}")?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a group file. Group ids are arbitrary strings; row ids must run
/// `0, 1, …` in order.
pub fn read_groups<R: BufRead>(reader: R) -> Result<GroupPartition> {
    let mut labels = Vec::new();
    for item in content_lines(reader) {
        let (ln, text) = item?;
        let mut fields = text.split('\t');
        let (Some(row), Some(group), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(ln, "expected row_id<TAB>group_id"));
        };
        let row = parse_usize(row, ln, "row_id")?;
        if row != labels.len() {
            return Err(parse_err(
                ln,
                format!("row ids must run 0, 1, ... in order; expected {}, got {row}", labels.len()),
            ));
        }
        labels.push(group.trim().to_string());
    }
    GroupPartition::from_labels(&labels)
}

pub fn write_mapping<W: Write>(mut out: W, pi: &BlockMappingMatrix) -> Result<()> {
    writeln!(out, "#rows\t{}", pi.n())?;
    for i in 0..pi.n() {
        match pi.row(i) {
            RowMap::Identity => writeln!(out, "{i}\tidentity")?,
            RowMap::Permuted(j) => writeln!(out, "{i}\tpermuted\t{j}")?,
            RowMap::Unmapped => writeln!(out, "{i}\tunmapped")?,
            RowMap::Weighted(_) => {
                let mut line = format!("{i}\tweighted");
                for (j, w) in pi.entries(i) {
                    line.push_str(&format!("\t{j}:{w:e}"));
                }
                writeln!(out, "{line}")?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a mapping file against the partition it was estimated under.
pub fn read_mapping<R: BufRead>(reader: R, partition: &GroupPartition) -> Result<BlockMappingMatrix> {
    let mut lines = content_lines(reader);
    let (hl, header) = lines.next().ok_or_else(|| parse_err(1, "empty mapping file"))??;
    let n = header
        .strip_prefix("#rows\t")
        .ok_or_else(|| parse_err(hl, "header must have the form #rows<TAB>n"))
        .and_then(|s| parse_usize(s, hl, "n"))?;
    if n != partition.n() {
        return Err(Error::DimensionMismatch {
            context: "read_mapping",
            expected: format!("{} rows (groups file)", partition.n()),
            got: format!("{n} rows"),
        });
    }
    let mut rows = Vec::with_capacity(n);
    for item in lines {
        let (ln, text) = item?;
        let fields: Vec<&str> = text.split('\t').collect();
        let i = parse_usize(fields[0], ln, "row")?;
        if i != rows.len() || i >= n {
            return Err(parse_err(ln, format!("expected row {}, got {i}", rows.len())));
        }
        let kind = fields.get(1).copied().unwrap_or("");
        let row = match (kind, fields.len()) {
            ("identity", 2) => RowMap::Identity,
            ("unmapped", 2) => RowMap::Unmapped,
            ("permuted", 3) => RowMap::Permuted(parse_usize(fields[2], ln, "column")?),
            ("weighted", _) => {
                let block = partition.range(partition.group_of(i));
                let mut w = vec![0.0; block.len()];
                for entry in &fields[2..] {
                    let (j, v) = entry
                        .split_once(':')
                        .ok_or_else(|| parse_err(ln, format!("expected column:weight, got {entry:?}")))?;
                    let j = parse_usize(j, ln, "column")?;
                    if !block.contains(&j) {
                        return Err(parse_err(
                            ln,
                            format!("column {j} lies outside the row's group {block:?}"),
                        ));
                    }
                    w[j - block.start] = parse_f64(v, ln)?;
                }
                RowMap::Weighted(w)
            }
            _ => {
                return Err(parse_err(
                    ln,
                    "expected identity, permuted<TAB>j, weighted<TAB>j:w... or unmapped",
                ))
            }
        };
        rows.push(row);
    }
    if rows.len() != n {
        return Err(parse_err(rows.len() + 2, format!("declared {n} rows, found {}", rows.len())));
    }
    BlockMappingMatrix::new(partition.clone(), rows)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn load_matrix(path: &Path) -> Result<DenseMatrix> {
    read_matrix(open(path)?)
}

pub fn save_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    write_matrix(create(path)?, m)
}

pub fn load_groups(path: &Path) -> Result<GroupPartition> {
    read_groups(open(path)?)
}

pub fn save_groups(path: &Path, partition: &GroupPartition) -> Result<()> {
    write_groups(create(path)?, partition)
}

pub fn load_mapping(path: &Path, partition: &GroupPartition) -> Result<BlockMappingMatrix> {
    read_mapping(open(path)?, partition)
}

pub fn save_mapping(path: &Path, pi: &BlockMappingMatrix) -> Result<()> {
    write_mapping(create(path)?, pi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn roundtrip(m: &DenseMatrix) -> DenseMatrix {
        let mut buf = Vec::new();
        write_matrix(&mut buf, m).unwrap();
        read_matrix(buf.as_slice()).unwrap()
    }

    #[test]
    fn matrix_format_is_tab_separated_with_header() {
        let m = DenseMatrix::from_rows(&[vec![1.0, -0.5], vec![1e-300, 3.25]]).unwrap();
        let mut buf = Vec::new();
        write_matrix(&mut buf, &m).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "#2\t2\n1e0\t-5e-1\n1e-300\t3.25e0\n");
    }

    #[test]
    fn matrix_shape_errors_name_the_line() {
        let bad_width = "#2\t2\n1\t2\n3\n";
        assert!(matches!(read_matrix(bad_width.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let short = "#3\t1\n1\n2\n";
        assert!(matches!(read_matrix(short.as_bytes()), Err(Error::Parse { .. })));
        let long = "#1\t1\n1\n2\n";
        assert!(matches!(read_matrix(long.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let comma = "#1\t1\n1,5\n";
        assert!(matches!(read_matrix(comma.as_bytes()), Err(Error::Parse { line: 2, .. })));
        assert!(read_matrix("2\t2\n".as_bytes()).is_err());
    }

    #[test]
    fn groups_roundtrip_and_reject_interleaving() {
        let p = GroupPartition::from_sizes(&[2, 3, 1]).unwrap();
        let mut buf = Vec::new();
        write_groups(&mut buf, &p).unwrap();
        assert_eq!(read_groups(buf.as_slice()).unwrap(), p);

        let named = "0\tcardio\n1\tcardio\n2\trenal\n";
        assert_eq!(read_groups(named.as_bytes()).unwrap().sizes(), vec![2, 1]);

        let split = "0\ta\n1\tb\n2\ta\n";
        match read_groups(split.as_bytes()) {
            Err(Error::InvalidPartition(msg)) => assert!(msg.contains("reorder")),
            other => panic!("expected a partition error, got {other:?}"),
        }
        let skipped = "0\ta\n2\ta\n";
        assert!(matches!(read_groups(skipped.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn mapping_roundtrip_covers_all_row_kinds() {
        let p = GroupPartition::from_sizes(&[3, 2]).unwrap();
        let pi = BlockMappingMatrix::new(
            p.clone(),
            vec![
                RowMap::Identity,
                RowMap::Permuted(2),
                RowMap::Weighted(vec![0.6, 0.0, 0.8]),
                RowMap::Unmapped,
                RowMap::Identity,
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_mapping(&mut buf, &pi).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains("2\tweighted\t0:6e-1\t2:8e-1\n"));
        assert_eq!(read_mapping(buf.as_slice(), &p).unwrap(), pi);
    }

    #[test]
    fn mapping_rejects_columns_outside_the_group() {
        let p = GroupPartition::from_sizes(&[2, 2]).unwrap();
        let text = "#rows\t4\n0\tidentity\n1\tidentity\n2\tweighted\t0:1\n3\tidentity\n";
        assert!(matches!(read_mapping(text.as_bytes(), &p), Err(Error::Parse { line: 4, .. })));
        let wrong_n = "#rows\t3\n";
        assert!(matches!(read_mapping(wrong_n.as_bytes(), &p), Err(Error::DimensionMismatch { .. })));
    }

    proptest! {
        #[test]
        fn matrix_roundtrip_is_exact(
            rows in 1usize..6,
            cols in 1usize..6,
            mantissa in proptest::collection::vec(-1.0f64..1.0, 36),
            scale in -300i32..300,
        ) {
            let m = DenseMatrix::from_fn(rows, cols, |i, j| mantissa[i * 6 + j] * 10f64.powi(scale));
            let back = roundtrip(&m);
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.data().iter().zip(m.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
