//! Feature table files: a `token<TAB>row` index plus a PFT1 `[V×d_a]` matrix.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::pft;
use crate::audio::AudioFeatureTable;
use crate::error::{Error, Result};

pub fn write_feature_table(index_path: impl AsRef<Path>, tensor_path: impl AsRef<Path>, table: &AudioFeatureTable) -> Result<()> {
    let index_path = index_path.as_ref();
    let mut index = String::new();
    for (i, t) in table.tokens().iter().enumerate() {
        writeln!(index, "{t}\t{i}").expect("string write");
    }
    if let Some(dir) = index_path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(index_path, index).map_err(|e| Error::io(index_path, e))?;
    pft::write_tensor(tensor_path, table.matrix())
}

/// Loads and validates a table. `expected_d_a` is the width declared by the
/// manifest, if any.
pub fn load_feature_table(
    dialect: &str,
    index_path: impl AsRef<Path>,
    tensor_path: impl AsRef<Path>,
    expected_d_a: Option<usize>,
) -> Result<AudioFeatureTable> {
    let index_path = index_path.as_ref();
    let matrix = pft::read_tensor(tensor_path.as_ref())?;
    if matrix.rank() != 2 {
        return Err(Error::format(tensor_path.as_ref(), format!("expected a matrix, got shape {:?}", matrix.shape())));
    }
    let (rows, d_a) = (matrix.shape()[0], matrix.shape()[1]);
    if let Some(d) = expected_d_a {
        if d != d_a {
            return Err(Error::format(tensor_path.as_ref(), format!("feature width {d_a}, manifest declares {d}")));
        }
    }
    let text = fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
    let mut by_row: Vec<Option<String>> = vec![None; rows];
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| Error::format(index_path, format!("line {}: {msg}", n + 1));
        let (token, row) = line.rsplit_once('\t').ok_or_else(|| bad("expected token<TAB>row".into()))?;
        let row: usize = row.parse().map_err(|_| bad(format!("bad row number {row:?}")))?;
        if row >= rows {
            return Err(bad(format!("row {row} outside a {rows}-row matrix")));
        }
        if !seen.insert(token.to_string()) {
            return Err(bad(format!("duplicate token {token:?}")));
        }
        if by_row[row].is_some() {
            return Err(bad(format!("row {row} assigned twice")));
        }
        by_row[row] = Some(token.to_string());
    }
    // Rows no token refers to are dropped.
    let mut tokens = Vec::with_capacity(seen.len());
    let mut data = Vec::with_capacity(seen.len() * d_a);
    for (i, t) in by_row.into_iter().enumerate() {
        if let Some(t) = t {
            tokens.push(t);
            data.extend_from_slice(matrix.row(i));
        }
    }
    let n = tokens.len();
    let matrix = crate::numerics::Tensor::new(vec![n, d_a], data).map_err(|e| Error::format(index_path, e.to_string()))?;
    AudioFeatureTable::new(dialect, tokens, matrix).map_err(|e| Error::format(index_path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::UNK;
    use crate::numerics::Tensor;

    #[test]
    fn load_and_bounds() {
        let dir = tempfile::tempdir().unwrap();
        let idx = dir.path().join("t.tsv");
        let mat = dir.path().join("t.pft");
        let table = AudioFeatureTable::new(
            "mandarin",
            vec![UNK.into(), "a".into(), "b".into()],
            Tensor::new(vec![3, 4], (0..12).map(f64::from).collect()).unwrap(),
        )
        .unwrap();
        write_feature_table(&idx, &mat, &table).unwrap();
        let back = load_feature_table("mandarin", &idx, &mat, Some(4)).unwrap();
        assert_eq!(back, table);
        assert_eq!(back.get("b").unwrap(), &[8.0, 9.0, 10.0, 11.0]);
        assert!(load_feature_table("mandarin", &idx, &mat, Some(5)).is_err());

        fs::write(&idx, "<unk>\t0\na\t99\n").unwrap();
        assert!(load_feature_table("mandarin", &idx, &mat, None).is_err());
        fs::write(&idx, "<unk>\t0\na\t1\na\t2\n").unwrap();
        assert!(load_feature_table("mandarin", &idx, &mat, None).is_err());
        fs::write(&idx, "a\t1\n").unwrap();
        assert!(load_feature_table("mandarin", &idx, &mat, None).is_err());
    }
}
