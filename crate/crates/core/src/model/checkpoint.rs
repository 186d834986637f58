//! Plain-text parameter checkpoints.
//!
//! ```text
//! gdc-checkpoint 1
//! meta <key> <value...>
//! tensor <name> <rows> <cols>
//! <cols values>            (one line per row)
//! ```
//!
//! Values are written with the shortest representation that parses back to
//! the same `f64`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::scalar::Real;

const MAGIC: &str = "gdc-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<(String, Array2<T>)>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(tensors: Vec<(String, Array2<T>)>) -> Self {
        Self {
            metadata: Vec::new(),
            tensors,
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&Array2<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn cast<U: Real>(&self) -> Checkpoint<U> {
        Checkpoint {
            metadata: self.metadata.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.mapv(|v| U::lit(v.to_f64_lossy()))))
                .collect(),
        }
    }
}

pub fn write_checkpoint<T: Real>(checkpoint: &Checkpoint<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{MAGIC}").map_err(io)?;
    for (k, v) in &checkpoint.metadata {
        if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::Validation(format!("invalid checkpoint metadata key {k:?}")));
        }
        writeln!(w, "meta {k} {v}").map_err(io)?;
    }
    for (name, t) in &checkpoint.tensors {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Validation(format!("invalid tensor name {name:?}")));
        }
        writeln!(w, "tensor {name} {} {}", t.nrows(), t.ncols()).map_err(io)?;
        for row in t.rows() {
            let line: Vec<String> = row.iter().map(|v| v.to_f64_lossy().to_string()).collect();
            writeln!(w, "{}", line.join(" ")).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint<f64>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize, msg: String| Error::load(path, format!("line {line}: {msg}"));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => return Err(bad(1, format!("expected header {MAGIC:?}"))),
    }
    let mut out = Checkpoint {
        metadata: Vec::new(),
        tensors: Vec::new(),
    };
    while let Some((no, line)) = lines.next() {
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            out.metadata.push((k.to_string(), v.to_string()));
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [tag, name, rows, cols] = fields[..] else {
            return Err(bad(no, format!("malformed tensor header {line:?}")));
        };
        if tag != "tensor" {
            return Err(bad(no, format!("unexpected line {line:?}")));
        }
        let parse_dim = |s: &str| s.parse::<usize>().map_err(|e| bad(no, format!("bad dimension {s:?}: {e}")));
        let (rows, cols) = (parse_dim(rows)?, parse_dim(cols)?);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let (rno, row) = lines
                .next()
                .ok_or_else(|| bad(no, format!("tensor {name} ends early")))?;
            let before = data.len();
            for tok in row.split_whitespace() {
                data.push(tok.parse::<f64>().map_err(|e| bad(rno, format!("bad value {tok:?}: {e}")))?);
            }
            if data.len() - before != cols {
                return Err(bad(rno, format!("tensor {name} row has {} values, expected {cols}", data.len() - before)));
            }
        }
        let t = Array2::from_shape_vec((rows, cols), data).expect("row lengths checked");
        out.tensors.push((name.to_string(), t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig, Params};

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            hidden_dim: 8,
            ..ModelConfig::default()
        };
        let p: Params<f64> = init_params(&cfg, 5, 7).unwrap();
        let mut ck = Checkpoint::new(p.named());
        ck.metadata.push(("variant".into(), "full".into()));
        ck.tensors.push(("extra".into(), Array2::from_elem((1, 2), 1e-300)));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.txt");
        write_checkpoint(&ck, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta("variant"), Some("full"));
        let restored = Params::from_named(&p, &back.tensors[..back.tensors.len() - 1]).unwrap();
        assert_eq!(restored, p);
    }

    #[test]
    fn single_precision_round_trip() {
        let t = Array2::from_shape_fn((3, 4), |(i, j)| (i as f32 + 0.1) / (j as f32 + 3.0));
        let ck = Checkpoint::new(vec![("w".to_string(), t.clone())]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.txt");
        write_checkpoint(&ck, &path).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap().cast::<f32>().tensors[0].1, t);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.txt");
        for body in [
            "nonsense\n",
            "gdc-checkpoint 1\ntensor w 2 2\n1 2\n",
            "gdc-checkpoint 1\ntensor w 1 2\n1 x\n",
            "gdc-checkpoint 1\ntensor w 1 2\n1 2 3\n",
        ] {
            fs::write(&path, body).unwrap();
            assert!(read_checkpoint(&path).is_err(), "{body:?}");
        }
        assert!(read_checkpoint(dir.path().join("missing.txt")).unwrap_err().is_io());
    }
}
