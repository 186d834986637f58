//! Networked observational data and its on-disk CSV bundle.
//!
//! A bundle is a directory holding `edges.csv` (`src,dst`), `features.csv`
//! (`f0..f{K-1}`), `treatments.csv` (`t`), `outcomes.csv` (`y`) and optionally
//! `potential.csv` (`y0,y1`) and `idmap.csv` (`id,external`). When an id map
//! is present, `edges.csv` refers to the external ids.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::scalar::Real;

/// `G = <A, X, T, Y>`: graph, unit features, binary treatments and factual outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationalDataset<T: Real> {
    pub graph: Graph,
    pub features: Array2<T>,
    pub treatments: Vec<u8>,
    pub outcomes: Array1<T>,
    /// External unit ids, one per row, when the bundle carried an id map.
    pub external_ids: Option<Vec<String>>,
}

impl<T: Real> ObservationalDataset<T> {
    pub fn new(graph: Graph, features: Array2<T>, treatments: Vec<u8>, outcomes: Array1<T>) -> Result<Self> {
        let d = Self {
            graph,
            features,
            treatments,
            outcomes,
            external_ids: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.graph.num_nodes();
        let counts = [
            ("features", self.features.nrows()),
            ("treatments", self.treatments.len()),
            ("outcomes", self.outcomes.len()),
        ];
        for (what, count) in counts {
            if count != n {
                return Err(Error::Validation(format!(
                    "{what} has {count} rows but the graph has {n} nodes"
                )));
            }
        }
        if let Some(ids) = &self.external_ids {
            if ids.len() != n {
                return Err(Error::Validation(format!(
                    "id map has {} entries but the graph has {n} nodes",
                    ids.len()
                )));
            }
        }
        if let Some(bad) = self.treatments.iter().find(|&&t| t > 1) {
            return Err(Error::Validation(format!("non-binary treatment value {bad}")));
        }
        let treated = self.treatments.iter().filter(|&&t| t == 1).count();
        if treated == 0 || treated == n {
            return Err(Error::Validation(format!(
                "both treatment groups must be non-empty ({treated} of {n} treated)"
            )));
        }
        Ok(())
    }

    pub fn num_units(&self) -> usize {
        self.graph.num_nodes()
    }

    pub fn num_features(&self) -> usize {
        self.features.ncols()
    }

    /// Same dataset in another scalar type.
    pub fn cast<U: Real>(&self) -> ObservationalDataset<U> {
        ObservationalDataset {
            graph: self.graph.clone(),
            features: self.features.mapv(|x| U::lit(x.to_f64_lossy())),
            treatments: self.treatments.clone(),
            outcomes: self.outcomes.mapv(|x| U::lit(x.to_f64_lossy())),
            external_ids: self.external_ids.clone(),
        }
    }
}

/// Potential outcomes of every unit; only available for synthetic data.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth<T: Real> {
    pub y0: Array1<T>,
    pub y1: Array1<T>,
    pub tau: Array1<T>,
}

impl<T: Real> GroundTruth<T> {
    pub fn from_potential(y0: Array1<T>, y1: Array1<T>) -> Result<Self> {
        if y0.len() != y1.len() {
            return Err(Error::Validation(format!(
                "potential outcome lengths differ: {} vs {}",
                y0.len(),
                y1.len()
            )));
        }
        let tau = &y1 - &y0;
        Ok(Self { y0, y1, tau })
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn ate(&self) -> T {
        self.tau.mean().unwrap_or_else(T::zero)
    }

    pub fn cast<U: Real>(&self) -> GroundTruth<U> {
        let c = |a: &Array1<T>| a.mapv(|x| U::lit(x.to_f64_lossy()));
        GroundTruth {
            y0: c(&self.y0),
            y1: c(&self.y1),
            tau: c(&self.tau),
        }
    }
}

/// Formats a real with 12 significant digits, `%.12g` style.
pub fn format_real(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        let fixed = format!("{x:.decimals$}");
        trim_zeros(&fixed).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mantissa))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

const EDGES: &str = "edges.csv";
const FEATURES: &str = "features.csv";
const TREATMENTS: &str = "treatments.csv";
const OUTCOMES: &str = "outcomes.csv";
const POTENTIAL: &str = "potential.csv";
const IDMAP: &str = "idmap.csv";

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    if !path.is_file() {
        return Err(Error::load(path, "missing file"));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::load(path, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::load(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::load(path, e.to_string()))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

fn expect_header(path: &Path, header: &[String], expected: &[&str]) -> Result<()> {
    if header.len() != expected.len() || header.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::load(
            path,
            format!("expected columns {expected:?}, found {header:?}"),
        ));
    }
    Ok(())
}

fn parse_f64(path: &Path, row: usize, cell: &str) -> Result<f64> {
    let v: f64 = cell
        .parse()
        .map_err(|_| Error::load(path, format!("row {}: cannot parse {cell:?} as a real", row + 1)))?;
    if !v.is_finite() {
        return Err(Error::load(path, format!("row {}: non-finite value {cell:?}", row + 1)));
    }
    Ok(v)
}

fn read_column(dir: &Path, file: &str, column: &str) -> Result<Vec<String>> {
    let path = dir.join(file);
    let (header, rows) = read_table(&path)?;
    expect_header(&path, &header, &[column])?;
    Ok(rows.into_iter().map(|mut r| r.swap_remove(0)).collect())
}

/// Reads a bundle directory; ground truth is returned iff `potential.csv` exists.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(ObservationalDataset<f64>, Option<GroundTruth<f64>>)> {
    let dir = dir.as_ref();

    let features_path = dir.join(FEATURES);
    let (header, rows) = read_table(&features_path)?;
    let k = header.len();
    if k == 0 {
        return Err(Error::load(&features_path, "no feature columns"));
    }
    for (c, h) in header.iter().enumerate() {
        if *h != format!("f{c}") {
            return Err(Error::load(&features_path, format!("column {c} should be named f{c}, found {h:?}")));
        }
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::load(&features_path, "no units"));
    }
    let mut features = Array2::zeros((n, k));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != k {
            return Err(Error::load(&features_path, format!("row {} has {} columns, expected {k}", i + 1, row.len())));
        }
        for (c, cell) in row.iter().enumerate() {
            features[[i, c]] = parse_f64(&features_path, i, cell)?;
        }
    }

    let treat_path = dir.join(TREATMENTS);
    let treatments = read_column(dir, TREATMENTS, "t")?
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.parse::<u8>()
                .map_err(|_| Error::load(&treat_path, format!("row {}: cannot parse {s:?} as a treatment", i + 1)))
        })
        .collect::<Result<Vec<u8>>>()?;

    let out_path = dir.join(OUTCOMES);
    let outcomes = read_column(dir, OUTCOMES, "y")?
        .iter()
        .enumerate()
        .map(|(i, s)| parse_f64(&out_path, i, s))
        .collect::<Result<Vec<f64>>>()?;

    let idmap_path = dir.join(IDMAP);
    let external_ids = if idmap_path.is_file() {
        let (header, rows) = read_table(&idmap_path)?;
        expect_header(&idmap_path, &header, &["id", "external"])?;
        let mut ids = vec![None; n];
        for (r, row) in rows.into_iter().enumerate() {
            let id: usize = row[0]
                .parse()
                .map_err(|_| Error::load(&idmap_path, format!("row {}: bad internal id {:?}", r + 1, row[0])))?;
            if id >= n || ids[id].is_some() {
                return Err(Error::load(&idmap_path, format!("row {}: internal id {id} out of range or repeated", r + 1)));
            }
            ids[id] = Some(row[1].clone());
        }
        let ids: Option<Vec<String>> = ids.into_iter().collect();
        Some(ids.ok_or_else(|| Error::load(&idmap_path, "id map does not cover every unit"))?)
    } else {
        None
    };

    let edges_path = dir.join(EDGES);
    let (header, rows) = read_table(&edges_path)?;
    expect_header(&edges_path, &header, &["src", "dst"])?;
    let lookup: Option<HashMap<&str, usize>> = external_ids
        .as_ref()
        .map(|ids| ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect());
    let mut edges = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let resolve = |cell: &str| -> Result<usize> {
            match &lookup {
                Some(map) => map
                    .get(cell)
                    .copied()
                    .ok_or_else(|| Error::load(&edges_path, format!("row {}: unknown external id {cell:?}", r + 1))),
                None => cell
                    .parse()
                    .map_err(|_| Error::load(&edges_path, format!("row {}: bad node id {cell:?}", r + 1))),
            }
        };
        edges.push((resolve(&row[0])?, resolve(&row[1])?));
    }
    let graph = Graph::new(n, edges).map_err(|e| Error::load(&edges_path, e.to_string()))?;

    let dataset = ObservationalDataset {
        graph,
        features,
        treatments,
        outcomes: Array1::from(outcomes),
        external_ids,
    };
    dataset.validate()?;

    let pot_path = dir.join(POTENTIAL);
    let truth = if pot_path.is_file() {
        let (header, rows) = read_table(&pot_path)?;
        expect_header(&pot_path, &header, &["y0", "y1"])?;
        if rows.len() != n {
            return Err(Error::Validation(format!(
                "potential.csv has {} rows but the dataset has {n} units",
                rows.len()
            )));
        }
        let mut y0 = Array1::zeros(n);
        let mut y1 = Array1::zeros(n);
        for (i, row) in rows.iter().enumerate() {
            y0[i] = parse_f64(&pot_path, i, &row[0])?;
            y1[i] = parse_f64(&pot_path, i, &row[1])?;
        }
        Some(GroundTruth::from_potential(y0, y1)?)
    } else {
        None
    };
    Ok((dataset, truth))
}

/// Writes a CSV file from a header and pre-formatted rows.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes `dataset` (and `truth`, if any) as a bundle under `dir`.
pub fn save_dataset<T: Real>(
    dataset: &ObservationalDataset<T>,
    truth: Option<&GroundTruth<T>>,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    ensure_dir(dir)?;
    let f = |x: T| format_real(x.to_f64_lossy());
    let k = dataset.num_features();

    let ids = dataset.external_ids.as_ref();
    let node = |i: usize| match ids {
        Some(ids) => ids[i].clone(),
        None => i.to_string(),
    };
    write_csv(
        &dir.join(EDGES),
        &["src", "dst"],
        dataset.graph.edges().iter().map(|&(a, b)| vec![node(a), node(b)]),
    )?;
    let header: Vec<String> = (0..k).map(|c| format!("f{c}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        &dir.join(FEATURES),
        &header,
        dataset.features.rows().into_iter().map(|r| r.iter().map(|&x| f(x)).collect()),
    )?;
    write_csv(
        &dir.join(TREATMENTS),
        &["t"],
        dataset.treatments.iter().map(|t| vec![t.to_string()]),
    )?;
    write_csv(&dir.join(OUTCOMES), &["y"], dataset.outcomes.iter().map(|&y| vec![f(y)]))?;
    if let Some(ids) = ids {
        write_csv(
            &dir.join(IDMAP),
            &["id", "external"],
            ids.iter().enumerate().map(|(i, s)| vec![i.to_string(), s.clone()]),
        )?;
    }
    if let Some(truth) = truth {
        write_csv(
            &dir.join(POTENTIAL),
            &["y0", "y1"],
            truth.y0.iter().zip(truth.y1.iter()).map(|(&a, &b)| vec![f(a), f(b)]),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small() -> (ObservationalDataset<f64>, GroundTruth<f64>) {
        let g = Graph::new(4, [(0, 1), (1, 2)]).unwrap();
        let x = array![[0.1, 0.2, 0.3], [1.5, -2.25, 3.0], [1e-7, 123456.789, 0.0], [1.0 / 3.0, 2.0 / 3.0, 1.0]];
        let d = ObservationalDataset::new(g, x, vec![1, 0, 1, 0], array![1.25, -3.5, 10.0 / 7.0, 0.0]).unwrap();
        let t = GroundTruth::from_potential(array![0.5, -3.5, 1.0, 0.0], array![1.25, -1.0, 10.0 / 7.0, 2.0]).unwrap();
        (d, t)
    }

    fn assert_close(a: f64, b: f64) {
        assert!((a - b).abs() <= 1e-11 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn format_uses_twelve_significant_digits() {
        assert_eq!(format_real(1.0 / 3.0), "0.333333333333");
        assert_eq!(format_real(2.5), "2.5");
        assert_eq!(format_real(-1234567.0), "-1234567");
        assert_eq!(format_real(1e-7), "1e-7");
        assert_eq!(format_real(123456789012345.0), "1.23456789012e14");
        assert_eq!(format_real(0.0), "0");
    }

    #[test]
    fn round_trip() {
        let (d, t) = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, Some(&t), dir.path()).unwrap();
        let (d2, t2) = load_dataset(dir.path()).unwrap();
        let t2 = t2.expect("truth present");
        assert_eq!(d2.graph.neighbor_lists(), &[vec![1], vec![0, 2], vec![1], vec![]]);
        assert_eq!(d2.graph.edge_set(), d.graph.edge_set());
        assert_eq!(d2.treatments, d.treatments);
        for (a, b) in d.features.iter().zip(d2.features.iter()) {
            assert_close(*a, *b);
        }
        for (a, b) in d.outcomes.iter().zip(d2.outcomes.iter()) {
            assert_close(*a, *b);
        }
        for (a, b) in t.tau.iter().zip(t2.tau.iter()) {
            assert_close(*a, *b);
        }
    }

    #[test]
    fn missing_potential_means_no_truth() {
        let (d, _) = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, None, dir.path()).unwrap();
        let (_, truth) = load_dataset(dir.path()).unwrap();
        assert!(truth.is_none());
    }

    #[test]
    fn non_binary_treatment_is_rejected() {
        let (d, _) = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, None, dir.path()).unwrap();
        fs::write(dir.path().join(TREATMENTS), "t\n1\n0\n2\n0\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_file_names_the_file() {
        let (d, _) = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, None, dir.path()).unwrap();
        fs::remove_file(dir.path().join(OUTCOMES)).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("outcomes.csv"), "{err}");
        assert!(err.is_io());
    }

    #[test]
    fn dimension_mismatch_reports_counts() {
        let (d, _) = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, None, dir.path()).unwrap();
        fs::write(dir.path().join(OUTCOMES), "y\n1\n2\n3\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("3 rows"), "{err}");
    }

    #[test]
    fn id_map_remaps_external_ids() {
        let (mut d, _) = small();
        d.external_ids = Some(vec!["a".into(), "b".into(), "c".into(), "d".into()]);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&d, None, dir.path()).unwrap();
        let edges = fs::read_to_string(dir.path().join(EDGES)).unwrap();
        assert!(edges.contains("a,b"));
        let (d2, _) = load_dataset(dir.path()).unwrap();
        assert_eq!(d2.graph.edge_set(), d.graph.edge_set());
        assert_eq!(d2.external_ids, d.external_ids);
    }

    #[cfg(unix)]
    #[test]
    fn read_only_target_is_an_io_error() {
        use std::os::unix::fs::PermissionsExt;
        let (d, _) = small();
        let dir = tempfile::tempdir().unwrap();
        let ro = dir.path().join("ro");
        fs::create_dir(&ro).unwrap();
        fs::set_permissions(&ro, fs::Permissions::from_mode(0o555)).unwrap();
        let res = save_dataset(&d, None, ro.join("bundle"));
        // root ignores permission bits
        if fs::File::create(ro.join("probe")).is_err() {
            assert!(matches!(res, Err(Error::Io { .. })));
        }
        let res = save_dataset(&d, None, "/proc/gdc-cannot-write-here");
        assert!(matches!(res, Err(Error::Io { .. })));
    }
}
