//! Experiment ingestion: manifests, per-experiment CSV time histories,
//! column grouping into vector/tensor-valued nodes, normalization, and
//! calibration/test splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How a node's columns are to be interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeKind {
    Scalar,
    Vector,
    SymmetricTensor,
}

/// Physical role of a node in the causal graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    /// The control variable; never the target of an edge.
    Root,
    Intermediate,
    Leaf,
    Unconstrained,
}

/// One variable of the experiment: a named group of CSV columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSchema {
    pub name: String,
    pub columns: Vec<String>,
    pub kind: NodeKind,
    pub role: NodeRole,
}

impl NodeSchema {
    pub fn dim(&self) -> usize {
        self.columns.len()
    }
}

/// One simulation's aligned multivariate time histories.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub id: String,
    /// node name -> (T x node-dimension) series.
    pub series: BTreeMap<String, DMatrix<f64>>,
}

impl Experiment {
    /// Number of time steps shared by all node series.
    pub fn len(&self) -> usize {
        self.series.values().next().map_or(0, |m| m.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.series
            .get(name)
            .ok_or_else(|| Error::Data(format!("experiment {}: unknown node {name}", self.id)))
    }
}

/// A loaded collection of experiments with schema and split.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSet {
    pub schema: Vec<NodeSchema>,
    pub experiments: Vec<Experiment>,
    pub calibration: Vec<String>,
    pub test: Vec<String>,
}

impl ExperimentSet {
    pub fn experiment(&self, id: &str) -> Result<&Experiment> {
        self.experiments
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Data(format!("unknown experiment id {id}")))
    }

    pub fn root(&self) -> Result<&NodeSchema> {
        self.schema
            .iter()
            .find(|n| n.role == NodeRole::Root)
            .ok_or_else(|| Error::Manifest("schema has no root node".into()))
    }

    pub fn node_schema(&self, name: &str) -> Result<&NodeSchema> {
        self.schema
            .iter()
            .find(|n| n.name == name)
            .ok_or_else(|| Error::Data(format!("unknown node {name}")))
    }

    pub fn calibration_experiments(&self) -> Vec<&Experiment> {
        self.calibration
            .iter()
            .filter_map(|id| self.experiments.iter().find(|e| &e.id == id))
            .collect()
    }

    pub fn test_experiments(&self) -> Vec<&Experiment> {
        self.test
            .iter()
            .filter_map(|id| self.experiments.iter().find(|e| &e.id == id))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    /// Strictly positive; constant columns are stored with std 1.
    pub std: f64,
}

/// Per-column standardization statistics, grouped by node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub stats: BTreeMap<String, Vec<ColumnStats>>,
    /// Node/column labels whose std was degenerate and replaced by 1.
    pub degenerate_columns: Vec<String>,
}

// ---------------------------------------------------------------------------
// Manifest loading
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct ManifestFile {
    nodes: Vec<NodeSchema>,
    experiments: Vec<ManifestExperiment>,
    split: ManifestSplit,
}

#[derive(Deserialize)]
struct ManifestExperiment {
    id: String,
    path: String,
}

#[derive(Deserialize)]
struct ManifestSplit {
    calibration: Vec<String>,
    test: Vec<String>,
}

fn validate_schema(nodes: &[NodeSchema]) -> Result<()> {
    if nodes.is_empty() {
        return Err(Error::Manifest("empty node list".into()));
    }
    let mut names = BTreeSet::new();
    for n in nodes {
        if !names.insert(n.name.clone()) {
            return Err(Error::Manifest(format!("duplicate node name {}", n.name)));
        }
        if n.columns.is_empty() {
            return Err(Error::Manifest(format!("node {} has no columns", n.name)));
        }
        if n.kind == NodeKind::Scalar && n.columns.len() != 1 {
            return Err(Error::Manifest(format!(
                "scalar node {} must have exactly 1 column, got {}",
                n.name,
                n.columns.len()
            )));
        }
    }
    let roots = nodes.iter().filter(|n| n.role == NodeRole::Root).count();
    if roots != 1 {
        return Err(Error::Manifest(format!(
            "exactly one root node required, found {roots}"
        )));
    }
    if !nodes.iter().any(|n| n.role == NodeRole::Leaf) {
        return Err(Error::Manifest("at least one leaf node required".into()));
    }
    Ok(())
}

/// Loads a manifest and all experiment CSVs it references.
///
/// Relative experiment paths are resolved against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<ExperimentSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let manifest: ManifestFile = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;

    validate_schema(&manifest.nodes)?;
    if manifest.experiments.is_empty() {
        return Err(Error::Manifest("empty experiment list".into()));
    }

    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut seen = BTreeSet::new();
    let mut experiments = Vec::with_capacity(manifest.experiments.len());
    for entry in &manifest.experiments {
        if !seen.insert(entry.id.clone()) {
            return Err(Error::Manifest(format!(
                "duplicate experiment id {}",
                entry.id
            )));
        }
        let csv_path = base.join(&entry.path);
        experiments.push(load_experiment_csv(&csv_path, &entry.id, &manifest.nodes)?);
    }

    let all: BTreeSet<&String> = manifest.experiments.iter().map(|e| &e.id).collect();
    let cal: BTreeSet<&String> = manifest.split.calibration.iter().collect();
    let test: BTreeSet<&String> = manifest.split.test.iter().collect();
    if !cal.is_disjoint(&test) {
        return Err(Error::Manifest(
            "calibration and test splits overlap".into(),
        ));
    }
    let covered: BTreeSet<&String> = cal.union(&test).copied().collect();
    if covered != all {
        return Err(Error::Manifest(
            "split does not partition the experiment ids".into(),
        ));
    }

    Ok(ExperimentSet {
        schema: manifest.nodes,
        experiments,
        calibration: manifest.split.calibration,
        test: manifest.split.test,
    })
}

/// Parses one experiment CSV and groups its columns per the schema.
pub fn load_experiment_csv(
    path: impl AsRef<Path>,
    id: &str,
    schema: &[NodeSchema],
) -> Result<Experiment> {
    let path = path.as_ref();
    let file_label = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Io {
                path: file_label.clone(),
                source: std::io::Error::other(e.to_string()),
            },
            _ => Error::Csv {
                file: file_label.clone(),
                line: 0,
                message: e.to_string(),
            },
        })?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv {
            file: file_label.clone(),
            line: 1,
            message: e.to_string(),
        })?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();

    let mut column_index = BTreeMap::new();
    for (i, h) in headers.iter().enumerate() {
        column_index.insert(h.clone(), i);
    }
    for node in schema {
        for col in &node.columns {
            if !column_index.contains_key(col) {
                return Err(Error::Csv {
                    file: file_label.clone(),
                    line: 1,
                    message: format!("column {col} (node {}) missing from header", node.name),
                });
            }
        }
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = match e.kind() {
                csv::ErrorKind::UnequalLengths { pos, .. } => {
                    pos.as_ref().map_or(0, |p| p.line())
                }
                _ => e.position().map_or(0, |p| p.line()),
            };
            Error::Csv {
                file: file_label.clone(),
                line,
                message: format!("ragged or unreadable row: {e}"),
            }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let mut row = Vec::with_capacity(record.len());
        for cell in record.iter() {
            let trimmed = cell.trim();
            if trimmed.is_empty() {
                return Err(Error::Csv {
                    file: file_label.clone(),
                    line,
                    message: "missing value".into(),
                });
            }
            let v: f64 = trimmed.parse().map_err(|_| Error::Csv {
                file: file_label.clone(),
                line,
                message: format!("non-numeric cell {trimmed:?}"),
            })?;
            row.push(v);
        }
        rows.push(row);
    }

    if rows.len() < 2 {
        return Err(Error::Csv {
            file: file_label,
            line: 0,
            message: format!("series too short: {} rows, need at least 2", rows.len()),
        });
    }

    let t = rows.len();
    let mut series = BTreeMap::new();
    for node in schema {
        let mut m = DMatrix::zeros(t, node.columns.len());
        for (k, col) in node.columns.iter().enumerate() {
            let idx = column_index[col];
            for (r, row) in rows.iter().enumerate() {
                m[(r, k)] = row[idx];
            }
        }
        series.insert(node.name.clone(), m);
    }

    Ok(Experiment {
        id: id.to_string(),
        series,
    })
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Fits per-column standardization statistics over the concatenation of the
/// given experiments' rows. Population (divide-by-N) variance; constant
/// columns are recorded and kept with std 1 so they pass through unscaled.
pub fn fit_normalizer(set: &ExperimentSet, ids: &[String]) -> Result<Normalizer> {
    if ids.is_empty() {
        return Err(Error::Data("fit_normalizer: empty id list".into()));
    }
    let mut experiments = Vec::with_capacity(ids.len());
    for id in ids {
        experiments.push(set.experiment(id)?);
    }

    let mut stats = BTreeMap::new();
    let mut degenerate = Vec::new();
    for node in &set.schema {
        let dim = node.dim();
        let mut count = 0usize;
        let mut sums = vec![0.0; dim];
        for e in &experiments {
            let m = e.node(&node.name)?;
            count += m.nrows();
            for c in 0..dim {
                sums[c] += m.column(c).sum();
            }
        }
        let means: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; dim];
        for e in &experiments {
            let m = e.node(&node.name)?;
            for c in 0..dim {
                for r in 0..m.nrows() {
                    let d = m[(r, c)] - means[c];
                    sq[c] += d * d;
                }
            }
        }
        let mut cols = Vec::with_capacity(dim);
        for c in 0..dim {
            let var = sq[c] / count as f64;
            let std = var.sqrt();
            if std == 0.0 {
                degenerate.push(format!("{}/{}", node.name, node.columns[c]));
                cols.push(ColumnStats {
                    mean: means[c],
                    std: 1.0,
                });
            } else {
                cols.push(ColumnStats {
                    mean: means[c],
                    std,
                });
            }
        }
        stats.insert(node.name.clone(), cols);
    }

    Ok(Normalizer {
        stats,
        degenerate_columns: degenerate,
    })
}

fn transform(n: &Normalizer, e: &Experiment, invert: bool) -> Result<Experiment> {
    let mut series = BTreeMap::new();
    for (name, m) in &e.series {
        let cols = n
            .stats
            .get(name)
            .ok_or_else(|| Error::Shape(format!("normalizer has no stats for node {name}")))?;
        if cols.len() != m.ncols() {
            return Err(Error::Shape(format!(
                "node {name}: {} stat columns vs {} data columns",
                cols.len(),
                m.ncols()
            )));
        }
        let mut out = m.clone();
        for (c, s) in cols.iter().enumerate() {
            for r in 0..out.nrows() {
                out[(r, c)] = if invert {
                    out[(r, c)] * s.std + s.mean
                } else {
                    (out[(r, c)] - s.mean) / s.std
                };
            }
        }
        series.insert(name.clone(), out);
    }
    Ok(Experiment {
        id: e.id.clone(),
        series,
    })
}

/// Standardizes every node series of the experiment.
pub fn apply_normalizer(n: &Normalizer, e: &Experiment) -> Result<Experiment> {
    transform(n, e, false)
}

/// Inverse of [`apply_normalizer`]; the round trip is the identity to within
/// 1e-10 relative error.
pub fn invert_normalizer(n: &Normalizer, e: &Experiment) -> Result<Experiment> {
    transform(n, e, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn schema_uv() -> Vec<NodeSchema> {
        vec![
            NodeSchema {
                name: "U".into(),
                columns: vec!["u".into()],
                kind: NodeKind::Scalar,
                role: NodeRole::Root,
            },
            NodeSchema {
                name: "V1".into(),
                columns: vec!["v1".into()],
                kind: NodeKind::Scalar,
                role: NodeRole::Leaf,
            },
        ]
    }

    fn write_files(dir: &Path, manifest: &str, csvs: &[(&str, &str)]) -> std::path::PathBuf {
        for (name, content) in csvs {
            let mut f = std::fs::File::create(dir.join(name)).unwrap();
            f.write_all(content.as_bytes()).unwrap();
        }
        let mp = dir.join("manifest.json");
        std::fs::write(&mp, manifest).unwrap();
        mp
    }

    const MANIFEST: &str = r#"{
        "nodes": [
            {"name": "U", "columns": ["u"], "kind": "scalar", "role": "root"},
            {"name": "V1", "columns": ["v1"], "kind": "scalar", "role": "leaf"}
        ],
        "experiments": [{"id": "e0", "path": "e0.csv"}],
        "split": {"calibration": ["e0"], "test": []}
    }"#;

    #[test]
    fn loads_and_groups_columns() {
        let dir = tempfile::tempdir().unwrap();
        let mp = write_files(dir.path(), MANIFEST, &[("e0.csv", "u,v1\n0,1\n1,2\n2,3\n")]);
        let set = load_manifest(&mp).unwrap();
        assert_eq!(set.experiments.len(), 1);
        assert_eq!(set.experiments[0].len(), 3);
        assert_eq!(set.experiments[0].series["U"][(2, 0)], 2.0);
        assert_eq!(set.root().unwrap().name, "U");
    }

    #[test]
    fn loader_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mp = write_files(dir.path(), MANIFEST, &[("e0.csv", "u,v1\n0,1\n1,2\n")]);
        assert_eq!(load_manifest(&mp).unwrap(), load_manifest(&mp).unwrap());
    }

    #[test]
    fn rejects_empty_experiment_list() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = MANIFEST.replace(r#"[{"id": "e0", "path": "e0.csv"}]"#, "[]").replace(
            r#""calibration": ["e0"]"#,
            r#""calibration": []"#,
        );
        let mp = write_files(dir.path(), &manifest, &[]);
        let err = load_manifest(&mp).unwrap_err();
        assert!(err.to_string().contains("empty experiment list"), "{err}");
    }

    #[test]
    fn rejects_single_row_series() {
        let dir = tempfile::tempdir().unwrap();
        let mp = write_files(dir.path(), MANIFEST, &[("e0.csv", "u,v1\n0,1\n")]);
        let err = load_manifest(&mp).unwrap_err();
        assert!(err.to_string().contains("series too short"), "{err}");
    }

    #[test]
    fn rejects_missing_column_and_bad_cells() {
        let dir = tempfile::tempdir().unwrap();
        let mp = write_files(dir.path(), MANIFEST, &[("e0.csv", "u,w\n0,1\n1,2\n")]);
        assert!(load_manifest(&mp).unwrap_err().to_string().contains("v1"));

        let mp = write_files(dir.path(), MANIFEST, &[("e0.csv", "u,v1\n0,x\n1,2\n")]);
        assert!(load_manifest(&mp)
            .unwrap_err()
            .to_string()
            .contains("non-numeric"));

        let mp = write_files(dir.path(), MANIFEST, &[("e0.csv", "u,v1\n0\n1,2\n")]);
        let err = load_manifest(&mp).unwrap_err().to_string();
        assert!(err.contains("ragged"), "{err}");
    }

    #[test]
    fn rejects_duplicate_ids_and_bad_split() {
        let dir = tempfile::tempdir().unwrap();
        let dup = MANIFEST.replace(
            r#"[{"id": "e0", "path": "e0.csv"}]"#,
            r#"[{"id": "e0", "path": "e0.csv"}, {"id": "e0", "path": "e0.csv"}]"#,
        );
        let mp = write_files(dir.path(), &dup, &[("e0.csv", "u,v1\n0,1\n1,2\n")]);
        assert!(load_manifest(&mp)
            .unwrap_err()
            .to_string()
            .contains("duplicate experiment id"));

        let bad = MANIFEST.replace(r#""test": []"#, r#""test": ["e0"]"#);
        let mp = write_files(dir.path(), &bad, &[("e0.csv", "u,v1\n0,1\n1,2\n")]);
        assert!(load_manifest(&mp)
            .unwrap_err()
            .to_string()
            .contains("overlap"));
    }

    fn set_from_rows(rows: &[(f64, f64)]) -> ExperimentSet {
        let t = rows.len();
        let u = DMatrix::from_fn(t, 1, |r, _| rows[r].0);
        let v = DMatrix::from_fn(t, 1, |r, _| rows[r].1);
        let mut series = BTreeMap::new();
        series.insert("U".to_string(), u);
        series.insert("V1".to_string(), v);
        ExperimentSet {
            schema: schema_uv(),
            experiments: vec![Experiment {
                id: "e0".into(),
                series,
            }],
            calibration: vec!["e0".into()],
            test: vec![],
        }
    }

    #[test]
    fn population_variance_convention() {
        let set = set_from_rows(&[(1.0, 0.0), (2.0, 0.0), (3.0, 0.0)]);
        let n = fit_normalizer(&set, &set.calibration).unwrap();
        let s = &n.stats["U"][0];
        assert!((s.mean - 2.0).abs() < 1e-12);
        assert!((s.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_column_gets_unit_std_and_warning() {
        let set = set_from_rows(&[(1.0, 5.0), (2.0, 5.0), (3.0, 5.0)]);
        let n = fit_normalizer(&set, &set.calibration).unwrap();
        assert_eq!(n.stats["V1"][0].std, 1.0);
        assert_eq!(n.stats["V1"][0].mean, 5.0);
        assert_eq!(n.degenerate_columns, vec!["V1/v1".to_string()]);
    }

    #[test]
    fn apply_then_invert_is_identity() {
        let set = set_from_rows(&[(1.0, -3.5), (2.25, 0.125), (3.75, 9.0), (7.5, 2.0)]);
        let n = fit_normalizer(&set, &set.calibration).unwrap();
        let e = &set.experiments[0];
        let norm = apply_normalizer(&n, e).unwrap();
        // standardized data has mean ~0, std ~1
        let col = norm.series["U"].column(0);
        let mean: f64 = col.sum() / col.len() as f64;
        let var: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 1e-9);
        assert!((var.sqrt() - 1.0).abs() < 1e-9);

        let back = invert_normalizer(&n, &norm).unwrap();
        for (name, m) in &e.series {
            let r = &back.series[name];
            for (a, b) in m.iter().zip(r.iter()) {
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
            }
        }
        // idempotence on already-standardized data
        let n2 = fit_normalizer(
            &ExperimentSet {
                schema: set.schema.clone(),
                experiments: vec![norm.clone()],
                calibration: vec!["e0".into()],
                test: vec![],
            },
            &["e0".to_string()],
        )
        .unwrap();
        assert!(n2.stats["U"][0].mean.abs() < 1e-9);
        assert!((n2.stats["U"][0].std - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hand_scaled_value() {
        let n = Normalizer {
            stats: BTreeMap::from([(
                "U".to_string(),
                vec![ColumnStats {
                    mean: 2.0,
                    std: 2.0,
                }],
            )]),
            degenerate_columns: vec![],
        };
        let e = Experiment {
            id: "x".into(),
            series: BTreeMap::from([("U".to_string(), DMatrix::from_element(2, 1, 4.0))]),
        };
        let out = apply_normalizer(&n, &e).unwrap();
        assert_eq!(out.series["U"][(0, 0)], 1.0);
    }

    #[test]
    fn column_count_mismatch_is_error() {
        let n = Normalizer {
            stats: BTreeMap::from([(
                "U".to_string(),
                vec![
                    ColumnStats {
                        mean: 0.0,
                        std: 1.0,
                    },
                    ColumnStats {
                        mean: 0.0,
                        std: 1.0,
                    },
                ],
            )]),
            degenerate_columns: vec![],
        };
        let e = Experiment {
            id: "x".into(),
            series: BTreeMap::from([("U".to_string(), DMatrix::from_element(2, 1, 4.0))]),
        };
        assert!(apply_normalizer(&n, &e).is_err());
    }
}
