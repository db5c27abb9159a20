//! Per-subject graph object, validation, and the `ADGR` binary format.
//!
//! Computation always uses the dense adjacency; the COO edge list is derived
//! from it on demand for interchange.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, FormatError, Result};

pub const FEATURES: usize = 3;
pub const GRAPH_MAGIC: [u8; 4] = *b"ADGR";
pub const GRAPH_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";

/// One upper-triangle edge `(i, j, weight)` with `i < j`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CooEdge {
    pub row: usize,
    pub col: usize,
    pub weight: f64,
}

/// A subject's connectome: node coordinates, weighted adjacency and label.
#[derive(Clone, Debug, PartialEq)]
pub struct BrainGraph {
    pub subject_id: String,
    pub label: u8,
    num_nodes: usize,
    features: Vec<f64>,
    adjacency: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    FeatureColumns(usize),
    NonFinite { what: &'static str, index: usize },
    NonzeroDiagonal(usize),
    Asymmetric { row: usize, col: usize },
    WeightOutOfRange { row: usize, col: usize, weight: f64 },
    Label(u8),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::FeatureColumns(c) => write!(f, "node features have {c} columns, expected 3"),
            Violation::NonFinite { what, index } => write!(f, "non-finite {what} value at {index}"),
            Violation::NonzeroDiagonal(i) => write!(f, "nonzero diagonal at {i}"),
            Violation::Asymmetric { row, col } => write!(f, "asymmetric weight at ({row}, {col})"),
            Violation::WeightOutOfRange { row, col, weight } => {
                write!(f, "weight {weight} at ({row}, {col}) outside [0, 1]")
            }
            Violation::Label(y) => write!(f, "label outside {{0,1}}: {y}"),
        }
    }
}

impl BrainGraph {
    /// Builds a graph from row-major `[n, 3]` features and `[n, n]`
    /// adjacency. Only the sizes are checked here; see [`BrainGraph::validate`].
    pub fn new(
        subject_id: impl Into<String>,
        label: u8,
        num_nodes: usize,
        features: Vec<f64>,
        adjacency: Vec<f64>,
    ) -> Result<Self> {
        if features.len() != num_nodes * FEATURES {
            return Err(Error::dim(format!(
                "features hold {} values, expected {num_nodes}x{FEATURES}",
                features.len()
            )));
        }
        if adjacency.len() != num_nodes * num_nodes {
            return Err(Error::dim(format!(
                "adjacency holds {} values, expected {num_nodes}x{num_nodes}",
                adjacency.len()
            )));
        }
        Ok(BrainGraph {
            subject_id: subject_id.into(),
            label,
            num_nodes,
            features,
            adjacency,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.num_nodes + j]
    }

    pub fn edge_index(&self) -> Result<Vec<CooEdge>> {
        dense_to_coo(&self.adjacency, self.num_nodes)
    }

    pub fn edge_count(&self) -> usize {
        let n = self.num_nodes;
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adjacency[i * n + j] > 0.0)
            .count()
    }

    /// Mean off-diagonal edge weight.
    pub fn mean_weight(&self) -> f64 {
        let n = self.num_nodes;
        if n < 2 {
            return 0.0;
        }
        let total: f64 = self.adjacency.iter().sum();
        total / (n * (n - 1)) as f64
    }

    /// Copy with every edge lighter than `tau` removed.
    pub fn sparsified(&self, tau: f64) -> BrainGraph {
        let mut g = self.clone();
        g.adjacency
            .iter_mut()
            .filter(|w| **w < tau)
            .for_each(|w| *w = 0.0);
        g
    }

    /// Checks every graph invariant and reports all violations found.
    pub fn validate(&self) -> Vec<Violation> {
        let n = self.num_nodes;
        let mut out = Vec::new();
        if self.features.len() != n * FEATURES {
            out.push(Violation::FeatureColumns(self.features.len() / n.max(1)));
        }
        if let Some(index) = self.features.iter().position(|v| !v.is_finite()) {
            out.push(Violation::NonFinite {
                what: "feature",
                index,
            });
        }
        for i in 0..n {
            if self.weight(i, i) != 0.0 {
                out.push(Violation::NonzeroDiagonal(i));
            }
            for j in i..n {
                let w = self.weight(i, j);
                if !w.is_finite() {
                    out.push(Violation::NonFinite {
                        what: "weight",
                        index: i * n + j,
                    });
                    continue;
                }
                if w != self.weight(j, i) {
                    out.push(Violation::Asymmetric { row: i, col: j });
                }
                if !(0.0..=1.0).contains(&w) {
                    out.push(Violation::WeightOutOfRange {
                        row: i,
                        col: j,
                        weight: w,
                    });
                }
            }
        }
        if self.label > 1 {
            out.push(Violation::Label(self.label));
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let v = self.validate();
        if v.is_empty() {
            return Ok(());
        }
        let listed: Vec<String> = v.iter().take(5).map(|v| v.to_string()).collect();
        Err(Error::Validation(format!(
            "graph {:?} has {} violation(s): {}",
            self.subject_id,
            v.len(),
            listed.join("; ")
        )))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let id = self.subject_id.as_bytes();
        let n = self.num_nodes;
        let mut out = Vec::with_capacity(19 + id.len() + 8 * (n * FEATURES + n * n));
        out.extend_from_slice(&GRAPH_MAGIC);
        out.extend_from_slice(&GRAPH_VERSION.to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&(FEATURES as u32).to_le_bytes());
        out.push(self.label);
        out.extend_from_slice(&(id.len() as u16).to_le_bytes());
        out.extend_from_slice(id);
        for v in self.features.iter().chain(&self.adjacency) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.array::<4>()?;
        if magic != GRAPH_MAGIC {
            return Err(FormatError::BadMagic {
                expected: GRAPH_MAGIC,
                found: magic,
            }
            .into());
        }
        let version = r.u32()?;
        if version != GRAPH_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let n = r.u32()? as usize;
        let f = r.u32()? as usize;
        if f != FEATURES {
            return Err(FormatError::Inconsistent(format!("feature count {f}, expected 3")).into());
        }
        let label = r.u8()?;
        let id_len = r.u16()? as usize;
        let subject_id = String::from_utf8(r.take(id_len)?.to_vec())
            .map_err(|_| FormatError::Inconsistent("subject id is not UTF-8".into()))?;
        let features = r.f64s(n * FEATURES)?;
        let adjacency = r.f64s(n * n)?;
        if r.remaining() != 0 {
            return Err(FormatError::Inconsistent(format!(
                "{} trailing bytes after adjacency",
                r.remaining()
            ))
            .into());
        }
        BrainGraph::new(subject_id, label, n, features, adjacency)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        BrainGraph::from_bytes(&bytes)
    }
}

/// Upper-triangle edges with positive weight, sorted by `(row, col)`.
pub fn dense_to_coo(w: &[f64], n: usize) -> Result<Vec<CooEdge>> {
    if w.len() != n * n {
        return Err(Error::dim(format!(
            "adjacency of {} values is not {n}x{n}",
            w.len()
        )));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (w[i * n + j], w[j * n + i]);
            if a != b {
                return Err(Error::Validation(format!(
                    "asymmetric adjacency at ({i}, {j}): {a} vs {b}"
                )));
            }
            if a > 0.0 {
                edges.push(CooEdge {
                    row: i,
                    col: j,
                    weight: a,
                });
            }
        }
    }
    Ok(edges)
}

/// Rebuilds the symmetric dense adjacency from upper-triangle edges.
pub fn coo_to_dense(edges: &[CooEdge], n: usize) -> Result<Vec<f64>> {
    let mut w = vec![0.0; n * n];
    for e in edges {
        if e.row >= n || e.col >= n {
            return Err(Error::dim(format!(
                "edge ({}, {}) outside {n} nodes",
                e.row, e.col
            )));
        }
        w[e.row * n + e.col] = e.weight;
        w[e.col * n + e.row] = e.weight;
    }
    Ok(w)
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteReader { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated {
                offset: self.pos,
                needed: n - self.remaining(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N], FormatError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8, FormatError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn f64s(&mut self, count: usize) -> Result<Vec<f64>, FormatError> {
        let len = count
            .checked_mul(8)
            .ok_or_else(|| FormatError::Inconsistent(format!("value count {count} overflows")))?;
        let raw = self.take(len)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub filename: String,
    pub subject_id: String,
    pub label: u8,
}

/// Index of a dataset directory.
///
/// Text format: one header line
/// `cortigraph-dataset graphs=<n> ad=<k> nc=<m> nodes=<N>` followed by one
/// tab-separated `filename subject_id label` line per graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub num_nodes: usize,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn count_label(&self, label: u8) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "cortigraph-dataset graphs={} ad={} nc={} nodes={}\n",
            self.entries.len(),
            self.count_label(1),
            self.count_label(0),
            self.num_nodes
        );
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.filename, e.subject_id, e.label));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Validation(format!("manifest: {msg}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("cortigraph-dataset") {
            return Err(bad(format!("unrecognised header {header:?}")));
        }
        let mut counts = std::collections::HashMap::new();
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed header field {f:?}")))?;
            let v: usize = v
                .parse()
                .map_err(|_| bad(format!("non-numeric header field {f:?}")))?;
            counts.insert(k, v);
        }
        let get = |k: &str| {
            counts
                .get(k)
                .copied()
                .ok_or_else(|| bad(format!("header lacks {k}")))
        };
        let mut entries = Vec::new();
        for (lineno, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let parts: Vec<&str> = line.split('\t').collect();
            let [filename, subject_id, label] = parts[..] else {
                return Err(bad(format!(
                    "line {} has {} fields",
                    lineno + 2,
                    parts.len()
                )));
            };
            let label: u8 = label
                .parse()
                .map_err(|_| bad(format!("line {} has label {label:?}", lineno + 2)))?;
            entries.push(ManifestEntry {
                filename: filename.to_string(),
                subject_id: subject_id.to_string(),
                label,
            });
        }
        let m = Manifest {
            num_nodes: get("nodes")?,
            entries,
        };
        if get("graphs")? != m.entries.len()
            || get("ad")? != m.count_label(1)
            || get("nc")? != m.count_label(0)
        {
            return Err(bad("header counts do not match the listed graphs".into()));
        }
        Ok(m)
    }
}

/// An ordered set of graphs sharing one node count.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphDataset {
    pub graphs: Vec<BrainGraph>,
}

impl GraphDataset {
    pub fn new(graphs: Vec<BrainGraph>) -> Result<Self> {
        if let Some(first) = graphs.first() {
            let n = first.num_nodes();
            if let Some(g) = graphs.iter().find(|g| g.num_nodes() != n) {
                return Err(Error::Validation(format!(
                    "graph {:?} has {} nodes, dataset has {n}",
                    g.subject_id,
                    g.num_nodes()
                )));
            }
        }
        Ok(GraphDataset { graphs })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.graphs.first().map_or(0, |g| g.num_nodes())
    }

    pub fn labels(&self) -> Vec<u8> {
        self.graphs.iter().map(|g| g.label).collect()
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.graphs.iter().filter(|g| g.label == label).count()
    }

    pub fn graph_filename(index: usize) -> String {
        format!("graph_{index:04}.adgr")
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            num_nodes: self.num_nodes(),
            entries: self
                .graphs
                .iter()
                .enumerate()
                .map(|(i, g)| ManifestEntry {
                    filename: Self::graph_filename(i),
                    subject_id: g.subject_id.clone(),
                    label: g.label,
                })
                .collect(),
        }
    }

    /// Writes every graph, then the manifest. A failure part-way leaves no
    /// manifest behind.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() {
            fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        }
        let manifest = self.manifest();
        for (g, e) in self.graphs.iter().zip(&manifest.entries) {
            g.save(dir.join(&e.filename))?;
        }
        fs::write(&manifest_path, manifest.to_text()).map_err(|e| Error::io(&manifest_path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path: PathBuf = dir.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(Error::Validation(format!(
                "{} holds no dataset manifest",
                dir.display()
            )));
        }
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest = Manifest::parse(&text)?;
        if manifest.entries.is_empty() {
            return Err(Error::Validation(format!(
                "{} lists no graphs",
                dir.display()
            )));
        }
        let mut graphs = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let g = BrainGraph::load(dir.join(&e.filename))?;
            if g.subject_id != e.subject_id || g.label != e.label {
                return Err(Error::Validation(format!(
                    "{} does not match its manifest entry",
                    e.filename
                )));
            }
            if g.num_nodes() != manifest.num_nodes {
                return Err(Error::Validation(format!(
                    "{} has {} nodes, manifest says {}",
                    e.filename,
                    g.num_nodes(),
                    manifest.num_nodes
                )));
            }
            graphs.push(g);
        }
        GraphDataset::new(graphs)
    }
}
