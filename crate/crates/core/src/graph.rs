//! Undirected graphs in compressed sparse row form and the closed-neighborhood
//! mean aggregator used by every graph-convolution layer.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::diffnum::Tensor;
use crate::error::{Error, Result};
use crate::par::{self, Exec};

/// Immutable undirected graph. Self-loops are never stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    num_nodes: usize,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    undirected: bool,
}

impl Graph {
    pub fn edgeless(num_nodes: usize) -> Self {
        Graph {
            num_nodes,
            offsets: vec![0; num_nodes + 1],
            neighbors: Vec::new(),
            undirected: true,
        }
    }

    /// Builds an undirected graph. Reverse edges are added, duplicates
    /// removed and self-loops dropped with a warning.
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        let mut self_loops = 0usize;
        for &(i, j) in edges {
            if i >= num_nodes || j >= num_nodes {
                return Err(Error::Data(format!(
                    "edge ({i}, {j}) out of range for {num_nodes} nodes"
                )));
            }
            if i == j {
                self_loops += 1;
                continue;
            }
            adj[i].push(j);
            adj[j].push(i);
        }
        if self_loops > 0 {
            log::warn!("dropped {self_loops} self-loop(s)");
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        let mut neighbors = Vec::new();
        offsets.push(0);
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
            neighbors.extend_from_slice(list);
            offsets.push(neighbors.len());
        }
        Ok(Graph {
            num_nodes,
            offsets,
            neighbors,
            undirected: true,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn is_undirected(&self) -> bool {
        self.undirected
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// `deg_i = |N(i)|` for every node.
    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes).map(|i| self.degree(i)).collect()
    }

    /// Canonical edge list: each undirected edge once as `(i, j)` with
    /// `i < j`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for i in 0..self.num_nodes {
            for &j in self.neighbors(i) {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    fn check_rows(&self, h: &Tensor) -> Result<()> {
        if h.rows() != self.num_nodes {
            return Err(Error::shape(format!(
                "feature rows {} != graph nodes {}",
                h.rows(),
                self.num_nodes
            )));
        }
        Ok(())
    }

    /// Row `i` of the output is the mean of `h_i` and all neighbor rows.
    pub fn mean_aggregate(&self, h: &Tensor) -> Result<Tensor> {
        self.mean_aggregate_with(Exec::default(), h)
    }

    pub fn mean_aggregate_with(&self, exec: Exec, h: &Tensor) -> Result<Tensor> {
        self.check_rows(h)?;
        let s = h.cols();
        let mut out = Tensor::zeros(self.num_nodes, s);
        let work = (self.neighbors.len() + self.num_nodes) * s;
        par::fill_rows(exec.for_work(work), out.data_mut(), s, |i, row| {
            row.copy_from_slice(h.row_slice(i));
            for &j in self.neighbors(i) {
                for (o, x) in row.iter_mut().zip(h.row_slice(j)) {
                    *o += x;
                }
            }
            let w = 1.0 / (self.degree(i) + 1) as f64;
            for o in row.iter_mut() {
                *o *= w;
            }
        });
        Ok(out)
    }

    /// Transpose of the aggregation operator applied to an output adjoint.
    /// Uses symmetry: node `j` receives `g_i / (deg_i + 1)` from itself and
    /// each neighbor `i`.
    pub fn mean_aggregate_adjoint(&self, g: &Tensor) -> Result<Tensor> {
        self.check_rows(g)?;
        let s = g.cols();
        let mut out = Tensor::zeros(self.num_nodes, s);
        let work = (self.neighbors.len() + self.num_nodes) * s;
        par::fill_rows(Exec::default().for_work(work), out.data_mut(), s, |j, row| {
            let wj = 1.0 / (self.degree(j) + 1) as f64;
            for (o, x) in row.iter_mut().zip(g.row_slice(j)) {
                *o = wj * x;
            }
            for &i in self.neighbors(j) {
                let wi = 1.0 / (self.degree(i) + 1) as f64;
                for (o, x) in row.iter_mut().zip(g.row_slice(i)) {
                    *o += wi * x;
                }
            }
        });
        Ok(out)
    }

    /// Writes `N <num_nodes>` followed by one canonical `i j` line per edge.
    pub fn save_edge_list(&self, path: &Path) -> Result<()> {
        let mut s = format!("N {}\n", self.num_nodes);
        for (i, j) in self.edges() {
            let _ = writeln!(s, "{i} {j}");
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load_edge_list(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_edge_list(&text, path)
    }

    pub fn parse_edge_list(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(k, l)| (k + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines
            .next()
            .ok_or_else(|| Error::parse(path, Some(1), "missing `N <num_nodes>` header"))?;
        let n = match header.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["N", n] => n
                .parse::<usize>()
                .map_err(|e| Error::parse(path, Some(hline), format!("bad node count: {e}")))?,
            _ => return Err(Error::parse(path, Some(hline), "expected header `N <num_nodes>`")),
        };
        let mut edges = Vec::new();
        for (lineno, line) in lines {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [a, b] = parts.as_slice() else {
                return Err(Error::parse(path, Some(lineno), "expected `i j`"));
            };
            let i: usize = a
                .parse()
                .map_err(|e| Error::parse(path, Some(lineno), format!("bad index `{a}`: {e}")))?;
            let j: usize = b
                .parse()
                .map_err(|e| Error::parse(path, Some(lineno), format!("bad index `{b}`: {e}")))?;
            if i >= n || j >= n {
                return Err(Error::parse(
                    path,
                    Some(lineno),
                    format!("edge ({i}, {j}) out of range for {n} nodes"),
                ));
            }
            edges.push((i, j));
        }
        Graph::from_edges(n, &edges)
    }
}

/// Raw node features `X`, one row per node.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix(Tensor);

impl FeatureMatrix {
    pub fn new(t: Tensor) -> Result<Self> {
        if !t.all_finite() {
            return Err(Error::Data("feature matrix contains non-finite values".into()));
        }
        Ok(FeatureMatrix(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn num_nodes(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row_slice(i)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_matrix_csv(&self.0, path)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        FeatureMatrix::new(read_matrix_csv(path)?)
    }
}

/// Comma-separated rows; floats printed with round-trip precision.
pub fn write_matrix_csv(t: &Tensor, path: &Path) -> Result<()> {
    let mut s = String::new();
    for i in 0..t.rows() {
        let row: Vec<String> = t.row_slice(i).iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_matrix_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(path, Some(k + 1), e.to_string()))?;
        match cols {
            None => cols = Some(vals.len()),
            Some(c) if c != vals.len() => {
                return Err(Error::parse(
                    path,
                    Some(k + 1),
                    format!("expected {c} columns, found {}", vals.len()),
                ))
            }
            _ => {}
        }
        data.extend(vals);
        rows += 1;
    }
    Tensor::from_rows(rows, cols.unwrap_or(0), data)
}
