//! Road graphs, their normalized Laplacian, and its eigendecomposition.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Asymmetry allowed before [`jacobi_eigendecomposition`] refuses its input.
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;
/// Off-diagonal Frobenius mass at which Jacobi sweeps stop.
pub const JACOBI_TOLERANCE: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

/// Undirected weighted sensor network, stored as a dense symmetric adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct RoadGraph {
    num_nodes: usize,
    adjacency: Vec<f64>,
}

impl RoadGraph {
    /// Builds a graph from directed edge records, symmetrising as it goes.
    /// A later record for the same node pair replaces an earlier one.
    pub fn from_edges(num_nodes: usize, edges: impl IntoIterator<Item = Edge>) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::InvalidArgument("road graph needs at least one node".into()));
        }
        let mut adjacency = vec![0.0; num_nodes * num_nodes];
        for e in edges {
            if e.from >= num_nodes || e.to >= num_nodes {
                return Err(Error::Data(format!(
                    "edge ({}, {}) out of range for {num_nodes} nodes",
                    e.from, e.to
                )));
            }
            if e.from == e.to {
                return Err(Error::Data(format!("self-loop on node {}", e.from)));
            }
            if !(e.weight >= 0.0) || !e.weight.is_finite() {
                return Err(Error::Data(format!(
                    "edge ({}, {}) has invalid weight {}",
                    e.from, e.to, e.weight
                )));
            }
            adjacency[e.from * num_nodes + e.to] = e.weight;
            adjacency[e.to * num_nodes + e.from] = e.weight;
        }
        Ok(RoadGraph { num_nodes, adjacency })
    }

    /// Cycle `0 - 1 - … - (n-1) - 0` with unit weights.
    pub fn ring(num_nodes: usize) -> Result<Self> {
        let edges = (0..num_nodes).map(|i| Edge {
            from: i,
            to: (i + 1) % num_nodes,
            weight: 1.0,
        });
        if num_nodes < 2 {
            return Self::from_edges(num_nodes, std::iter::empty());
        }
        Self::from_edges(num_nodes, edges)
    }

    /// Parses `from,to[,weight]` lines. Blank lines and `#` comments are skipped,
    /// and a leading non-numeric header row (as in PeMS distance files) is ignored.
    pub fn from_csv(text: &str, num_nodes: usize, use_weights: bool) -> Result<Self> {
        let mut edges = Vec::new();
        let mut first_record = true;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let is_header = first_record && fields[0].parse::<f64>().is_err();
            first_record = false;
            if is_header {
                continue;
            }
            if fields.len() < 2 || fields.len() > 3 {
                return Err(Error::Data(format!(
                    "adjacency line {}: expected from,to[,weight], got {line:?}",
                    lineno + 1
                )));
            }
            let index = |s: &str| {
                s.parse::<usize>().map_err(|_| {
                    Error::Data(format!("adjacency line {}: bad node index {s:?}", lineno + 1))
                })
            };
            let weight = match fields.get(2) {
                Some(w) if use_weights => w.parse::<f64>().map_err(|_| {
                    Error::Data(format!("adjacency line {}: bad weight {w:?}", lineno + 1))
                })?,
                _ => 1.0,
            };
            edges.push(Edge {
                from: index(fields[0])?,
                to: index(fields[1])?,
                weight,
            });
        }
        Self::from_edges(num_nodes, edges)
    }

    pub fn load_csv(path: &Path, num_nodes: usize, use_weights: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, num_nodes, use_weights)
    }

    /// One line per undirected edge (`i < j`).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("# from,to,weight\n");
        for e in self.edges() {
            let _ = writeln!(out, "{},{},{}", e.from, e.to, e.weight);
        }
        out
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[i * self.num_nodes + j]
    }

    pub fn edges(&self) -> Vec<Edge> {
        let n = self.num_nodes;
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let w = self.adjacency[i * n + j];
                if w != 0.0 {
                    out.push(Edge { from: i, to: j, weight: w });
                }
            }
        }
        out
    }

    pub fn degree(&self, i: usize) -> f64 {
        let n = self.num_nodes;
        self.adjacency[i * n..(i + 1) * n].iter().sum()
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        crate::tensor::validate_permutation(perm, self.num_nodes)?;
        let edges = self.edges().into_iter().map(|e| Edge {
            from: perm[e.from],
            to: perm[e.to],
            weight: e.weight,
        });
        Self::from_edges(self.num_nodes, edges)
    }
}

/// `L = I - D^{-1/2} A D^{-1/2}`; a zero-degree node contributes an identity row.
pub fn normalized_laplacian(graph: &RoadGraph) -> Tensor {
    let n = graph.num_nodes;
    let degree: Vec<f64> = (0..n).map(|i| graph.degree(i)).collect();
    Tensor::from_fn(&[n, n], |ix| {
        let (i, j) = (ix[0], ix[1]);
        let identity = if i == j { 1.0 } else { 0.0 };
        let scale = degree[i] * degree[j];
        // `d_i d_j` commutes exactly, so the matrix is bitwise symmetric.
        if scale > 0.0 {
            identity - graph.weight(i, j) / scale.sqrt()
        } else {
            identity
        }
    })
}

/// Eigendecomposition of a symmetric matrix in the row convention `Uᵀ diag(Λ) U = L`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// `N × N`, row `i` is the unit eigenvector of `eigenvalues[i]`.
    pub eigenvectors: Tensor,
    /// Sweeps used by the solver.
    pub sweeps: usize,
}

impl SpectralBasis {
    pub fn from_graph(graph: &RoadGraph) -> Result<Self> {
        jacobi_eigendecomposition(&normalized_laplacian(graph))
    }

    pub fn num_nodes(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `Uᵀ diag(Λ) U`.
    pub fn reconstruct(&self) -> Tensor {
        let n = self.num_nodes();
        let u = self.eigenvectors.data();
        Tensor::from_fn(&[n, n], |ix| {
            (0..n)
                .map(|k| u[k * n + ix[0]] * self.eigenvalues[k] * u[k * n + ix[1]])
                .sum()
        })
    }
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi rotations until the off-diagonal Frobenius mass drops below
/// [`JACOBI_TOLERANCE`].
///
/// Eigenvalues come back ascending; each eigenvector's largest-magnitude entry
/// is made positive so results are reproducible.
pub fn jacobi_eigendecomposition(matrix: &Tensor) -> Result<SpectralBasis> {
    let shape = matrix.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::InvalidArgument(format!(
            "eigendecomposition needs a square matrix, got {shape:?}"
        )));
    }
    let n = shape[0];
    let src = matrix.data();
    let scale = src.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (src[i * n + j], src[j * n + i]);
            if !x.is_finite() {
                return Err(Error::Numerical(format!("non-finite matrix entry at ({i}, {j})")));
            }
            if (x - y).abs() > SYMMETRY_TOLERANCE * scale {
                return Err(Error::InvalidArgument(format!(
                    "matrix is not symmetric: entry ({i}, {j}) = {x} but ({j}, {i}) = {y}"
                )));
            }
            a[i * n + j] = 0.5 * (x + y);
        }
    }
    let mut v = Tensor::eye(n).into_data();

    let mut sweeps = 0;
    while off_diagonal_norm(&a, n) >= JACOBI_TOLERANCE {
        if sweeps == MAX_SWEEPS {
            return Err(Error::Numerical(format!(
                "Jacobi did not converge in {MAX_SWEEPS} sweeps (off-diagonal mass {:e})",
                off_diagonal_norm(&a, n)
            )));
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                a[p * n + p] -= t * apq;
                a[q * n + q] += t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for r in 0..n {
                    if r != p && r != q {
                        let (arp, arq) = (a[r * n + p], a[r * n + q]);
                        let new_rp = c * arp - s * arq;
                        let new_rq = s * arp + c * arq;
                        a[r * n + p] = new_rp;
                        a[p * n + r] = new_rp;
                        a[r * n + q] = new_rq;
                        a[q * n + r] = new_rq;
                    }
                    let (vrp, vrq) = (v[r * n + p], v[r * n + q]);
                    v[r * n + p] = c * vrp - s * vrq;
                    v[r * n + q] = s * vrp + c * vrq;
                }
            }
        }
    }

    // Columns of `v` are eigenvectors; emit them as rows in ascending order.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let eigenvalues = order.iter().map(|&k| a[k * n + k]).collect();
    let mut rows = vec![0.0; n * n];
    for (row, &k) in order.iter().enumerate() {
        let col: Vec<f64> = (0..n).map(|r| v[r * n + k]).collect();
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for (r, x) in col.into_iter().enumerate() {
            rows[row * n + r] = sign * x;
        }
    }
    Ok(SpectralBasis {
        eigenvalues,
        eigenvectors: Tensor::new(&[n, n], rows)?,
        sweeps,
    })
}

/// Graph embedding `U · W_e`: one projected row per eigenvector, recorded on the tape.
pub fn graph_embedding(tape: &mut Tape, eigenvectors: Var, projection: Var) -> Result<Var> {
    let (u, w) = (tape.shape(eigenvectors), tape.shape(projection));
    if u.len() != 2 || w.len() != 2 || u[1] != w[0] {
        return Err(Error::shape("graph_embedding", u, w));
    }
    tape.matmul(eigenvectors, projection)
}
