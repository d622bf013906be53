//! Station graph, normalized Laplacian, and the eigenvector embedding that is
//! added to every time step of the input.

use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Eigenvalues below this belong to the null space (one per component).
pub const TRIVIAL_EIGENVALUE: f64 = 1e-8;

const MAX_SWEEPS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub struct StationGraph {
    names: Vec<String>,
    adjacency: Tensor,
    flow_station: usize,
}

impl StationGraph {
    pub fn new(names: Vec<String>, adjacency: Tensor, flow_station: usize) -> Result<Self> {
        let n = names.len();
        if n == 0 {
            return Err(Error::Data("graph has no stations".into()));
        }
        if adjacency.shape() != [n, n] {
            return Err(Error::Data(format!(
                "adjacency shape {:?} does not match {n} stations",
                adjacency.shape()
            )));
        }
        for i in 0..n {
            if adjacency.at(&[i, i]) != 0.0 {
                return Err(Error::Data(format!("adjacency diagonal at {i} is nonzero")));
            }
            for j in 0..n {
                let a = adjacency.at(&[i, j]);
                if !(a >= 0.0) || !a.is_finite() {
                    return Err(Error::Data(format!("adjacency entry ({i}, {j}) = {a} is not a finite nonnegative value")));
                }
                if (a - adjacency.at(&[j, i])).abs() > 1e-12 {
                    return Err(Error::Data(format!("adjacency is not symmetric at ({i}, {j})")));
                }
            }
        }
        if flow_station >= n {
            return Err(Error::Data(format!("flow station index {flow_station} out of range")));
        }
        Ok(StationGraph {
            names,
            adjacency,
            flow_station,
        })
    }

    /// Reads an adjacency CSV: a header row of station names followed by an
    /// `N × N` block of nonnegative reals.
    pub fn from_csv(path: &Path, flow_station: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| Error::Data(format!("cannot read adjacency {}: {e}", path.display())))?;
        let names: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::Data(format!("adjacency header: {e}")))?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        let mut data = Vec::with_capacity(names.len() * names.len());
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Data(format!("adjacency row {}: {e}", r + 2)))?;
            for cell in rec.iter() {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| Error::Data(format!("adjacency row {}: bad value {cell:?}", r + 2)))?;
                data.push(v);
            }
        }
        let n = names.len();
        let adjacency = Tensor::new(vec![n, n], data)
            .map_err(|_| Error::Data(format!("adjacency must be {n}x{n}")))?;
        let flow = names
            .iter()
            .position(|s| s == flow_station)
            .ok_or_else(|| Error::Data(format!("flow station {flow_station:?} not in adjacency header")))?;
        Self::new(names, adjacency, flow)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        let csv_err = |e: csv::Error| Error::Data(e.to_string());
        w.write_record(&self.names).map_err(csv_err)?;
        for i in 0..self.n_stations() {
            w.write_record(self.adjacency.row(i).iter().map(|v| v.to_string()))
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn n_stations(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn flow_station(&self) -> usize {
        self.flow_station
    }

    /// `I − D^{-1/2} A D^{-1/2}`; an isolated node gets `D^{-1/2} = 0`.
    pub fn normalized_laplacian(&self) -> Tensor {
        let n = self.n_stations();
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|i| {
                let deg: f64 = self.adjacency.row(i).iter().sum();
                if deg > 0.0 {
                    1.0 / deg.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut l = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let delta = if i == j { 1.0 } else { 0.0 };
                l.set(&[i, j], delta - inv_sqrt[i] * self.adjacency.at(&[i, j]) * inv_sqrt[j]);
            }
        }
        l
    }
}

#[derive(Clone, Debug)]
pub struct Eigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Columns are the eigenvectors.
    pub vectors: Tensor,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Eigenvalues come back ascending; each eigenvector is signed so that its
/// first largest-magnitude component is positive.
pub fn symmetric_eigen(m: &Tensor) -> Result<Eigen> {
    if m.rank() != 2 || m.shape()[0] != m.shape()[1] {
        return shape_err(format!("eigendecomposition needs a square matrix, got {:?}", m.shape()));
    }
    let n = m.shape()[0];
    for i in 0..n {
        for j in 0..i {
            if (m.at(&[i, j]) - m.at(&[j, i])).abs() > 1e-10 {
                return Err(Error::Contract(format!("matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut a: Vec<f64> = m.data().to_vec();
    let mut v = vec![0.0; n * n];
    (0..n).for_each(|i| v[i * n + i] = 1.0);
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);

    let off = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off(&a) <= 1e-15 * scale;
    let mut sweep = 0;
    while !converged && sweep < MAX_SWEEPS {
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
        sweep += 1;
        converged = off(&a) <= 1e-15 * scale;
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi eigensolver did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = Tensor::zeros(&[n, n]);
    for (col, &src) in order.iter().enumerate() {
        let mut vec: Vec<f64> = (0..n).map(|k| v[k * n + src]).collect();
        let max = vec.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let lead = vec.iter().position(|x| x.abs() >= max - 1e-12).unwrap_or(0);
        if vec[lead] < 0.0 {
            vec.iter_mut().for_each(|x| *x = -*x);
        }
        for (k, x) in vec.into_iter().enumerate() {
            vectors.set(&[k, col], x);
        }
    }
    Ok(Eigen { values, vectors })
}

/// The fixed (non-learnable) half of the spatial embedding: the `m` smallest
/// nontrivial Laplacian eigenpairs. The `m → 1` projection lives with the
/// model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianEmbedding {
    /// `[N, m]`; `None` when `m == 0`.
    pub eigvecs: Option<Tensor>,
    pub eigvals: Vec<f64>,
}

impl LaplacianEmbedding {
    pub fn new(graph: &StationGraph, m: usize) -> Result<Self> {
        let eig = symmetric_eigen(&graph.normalized_laplacian())?;
        let n = graph.n_stations();
        let nontrivial: Vec<usize> = (0..n).filter(|&i| eig.values[i] >= TRIVIAL_EIGENVALUE).collect();
        if m > nontrivial.len() {
            return Err(Error::Config(format!(
                "embedding needs {m} nontrivial eigenvectors but the graph has only {}",
                nontrivial.len()
            )));
        }
        if m == 0 {
            return Ok(LaplacianEmbedding { eigvecs: None, eigvals: Vec::new() });
        }
        let picked = &nontrivial[..m];
        let mut vecs = Tensor::zeros(&[n, m]);
        for (col, &src) in picked.iter().enumerate() {
            for k in 0..n {
                vecs.set(&[k, col], eig.vectors.at(&[k, src]));
            }
        }
        Ok(LaplacianEmbedding {
            eigvecs: Some(vecs),
            eigvals: picked.iter().map(|&i| eig.values[i]).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.eigvals.len()
    }

    /// `X_s = eigvecs · w + b` evaluated on plain values.
    pub fn embedding(&self, w: &[f64], b: f64, n_stations: usize) -> Vec<f64> {
        match &self.eigvecs {
            None => vec![b; n_stations],
            Some(v) => (0..n_stations)
                .map(|k| v.row(k).iter().zip(w).map(|(x, y)| x * y).sum::<f64>() + b)
                .collect(),
        }
    }
}

/// `X_e = X + (eigvecs · w + b)` broadcast over the time rows of `x` (`[T, N]`).
/// `eigvecs` is `[N, m]` (absent when `m == 0`), `w` is `[m]`, `b` is `[1]`.
pub fn fuse_embedding(tape: &mut Tape, x: Var, eigvecs: Option<Var>, w: Var, b: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 2 {
        return shape_err(format!("fuse expects [T, N], got {xs:?}"));
    }
    let n = xs[1];
    let station_term = match eigvecs {
        Some(ev) => {
            let es = tape.shape(ev).to_vec();
            if es[0] != n {
                return shape_err(format!("embedding covers {} stations, input has {n}", es[0]));
            }
            let wcol = tape.reshape(w, &[es[1], 1])?;
            let proj = tape.matmul(ev, wcol)?;
            let proj = tape.reshape(proj, &[n])?;
            tape.add(proj, b)?
        }
        None => {
            let zeros = tape.constant(Tensor::zeros(&[n]));
            tape.add(zeros, b)?
        }
    };
    tape.add(x, station_term)
}
