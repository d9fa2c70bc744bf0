//! Graph topology, Laplacian and graph Fourier basis.
//!
//! A [`Graph`] is an undirected, possibly weighted graph stored as a dense
//! symmetric adjacency matrix. The combinatorial Laplacian `L = D - A` is
//! diagonalised once into a [`GftBasis`] whose columns are the graph Fourier
//! modes, sorted by ascending frequency (eigenvalue).
//!
//! Everything here is dense: the target graphs have at most a few hundred
//! nodes.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius in kilometres, used by the haversine distance.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// An undirected graph with a dense symmetric nonnegative adjacency.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    adjacency: DMatrix<f64>,
    weighted: bool,
    node_labels: Option<Vec<String>>,
    coordinates: Option<Vec<(f64, f64)>>,
}

/// One edge of an edge list. `weight: None` means an unweighted edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: Option<f64>,
}

impl Edge {
    pub fn new(src: usize, dst: usize) -> Self {
        Self { src, dst, weight: None }
    }

    pub fn weighted(src: usize, dst: usize, weight: f64) -> Self {
        Self {
            src,
            dst,
            weight: Some(weight),
        }
    }
}

impl From<(usize, usize)> for Edge {
    fn from((src, dst): (usize, usize)) -> Self {
        Edge::new(src, dst)
    }
}

impl From<(usize, usize, f64)> for Edge {
    fn from((src, dst, w): (usize, usize, f64)) -> Self {
        Edge::weighted(src, dst, w)
    }
}

impl Graph {
    /// Builds a graph from an edge list. Duplicate edges keep the last
    /// weight given; unweighted edges store 1.
    pub fn from_edges<E: Into<Edge>>(n: usize, edges: impl IntoIterator<Item = E>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidGraph("graph must have at least one node".into()));
        }
        let mut adjacency = DMatrix::zeros(n, n);
        let mut weighted = false;
        for edge in edges {
            let Edge { src, dst, weight } = edge.into();
            for index in [src, dst] {
                if index >= n {
                    return Err(Error::NodeOutOfRange { index, n });
                }
            }
            if src == dst {
                return Err(Error::InvalidGraph(format!("self-loop at node {src}")));
            }
            let w = match weight {
                Some(w) if !(w > 0.0) || !w.is_finite() => {
                    return Err(Error::InvalidGraph(format!(
                        "edge ({src}, {dst}) has nonpositive or non-finite weight {w}"
                    )))
                }
                Some(w) => {
                    weighted = true;
                    w
                }
                None => 1.0,
            };
            adjacency[(src, dst)] = w;
            adjacency[(dst, src)] = w;
        }
        Ok(Self {
            adjacency,
            weighted,
            node_labels: None,
            coordinates: None,
        })
    }

    /// Wraps an existing adjacency matrix after validating it.
    pub fn from_adjacency(adjacency: DMatrix<f64>) -> Result<Self> {
        let n = adjacency.nrows();
        if n == 0 || adjacency.ncols() != n {
            return Err(Error::InvalidGraph(format!(
                "adjacency must be square and nonempty, got {}x{}",
                adjacency.nrows(),
                adjacency.ncols()
            )));
        }
        let mut weighted = false;
        for i in 0..n {
            if adjacency[(i, i)] != 0.0 {
                return Err(Error::InvalidGraph(format!("nonzero diagonal at node {i}")));
            }
            for j in 0..n {
                let a = adjacency[(i, j)];
                if !a.is_finite() || a < 0.0 {
                    return Err(Error::InvalidGraph(format!("invalid weight {a} at ({i}, {j})")));
                }
                if a != adjacency[(j, i)] {
                    return Err(Error::InvalidGraph(format!("asymmetric entry at ({i}, {j})")));
                }
                if a != 0.0 && a != 1.0 {
                    weighted = true;
                }
            }
        }
        Ok(Self {
            adjacency,
            weighted,
            node_labels: None,
            coordinates: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_nodes() {
            return Err(Error::DimensionMismatch {
                expected: self.n_nodes(),
                found: labels.len(),
            });
        }
        self.node_labels = Some(labels);
        Ok(self)
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    /// True when at least one stored edge weight differs from 1.
    pub fn is_weighted(&self) -> bool {
        self.weighted
    }

    pub fn node_labels(&self) -> Option<&[String]> {
        self.node_labels.as_deref()
    }

    pub fn coordinates(&self) -> Option<&[(f64, f64)]> {
        self.coordinates.as_deref()
    }

    pub fn n_edges(&self) -> usize {
        let n = self.n_nodes();
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.adjacency[(i, j)] != 0.0)
            .count()
    }

    /// Weighted degree of every node (`1ᵀA`).
    pub fn degrees(&self) -> DVector<f64> {
        let n = self.n_nodes();
        DVector::from_fn(n, |i, _| self.adjacency.row(i).sum())
    }

    /// Combinatorial Laplacian `L = D - A`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        let mut l = -self.adjacency.clone();
        for (i, d) in self.degrees().iter().enumerate() {
            l[(i, i)] = *d;
        }
        l
    }

    /// 1-hop neighbourhood of `i` in ascending index order.
    pub fn neighbors(&self, i: usize) -> Result<Vec<usize>> {
        let n = self.n_nodes();
        if i >= n {
            return Err(Error::NodeOutOfRange { index: i, n });
        }
        Ok((0..n).filter(|&j| j != i && self.adjacency[(i, j)] != 0.0).collect())
    }

    /// Number of connected components (breadth-first search).
    pub fn n_components(&self) -> usize {
        let n = self.n_nodes();
        let mut seen = vec![false; n];
        let mut count = 0;
        for start in 0..n {
            if seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            let mut queue = vec![start];
            while let Some(u) = queue.pop() {
                for (v, s) in seen.iter_mut().enumerate() {
                    if !*s && self.adjacency[(u, v)] != 0.0 {
                        *s = true;
                        queue.push(v);
                    }
                }
            }
        }
        count
    }

    /// Eigendecomposition of this graph's Laplacian.
    pub fn gft(&self) -> Result<GftBasis> {
        gft(&self.laplacian())
    }
}

/// Orthonormal graph Fourier basis.
///
/// Column `k` of `eigenvectors` is the Fourier mode with frequency
/// `eigenvalues[k]`; frequencies are nondecreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct GftBasis {
    eigenvectors: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    fingerprint: String,
}

impl GftBasis {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Stable identifier derived from the basis contents; used to check that
    /// a filter is applied to the basis it was trained against.
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Forward transform `Uᵀx`.
    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        self.eigenvectors.tr_mul(x)
    }

    /// Inverse transform `Ux̂`.
    pub fn inverse(&self, coeffs: &DVector<f64>) -> DVector<f64> {
        &self.eigenvectors * coeffs
    }

    /// `U diag(λ) Uᵀ`; should reproduce the Laplacian.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = &self.eigenvectors * DMatrix::from_diagonal(&self.eigenvalues);
        scaled * self.eigenvectors.transpose()
    }
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i + 1..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// FNV-1a over the bit patterns of the eigenvalues and eigenvectors.
fn fingerprint(values: &DVector<f64>, vectors: &DMatrix<f64>) -> String {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    let n = values.len() as u64;
    for byte in n
        .to_le_bytes()
        .into_iter()
        .chain(values.iter().flat_map(|v| v.to_bits().to_le_bytes()))
        .chain(vectors.iter().flat_map(|v| v.to_bits().to_le_bytes()))
    {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    format!("gft-{n}-{hash:016x}")
}

/// Eigendecomposition `L = U diag(λ) Uᵀ` with ascending eigenvalues.
///
/// Each eigenvector is sign-normalised so that its entry of largest
/// magnitude (first one on ties) is nonnegative.
pub fn gft(laplacian: &DMatrix<f64>) -> Result<GftBasis> {
    let n = laplacian.nrows();
    if n == 0 || laplacian.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: laplacian.ncols(),
        });
    }
    let asym = max_asymmetry(laplacian);
    if asym > 1e-10 {
        return Err(Error::NotSymmetric(asym));
    }
    if laplacian.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("Laplacian has non-finite entries".into()));
    }

    let eig = SymmetricEigen::try_new(laplacian.clone(), f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("symmetric eigendecomposition did not converge".into()))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));

    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let mut pivot = 0;
        for i in 1..n {
            if col[i].abs() > col[pivot].abs() {
                pivot = i;
            }
        }
        if col[pivot] < 0.0 {
            col.neg_mut();
        }
        eigenvectors.set_column(dst, &col);
    }
    if eigenvectors.iter().chain(eigenvalues.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("eigendecomposition produced non-finite values".into()));
    }
    let fingerprint = fingerprint(&eigenvalues, &eigenvectors);
    Ok(GftBasis {
        eigenvectors,
        eigenvalues,
        fingerprint,
    })
}

/// Great-circle distance in kilometres between two `(lat, lon)` points in degrees.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// For each point, the indices of its `k` nearest other points with their
/// distances. Ties break towards the smaller node index.
fn nearest_neighbors(coords: &[(f64, f64)], k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    let n = coords.len();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if k >= n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} requires at least {} points, got {n}",
            k + 1
        )));
    }
    if let Some(i) = coords
        .iter()
        .position(|(lat, lon)| !lat.is_finite() || !lon.is_finite())
    {
        return Err(Error::InvalidArgument(format!("non-finite coordinate for node {i}")));
    }
    Ok((0..n)
        .map(|i| {
            let mut dist: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, haversine_km(coords[i], coords[j])))
                .collect();
            dist.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            dist.truncate(k);
            dist
        })
        .collect())
}

/// Median of all `n·k` nearest-neighbour distances; the default kernel bandwidth.
pub fn median_knn_distance(coords: &[(f64, f64)], k: usize) -> Result<f64> {
    let mut all: Vec<f64> = nearest_neighbors(coords, k)?
        .into_iter()
        .flatten()
        .map(|(_, d)| d)
        .collect();
    all.sort_by(f64::total_cmp);
    let m = all.len();
    Ok(if m % 2 == 1 {
        all[m / 2]
    } else {
        0.5 * (all[m / 2 - 1] + all[m / 2])
    })
}

/// kNN graph over geographic points with Gaussian-kernel weights
/// `exp(-d²/(2·bandwidth²))`, union-symmetrised.
pub fn knn_graph(coords: &[(f64, f64)], k: usize, bandwidth: f64) -> Result<Graph> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "bandwidth must be positive, got {bandwidth}"
        )));
    }
    let n = coords.len();
    let knn = nearest_neighbors(coords, k)?;
    let mut adjacency = DMatrix::zeros(n, n);
    for (i, row) in knn.iter().enumerate() {
        for &(j, d) in row {
            let w = (-(d * d) / (2.0 * bandwidth * bandwidth)).exp();
            // A kernel weight can underflow to 0 for far-apart stations; keep the edge.
            let w = w.max(f64::MIN_POSITIVE);
            adjacency[(i, j)] = w;
            adjacency[(j, i)] = w;
        }
    }
    Ok(Graph {
        adjacency,
        weighted: true,
        node_labels: None,
        coordinates: Some(coords.to_vec()),
    })
}

fn file_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::File {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| file_err(path, e.to_string()))
}

/// Reads a `src,dst[,weight]` edge list with 0-based indices. A first row
/// whose indices do not parse is treated as a header.
pub fn load_edge_list(path: &Path, n: usize) -> Result<Graph> {
    let mut edges = Vec::new();
    for (row, record) in csv_reader(path)?.records().enumerate() {
        let record = record.map_err(|e| file_err(path, e.to_string()))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if !(2..=3).contains(&record.len()) {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                row,
                col: record.len(),
                msg: "expected `src,dst[,weight]`".into(),
            });
        }
        let parse_idx = |col: usize| record[col].parse::<usize>();
        let (src, dst) = match (parse_idx(0), parse_idx(1)) {
            (Ok(s), Ok(d)) => (s, d),
            _ if row == 0 => continue,
            (Err(_), _) | (_, Err(_)) => {
                let col = usize::from(parse_idx(0).is_ok());
                return Err(Error::Ingest {
                    path: path.to_path_buf(),
                    row,
                    col,
                    msg: format!("not a node index: {:?}", &record[col]),
                });
            }
        };
        let weight = match record.get(2) {
            Some(w) if !w.is_empty() => Some(w.parse::<f64>().map_err(|_| Error::Ingest {
                path: path.to_path_buf(),
                row,
                col: 2,
                msg: format!("not a number: {w:?}"),
            })?),
            _ => None,
        };
        edges.push(Edge { src, dst, weight });
    }
    Graph::from_edges(n, edges)
}

/// Writes the upper triangle as a headerless `src,dst[,weight]` edge list.
pub fn write_edge_list(path: &Path, graph: &Graph) -> Result<()> {
    let a = graph.adjacency();
    let mut out = String::new();
    for i in 0..graph.n_nodes() {
        for j in i + 1..graph.n_nodes() {
            if a[(i, j)] > 0.0 {
                if graph.is_weighted() {
                    out.push_str(&format!("{i},{j},{}\n", a[(i, j)]));
                } else {
                    out.push_str(&format!("{i},{j}\n"));
                }
            }
        }
    }
    std::fs::write(path, out).map_err(|e| file_err(path, e.to_string()))
}

/// `(lat, lon)` pairs in degrees.
pub type Coordinates = Vec<(f64, f64)>;

/// Reads a `node_id,lat,lon` coordinates file. Returns labels and points in
/// file order.
pub fn load_coordinates(path: &Path) -> Result<(Vec<String>, Coordinates)> {
    let mut labels = Vec::new();
    let mut coords = Vec::new();
    for (row, record) in csv_reader(path)?.records().enumerate() {
        let record = record.map_err(|e| file_err(path, e.to_string()))?;
        if record.iter().all(str::is_empty) {
            continue;
        }
        if record.len() != 3 {
            return Err(Error::Ingest {
                path: path.to_path_buf(),
                row,
                col: record.len(),
                msg: "expected `node_id,lat,lon`".into(),
            });
        }
        let lat = record[1].parse::<f64>();
        let lon = record[2].parse::<f64>();
        match (lat, lon) {
            (Ok(lat), Ok(lon)) => {
                labels.push(record[0].to_string());
                coords.push((lat, lon));
            }
            _ if row == 0 => continue,
            (lat, _) => {
                let col = if lat.is_err() { 1 } else { 2 };
                return Err(Error::Ingest {
                    path: path.to_path_buf(),
                    row,
                    col,
                    msg: format!("not a number: {:?}", &record[col]),
                });
            }
        }
    }
    if coords.is_empty() {
        return Err(file_err(path, "no coordinates"));
    }
    Ok((labels, coords))
}

/// Provenance of a graph, recorded in run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub n_nodes: usize,
    pub n_edges: usize,
    pub weighted: bool,
    pub components: usize,
    pub basis: String,
}

impl GraphSummary {
    pub fn new(graph: &Graph, basis: &GftBasis) -> Self {
        Self {
            n_nodes: graph.n_nodes(),
            n_edges: graph.n_edges(),
            weighted: graph.is_weighted(),
            components: graph.n_components(),
            basis: basis.fingerprint().to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path3() -> Graph {
        Graph::from_edges(3, [(0, 1), (1, 2)]).unwrap()
    }

    fn complete(n: usize) -> Graph {
        let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        Graph::from_edges(n, edges).unwrap()
    }

    fn max_abs(m: &DMatrix<f64>) -> f64 {
        m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }

    /// Connected Erdős–Rényi graph: a random spanning path plus extra edges.
    fn random_connected(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Graph {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut edges: Vec<(usize, usize)> = perm.windows(2).map(|w| (w[0], w[1])).collect();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(p) {
                    edges.push((i, j));
                }
            }
        }
        Graph::from_edges(n, edges).unwrap()
    }

    #[test]
    fn path_graph_adjacency() {
        let g = path3();
        let expected = DMatrix::from_row_slice(3, 3, &[0., 1., 0., 1., 0., 1., 0., 1., 0.]);
        assert_eq!(g.adjacency(), &expected);
        assert!(!g.is_weighted());
    }

    #[test]
    fn empty_edge_set_is_zero_matrix() {
        let g = Graph::from_edges::<Edge>(2, []).unwrap();
        assert_eq!(g.adjacency(), &DMatrix::zeros(2, 2));
    }

    #[test]
    fn weighted_edge_is_symmetric() {
        let g = Graph::from_edges(3, [(0, 1, 2.5)]).unwrap();
        assert_eq!(g.adjacency()[(0, 1)], 2.5);
        assert_eq!(g.adjacency()[(1, 0)], 2.5);
        assert_eq!(g.adjacency().iter().filter(|&&v| v != 0.0).count(), 2);
        assert!(g.is_weighted());
    }

    #[test]
    fn duplicate_edges_keep_last_weight() {
        let g = Graph::from_edges(2, [(0, 1, 2.0), (1, 0, 3.0)]).unwrap();
        assert_eq!(g.adjacency()[(0, 1)], 3.0);
        assert_eq!(g.adjacency()[(1, 0)], 3.0);
    }

    #[test]
    fn rejects_bad_edges() {
        assert!(matches!(Graph::from_edges(3, [(1, 1)]), Err(Error::InvalidGraph(_))));
        assert!(matches!(
            Graph::from_edges(3, [(0, 3)]),
            Err(Error::NodeOutOfRange { index: 3, n: 3 })
        ));
        assert!(Graph::from_edges(3, [(0, 1, 0.0)]).is_err());
        assert!(Graph::from_edges(3, [(0, 1, -1.0)]).is_err());
    }

    #[test]
    fn laplacian_examples() {
        let l = path3().laplacian();
        let expected = DMatrix::from_row_slice(3, 3, &[1., -1., 0., -1., 2., -1., 0., -1., 1.]);
        assert_eq!(l, expected);

        let single = Graph::from_edges::<Edge>(1, []).unwrap();
        assert_eq!(single.laplacian(), DMatrix::from_element(1, 1, 0.0));

        let w = Graph::from_edges(2, [(0, 1, 2.0)]).unwrap();
        assert_eq!(w.laplacian(), DMatrix::from_row_slice(2, 2, &[2., -2., -2., 2.]));
    }

    #[test]
    fn gft_p2_closed_form() {
        let l = DMatrix::from_row_slice(2, 2, &[1., -1., -1., 1.]);
        let basis = gft(&l).unwrap();
        assert!((basis.eigenvalues()[0]).abs() < 1e-12);
        assert!((basis.eigenvalues()[1] - 2.0).abs() < 1e-12);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let u = basis.eigenvectors();
        assert!((u[(0, 0)] - s).abs() < 1e-12 && (u[(1, 0)] - s).abs() < 1e-12);
        // largest-magnitude tie resolves to the first entry, which is nonnegative
        assert!((u[(0, 1)] - s).abs() < 1e-12 && (u[(1, 1)] + s).abs() < 1e-12);
    }

    #[test]
    fn gft_complete_graph_spectrum() {
        let basis = complete(3).gft().unwrap();
        let ev = basis.eigenvalues();
        assert!(ev[0].abs() < 1e-12);
        assert!((ev[1] - 3.0).abs() < 1e-12);
        assert!((ev[2] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn gft_rejects_asymmetric() {
        let l = DMatrix::from_row_slice(2, 2, &[1., -1., -0.5, 1.]);
        assert!(matches!(gft(&l), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn gft_random_graph_reconstructs_laplacian() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = random_connected(20, 0.2, &mut rng);
        let l = g.laplacian();
        let basis = g.gft().unwrap();
        // dense re-multiplication oracle
        let u = basis.eigenvectors();
        let mut recon = DMatrix::zeros(20, 20);
        for i in 0..20 {
            for j in 0..20 {
                let mut acc = 0.0;
                for k in 0..20 {
                    acc += u[(i, k)] * basis.eigenvalues()[k] * u[(j, k)];
                }
                recon[(i, j)] = acc;
            }
        }
        assert!(max_abs(&(recon - &l)) < 1e-8);
        let gram = u.transpose() * u;
        assert!(max_abs(&(gram - DMatrix::identity(20, 20))) < 1e-8);
        let ev = basis.eigenvalues();
        assert!(ev[0].abs() < 1e-8);
        assert!(ev.iter().zip(ev.iter().skip(1)).all(|(a, b)| a <= b));
        assert!(ev.iter().all(|&v| v >= -1e-10));
        // the constant vector spans the null space of a connected graph
        let ones = DVector::from_element(20, 1.0 / 20f64.sqrt());
        assert!((u.column(0) - ones).amax() < 1e-8);
    }

    #[test]
    fn gft_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_connected(12, 0.3, &mut rng);
        let a = g.gft().unwrap();
        let b = g.gft().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn neighbors_examples() {
        let p3 = path3();
        assert_eq!(p3.neighbors(1).unwrap(), vec![0, 2]);
        let iso = Graph::from_edges(3, [(0, 1)]).unwrap();
        assert!(iso.neighbors(2).unwrap().is_empty());
        assert_eq!(complete(3).neighbors(0).unwrap(), vec![1, 2]);
        assert!(matches!(p3.neighbors(3), Err(Error::NodeOutOfRange { .. })));
    }

    #[test]
    fn laplacian_is_psd_with_zero_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_connected(25, 0.15, &mut rng);
        let l = g.laplacian();
        for i in 0..25 {
            assert!(l.row(i).sum().abs() < 1e-12);
        }
        for _ in 0..100 {
            let x = DVector::from_fn(25, |_, _| rng.random_range(-1.0..1.0));
            assert!(x.dot(&(&l * &x)) >= -1e-10);
        }
    }

    #[test]
    fn knn_collinear_points() {
        let coords = [(0.0, 0.0), (0.0, 1.0), (0.0, 2.0)];
        let g = knn_graph(&coords, 1, 100.0).unwrap();
        assert_eq!(g.neighbors(1).unwrap(), vec![0, 2]);
        assert_eq!(g.neighbors(0).unwrap(), vec![1]);
    }

    #[test]
    fn knn_duplicate_points_have_unit_weight() {
        let coords = [(10.0, 10.0), (10.0, 10.0), (20.0, 20.0)];
        let g = knn_graph(&coords, 1, 50.0).unwrap();
        assert_eq!(g.adjacency()[(0, 1)], 1.0);
    }

    #[test]
    fn knn_rejects_large_k_and_bad_bandwidth() {
        let coords = [(0.0, 0.0), (0.0, 1.0), (0.0, 2.0)];
        assert!(knn_graph(&coords, 3, 1.0).is_err());
        assert!(knn_graph(&coords, 1, 0.0).is_err());
    }

    #[test]
    fn knn_random_points_degree_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coords: Vec<(f64, f64)> = (0..10)
            .map(|_| (rng.random_range(40.0..45.0), rng.random_range(-100.0..-95.0)))
            .collect();
        let g = knn_graph(&coords, 3, 200.0).unwrap();
        // brute-force oracle: rank all pairs
        for i in 0..10 {
            let mut others: Vec<(f64, usize)> = (0..10)
                .filter(|&j| j != i)
                .map(|j| (haversine_km(coords[i], coords[j]), j))
                .collect();
            others.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for &(_, j) in &others[..3] {
                assert!(g.adjacency()[(i, j)] > 0.0);
            }
            assert!(g.neighbors(i).unwrap().len() >= 3);
        }
    }

    #[test]
    fn haversine_quarter_meridian() {
        let d = haversine_km((0.0, 0.0), (90.0, 0.0));
        assert!((d - EARTH_RADIUS_KM * std::f64::consts::FRAC_PI_2).abs() < 1e-9);
    }

    #[test]
    fn median_bandwidth() {
        let coords = [(0.0, 0.0), (0.0, 1.0), (0.0, 3.0)];
        // nearest distances: 1°, 1°, 2° of longitude at the equator
        let deg = haversine_km((0.0, 0.0), (0.0, 1.0));
        let m = median_knn_distance(&coords, 1).unwrap();
        assert!((m - deg).abs() < 1e-9);
    }

    #[test]
    fn edge_list_and_coordinates_files() {
        let dir = tempfile::tempdir().unwrap();
        let edges = dir.path().join("edges.csv");
        std::fs::write(&edges, "src,dst,weight\n0,1\n1,2,0.5\n").unwrap();
        let g = load_edge_list(&edges, 3).unwrap();
        assert_eq!(g.adjacency()[(0, 1)], 1.0);
        assert_eq!(g.adjacency()[(2, 1)], 0.5);

        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, "0,1\nx,2\n").unwrap();
        assert!(matches!(
            load_edge_list(&bad, 3),
            Err(Error::Ingest { row: 1, col: 0, .. })
        ));

        let coords = dir.path().join("coords.csv");
        std::fs::write(&coords, "node_id,lat,lon\nA,47.6,-122.3\nB,47.7,-122.2\n").unwrap();
        let (labels, pts) = load_coordinates(&coords).unwrap();
        assert_eq!(labels, vec!["A", "B"]);
        assert_eq!(pts[1], (47.7, -122.2));
    }

    #[test]
    fn from_adjacency_validates() {
        let ok = DMatrix::from_row_slice(2, 2, &[0., 1., 1., 0.]);
        assert!(Graph::from_adjacency(ok).is_ok());
        let asym = DMatrix::from_row_slice(2, 2, &[0., 1., 2., 0.]);
        assert!(Graph::from_adjacency(asym).is_err());
        let diag = DMatrix::from_row_slice(2, 2, &[1., 1., 1., 0.]);
        assert!(Graph::from_adjacency(diag).is_err());
    }

    #[test]
    fn edge_list_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        for g in [
            Graph::from_edges(4, [(0, 1), (1, 2), (0, 3)]).unwrap(),
            Graph::from_edges(3, [(0, 1, 0.25), (1, 2, 3.5)]).unwrap(),
        ] {
            write_edge_list(&path, &g).unwrap();
            let back = load_edge_list(&path, g.n_nodes()).unwrap();
            assert_eq!(back.adjacency(), g.adjacency());
        }
    }
}
