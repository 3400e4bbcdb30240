//! Prediction-quality metrics and the anomaly-analysis pipeline:
//! per-channel RMSE vectors, PCA projection onto the leading
//! components, k-means clustering, and a serializable cluster report.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Per-channel root-mean-squared error between two equally shaped
/// sequences.
pub fn rmse(predicted: &Matrix, actual: &Matrix) -> Result<Vec<f64>> {
    if predicted.rows() != actual.rows() || predicted.cols() != actual.cols() {
        return Err(Error::ShapeMismatch {
            op: "rmse",
            lhs_rows: predicted.rows(),
            lhs_cols: predicted.cols(),
            rhs_rows: actual.rows(),
            rhs_cols: actual.cols(),
        });
    }
    let n = predicted.rows() as f64;
    Ok((0..predicted.cols())
        .map(|j| {
            let sq: f64 = (0..predicted.rows())
                .map(|i| {
                    let d = predicted.get(i, j) - actual.get(i, j);
                    d * d
                })
                .sum();
            (sq / n).sqrt()
        })
        .collect())
}

/// PCA of row vectors: mean-centered projection onto the top
/// eigenvectors of the sample covariance.
pub struct Pca {
    /// n x k projection of the (centered) input rows.
    pub projection: Matrix,
    /// k x d basis; row i is the i-th principal direction. Sign
    /// convention: the largest-magnitude entry of each row is positive.
    pub basis: Matrix,
    /// Variance captured by each component (covariance eigenvalues),
    /// non-increasing.
    pub explained_variance: Vec<f64>,
    /// Column means removed before projection.
    pub mean: Vec<f64>,
}

pub fn pca_project(vectors: &Matrix, components: usize) -> Result<Pca> {
    let (n, d) = (vectors.rows(), vectors.cols());
    if n < 2 {
        return Err(Error::Contract(format!("PCA needs at least 2 rows, got {n}")));
    }
    if components == 0 || components > d {
        return Err(Error::Contract(format!(
            "cannot extract {components} components from {d}-dimensional data"
        )));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| vectors.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    let centered = Matrix::from_fn(n, d, |i, j| vectors.get(i, j) - mean[j]);
    let cov = centered
        .transpose()
        .matmul(&centered)?
        .scale(1.0 / (n - 1) as f64);

    let (eigenvalues, eigenvectors) = jacobi_eigen(&cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigenvalues[b].partial_cmp(&eigenvalues[a]).expect("finite"));

    let mut basis = Matrix::zeros(components, d);
    let mut explained = Vec::with_capacity(components);
    for (row, &idx) in order.iter().take(components).enumerate() {
        explained.push(eigenvalues[idx].max(0.0));
        // Deterministic sign: largest-magnitude entry positive.
        let col: Vec<f64> = (0..d).map(|i| eigenvectors.get(i, idx)).collect();
        let largest = col
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.abs().partial_cmp(&b.abs()).expect("finite"))
            .map(|(i, _)| i)
            .expect("non-empty");
        let sign = if col[largest] < 0.0 { -1.0 } else { 1.0 };
        for (j, &v) in col.iter().enumerate() {
            basis.set(row, j, sign * v);
        }
    }
    let projection = centered.matmul(&basis.transpose())?;
    Ok(Pca {
        projection,
        basis,
        explained_variance: explained,
        mean,
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvector columns).
fn jacobi_eigen(a: &Matrix) -> (Vec<f64>, Matrix) {
    let n = a.rows();
    let mut m = a.symmetrize();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let off: f64 = {
            let mut s = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    s += m.get(i, j) * m.get(i, j);
                }
            }
            s
        };
        if off <= 1e-28 * m.max_abs().max(1.0).powi(2) {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let (mip, miq) = (m.get(i, p), m.get(i, q));
                    m.set(i, p, c * mip - s * miq);
                    m.set(i, q, s * mip + c * miq);
                }
                for j in 0..n {
                    let (mpj, mqj) = (m.get(p, j), m.get(q, j));
                    m.set(p, j, c * mpj - s * mqj);
                    m.set(q, j, s * mpj + c * mqj);
                }
                for i in 0..n {
                    let (vip, viq) = (v.get(i, p), v.get(i, q));
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
    }
    ((0..n).map(|i| m.get(i, i)).collect(), v)
}

/// k-means result: Lloyd iterations from a k-means++ start.
pub struct Kmeans {
    pub assignments: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration (non-increasing).
    pub inertia_history: Vec<f64>,
}

const KMEANS_TOL: f64 = 1e-9;
const KMEANS_MAX_ITER: usize = 300;

pub fn kmeans(points: &Matrix, k: usize, seed: u64) -> Result<Kmeans> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::Contract(format!("k = {k} must be in 1..={n}")));
    }
    let d = points.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding.
    let mut centroids = Matrix::zeros(k, d);
    let first = rng.random_range(0..n);
    for j in 0..d {
        centroids.set(0, j, points.get(first, j));
    }
    let mut dist_sq: Vec<f64> = (0..n)
        .map(|i| point_dist_sq(points, i, &centroids, 0))
        .collect();
    for c in 1..k {
        let total: f64 = dist_sq.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in dist_sq.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        for j in 0..d {
            centroids.set(c, j, points.get(pick, j));
        }
        for i in 0..n {
            dist_sq[i] = dist_sq[i].min(point_dist_sq(points, i, &centroids, c));
        }
    }

    // Lloyd iterations.
    let mut assignments = vec![0usize; n];
    let mut inertia_history = Vec::new();
    let mut inertia = f64::INFINITY;
    for _ in 0..KMEANS_MAX_ITER {
        let mut new_inertia = 0.0;
        for i in 0..n {
            let (mut best, mut best_d) = (0usize, f64::INFINITY);
            for c in 0..k {
                let dist = point_dist_sq(points, i, &centroids, c);
                if dist < best_d {
                    best = c;
                    best_d = dist;
                }
            }
            assignments[i] = best;
            new_inertia += best_d;
        }
        inertia_history.push(new_inertia);
        inertia = new_inertia;

        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignments[i]] += 1;
            for j in 0..d {
                sums.set(assignments[i], j, sums.get(assignments[i], j) + points.get(i, j));
            }
        }
        let mut movement: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue; // empty cluster keeps its centroid
            }
            for j in 0..d {
                let new = sums.get(c, j) / counts[c] as f64;
                movement = movement.max((new - centroids.get(c, j)).abs());
                centroids.set(c, j, new);
            }
        }
        if movement < KMEANS_TOL {
            break;
        }
    }
    Ok(Kmeans {
        assignments,
        centroids,
        inertia,
        inertia_history,
    })
}

fn point_dist_sq(points: &Matrix, i: usize, centroids: &Matrix, c: usize) -> f64 {
    (0..points.cols())
        .map(|j| {
            let d = points.get(i, j) - centroids.get(c, j);
            d * d
        })
        .sum()
}

/// Anomaly clustering options.
#[derive(Debug, Clone)]
pub struct AnomalyOptions {
    pub clusters: usize,
    pub seed: u64,
    /// Seeded k-means restarts; the lowest-inertia run is kept.
    pub restarts: usize,
    /// z-score the RMSE vectors before PCA (for heterogeneous channel
    /// units). Off by default.
    pub zscore: bool,
}

impl Default for AnomalyOptions {
    fn default() -> Self {
        AnomalyOptions {
            clusters: 3,
            seed: 0,
            restarts: 10,
            zscore: false,
        }
    }
}

/// PCA + k-means summary over labeled RMSE vectors. Cluster ids are
/// renumbered so cluster 0 contains the first (baseline) case, with the
/// remaining clusters ordered by centroid distance from it.
pub struct ClusterReport {
    pub labels: Vec<String>,
    /// n x 2 projection onto the two leading principal components.
    pub projection: Matrix,
    /// 2 x d principal directions.
    pub pca_basis: Matrix,
    pub explained_variance: Vec<f64>,
    pub assignments: Vec<usize>,
    /// clusters x 2 centroids in projection space.
    pub centroids: Matrix,
    pub inertia: f64,
}

pub fn anomaly_report(cases: &[(String, Vec<f64>)], opts: &AnomalyOptions) -> Result<ClusterReport> {
    if cases.len() < opts.clusters {
        return Err(Error::Contract(format!(
            "{} cases cannot form {} clusters",
            cases.len(),
            opts.clusters
        )));
    }
    let d = cases[0].1.len();
    if d == 0 || cases.iter().any(|(_, v)| v.len() != d) {
        return Err(Error::Contract("RMSE vectors must share one positive length".into()));
    }
    let mut vectors = Matrix::from_fn(cases.len(), d, |i, j| cases[i].1[j]);
    if opts.zscore {
        for j in 0..d {
            let col: Vec<f64> = (0..vectors.rows()).map(|i| vectors.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let std =
                (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col.len() as f64).sqrt();
            if std > 0.0 {
                for i in 0..vectors.rows() {
                    vectors.set(i, j, (vectors.get(i, j) - mean) / std);
                }
            }
        }
    }
    let components = 2.min(d);
    let pca = pca_project(&vectors, components)?;
    // Projection padded to two columns for one-channel inputs.
    let projection = if components == 2 {
        pca.projection
    } else {
        Matrix::from_fn(cases.len(), 2, |i, j| {
            if j == 0 {
                pca.projection.get(i, 0)
            } else {
                0.0
            }
        })
    };

    // Restarts run concurrently; the fold keeps the first-lowest
    // inertia, so the result is independent of scheduling.
    let seeds: Vec<u64> = (0..opts.restarts.max(1))
        .map(|r| opts.seed.wrapping_add(r as u64))
        .collect();
    let workers = crate::train::worker_count();
    let runs = crate::train::parallel_map(seeds, workers, |seed| {
        kmeans(&projection, opts.clusters, seed)
    });
    let mut best: Option<Kmeans> = None;
    for run in runs {
        let run = run?;
        let better = match &best {
            None => true,
            Some(b) => run.inertia < b.inertia,
        };
        if better {
            best = Some(run);
        }
    }
    let run = best.expect("at least one restart");

    // Renumber clusters: baseline cluster first, then by centroid
    // distance from it.
    let baseline_cluster = run.assignments[0];
    let base: Vec<f64> = (0..run.centroids.cols())
        .map(|j| run.centroids.get(baseline_cluster, j))
        .collect();
    let mut cluster_order: Vec<usize> = (0..opts.clusters).collect();
    cluster_order.sort_by(|&a, &b| {
        let da = centroid_dist(&run.centroids, a, &base);
        let db = centroid_dist(&run.centroids, b, &base);
        (a != baseline_cluster, da)
            .partial_cmp(&(b != baseline_cluster, db))
            .expect("finite")
    });
    let mut relabel = vec![0usize; opts.clusters];
    for (new_id, &old_id) in cluster_order.iter().enumerate() {
        relabel[old_id] = new_id;
    }
    let assignments: Vec<usize> = run.assignments.iter().map(|&a| relabel[a]).collect();
    let centroids = Matrix::from_fn(opts.clusters, run.centroids.cols(), |i, j| {
        run.centroids.get(cluster_order[i], j)
    });

    Ok(ClusterReport {
        labels: cases.iter().map(|(l, _)| l.clone()).collect(),
        projection,
        pca_basis: pca.basis,
        explained_variance: pca.explained_variance,
        assignments,
        centroids,
        inertia: run.inertia,
    })
}

fn centroid_dist(centroids: &Matrix, c: usize, base: &[f64]) -> f64 {
    (0..centroids.cols())
        .map(|j| {
            let d = centroids.get(c, j) - base[j];
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

impl ClusterReport {
    /// Serializes the report as comma-separated tables (projection with
    /// assignments, centroids, principal components, inertia).
    pub fn to_tables(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        writeln!(out, "# projection").expect("write");
        writeln!(out, "case,pc1,pc2,cluster").expect("write");
        for (i, label) in self.labels.iter().enumerate() {
            writeln!(
                out,
                "{label},{},{},{}",
                self.projection.get(i, 0),
                self.projection.get(i, 1),
                self.assignments[i]
            )
            .expect("write");
        }
        writeln!(out, "# centroids").expect("write");
        writeln!(out, "cluster,pc1,pc2").expect("write");
        for c in 0..self.centroids.rows() {
            writeln!(out, "{c},{},{}", self.centroids.get(c, 0), self.centroids.get(c, 1))
                .expect("write");
        }
        writeln!(out, "# components").expect("write");
        let dims: Vec<String> = (1..=self.pca_basis.cols()).map(|j| format!("w{j}")).collect();
        writeln!(out, "component,explained_variance,{}", dims.join(",")).expect("write");
        for i in 0..self.pca_basis.rows() {
            let weights: Vec<String> = (0..self.pca_basis.cols())
                .map(|j| format!("{}", self.pca_basis.get(i, j)))
                .collect();
            writeln!(
                out,
                "{},{},{}",
                i + 1,
                self.explained_variance[i],
                weights.join(",")
            )
            .expect("write");
        }
        writeln!(out, "# inertia").expect("write");
        writeln!(out, "{}", self.inertia).expect("write");
        out
    }

    /// Parses the table format written by [`ClusterReport::to_tables`].
    pub fn from_tables(text: &str) -> Result<ClusterReport> {
        let mut section = String::new();
        let mut labels = Vec::new();
        let mut proj_rows: Vec<(f64, f64)> = Vec::new();
        let mut assignments = Vec::new();
        let mut centroid_rows: Vec<(f64, f64)> = Vec::new();
        let mut explained = Vec::new();
        let mut basis_rows: Vec<Vec<f64>> = Vec::new();
        let mut inertia = None;

        let bad = |line: &str, why: &str| {
            Error::Contract(format!("cluster report parse error at {line:?}: {why}"))
        };
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix("# ") {
                section = name.to_string();
                continue;
            }
            match section.as_str() {
                "projection" => {
                    if line.starts_with("case,") {
                        continue;
                    }
                    let parts: Vec<&str> = line.split(',').collect();
                    if parts.len() != 4 {
                        return Err(bad(line, "expected 4 fields"));
                    }
                    labels.push(parts[0].to_string());
                    proj_rows.push((
                        parts[1].parse().map_err(|_| bad(line, "bad pc1"))?,
                        parts[2].parse().map_err(|_| bad(line, "bad pc2"))?,
                    ));
                    assignments.push(parts[3].parse().map_err(|_| bad(line, "bad cluster"))?);
                }
                "centroids" => {
                    if line.starts_with("cluster,") {
                        continue;
                    }
                    let parts: Vec<&str> = line.split(',').collect();
                    if parts.len() != 3 {
                        return Err(bad(line, "expected 3 fields"));
                    }
                    centroid_rows.push((
                        parts[1].parse().map_err(|_| bad(line, "bad pc1"))?,
                        parts[2].parse().map_err(|_| bad(line, "bad pc2"))?,
                    ));
                }
                "components" => {
                    if line.starts_with("component,") {
                        continue;
                    }
                    let parts: Vec<&str> = line.split(',').collect();
                    if parts.len() < 3 {
                        return Err(bad(line, "expected at least 3 fields"));
                    }
                    explained.push(parts[1].parse().map_err(|_| bad(line, "bad variance"))?);
                    basis_rows.push(
                        parts[2..]
                            .iter()
                            .map(|p| p.parse().map_err(|_| bad(line, "bad weight")))
                            .collect::<Result<_>>()?,
                    );
                }
                "inertia" => {
                    inertia = Some(line.parse().map_err(|_| bad(line, "bad inertia"))?);
                }
                _ => return Err(bad(line, "content outside a known section")),
            }
        }
        if labels.is_empty() || centroid_rows.is_empty() || basis_rows.is_empty() {
            return Err(Error::Contract("cluster report is missing sections".into()));
        }
        let d = basis_rows[0].len();
        Ok(ClusterReport {
            projection: Matrix::from_fn(labels.len(), 2, |i, j| {
                if j == 0 {
                    proj_rows[i].0
                } else {
                    proj_rows[i].1
                }
            }),
            labels,
            pca_basis: Matrix::from_fn(basis_rows.len(), d, |i, j| basis_rows[i][j]),
            explained_variance: explained,
            assignments,
            centroids: Matrix::from_fn(centroid_rows.len(), 2, |i, j| {
                if j == 0 {
                    centroid_rows[i].0
                } else {
                    centroid_rows[i].1
                }
            }),
            inertia: inertia.ok_or_else(|| Error::Contract("missing inertia".into()))?,
        })
    }
}
