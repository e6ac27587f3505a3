//! K-means in latent space and majority-vote cluster-classes.
//!
//! Distances are Euclidean. Every argmin breaks ties towards the lowest centroid index,
//! and every vote breaks ties towards the lowest class index.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITERS: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-4;

/// A latent feature and the weak label of the bag it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPoint {
    pub feature: Vec<f64>,
    pub weak_label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub cluster_classes: Vec<usize>,
    pub k: usize,
    /// Sum of squared distances to the nearest centroid at convergence.
    pub inertia: f64,
    pub seed: u64,
    pub iterations: usize,
    /// Inertia after each assignment step, starting with the seeded initialization.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid.
fn nearest(centroids: &[Vec<f64>], f: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, f);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn check_dims(points: &[LabeledPoint]) -> Result<usize> {
    let dim = points.first().map_or(0, |p| p.feature.len());
    if let Some(p) = points.iter().find(|p| p.feature.len() != dim) {
        return Err(Error::shape("latent feature", dim, p.feature.len()));
    }
    Ok(dim)
}

/// Index drawn with probability proportional to `weights` (all finite, non-negative, with a
/// positive sum).
fn weighted_pick(weights: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut target = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 && target < w {
            return i;
        }
        target -= w;
    }
    // Floating-point residue can run past the last positive weight.
    weights.iter().rposition(|&w| w > 0.0).expect("positive total")
}

fn plus_plus_init(points: &[LabeledPoint], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].feature.clone()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(&p.feature, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            weighted_pick(&d2, total, rng)
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].feature.clone();
        for (w, p) in d2.iter_mut().zip(points) {
            *w = w.min(sq_dist(&p.feature, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// One sweep of single-point transfers: each point moves to the cluster that lowers the
/// inertia most, if any, with cluster means updated after every move. Leaves `centroids`
/// at the exact means of the new assignment. Returns whether any point moved.
fn transfer_pass(
    points: &[LabeledPoint],
    k: usize,
    dim: usize,
    assignment: &mut [usize],
    centroids: &mut [Vec<f64>],
) -> bool {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &j) in points.iter().zip(assignment.iter()) {
        counts[j] += 1;
        sums[j].iter_mut().zip(&p.feature).for_each(|(s, v)| *s += v);
    }
    let dist_to_mean = |sum: &[f64], count: usize, f: &[f64]| -> f64 {
        sum.iter().zip(f).map(|(s, x)| (x - s / count as f64).powi(2)).sum()
    };
    let mut moved = false;
    for (i, p) in points.iter().enumerate() {
        let a = assignment[i];
        if counts[a] <= 1 {
            continue;
        }
        let na = counts[a] as f64;
        let removal = na / (na - 1.0) * dist_to_mean(&sums[a], counts[a], &p.feature);
        let mut best: Option<(usize, f64)> = None;
        for b in (0..k).filter(|&b| b != a) {
            let added = if counts[b] == 0 {
                0.0
            } else {
                let nb = counts[b] as f64;
                nb / (nb + 1.0) * dist_to_mean(&sums[b], counts[b], &p.feature)
            };
            if best.is_none_or(|(_, c)| added < c) {
                best = Some((b, added));
            }
        }
        // The relative margin keeps rounding noise from cycling a point between clusters.
        if let Some((b, _)) = best.filter(|&(_, c)| c < removal * (1.0 - 1e-12)) {
            counts[a] -= 1;
            counts[b] += 1;
            sums[a].iter_mut().zip(&p.feature).for_each(|(s, x)| *s -= x);
            sums[b].iter_mut().zip(&p.feature).for_each(|(s, x)| *s += x);
            assignment[i] = b;
            moved = true;
        }
    }
    if moved {
        // Exact means from the final assignment rather than the running sums.
        let mut exact = vec![vec![0.0; dim]; k];
        for (p, &j) in points.iter().zip(assignment.iter()) {
            exact[j].iter_mut().zip(&p.feature).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = exact[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    moved
}

/// Lloyd's algorithm from a k-means++ initialization, alternated with single-point
/// transfer passes until neither lowers the inertia.
///
/// Stops when no centroid moves by `tol` or more, or after `max_iters` updates. A cluster
/// left empty by an assignment step is reseeded to the point farthest from its centroid.
/// Cluster-classes are voted from the weak labels of `points`.
pub fn kmeans_fit(
    points: &[LabeledPoint],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<ClusterModel> {
    if k == 0 {
        return Err(Error::Parameter("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(Error::Capacity(format!(
            "{} points cannot form {k} clusters",
            points.len()
        )));
    }
    let dim = check_dims(points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);

    let mut assignment = vec![0usize; points.len()];
    let mut dists = vec![0.0; points.len()];
    let assign = |centroids: &[Vec<f64>], assignment: &mut [usize], dists: &mut [f64]| -> f64 {
        let mut inertia = 0.0;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest(centroids, &p.feature);
            assignment[i] = j;
            dists[i] = d;
            inertia += d;
        }
        inertia
    };

    let mut history = vec![assign(&centroids, &mut assignment, &mut dists)];
    let mut iterations = 0;
    loop {
        while iterations < max_iters {
            iterations += 1;
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (p, &j) in points.iter().zip(&assignment) {
                counts[j] += 1;
                sums[j].iter_mut().zip(&p.feature).for_each(|(s, v)| *s += v);
            }
            let mut shift: f64 = 0.0;
            let mut taken: Vec<usize> = Vec::new();
            for j in 0..k {
                let updated = if counts[j] > 0 {
                    sums[j].iter().map(|s| s / counts[j] as f64).collect()
                } else {
                    let far = (0..points.len())
                        .filter(|i| !taken.contains(i))
                        .fold(None, |best: Option<usize>, i| match best {
                            Some(b) if dists[b] >= dists[i] => Some(b),
                            _ => Some(i),
                        })
                        .expect("points.len() >= k");
                    taken.push(far);
                    dists[far] = 0.0;
                    points[far].feature.clone()
                };
                shift = shift.max(sq_dist(&updated, &centroids[j]).sqrt());
                centroids[j] = updated;
            }
            history.push(assign(&centroids, &mut assignment, &mut dists));
            if shift < tol {
                break;
            }
        }
        if iterations >= max_iters || !transfer_pass(points, k, dim, &mut assignment, &mut centroids) {
            break;
        }
        history.push(assign(&centroids, &mut assignment, &mut dists));
    }

    let inertia = *history.last().expect("non-empty history");
    let mut model = ClusterModel {
        cluster_classes: vec![0; k],
        centroids,
        k,
        inertia,
        seed,
        iterations,
        inertia_history: history,
    };
    model = vote_cluster_classes(&model, points);
    Ok(model)
}

/// Runs [`kmeans_fit`] from `starts` seeds derived from `seed` and keeps the lowest inertia
/// (earliest start on ties).
pub fn kmeans_fit_best_of(
    points: &[LabeledPoint],
    k: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
    starts: usize,
) -> Result<ClusterModel> {
    let mut best: Option<ClusterModel> = None;
    for s in 0..starts.max(1) as u64 {
        let m = kmeans_fit(points, k, seed.wrapping_add(s), max_iters, tol)?;
        if best.as_ref().is_none_or(|b| m.inertia < b.inertia) {
            best = Some(m);
        }
    }
    Ok(best.expect("at least one start"))
}

fn majority(counts: &HashMap<usize, usize>) -> Option<usize> {
    counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
        .map(|(&label, _)| label)
}

/// Assigns points to their nearest centroid and labels each cluster with the most frequent
/// weak label among its members. Empty clusters take the global majority label.
pub fn vote_cluster_classes(model: &ClusterModel, points: &[LabeledPoint]) -> ClusterModel {
    let mut per_cluster: Vec<HashMap<usize, usize>> = vec![HashMap::new(); model.k];
    let mut global: HashMap<usize, usize> = HashMap::new();
    for p in points {
        let (j, _) = nearest(&model.centroids, &p.feature);
        *per_cluster[j].entry(p.weak_label).or_default() += 1;
        *global.entry(p.weak_label).or_default() += 1;
    }
    let fallback = majority(&global).unwrap_or(0);
    let cluster_classes = per_cluster
        .iter()
        .map(|c| majority(c).unwrap_or(fallback))
        .collect();
    ClusterModel {
        cluster_classes,
        ..model.clone()
    }
}

impl ClusterModel {
    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Nearest centroid index and its cluster-class.
    pub fn assign(&self, feature: &[f64]) -> Result<(usize, usize)> {
        if feature.len() != self.dim() {
            return Err(Error::shape("latent feature", self.dim(), feature.len()));
        }
        let (j, _) = nearest(&self.centroids, feature);
        Ok((j, self.cluster_classes[j]))
    }

    /// `ŷ = C^{argmin_j D(f, f_j)}`.
    pub fn estimate_label(&self, feature: &[f64]) -> Result<usize> {
        self.assign(feature).map(|(_, c)| c)
    }

    /// Batched [`ClusterModel::assign`]; output order follows input order.
    pub fn assign_all(&self, features: &[Vec<f64>]) -> Result<Vec<(usize, usize)>> {
        features.iter().map(|f| self.assign(f)).collect()
    }

    /// Writes the structured-text cluster model.
    pub fn write_to(&self, config_hash: &str, mut w: impl Write) -> Result<()> {
        let mut s = String::new();
        writeln!(s, "# cceplus cluster model v1").unwrap();
        writeln!(s, "config_hash\t{config_hash}").unwrap();
        writeln!(s, "k\t{}", self.k).unwrap();
        writeln!(s, "dim\t{}", self.dim()).unwrap();
        writeln!(s, "seed\t{}", self.seed).unwrap();
        writeln!(s, "iterations\t{}", self.iterations).unwrap();
        writeln!(s, "inertia\t{}", self.inertia).unwrap();
        let classes: Vec<String> = self.cluster_classes.iter().map(|c| c.to_string()).collect();
        writeln!(s, "classes\t{}", classes.join(",")).unwrap();
        for c in &self.centroids {
            let row: Vec<String> = c.iter().map(|v| v.to_string()).collect();
            writeln!(s, "centroid\t{}", row.join(",")).unwrap();
        }
        w.write_all(s.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    /// Parses a cluster model file, returning it with the embedded config hash.
    pub fn read_from(r: impl BufRead) -> Result<(Self, String)> {
        let bad = |m: String| Error::format("cluster model", m);
        let mut fields: HashMap<String, String> = HashMap::new();
        let mut centroids = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("missing tab in {line:?}")))?;
            if key == "centroid" {
                let row = value
                    .split(',')
                    .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad coordinate {v:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                centroids.push(row);
            } else {
                fields.insert(key.to_owned(), value.to_owned());
            }
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(format!("missing {k}")));
        let parse_usize = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| bad(format!("bad {k}")))
        };
        let k = parse_usize("k")?;
        let dim = parse_usize("dim")?;
        let cluster_classes = get("classes")?
            .split(',')
            .map(|v| v.parse::<usize>().map_err(|_| bad(format!("bad class {v:?}"))))
            .collect::<Result<Vec<_>>>()?;
        if centroids.len() != k || cluster_classes.len() != k {
            return Err(bad(format!(
                "k = {k} but {} centroids and {} classes",
                centroids.len(),
                cluster_classes.len()
            )));
        }
        if centroids.iter().any(|c| c.len() != dim) {
            return Err(bad(format!("centroid dimension differs from {dim}")));
        }
        let inertia = get("inertia")?.parse().map_err(|_| bad("bad inertia".into()))?;
        let model = ClusterModel {
            centroids,
            cluster_classes,
            k,
            inertia,
            seed: get("seed")?.parse().map_err(|_| bad("bad seed".into()))?,
            iterations: parse_usize("iterations")?,
            inertia_history: vec![inertia],
        };
        Ok((model, get("config_hash")?.clone()))
    }
}

/// Per-instance cluster assignment cached after fitting: `id<TAB>cluster<TAB>ŷ`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LabelCache {
    pub config_hash: String,
    pub entries: Vec<(usize, usize, usize)>,
}

impl LabelCache {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut s = format!("# config_hash\t{}\n", self.config_hash);
        for (id, cluster, label) in &self.entries {
            writeln!(s, "{id}\t{cluster}\t{label}").unwrap();
        }
        w.write_all(s.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut cache = LabelCache::default();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if let Some(rest) = line.strip_prefix("# config_hash\t") {
                cache.config_hash = rest.to_owned();
                continue;
            }
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<usize> = line
                .split('\t')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format("label cache", format!("line {}: {line:?}", n + 1)))?;
            let [id, cluster, label] = cols[..] else {
                return Err(Error::format("label cache", format!("line {}: expected 3 columns", n + 1)));
            };
            cache.entries.push((id, cluster, label));
        }
        Ok(cache)
    }

    /// `ŷ` keyed by instance id.
    pub fn labels(&self) -> HashMap<usize, usize> {
        self.entries.iter().map(|&(id, _, y)| (id, y)).collect()
    }
}
