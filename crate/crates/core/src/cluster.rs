//! Region aggregation: K-means and a grid CRF with Gaussian label likelihoods
//! and Potts neighbor coupling, fitted by hard EM with ICM label updates.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::GridIndex;

pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-6;
pub const DEFAULT_CRF_ROUNDS: usize = 50;
pub const DEFAULT_ICM_SWEEPS: usize = 100;
pub const DEFAULT_RESTARTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    Kmeans,
    Crf,
}

impl FromStr for ClusterMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kmeans" | "k-means" => Ok(ClusterMethod::Kmeans),
            "crf" => Ok(ClusterMethod::Crf),
            _ => Err(Error::Config(format!("method must be `kmeans` or `crf`, got `{s}`"))),
        }
    }
}

impl fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusterMethod::Kmeans => "kmeans",
            ClusterMethod::Crf => "crf",
        })
    }
}

/// Rescaling applied to region features before clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureScaling {
    #[default]
    None,
    /// Each region's feature vector divided by its Euclidean norm (zero vectors stay zero).
    L2,
    /// Each feature dimension shifted to mean 0 and scaled to unit variance.
    Standardize,
}

impl FromStr for FeatureScaling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FeatureScaling::None),
            "l2" => Ok(FeatureScaling::L2),
            "standardize" => Ok(FeatureScaling::Standardize),
            _ => Err(Error::Config(format!("feature_scaling must be `none`, `l2` or `standardize`, got `{s}`"))),
        }
    }
}

impl fmt::Display for FeatureScaling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureScaling::None => "none",
            FeatureScaling::L2 => "l2",
            FeatureScaling::Standardize => "standardize",
        })
    }
}

impl FeatureScaling {
    /// Applies the scaling to a `dims × regions` matrix.
    pub fn apply(self, data: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = data.clone();
        match self {
            FeatureScaling::None => {}
            FeatureScaling::L2 => {
                for mut col in out.column_iter_mut() {
                    let n = col.norm();
                    if n > 0.0 {
                        col /= n;
                    }
                }
            }
            FeatureScaling::Standardize => {
                let r = out.ncols() as f64;
                for mut row in out.row_iter_mut() {
                    let mean = row.sum() / r;
                    let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / r;
                    let sd = var.sqrt();
                    row.add_scalar_mut(-mean);
                    if sd > 0.0 {
                        row /= sd;
                    }
                }
            }
        }
        out
    }
}

fn sq_dist(data: &DMatrix<f64>, i: usize, center: &[f64]) -> f64 {
    data.column(i).iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn check_c(c: usize, r: usize) -> Result<()> {
    if c == 0 {
        return Err(Error::InvalidArgument("need at least one cluster".into()));
    }
    if c > r {
        return Err(Error::InvalidArgument(format!("{c} clusters requested for {r} regions")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
}

fn kmeans_pp(data: &DMatrix<f64>, c: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let r = data.ncols();
    let first = rng.random_range(0..r);
    let mut centers = vec![data.column(first).iter().copied().collect::<Vec<_>>()];
    let mut d2: Vec<f64> = (0..r).map(|i| sq_dist(data, i, &centers[0])).collect();
    while centers.len() < c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut x = rng.random_range(0.0..total);
            let mut chosen = r - 1;
            for (i, &d) in d2.iter().enumerate() {
                if x < d {
                    chosen = i;
                    break;
                }
                x -= d;
            }
            chosen
        } else {
            rng.random_range(0..r)
        };
        let center: Vec<f64> = data.column(pick).iter().copied().collect();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data, i, &center));
        }
        centers.push(center);
    }
    centers
}

fn nearest(data: &DMatrix<f64>, i: usize, centers: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (l, c) in centers.iter().enumerate() {
        let d = sq_dist(data, i, c);
        if d < best.1 {
            best = (l, d);
        }
    }
    best.0
}

fn means(data: &DMatrix<f64>, labels: &[usize], c: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = data.nrows();
    let mut sums = vec![vec![0.0; dim]; c];
    let mut counts = vec![0usize; c];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, x) in sums[l].iter_mut().zip(data.column(i).iter()) {
            *s += x;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    (sums, counts)
}

/// Moves the point farthest from its own cluster mean into each empty cluster.
/// Clusters stay empty when every point sits on its centroid.
fn reseed_empty(data: &DMatrix<f64>, labels: &mut [usize], c: usize) {
    loop {
        let (centers, counts) = means(data, labels, c);
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            if counts[l] > 1 {
                let d = sq_dist(data, i, &centers[l]);
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
        }
        match far {
            Some(i) => labels[i] = empty,
            None => return,
        }
    }
}

/// Lloyd's algorithm from k-means++ seeding. Columns of `data` are points.
///
/// Assignment ties go to the lowest label; an emptied cluster is re-seeded
/// with the point farthest from its centroid.
pub fn kmeans(data: &DMatrix<f64>, c: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let r = data.ncols();
    check_c(c, r)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = kmeans_pp(data, c, &mut rng);
    let mut labels: Vec<usize> = vec![usize::MAX; r];
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut next: Vec<usize> = (0..r).into_par_iter().map(|i| nearest(data, i, &centers)).collect();
        reseed_empty(data, &mut next, c);
        let changed = next != labels;
        labels = next;
        centers = means(data, &labels, c).0;
        if !changed {
            break;
        }
    }
    let inertia = labels.iter().enumerate().map(|(i, &l)| sq_dist(data, i, &centers[l])).sum();
    Ok(KMeans {
        labels,
        centroids: centers,
        iterations,
        inertia,
    })
}

/// Best of `restarts` K-means runs (seeds `seed`, `seed + 1`, ...) by inertia.
pub fn kmeans_restarts(data: &DMatrix<f64>, c: usize, seed: u64, max_iter: usize, restarts: usize) -> Result<KMeans> {
    let mut best = kmeans(data, c, seed, max_iter)?;
    for i in 1..restarts as u64 {
        let km = kmeans(data, c, seed.wrapping_add(i), max_iter)?;
        if km.inertia < best.inertia {
            best = km;
        }
    }
    Ok(best)
}

/// Symmetric neighbor lists without self loops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    lists: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn new(lists: Vec<Vec<usize>>) -> Result<Self> {
        let n = lists.len();
        for (i, nb) in lists.iter().enumerate() {
            for &j in nb {
                if j >= n || j == i {
                    return Err(Error::InvalidArgument(format!("bad neighbor {j} of region {i}")));
                }
                if !lists[j].contains(&i) {
                    return Err(Error::InvalidArgument(format!("neighbor lists not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Adjacency { lists })
    }

    /// 8-neighborhoods of the grid cells.
    pub fn from_grid(g: &GridIndex) -> Self {
        Adjacency {
            lists: g.neighbor_lists(),
        }
    }

    /// 8-neighborhoods of a `rows × cols` lattice indexed row-major.
    pub fn lattice(rows: usize, cols: usize) -> Self {
        let mut lists = vec![Vec::new(); rows * cols];
        for r in 0..rows as isize {
            for c in 0..cols as isize {
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (nr, nc) = (r + dr, c + dc);
                        if (dr, dc) != (0, 0) && nr >= 0 && nc >= 0 && nr < rows as isize && nc < cols as isize {
                            lists[(r * cols as isize + c) as usize].push((nr * cols as isize + nc) as usize);
                        }
                    }
                }
            }
        }
        Adjacency { lists }
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.lists[i]
    }

    /// Unordered neighbor pairs `(i, j)` with `i < j`.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.lists
            .iter()
            .enumerate()
            .flat_map(|(i, nb)| nb.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
    }

    /// Greedy coloring; regions sharing a color are never adjacent.
    pub fn coloring(&self) -> Vec<Vec<usize>> {
        let mut color = vec![usize::MAX; self.len()];
        let mut classes: Vec<Vec<usize>> = Vec::new();
        for i in 0..self.len() {
            let used: Vec<usize> = self.lists[i].iter().map(|&j| color[j]).collect();
            let c = (0..).find(|c| !used.contains(c)).unwrap();
            color[i] = c;
            if c == classes.len() {
                classes.push(Vec::new());
            }
            classes[c].push(i);
        }
        classes
    }
}

/// Per-label diagonal Gaussians, the Potts smoothing strength, and the labeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneModel {
    pub labels: Vec<usize>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    pub beta: f64,
    pub c: usize,
    /// Members per label when fitted; a label with none is never assigned.
    pub sizes: Vec<usize>,
}

#[derive(Serialize)]
struct ZoneModelJson<'a> {
    c: usize,
    beta: f64,
    means: &'a [Vec<f64>],
    variances: &'a [Vec<f64>],
}

impl ZoneModel {
    /// Maximum-likelihood means and floored diagonal variances of the current labels.
    pub fn fit_gaussians(data: &DMatrix<f64>, labels: Vec<usize>, c: usize, beta: f64, floor: f64) -> Self {
        let dim = data.nrows();
        let (means, counts) = means(data, &labels, c);
        let mut variances = vec![vec![0.0; dim]; c];
        for (i, &l) in labels.iter().enumerate() {
            for (d, x) in data.column(i).iter().enumerate() {
                variances[l][d] += (x - means[l][d]).powi(2);
            }
        }
        for (var, &n) in variances.iter_mut().zip(&counts) {
            for v in var.iter_mut() {
                *v = if n > 0 { (*v / n as f64).max(floor) } else { floor };
            }
        }
        ZoneModel {
            labels,
            means,
            variances,
            beta,
            c,
            sizes: counts,
        }
    }

    /// A model with explicit Gaussians; every label counts as populated.
    pub fn new(labels: Vec<usize>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>, beta: f64) -> Self {
        let c = means.len();
        ZoneModel {
            labels,
            means,
            variances,
            beta,
            c,
            sizes: vec![1; c],
        }
    }

    /// `−log N(x_i; μ_l, diag σ²_l)`.
    pub fn nll(&self, data: &DMatrix<f64>, i: usize, l: usize) -> f64 {
        if self.sizes[l] == 0 {
            return f64::INFINITY;
        }
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        data.column(i)
            .iter()
            .zip(&self.means[l])
            .zip(&self.variances[l])
            .map(|((x, m), v)| 0.5 * (ln_2pi + v.ln() + (x - m) * (x - m) / v))
            .sum()
    }

    /// Per-region, per-label unary costs, row-major `r × c`.
    pub fn unary_table(&self, data: &DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..data.ncols())
            .into_par_iter()
            .map(|i| (0..self.c).map(|l| self.nll(data, i, l)).collect())
            .collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(ZoneModelJson {
            c: self.c,
            beta: self.beta,
            means: &self.means,
            variances: &self.variances,
        })
        .expect("plain numbers")
    }
}

fn pair_cost(beta: f64, same: bool) -> f64 {
    if same {
        -beta
    } else {
        beta
    }
}

fn energy_from_table(labels: &[usize], unary: &[Vec<f64>], beta: f64, adj: &Adjacency) -> f64 {
    let u: f64 = labels.iter().enumerate().map(|(i, &l)| unary[i][l]).sum();
    let p: f64 = adj.pairs().map(|(i, j)| pair_cost(beta, labels[i] == labels[j])).sum();
    u + p
}

/// Negative log of the unnormalized posterior: Gaussian NLLs plus
/// `β·(1 − 2·[y_i = y_j])` over unordered neighbor pairs.
pub fn energy(labels: &[usize], data: &DMatrix<f64>, model: &ZoneModel, adj: &Adjacency) -> Result<f64> {
    if labels.len() != data.ncols() || adj.len() != data.ncols() {
        return Err(Error::Shape(format!(
            "{} labels, {} regions, {} adjacency lists",
            labels.len(),
            data.ncols(),
            adj.len()
        )));
    }
    if labels.iter().any(|&l| l >= model.c) {
        return Err(Error::InvalidArgument("label outside the model's zones".into()));
    }
    Ok(energy_from_table(labels, &model.unary_table(data), model.beta, adj))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IcmSchedule {
    /// Regions visited in index order.
    #[default]
    Sequential,
    /// Color classes of the adjacency updated in parallel, one class at a time.
    Colored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcmResult {
    pub labels: Vec<usize>,
    /// Energy before the first sweep and after each sweep.
    pub energies: Vec<f64>,
    pub sweeps: usize,
}

fn best_label(i: usize, current: usize, labels: &[usize], unary: &[f64], beta: f64, adj: &Adjacency) -> usize {
    let local = |l: usize| {
        unary[l]
            + adj
                .neighbors(i)
                .iter()
                .map(|&j| pair_cost(beta, labels[j] == l))
                .sum::<f64>()
    };
    let mut best = (current, local(current));
    for l in 0..unary.len() {
        let e = local(l);
        if e < best.1 {
            best = (l, e);
        }
    }
    best.0
}

/// Iterated conditional modes under a fixed model. Energy never increases.
pub fn icm_map(
    labels: Vec<usize>,
    data: &DMatrix<f64>,
    model: &ZoneModel,
    adj: &Adjacency,
    max_sweeps: usize,
    schedule: IcmSchedule,
) -> Result<IcmResult> {
    let e0 = energy(&labels, data, model, adj)?;
    let unary = model.unary_table(data);
    let mut labels = labels;
    let mut energies = vec![e0];
    let classes = match schedule {
        IcmSchedule::Sequential => Vec::new(),
        IcmSchedule::Colored => adj.coloring(),
    };
    let mut sweeps = 0;
    while sweeps < max_sweeps {
        sweeps += 1;
        let mut changed = false;
        match schedule {
            IcmSchedule::Sequential => {
                for i in 0..labels.len() {
                    let l = best_label(i, labels[i], &labels, &unary[i], model.beta, adj);
                    if l != labels[i] {
                        labels[i] = l;
                        changed = true;
                    }
                }
            }
            IcmSchedule::Colored => {
                for class in &classes {
                    let updates: Vec<(usize, usize)> = class
                        .par_iter()
                        .map(|&i| (i, best_label(i, labels[i], &labels, &unary[i], model.beta, adj)))
                        .collect();
                    for (i, l) in updates {
                        if l != labels[i] {
                            labels[i] = l;
                            changed = true;
                        }
                    }
                }
            }
        }
        let e = energy_from_table(&labels, &unary, model.beta, adj);
        let prev = *energies.last().unwrap();
        assert!(
            e <= prev + 1e-9 * (1.0 + prev.abs()),
            "ICM sweep {sweeps} raised the energy from {prev} to {e}"
        );
        energies.push(e);
        if !changed {
            break;
        }
    }
    Ok(IcmResult {
        labels,
        energies,
        sweeps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrfOptions {
    pub variance_floor: f64,
    pub max_rounds: usize,
    pub max_sweeps: usize,
    pub kmeans_max_iter: usize,
    pub schedule: IcmSchedule,
    /// Independent K-means initializations; the lowest final energy wins.
    pub restarts: usize,
}

impl Default for CrfOptions {
    fn default() -> Self {
        CrfOptions {
            variance_floor: DEFAULT_VARIANCE_FLOOR,
            max_rounds: DEFAULT_CRF_ROUNDS,
            max_sweeps: DEFAULT_ICM_SWEEPS,
            kmeans_max_iter: 300,
            schedule: IcmSchedule::Sequential,
            restarts: DEFAULT_RESTARTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrfFit {
    /// Final Gaussians (fitted to the labels they produced) and labels.
    pub model: ZoneModel,
    pub init_labels: Vec<usize>,
    /// Energy of the K-means labels under Gaussians fitted to them.
    pub init_energy: f64,
    pub final_energy: f64,
    pub rounds: usize,
}

/// Hard EM: K-means initialization, then alternate Gaussian refits and ICM
/// until labels settle. Restart `i` seeds K-means with `seed + i`.
pub fn crf_fit(
    data: &DMatrix<f64>,
    adj: &Adjacency,
    c: usize,
    beta: f64,
    seed: u64,
    opts: &CrfOptions,
) -> Result<CrfFit> {
    check_c(c, data.ncols())?;
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!("beta must be finite and nonnegative, got {beta}")));
    }
    if adj.len() != data.ncols() {
        return Err(Error::Shape(format!("{} adjacency lists for {} regions", adj.len(), data.ncols())));
    }
    let mut best: Option<CrfFit> = None;
    for i in 0..opts.restarts.max(1) as u64 {
        let init = kmeans(data, c, seed.wrapping_add(i), opts.kmeans_max_iter)?.labels;
        let fit = hard_em(data, adj, c, beta, init, opts)?;
        if best.as_ref().is_none_or(|b| fit.final_energy < b.final_energy) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn hard_em(
    data: &DMatrix<f64>,
    adj: &Adjacency,
    c: usize,
    beta: f64,
    init: Vec<usize>,
    opts: &CrfOptions,
) -> Result<CrfFit> {
    let mut labels = init.clone();
    let mut model = ZoneModel::fit_gaussians(data, labels.clone(), c, beta, opts.variance_floor);
    let init_energy = energy(&labels, data, &model, adj)?;
    let mut rounds = 0;
    let mut final_energy = init_energy;
    while rounds < opts.max_rounds {
        rounds += 1;
        let icm = icm_map(labels.clone(), data, &model, adj, opts.max_sweeps, opts.schedule)?;
        let mut next = icm.labels;
        reseed_empty(data, &mut next, c);
        let stable = next == labels;
        labels = next;
        model = ZoneModel::fit_gaussians(data, labels.clone(), c, beta, opts.variance_floor);
        final_energy = energy(&labels, data, &model, adj)?;
        if stable {
            break;
        }
    }
    Ok(CrfFit {
        model,
        init_labels: init,
        init_energy,
        final_energy,
        rounds,
    })
}

/// Minimum-energy labeling by enumerating all `c^r` labelings. Small grids only.
pub fn exhaustive_map(data: &DMatrix<f64>, model: &ZoneModel, adj: &Adjacency) -> Result<(Vec<usize>, f64)> {
    let r = data.ncols();
    let total = (model.c as u64).checked_pow(r as u32).filter(|&n| n <= 1 << 22);
    let Some(total) = total else {
        return Err(Error::InvalidArgument(format!("{}^{r} labelings is too many to enumerate", model.c)));
    };
    let unary = model.unary_table(data);
    let mut best = (Vec::new(), f64::INFINITY);
    let mut labels = vec![0usize; r];
    for mut code in 0..total {
        for l in labels.iter_mut() {
            *l = (code % model.c as u64) as usize;
            code /= model.c as u64;
        }
        let e = energy_from_table(&labels, &unary, model.beta, adj);
        if e < best.1 {
            best = (labels.clone(), e);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn blobs(n: usize, sep: f64, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let truth: Vec<usize> = (0..2 * n).map(|i| i % 2).collect();
        let data = DMatrix::from_fn(2, 2 * n, |d, i| normal.sample(&mut rng) + if d == 0 { sep * truth[i] as f64 } else { 0.0 });
        (data, truth)
    }

    fn same_partition(a: &[usize], b: &[usize]) -> bool {
        a.iter().zip(b).all(|(x, y)| a.iter().zip(b).all(|(x2, y2)| (x == x2) == (y == y2)))
    }

    #[test]
    fn single_cluster() {
        let (data, _) = blobs(10, 10.0, 1);
        let km = kmeans(&data, 1, 0, 100).unwrap();
        assert!(km.labels.iter().all(|&l| l == 0));
        assert!(kmeans(&data, 21, 0, 100).is_err());
        assert!(kmeans(&data, 0, 0, 100).is_err());
    }

    #[test]
    fn separated_blobs() {
        for seed in 0..5 {
            let (data, truth) = blobs(50, 10.0, seed);
            let km = kmeans(&data, 2, seed, 100).unwrap();
            assert!(same_partition(&km.labels, &truth));
        }
    }

    #[test]
    fn identical_points() {
        let data = DMatrix::from_element(3, 12, 1.5);
        let km = kmeans(&data, 2, 7, 100).unwrap();
        assert!(km.labels.iter().all(|&l| l == km.labels[0]), "{:?}", km.labels);
    }

    #[test]
    fn kmeans_is_seed_deterministic() {
        let (data, _) = blobs(40, 1.0, 3);
        assert_eq!(kmeans(&data, 3, 11, 100).unwrap(), kmeans(&data, 3, 11, 100).unwrap());
    }

    #[test]
    fn restarts_keep_the_best_run() {
        let (data, _) = blobs(30, 1.5, 9);
        let best = kmeans_restarts(&data, 4, 3, 100, 8).unwrap();
        for s in 3..11 {
            assert!(best.inertia <= kmeans(&data, 4, s, 100).unwrap().inertia);
        }
        assert_eq!(kmeans_restarts(&data, 4, 3, 100, 1).unwrap(), kmeans(&data, 4, 3, 100).unwrap());

        let adj = Adjacency::lattice(6, 10);
        let one = CrfOptions { restarts: 1, ..CrfOptions::default() };
        let many = CrfOptions { restarts: 6, ..CrfOptions::default() };
        let e1 = crf_fit(&data, &adj, 4, 0.5, 3, &one).unwrap().final_energy;
        let e6 = crf_fit(&data, &adj, 4, 0.5, 3, &many).unwrap().final_energy;
        assert!(e6 <= e1);
    }

    #[test]
    fn adjacency_checks() {
        assert!(Adjacency::new(vec![vec![1], vec![]]).is_err());
        assert!(Adjacency::new(vec![vec![0]]).is_err());
        let a = Adjacency::lattice(3, 3);
        assert_eq!(a.neighbors(4).len(), 8);
        assert_eq!(a.neighbors(0).len(), 3);
        assert_eq!(a.pairs().count(), 20);
        assert!(Adjacency::new(a.lists.clone()).is_ok());
        for class in a.coloring() {
            for &i in &class {
                assert!(a.neighbors(i).iter().all(|j| !class.contains(j)));
            }
        }
    }

    fn two_region_model(beta: f64) -> (DMatrix<f64>, ZoneModel, Adjacency) {
        let data = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        let model = ZoneModel::new(vec![0, 0], vec![vec![0.0], vec![0.0]], vec![vec![1.0], vec![1.0]], beta);
        (data, model, Adjacency::new(vec![vec![1], vec![0]]).unwrap())
    }

    #[test]
    fn pair_term_difference_is_two_beta() {
        let (data, model, adj) = two_region_model(0.75);
        let same = energy(&[0, 0], &data, &model, &adj).unwrap();
        let diff = energy(&[0, 1], &data, &model, &adj).unwrap();
        assert!((diff - same - 1.5).abs() < 1e-12);
    }

    #[test]
    fn zero_beta_energy_is_unary_sum() {
        let (data, model, adj) = two_region_model(0.0);
        let e = energy(&[1, 0], &data, &model, &adj).unwrap();
        let nll = 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((e - 2.0 * nll).abs() < 1e-12);
    }

    #[test]
    fn local_optimum_is_kept() {
        let (data, model, adj) = two_region_model(1.0);
        let out = icm_map(vec![1, 1], &data, &model, &adj, 10, IcmSchedule::Sequential).unwrap();
        assert_eq!(out.labels, vec![1, 1]);
        assert_eq!(out.sweeps, 1);
    }

    #[test]
    fn crf_single_region() {
        let data = DMatrix::from_row_slice(2, 1, &[0.3, -1.0]);
        let adj = Adjacency::new(vec![vec![]]).unwrap();
        let fit = crf_fit(&data, &adj, 1, 1.0, 0, &CrfOptions::default()).unwrap();
        assert_eq!(fit.model.labels, vec![0]);
        assert!(fit.model.variances[0].iter().all(|&v| v == DEFAULT_VARIANCE_FLOOR));
        assert!(crf_fit(&data, &adj, 2, 1.0, 0, &CrfOptions::default()).is_err());
    }

    #[test]
    fn colored_schedule_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = DMatrix::from_fn(2, 36, |_, _| rng.random_range(-1.0..1.0));
        let adj = Adjacency::lattice(6, 6);
        let init: Vec<usize> = (0..36).map(|i| i % 3).collect();
        let model = ZoneModel::fit_gaussians(&data, init.clone(), 3, 0.5, 1e-6);
        let out = icm_map(init, &data, &model, &adj, 50, IcmSchedule::Colored).unwrap();
        assert!(out.energies.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn feature_scaling() {
        let d = DMatrix::from_row_slice(2, 3, &[3.0, 0.0, 1.0, 4.0, 0.0, 1.0]);
        let l2 = FeatureScaling::L2.apply(&d);
        assert!((l2[(0, 0)] - 0.6).abs() < 1e-15 && (l2[(1, 0)] - 0.8).abs() < 1e-15);
        assert_eq!(l2.column(1).norm(), 0.0);
        let z = FeatureScaling::Standardize.apply(&d);
        for row in z.row_iter() {
            assert!(row.sum().abs() < 1e-12);
            assert!((row.norm_squared() / 3.0 - 1.0).abs() < 1e-12);
        }
        assert_eq!(FeatureScaling::None.apply(&d), d);
    }
}
