//! Adaptive user grouping: k-means with silhouette-selected K and
//! percentile-sampled group representations.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, derive_seed_indexed, rng};

const LLOYD_MAX_ITERS: usize = 300;
const LLOYD_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupingConfig {
    pub k_min: usize,
    pub k_max: usize,
    /// `(percentile, count)` picks; counts must sum to at most `capacity_j`.
    pub percentile_spec: Vec<(f64, usize)>,
    pub capacity_j: usize,
    /// Best-of-N k-means restarts per candidate K inside select_k.
    pub kmeans_restarts: usize,
    /// Principal components to project onto before clustering (0 = none).
    pub pca_components: usize,
    /// Width of the encoded group token e_G.
    pub group_embed_dim: usize,
    pub encoder_hidden: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        Self {
            k_min: 2,
            k_max: 5,
            percentile_spec: vec![(15.0, 2), (55.0, 3), (95.0, 5)],
            capacity_j: 10,
            kmeans_restarts: 8,
            pca_components: 5,
            group_embed_dim: 16,
            encoder_hidden: 32,
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_min < 1 || self.k_max < self.k_min {
            return Err(Error::Config("need 1 <= k_min <= k_max".into()));
        }
        if self.group_embed_dim == 0 || self.encoder_hidden == 0 {
            return Err(Error::Config("encoder dims must be positive".into()));
        }
        self.percentile_spec()?;
        Ok(())
    }

    pub fn percentile_spec(&self) -> Result<PercentileSpec> {
        PercentileSpec::new(self.percentile_spec.clone(), self.capacity_j)
    }
}

/// Percentile picks defining the peripheral points of a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileSpec {
    picks: Vec<(f64, usize)>,
}

impl PercentileSpec {
    pub fn new(mut picks: Vec<(f64, usize)>, capacity: usize) -> Result<Self> {
        let total: usize = picks.iter().map(|(_, c)| c).sum();
        if total == 0 {
            return Err(Error::Config("percentile spec selects no points".into()));
        }
        if total > capacity {
            return Err(Error::Config(format!(
                "percentile spec selects {total} points, capacity is {capacity}"
            )));
        }
        if picks
            .iter()
            .any(|(p, _)| !p.is_finite() || !(0.0..=100.0).contains(p))
        {
            return Err(Error::Config("percentiles must lie in [0, 100]".into()));
        }
        picks.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite percentiles"));
        Ok(Self { picks })
    }

    pub fn picks(&self) -> &[(f64, usize)] {
        &self.picks
    }

    /// Total number of peripheral points |J|.
    pub fn total(&self) -> usize {
        self.picks.iter().map(|(_, c)| c).sum()
    }
}

impl Default for PercentileSpec {
    fn default() -> Self {
        Self::new(vec![(15.0, 2), (55.0, 3), (95.0, 5)], 10).expect("default spec is valid")
    }
}

#[derive(Debug, Clone)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Array2<f64>,
    pub wcss: f64,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn members_of(&self, cluster: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == cluster)
            .map(|(i, _)| i)
            .collect()
    }
}

fn squared_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

fn wcss_of(points: &ArrayView2<f64>, labels: &[usize], centroids: &Array2<f64>) -> f64 {
    points
        .rows()
        .into_iter()
        .zip(labels)
        .map(|(p, &l)| squared_distance(p, centroids.row(l)))
        .sum()
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Empty clusters are re-seeded to the point farthest from its assigned
/// centroid. The within-cluster sum of squares is checked to be
/// non-increasing across iterations.
pub fn kmeans(points: &ArrayView2<f64>, k: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = points.nrows();
    if k < 1 || k > n {
        return Err(Error::Precondition(format!(
            "k={k} outside 1..={n} for {n} points"
        )));
    }

    let mut centroids = plus_plus_init(points, k, seed);
    let mut labels = vec![0usize; n];
    let mut prev_wcss = f64::INFINITY;

    for _iter in 0..LLOYD_MAX_ITERS {
        // Assignment step; ties go to the lower cluster index.
        for (i, p) in points.rows().into_iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.rows().into_iter().enumerate() {
                let d = squared_distance(p, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            labels[i] = best;
        }

        // Re-seed empty clusters to the farthest point.
        loop {
            let mut counts = vec![0usize; k];
            for &l in &labels {
                counts[l] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let farthest = (0..n)
                .max_by(|&a, &b| {
                    let da = squared_distance(points.row(a), centroids.row(labels[a]));
                    let db = squared_distance(points.row(b), centroids.row(labels[b]));
                    da.partial_cmp(&db)
                        .expect("finite distances")
                        .then(b.cmp(&a))
                })
                .expect("n >= 1");
            centroids.row_mut(empty).assign(&points.row(farthest));
            labels[farthest] = empty;
        }

        // Update step.
        let mut new_centroids = Array2::zeros((k, points.ncols()));
        let mut counts = vec![0usize; k];
        for (p, &l) in points.rows().into_iter().zip(&labels) {
            let mut row = new_centroids.row_mut(l);
            row += &p;
            counts[l] += 1;
        }
        for (c, &count) in counts.iter().enumerate() {
            let mut row = new_centroids.row_mut(c);
            row /= count as f64;
        }

        let shift = centroids
            .rows()
            .into_iter()
            .zip(new_centroids.rows())
            .map(|(a, b)| squared_distance(a, b).sqrt())
            .fold(0.0f64, f64::max);
        centroids = new_centroids;

        let wcss = wcss_of(points, &labels, &centroids);
        assert!(
            wcss <= prev_wcss + 1e-9,
            "k-means objective increased: {prev_wcss} -> {wcss}"
        );
        prev_wcss = wcss;

        if shift < LLOYD_TOL {
            break;
        }
    }

    // Final assignment so labels match the returned centroids exactly.
    for (i, p) in points.rows().into_iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.rows().into_iter().enumerate() {
            let d = squared_distance(p, centroid);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels[i] = best;
    }
    let wcss = wcss_of(points, &labels, &centroids);

    Ok(ClusterAssignment {
        labels,
        centroids,
        wcss,
    })
}

fn plus_plus_init(points: &ArrayView2<f64>, k: usize, seed: u64) -> Array2<f64> {
    let n = points.nrows();
    let mut r = rng(derive_seed(seed, "kmeans++"));
    let mut chosen: Vec<usize> = vec![r.gen_range(0..n)];
    let mut d2: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| squared_distance(p, points.row(chosen[0])))
        .collect();

    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining points coincide with a centroid; take the first
            // index not yet chosen to keep centroids distinct when possible.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        } else {
            let mut target = r.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        chosen.push(next);
        for (i, p) in points.rows().into_iter().enumerate() {
            let d = squared_distance(p, points.row(next));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut centroids = Array2::zeros((k, points.ncols()));
    for (c, &i) in chosen.iter().enumerate() {
        centroids.row_mut(c).assign(&points.row(i));
    }
    centroids
}

/// Mean silhouette coefficient over all points.
///
/// Per point: `s = (b - a) / max(a, b)` with `a` the mean intra-cluster
/// distance (excluding self) and `b` the smallest mean distance to another
/// cluster. Singletons and degenerate distances (`a = b = 0`) score 0.
pub fn mean_silhouette(points: &ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let n = points.nrows();
    if labels.len() != n {
        return Err(Error::Precondition("labels/points length mismatch".into()));
    }
    let k = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Precondition(
            "silhouette needs at least two non-empty clusters".into(),
        ));
    }

    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        if counts[own] == 1 {
            continue; // singleton scores 0
        }
        let mut sums = vec![0.0f64; k];
        for j in 0..n {
            if i == j {
                continue;
            }
            let d = squared_distance(points.row(i), points.row(j)).sqrt();
            sums[labels[j]] += d;
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone)]
pub struct SelectK {
    pub k: usize,
    pub assignment: ClusterAssignment,
    /// Mean silhouette per candidate K, in ascending K order.
    pub scores: Vec<(usize, f64)>,
}

/// Cluster for each K in `[k_min, min(k_max, n)]` and keep the K with the
/// highest mean silhouette (ties to the smaller K). Fewer than two points
/// fall back to a single group.
pub fn select_k(
    points: &ArrayView2<f64>,
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> Result<SelectK> {
    select_k_restarts(points, k_min, k_max, 1, seed)
}

/// [`select_k`] with best-of-`restarts` k-means runs (by WCSS) per candidate
/// K, each on an independent sub-seed.
pub fn select_k_restarts(
    points: &ArrayView2<f64>,
    k_min: usize,
    k_max: usize,
    restarts: usize,
    seed: u64,
) -> Result<SelectK> {
    let n = points.nrows();
    if n == 0 {
        return Err(Error::Precondition("no points to cluster".into()));
    }
    if k_min < 1 || k_max < k_min || restarts < 1 {
        return Err(Error::Precondition(
            "need 1 <= k_min <= k_max and restarts >= 1".into(),
        ));
    }
    if n < 2 || k_min > n {
        let assignment = kmeans(points, 1, derive_seed_indexed(seed, "select-k", 1))?;
        return Ok(SelectK {
            k: 1,
            assignment,
            scores: Vec::new(),
        });
    }

    let k_hi = k_max.min(n);
    let mut best: Option<(usize, f64, ClusterAssignment)> = None;
    let mut scores = Vec::new();
    for k in k_min..=k_hi {
        let mut assignment: Option<ClusterAssignment> = None;
        for restart in 0..restarts {
            let sub = derive_seed_indexed(seed, "select-k", (k * 1000 + restart) as u64);
            let candidate = kmeans(points, k, sub)?;
            let better = assignment
                .as_ref()
                .is_none_or(|a| candidate.wcss < a.wcss);
            if better {
                assignment = Some(candidate);
            }
        }
        let assignment = assignment.expect("restarts >= 1");
        let score = mean_silhouette(points, &assignment.labels)?;
        scores.push((k, score));
        let better = match &best {
            None => true,
            Some((_, best_score, _)) => score > *best_score,
        };
        if better {
            best = Some((k, score, assignment));
        }
    }
    let (k, _, assignment) = best.expect("at least one K evaluated");
    Ok(SelectK {
        k,
        assignment,
        scores,
    })
}

/// Centroid plus percentile-sampled peripheral member embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRepresentation {
    pub product_id: u32,
    pub group_index: u32,
    pub centroid: Vec<f64>,
    /// |J| member embeddings ordered by (percentile asc, pick order).
    pub peripherals: Vec<Vec<f64>>,
    pub member_ids: Vec<u32>,
    /// Set when the cluster had fewer members than 1 + |J| and members were
    /// reused round-robin.
    pub degenerate: bool,
}

impl GroupRepresentation {
    /// Centroid and peripherals flattened into one vector of `(1+|J|) * d`.
    pub fn flattened(&self) -> Vec<f64> {
        let mut out = self.centroid.clone();
        for p in &self.peripherals {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn vector_count(&self) -> usize {
        1 + self.peripherals.len()
    }

    pub fn dim(&self) -> usize {
        self.centroid.len()
    }
}

/// Linear-interpolated percentile of pre-sorted values.
fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let idx = p / 100.0 * (n - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let frac = idx - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Build a [`GroupRepresentation`] for one cluster.
///
/// For each `(percentile, count)` pick, the target radius is the linearly
/// interpolated percentile of member-to-centroid distances; the `count`
/// not-yet-selected members nearest that radius are taken (distance ties go
/// to the lower user id). Clusters smaller than 1 + |J| reuse members
/// round-robin and are flagged degenerate.
pub fn aggregate_group(
    points: &ArrayView2<f64>,
    user_ids: &[u32],
    assignment: &ClusterAssignment,
    cluster_index: usize,
    spec: &PercentileSpec,
) -> Result<GroupRepresentation> {
    if user_ids.len() != points.nrows() {
        return Err(Error::Precondition("user_ids/points length mismatch".into()));
    }
    if cluster_index >= assignment.k() {
        return Err(Error::Precondition(format!(
            "cluster {cluster_index} out of range"
        )));
    }
    let members = assignment.members_of(cluster_index);
    if members.is_empty() {
        return Err(Error::Precondition(format!(
            "cluster {cluster_index} is empty"
        )));
    }

    let centroid = assignment.centroids.row(cluster_index);
    let distances: Vec<f64> = members
        .iter()
        .map(|&i| squared_distance(points.row(i), centroid).sqrt())
        .collect();
    let mut sorted = distances.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));

    let mut selected = vec![false; members.len()];
    let mut remaining = members.len();
    let mut degenerate = members.len() < 1 + spec.total();
    let mut peripherals = Vec::with_capacity(spec.total());

    for &(p, count) in spec.picks() {
        let radius = percentile_sorted(&sorted, p);
        for _ in 0..count {
            if remaining == 0 {
                // Round-robin reuse once the pool is exhausted.
                selected.iter_mut().for_each(|s| *s = false);
                remaining = members.len();
                degenerate = true;
            }
            let pick = (0..members.len())
                .filter(|&m| !selected[m])
                .min_by(|&a, &b| {
                    let da = (distances[a] - radius).abs();
                    let db = (distances[b] - radius).abs();
                    da.partial_cmp(&db)
                        .expect("finite distances")
                        .then(user_ids[members[a]].cmp(&user_ids[members[b]]))
                })
                .expect("pool not empty");
            selected[pick] = true;
            remaining -= 1;
            peripherals.push(points.row(members[pick]).to_vec());
        }
    }

    let mut member_user_ids: Vec<u32> = members.iter().map(|&i| user_ids[i]).collect();
    member_user_ids.sort_unstable();

    Ok(GroupRepresentation {
        product_id: 0,
        group_index: cluster_index as u32,
        centroid: centroid.to_vec(),
        peripherals,
        member_ids: member_user_ids,
        degenerate,
    })
}

/// Top principal components of mean-centered `points` via seeded power
/// iteration with deflation. Returns the `n x components` projection.
pub fn project_principal_components(
    points: &ArrayView2<f64>,
    components: usize,
    seed: u64,
) -> Array2<f64> {
    let (n, d) = points.dim();
    let components = components.min(d).min(n);
    let mean = points.mean_axis(ndarray::Axis(0)).expect("n >= 1");
    let centered = points - &mean.broadcast((n, d)).expect("broadcast row");

    let mut r = rng(derive_seed(seed, "pca"));
    let mut basis: Vec<ndarray::Array1<f64>> = Vec::with_capacity(components);
    for _ in 0..components {
        let mut v = ndarray::Array1::from_shape_fn(d, |_| r.gen_range(-1.0..1.0));
        for _ in 0..60 {
            // w = C v (via the data matrix), then re-orthogonalize.
            let mut w = centered.t().dot(&centered.dot(&v));
            for b in &basis {
                let proj = w.dot(b);
                w.scaled_add(-proj, b);
            }
            let norm = w.dot(&w).sqrt();
            if norm < 1e-12 {
                break;
            }
            v = w / norm;
        }
        basis.push(v);
    }
    let mut projected = Array2::zeros((n, basis.len()));
    for (j, b) in basis.iter().enumerate() {
        let coords = centered.dot(b);
        projected.column_mut(j).assign(&coords);
    }
    projected
}

/// Cluster one product's user embeddings and aggregate every cluster.
///
/// The partition is found on the top `pca_components` principal components
/// (the raw embeddings when 0); centroids, distances and peripherals are
/// computed back in the original embedding space.
pub fn group_product(
    product_id: u32,
    points: &ArrayView2<f64>,
    user_ids: &[u32],
    config: &GroupingConfig,
    seed: u64,
) -> Result<Vec<GroupRepresentation>> {
    config.validate()?;
    let spec = config.percentile_spec()?;
    let product_seed = derive_seed_indexed(seed, "group-product", u64::from(product_id));
    let selected = if config.pca_components > 0 {
        let projected =
            project_principal_components(points, config.pca_components, product_seed);
        select_k_restarts(
            &projected.view(),
            config.k_min,
            config.k_max,
            config.kmeans_restarts,
            product_seed,
        )?
    } else {
        select_k_restarts(
            points,
            config.k_min,
            config.k_max,
            config.kmeans_restarts,
            product_seed,
        )?
    };

    // Rebuild the assignment in the original space: centroids are the means
    // of the assigned rows, wcss the matching objective.
    let mut centroids = Array2::zeros((selected.k, points.ncols()));
    for cluster in 0..selected.k {
        let members = selected.assignment.members_of(cluster);
        if members.is_empty() {
            return Err(Error::Precondition(format!(
                "cluster {cluster} is empty after selection"
            )));
        }
        for &m in &members {
            let mut row = centroids.row_mut(cluster);
            row += &points.row(m);
        }
        let mut row = centroids.row_mut(cluster);
        row /= members.len() as f64;
    }
    let assignment = ClusterAssignment {
        wcss: wcss_of(points, &selected.assignment.labels, &centroids),
        labels: selected.assignment.labels.clone(),
        centroids,
    };

    let mut groups = Vec::with_capacity(selected.k);
    for cluster in 0..selected.k {
        let mut rep = aggregate_group(points, user_ids, &assignment, cluster, &spec)?;
        rep.product_id = product_id;
        rep.group_index = cluster as u32;
        groups.push(rep);
    }
    Ok(groups)
}

/// Group representations keyed by (product_id, group_index).
pub type GroupIndex = std::collections::BTreeMap<(u32, u32), GroupRepresentation>;

/// Index a flat list of group representations by their key.
pub fn index_groups(groups: Vec<GroupRepresentation>) -> GroupIndex {
    groups
        .into_iter()
        .map(|g| ((g.product_id, g.group_index), g))
        .collect()
}

/// One-hidden-layer MLP mapping a flattened group representation to the
/// group token e_G.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupEncoder {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl GroupEncoder {
    pub fn init(input_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Self {
        let mut r = rng(derive_seed(seed, "group-encoder"));
        let std1 = (2.0 / (input_dim + hidden) as f64).sqrt();
        let std2 = (2.0 / (hidden + out_dim) as f64).sqrt();
        Self {
            w1: Array2::from_shape_fn((input_dim, hidden), |_| r.gen_range(-std1..std1)),
            b1: Array2::zeros((1, hidden)),
            w2: Array2::from_shape_fn((hidden, out_dim), |_| r.gen_range(-std2..std2)),
            b2: Array2::zeros((1, out_dim)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.w2.ncols()
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Array2<f64>)> {
        vec![
            ("encoder.w1", &self.w1),
            ("encoder.b1", &self.b1),
            ("encoder.w2", &self.w2),
            ("encoder.b2", &self.b2),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Array2<f64>)> {
        vec![
            ("encoder.w1", &mut self.w1),
            ("encoder.b1", &mut self.b1),
            ("encoder.w2", &mut self.w2),
            ("encoder.b2", &mut self.b2),
        ]
    }
}

/// Tape handles for the encoder parameters.
#[derive(Debug, Clone, Copy)]
pub struct GroupEncoderVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl GroupEncoderVars {
    pub fn bind<'a>(tape: &mut Tape<'a>, enc: &'a GroupEncoder) -> Self {
        Self {
            w1: tape.leaf(&enc.w1),
            b1: tape.leaf(&enc.b1),
            w2: tape.leaf(&enc.w2),
            b2: tape.leaf(&enc.b2),
        }
    }

    /// e_G = tanh(flat . w1 + b1) . w2 + b2 for a flattened representation.
    pub fn encode(&self, tape: &mut Tape<'_>, flat: Var) -> Var {
        let h = tape.matmul(flat, self.w1);
        let h = tape.add(h, self.b1);
        let h = tape.tanh(h);
        let out = tape.matmul(h, self.w2);
        tape.add(out, self.b2)
    }
}

/// Encode a group representation into its group token e_G.
pub fn encode_group(rep: &GroupRepresentation, encoder: &GroupEncoder) -> Result<Array2<f64>> {
    let flat = rep.flattened();
    if flat.len() != encoder.input_dim() {
        return Err(Error::Shape(format!(
            "flattened representation has {} values, encoder expects {}",
            flat.len(),
            encoder.input_dim()
        )));
    }
    let flat = Array2::from_shape_vec((1, flat.len()), flat).expect("row vector");
    let mut tape = Tape::new();
    let vars = GroupEncoderVars::bind(&mut tape, encoder);
    let input = tape.constant(flat);
    let out = vars.encode(&mut tape, input);
    Ok(tape.value(out).clone())
}
