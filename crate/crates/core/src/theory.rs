//! Monte Carlo study of cluster separation: squared distances between
//! Gaussian samples in raw space versus in the exponential
//! inner-product representation `f(x)_k = exp(lambda <x, x_k>)`.

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{compensated_sum, Execution};
use crate::rng::{child_seed, seeded};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSpec {
    /// Number of clusters.
    pub m: usize,
    /// Dimension.
    pub d: usize,
    /// Signal strength: `<mu_i, mu_j> = s` if `i == j`, else 0.
    pub s: f64,
    /// Samples per cluster.
    pub k: usize,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            m: 4,
            d: 128,
            s: 64.0,
            k: 50,
            seed: 2024,
        }
    }
}

impl ClusterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Argument(format!("need at least 2 clusters, got {}", self.m)));
        }
        if self.m >= self.d {
            return Err(Error::Argument(format!(
                "cluster count {} must be below dimension {}",
                self.m, self.d
            )));
        }
        if !(self.s >= 0.0 && self.s.is_finite()) {
            return Err(Error::Argument(format!("signal strength {} must be >= 0", self.s)));
        }
        if self.k < 2 {
            return Err(Error::Argument(format!("need at least 2 samples per cluster, got {}", self.k)));
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.m * self.k
    }
}

/// `mu_i = sqrt(s) e_i`.
pub fn cluster_means(spec: &ClusterSpec) -> Vec<Vec<f64>> {
    (0..spec.m)
        .map(|i| {
            let mut mu = vec![0.0; spec.d];
            mu[i] = spec.s.sqrt();
            mu
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clusters {
    pub d: usize,
    /// `n x d`, cluster-major.
    pub points: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Clusters {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }
}

/// `K` draws from `N(mu_i, I_d)` for each cluster.
pub fn sample_clusters(spec: &ClusterSpec) -> Result<Clusters> {
    spec.validate()?;
    let mut rng = seeded(spec.seed);
    let means = cluster_means(spec);
    let mut points = Vec::with_capacity(spec.n() * spec.d);
    let mut labels = Vec::with_capacity(spec.n());
    for (c, mu) in means.iter().enumerate() {
        for _ in 0..spec.k {
            points.extend(mu.iter().map(|m| {
                let z: f64 = StandardNormal.sample(&mut rng);
                m + z
            }));
            labels.push(c);
        }
    }
    Ok(Clusters {
        d: spec.d,
        points,
        labels,
    })
}

/// Pairwise statistic means. The standard errors treat pairs as
/// independent, which understates them; use trial-level errors from
/// [`separation_report`] for inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub within_mean: f64,
    pub within_se: f64,
    pub between_mean: f64,
    pub between_se: f64,
    pub within_pairs: usize,
    pub between_pairs: usize,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = compensated_sum(v.iter().copied()) / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = compensated_sum(v.iter().map(|x| (x - mean) * (x - mean))) / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Split pair values `(i < j)` into within- and between-cluster lists.
fn partition_pairs(labels: &[usize], dist: impl Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>) {
    let n = labels.len();
    let (mut within, mut between) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in i + 1..n {
            let v = dist(i, j);
            if labels[i] == labels[j] {
                within.push(v);
            } else {
                between.push(v);
            }
        }
    }
    (within, between)
}

fn stats_from(within: &[f64], between: &[f64]) -> Result<DistanceStats> {
    if within.is_empty() || between.is_empty() {
        return Err(Error::Argument(
            "need at least two clusters with two samples each".into(),
        ));
    }
    let (wm, wse) = mean_se(within);
    let (bm, bse) = mean_se(between);
    Ok(DistanceStats {
        within_mean: wm,
        within_se: wse,
        between_mean: bm,
        between_se: bse,
        within_pairs: within.len(),
        between_pairs: between.len(),
    })
}

/// Mean squared Euclidean distance within and between clusters.
pub fn raw_distance_stats(c: &Clusters) -> Result<DistanceStats> {
    let (w, b) = partition_pairs(&c.labels, |i, j| sq_dist(c.point(i), c.point(j)));
    stats_from(&w, &b)
}

/// `f(x)_k = exp(lambda <x, anchor_k>)` for anchors stored row-major.
pub fn attention_representation(x: &[f64], anchors: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Argument(format!("lambda {lambda} must be >= 0")));
    }
    let d = x.len();
    if d == 0 || anchors.len() % d != 0 {
        return Err(Error::Dimension(format!(
            "anchors of {} values for dimension {d}",
            anchors.len()
        )));
    }
    let out: Vec<f64> = anchors
        .chunks(d)
        .map(|a| (lambda * x.iter().zip(a).map(|(p, q)| p * q).sum::<f64>()).exp())
        .collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "exp(lambda <x, x_k>) overflows at lambda = {lambda}; use the scaled form"
        )));
    }
    Ok(out)
}

/// Which anchors enter the f-space distance between `x_i` and `x_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// Every sample, including `x_i` and `x_j` themselves.
    IncludeAll,
    /// Every sample except the pair being compared.
    #[default]
    ExcludePair,
}

/// Gram matrix of the points, `n x n`.
fn gram(c: &Clusters) -> Vec<f64> {
    let n = c.n();
    let d = c.d;
    let mut g = vec![0.0; n * n];
    // SAFETY: slices sized n*d and n*n match the dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            n,
            d,
            n,
            1.0,
            c.points.as_ptr(),
            d as isize,
            1,
            c.points.as_ptr(),
            1,
            d as isize,
            0.0,
            g.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    g
}

/// Representation matrix `F[i][k] = exp(lambda G_ik - shift)` and the
/// common log-scale `shift` (the largest exponent among used entries).
pub fn scaled_representation(c: &Clusters, lambda: f64, policy: AnchorPolicy) -> Result<(Vec<f64>, f64)> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Argument(format!("lambda {lambda} must be >= 0")));
    }
    let n = c.n();
    let g = gram(c);
    let used = |i: usize, k: usize| policy == AnchorPolicy::IncludeAll || i != k;
    let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..n {
        for k in 0..n {
            if used(i, k) {
                hi = hi.max(lambda * g[i * n + k]);
                lo = lo.min(lambda * g[i * n + k]);
            }
        }
    }
    if hi - lo > 700.0 {
        return Err(Error::Numeric(format!(
            "representation spans e^{:.0}; components underflow at lambda = {lambda}",
            hi - lo
        )));
    }
    let f = g.iter().map(|&v| (lambda * v - hi).exp()).collect();
    Ok((f, hi))
}

/// Squared f-space distance between samples `i` and `j`.
fn repr_dist(f: &[f64], n: usize, i: usize, j: usize, policy: AnchorPolicy) -> f64 {
    let (ri, rj) = (&f[i * n..(i + 1) * n], &f[j * n..(j + 1) * n]);
    let mut acc = 0.0;
    for k in 0..n {
        if policy == AnchorPolicy::ExcludePair && (k == i || k == j) {
            continue;
        }
        let t = ri[k] - rj[k];
        acc += t * t;
    }
    acc
}

/// Squared f-space distances within and between clusters, in scaled
/// units (multiply by `exp(2 shift)` for absolute values).
pub fn repr_distance_stats(c: &Clusters, lambda: f64, policy: AnchorPolicy) -> Result<(DistanceStats, f64)> {
    let (f, shift) = scaled_representation(c, lambda, policy)?;
    let n = c.n();
    let (w, b) = partition_pairs(&c.labels, |i, j| repr_dist(&f, n, i, j, policy));
    Ok((stats_from(&w, &b)?, shift))
}

/// Fraction of (within, between) pairs with `between < within`.
pub fn misorder_rate(within: &[f64], between: &[f64]) -> f64 {
    if within.is_empty() || between.is_empty() {
        return 0.0;
    }
    let mut sorted = between.to_vec();
    sorted.sort_by(f64::total_cmp);
    let count: usize = within.iter().map(|&w| sorted.partition_point(|&b| b < w)).sum();
    count as f64 / (within.len() as f64 * between.len() as f64)
}

/// Per-trial results; f-space means are in that trial's scaled units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialStats {
    pub trial: usize,
    pub seed: u64,
    pub raw_within: f64,
    pub raw_between: f64,
    pub repr_within: f64,
    pub repr_between: f64,
    pub log_scale: f64,
    pub relative_gap: f64,
    pub raw_misorder: f64,
    pub repr_misorder: f64,
}

fn run_trial(spec: &ClusterSpec, trial: usize, lambda: f64, policy: AnchorPolicy) -> Result<TrialStats> {
    let seed = child_seed(spec.seed, trial as u64);
    let c = sample_clusters(&ClusterSpec { seed, ..spec.clone() })?;
    let n = c.n();
    let (rw, rb) = partition_pairs(&c.labels, |i, j| sq_dist(c.point(i), c.point(j)));
    let (f, shift) = scaled_representation(&c, lambda, policy)?;
    let (fw, fb) = partition_pairs(&c.labels, |i, j| repr_dist(&f, n, i, j, policy));
    let raw = stats_from(&rw, &rb)?;
    let repr = stats_from(&fw, &fb)?;
    if repr.within_mean <= 0.0 {
        return Err(Error::Numeric(format!(
            "trial {trial}: within-cluster f-space distances vanished at lambda = {lambda}"
        )));
    }
    Ok(TrialStats {
        trial,
        seed,
        raw_within: raw.within_mean,
        raw_between: raw.between_mean,
        repr_within: repr.within_mean,
        repr_between: repr.between_mean,
        log_scale: shift,
        relative_gap: (repr.between_mean - repr.within_mean) / repr.within_mean,
        raw_misorder: misorder_rate(&rw, &rb),
        repr_misorder: misorder_rate(&fw, &fb),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub spec: ClusterSpec,
    pub lambda: f64,
    pub anchors: AnchorPolicy,
    pub trials: usize,
    pub raw_within_mean: f64,
    pub raw_within_se: f64,
    pub raw_between_mean: f64,
    pub raw_between_se: f64,
    /// Mean over trials of scaled f-space means.
    pub repr_within_mean: f64,
    pub repr_between_mean: f64,
    pub relative_gap: f64,
    pub relative_gap_se: f64,
    /// Lower end of the two-sided normal 95% interval.
    pub relative_gap_lower95: f64,
    pub raw_misorder_rate: f64,
    pub raw_misorder_se: f64,
    pub repr_misorder_rate: f64,
    pub repr_misorder_se: f64,
    /// Mean of per-trial `repr - raw` misorder differences.
    pub misorder_diff: f64,
    pub misorder_diff_se: f64,
}

pub const MIN_TRIALS: usize = 30;

/// `lambda = None` uses `1 / sqrt(d)`.
pub fn separation_report(
    spec: &ClusterSpec,
    lambda: Option<f64>,
    trials: usize,
    policy: AnchorPolicy,
    exec: Execution,
) -> Result<(SeparationReport, Vec<TrialStats>)> {
    spec.validate()?;
    if trials < MIN_TRIALS {
        return Err(Error::Argument(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    let lambda = lambda.unwrap_or(1.0 / (spec.d as f64).sqrt());
    let rows = exec.try_map(trials, |t| run_trial(spec, t, lambda, policy))?;
    let col = |f: fn(&TrialStats) -> f64| mean_se(&rows.iter().map(f).collect::<Vec<_>>());
    let (rwm, rwse) = col(|r| r.raw_within);
    let (rbm, rbse) = col(|r| r.raw_between);
    let (fwm, _) = col(|r| r.repr_within);
    let (fbm, _) = col(|r| r.repr_between);
    let (gap, gap_se) = col(|r| r.relative_gap);
    let (raw_mis, raw_mis_se) = col(|r| r.raw_misorder);
    let (repr_mis, repr_mis_se) = col(|r| r.repr_misorder);
    let (diff, diff_se) = col(|r| r.repr_misorder - r.raw_misorder);
    let report = SeparationReport {
        spec: spec.clone(),
        lambda,
        anchors: policy,
        trials,
        raw_within_mean: rwm,
        raw_within_se: rwse,
        raw_between_mean: rbm,
        raw_between_se: rbse,
        repr_within_mean: fwm,
        repr_between_mean: fbm,
        relative_gap: gap,
        relative_gap_se: gap_se,
        relative_gap_lower95: gap - 1.96 * gap_se,
        raw_misorder_rate: raw_mis,
        raw_misorder_se: raw_mis_se,
        repr_misorder_rate: repr_mis,
        repr_misorder_se: repr_mis_se,
        misorder_diff: diff,
        misorder_diff_se: diff_se,
    };
    Ok((report, rows))
}

pub fn write_trials_csv(path: &Path, rows: &[TrialStats]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "trial,seed,raw_within,raw_between,repr_within,repr_between,log_scale,relative_gap,raw_misorder,repr_misorder"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            r.trial,
            r.seed,
            r.raw_within,
            r.raw_between,
            r.repr_within,
            r.repr_between,
            r.log_scale,
            r.relative_gap,
            r.raw_misorder,
            r.repr_misorder
        )?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn means_are_orthogonal_with_norm_s() {
        let spec = ClusterSpec { m: 3, d: 5, s: 9.0, ..ClusterSpec::default() };
        let mu = cluster_means(&spec);
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = mu[i].iter().zip(&mu[j]).map(|(a, b)| a * b).sum();
                assert_eq!(dot, if i == j { 9.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(matches!(
            sample_clusters(&ClusterSpec { m: 8, d: 8, ..ClusterSpec::default() }),
            Err(Error::Argument(_))
        ));
        assert!(ClusterSpec { k: 1, ..ClusterSpec::default() }.validate().is_err());
        assert!(ClusterSpec { s: -1.0, ..ClusterSpec::default() }.validate().is_err());
    }

    #[test]
    fn two_points_give_single_pair_statistic() {
        let c = Clusters {
            d: 2,
            points: vec![0.0, 0.0, 3.0, 4.0, 1.0, 1.0, 1.0, 1.0],
            labels: vec![0, 0, 1, 1],
        };
        let s = raw_distance_stats(&c).unwrap();
        assert_eq!(s.within_pairs, 2);
        assert_eq!(s.within_mean, (25.0 + 0.0) / 2.0);
    }

    #[test]
    fn misorder_counts_strictly_smaller() {
        assert_eq!(misorder_rate(&[1.0, 3.0], &[2.0, 4.0]), 0.25);
        assert_eq!(misorder_rate(&[1.0], &[1.0]), 0.0);
        assert_eq!(misorder_rate(&[5.0], &[1.0, 2.0]), 1.0);
    }

    #[test]
    fn representation_basics() {
        let anchors = [1.0, 0.0, 0.0, 1.0, 2.0, 2.0];
        assert_eq!(attention_representation(&[0.3, -0.2], &anchors, 0.0).unwrap(), vec![1.0; 3]);
        let f = attention_representation(&[0.5, 0.25], &anchors, 0.7).unwrap();
        assert!(f[1] < f[0] && f[0] < f[2]);
        assert!(attention_representation(&[1.0, 1.0], &anchors, -0.1).is_err());
        assert!(matches!(
            attention_representation(&[1e3, 1e3], &anchors, 1.0),
            Err(Error::Numeric(_))
        ));
    }
}
