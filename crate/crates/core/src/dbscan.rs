//! DBSCAN over sampled twists, used to drop registrations that converged to
//! a wrong local minimum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::SampleSet;
use crate::se3::Vec6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanConfig {
    pub eps: f64,
    /// Neighbours (the point itself included) needed for a core point.
    pub min_pts: usize,
    /// Scale applied to the rotation components; 1 treats 1 rad as 1 m.
    pub rotation_weight: f64,
}

impl Default for DbscanConfig {
    fn default() -> Self {
        DbscanConfig {
            eps: 0.1,
            min_pts: 10,
            rotation_weight: 1.0,
        }
    }
}

impl DbscanConfig {
    /// Defaults with `min_pts = max(5, n/500)`.
    pub fn for_sample_count(n: usize) -> Self {
        DbscanConfig {
            min_pts: (n / 500).max(5),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::invalid("eps", "must be positive"));
        }
        if self.min_pts == 0 {
            return Err(Error::invalid("min_pts", "must be at least 1"));
        }
        if !(self.rotation_weight > 0.0) {
            return Err(Error::invalid("rotation_weight", "must be positive"));
        }
        Ok(())
    }

    fn embed(&self, v: &Vec6) -> Vec6 {
        let w = self.rotation_weight;
        Vec6::new(v[0], v[1], v[2], w * v[3], w * v[4], w * v[5])
    }
}

/// Cluster label per point (`None` for noise). Clusters are numbered in the
/// order their first core point appears. Non-finite points are noise.
pub fn dbscan(points: &[Vec6], eps: f64, min_pts: usize) -> (Vec<Option<usize>>, Vec<bool>) {
    let n = points.len();
    let eps2 = eps * eps;
    let finite: Vec<bool> = points.iter().map(|p| p.iter().all(|x| x.is_finite())).collect();
    let neighbors: Vec<Vec<usize>> = crate::par::map_indexed(n, |i| {
        if !finite[i] {
            return Vec::new();
        }
        (0..n)
            .filter(|&j| finite[j] && (points[i] - points[j]).norm_squared() <= eps2)
            .collect()
    });
    let core: Vec<bool> = neighbors.iter().map(|nb| !nb.is_empty() && nb.len() >= min_pts).collect();

    let mut labels = vec![None; n];
    let mut next = 0;
    let mut stack = Vec::new();
    for seed in 0..n {
        if !core[seed] || labels[seed].is_some() {
            continue;
        }
        labels[seed] = Some(next);
        stack.push(seed);
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if labels[q].is_none() {
                    labels[q] = Some(next);
                    if core[q] {
                        stack.push(q);
                    }
                }
            }
        }
        next += 1;
    }
    (labels, core)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Input with every sample's cluster label filled in.
    pub labelled: SampleSet,
    /// Members of the selected cluster.
    pub kept: SampleSet,
    pub cluster: Option<usize>,
}

/// Keeps the cluster holding the core point closest to ground truth (the
/// origin of twist space). Empty input or all-noise input yields an empty
/// kept set with `cluster == None`.
pub fn dbscan_filter(samples: &SampleSet, config: &DbscanConfig) -> Result<FilterOutcome> {
    config.validate()?;
    let pts: Vec<Vec6> = samples.twists().map(|x| config.embed(&x.to_vector())).collect();
    let (labels, core) = dbscan(&pts, config.eps, config.min_pts);

    let chosen = (0..pts.len())
        .filter(|&i| core[i])
        .min_by(|&a, &b| pts[a].norm_squared().total_cmp(&pts[b].norm_squared()).then(a.cmp(&b)))
        .and_then(|i| labels[i]);

    let mut labelled = samples.clone();
    for (s, l) in labelled.samples.iter_mut().zip(&labels) {
        s.cluster = *l;
    }
    let kept = SampleSet {
        samples: labelled
            .samples
            .iter()
            .filter(|s| chosen.is_some() && s.cluster == chosen)
            .copied()
            .collect(),
    };
    Ok(FilterOutcome { labelled, kept, cluster: chosen })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::{Twist, Vec3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn blob(center: Vec6, sd: f64, n: usize, seed: u64) -> Vec<Twist> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Normal::new(0.0, sd).unwrap();
        (0..n)
            .map(|_| Twist::from_vector(&(center + Vec6::from_fn(|_, _| g.sample(&mut rng)))))
            .collect()
    }

    #[test]
    fn single_cluster_kept_whole() {
        let s = SampleSet::from_twists(blob(Vec6::zeros(), 0.005, 200, 1));
        let out = dbscan_filter(&s, &DbscanConfig::default()).unwrap();
        assert_eq!(out.kept.len(), 200);
        assert_eq!(out.cluster, Some(0));
    }

    #[test]
    fn nearer_cluster_wins() {
        let near = Vec6::new(0.1, 0.0, 0.0, 0.0, 0.0, 0.0);
        let far = Vec6::new(0.0, 2.0, 0.0, 0.0, 0.0, 0.0);
        let mut xs = blob(far, 0.01, 300, 2);
        xs.extend(blob(near, 0.01, 100, 3));
        let out = dbscan_filter(&SampleSet::from_twists(xs), &DbscanConfig::default()).unwrap();
        assert_eq!(out.kept.len(), 100);
        assert!(out.kept.twists().all(|x| (x.to_vector() - near).norm() < 0.1));
    }

    #[test]
    fn empty_and_all_noise() {
        let out = dbscan_filter(&SampleSet::default(), &DbscanConfig::default()).unwrap();
        assert!(out.kept.is_empty() && out.cluster.is_none());
        let sparse: Vec<Twist> = (0..20).map(|i| Twist::new(Vec3::new(i as f64, 0.0, 0.0), Vec3::zeros())).collect();
        let out = dbscan_filter(&SampleSet::from_twists(sparse), &DbscanConfig::default()).unwrap();
        assert!(out.kept.is_empty() && out.cluster.is_none());
        assert!(out.labelled.samples.iter().all(|s| s.cluster.is_none()));
    }

    #[test]
    fn non_finite_points_are_noise() {
        let mut xs = blob(Vec6::zeros(), 0.005, 50, 4);
        xs.push(Twist::new(Vec3::new(f64::NAN, 0.0, 0.0), Vec3::zeros()));
        let out = dbscan_filter(&SampleSet::from_twists(xs), &DbscanConfig::default()).unwrap();
        assert_eq!(out.kept.len(), 50);
    }

    #[test]
    fn min_pts_scaling() {
        assert_eq!(DbscanConfig::for_sample_count(5000).min_pts, 10);
        assert_eq!(DbscanConfig::for_sample_count(500).min_pts, 5);
    }
}
