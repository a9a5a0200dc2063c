//! Fixed-grid descriptor of the overlap between two registered clouds.
//!
//! Each of the 4×4×4 voxels contributes 11 values: mean planarity, mean
//! cylindricality and a 9-bin normal histogram. Voxel `(ix, iy, iz)` lands at
//! offset `11 · (16 ix + 4 iy + iz)`.

use serde::{Deserialize, Serialize};

use crate::cloud::{self, LocalSurface, PointCloud};
use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::se3::{Covariance, RigidTransform, Vec3};

pub const FEATURES_PER_VOXEL: usize = 11;
pub const HISTOGRAM_BINS: usize = 9;

const S2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const S3: f64 = 0.577_350_269_189_625_8;

/// Histogram directions. A normal goes to the direction with the largest
/// `|n · d|`, so opposite normals share a bin.
pub const NORMAL_CODEBOOK: [[f64; 3]; HISTOGRAM_BINS] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [S3, S3, S3],
    [-S3, S3, S3],
    [S3, -S3, S3],
    [-S3, -S3, S3],
    [S2, S2, 0.0],
    [S2, -S2, 0.0],
];

pub const DEFAULT_OVERLAP_RADIUS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub counts: [usize; 3],
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            counts: [4, 4, 4],
            min: [-12.5, -12.5, -2.5],
            max: [12.5, 12.5, 7.5],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if self.counts[k] == 0 {
                return Err(Error::invalid("grid", "voxel counts must be positive"));
            }
            if !(self.max[k] > self.min[k]) {
                return Err(Error::invalid("grid", "extents must be positive"));
            }
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn descriptor_len(&self) -> usize {
        self.voxel_count() * FEATURES_PER_VOXEL
    }

    /// Half-open cells: a point on the upper face of the grid is outside.
    pub fn voxel_of(&self, p: &Vec3) -> Option<usize> {
        let mut idx = [0usize; 3];
        for k in 0..3 {
            let f = (p[k] - self.min[k]) / (self.max[k] - self.min[k]);
            if !(0.0..1.0).contains(&f) {
                return None;
            }
            idx[k] = ((f * self.counts[k] as f64) as usize).min(self.counts[k] - 1);
        }
        Some((idx[0] * self.counts[1] + idx[1]) * self.counts[2] + idx[2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Descriptor(pub Vec<f64>);

impl Descriptor {
    pub fn zeros(len: usize) -> Self {
        Descriptor(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Index of the codebook direction closest to `n` up to sign.
pub fn histogram_bin(n: &Vec3) -> usize {
    let mut best = 0;
    let mut best_dot = -1.0;
    for (k, d) in NORMAL_CODEBOOK.iter().enumerate() {
        let dot = (n.x * d[0] + n.y * d[1] + n.z * d[2]).abs();
        if dot > best_dot {
            best_dot = dot;
            best = k;
        }
    }
    best
}

/// Histogram over the valid normals, divided by the total point count.
pub fn normal_histogram9(surfaces: &[LocalSurface]) -> [f64; HISTOGRAM_BINS] {
    let mut h = [0.0; HISTOGRAM_BINS];
    if surfaces.is_empty() {
        return h;
    }
    for s in surfaces.iter().filter(|s| s.valid) {
        h[histogram_bin(&s.normal)] += 1.0;
    }
    let n = surfaces.len() as f64;
    h.iter_mut().for_each(|x| *x /= n);
    h
}

/// Mean planarity and cylindricality over points with a valid neighbourhood.
pub fn shape_features(surfaces: &[LocalSurface]) -> (f64, f64) {
    let valid: Vec<&LocalSurface> = surfaces.iter().filter(|s| s.valid).collect();
    if valid.is_empty() {
        return (0.0, 0.0);
    }
    let n = valid.len() as f64;
    (
        valid.iter().map(|s| s.planarity).sum::<f64>() / n,
        valid.iter().map(|s| s.cylindricality).sum::<f64>() / n,
    )
}

/// Points of `T·P` within `radius` of `Q`, followed by points of `Q` within
/// `radius` of `T·P`, in the frame of `Q`. Surfaces are carried over (and
/// rotated) when both clouds have them.
pub fn extract_overlap(reading: &PointCloud, reference: &PointCloud, t: &RigidTransform, radius: f64) -> Result<PointCloud> {
    if !(radius > 0.0) {
        return Err(Error::invalid("radius", "must be positive"));
    }
    let moved = cloud::transform_cloud(reading, t);
    if moved.is_empty() || reference.is_empty() {
        return Ok(PointCloud::default().with_frame(reference.frame.clone()));
    }
    let tree_q = KdTree::build(&reference.points)?;
    let tree_p = KdTree::build(&moved.points)?;
    let from_p: Vec<usize> = (0..moved.len()).filter(|&i| tree_q.any_within(&moved.points[i], radius)).collect();
    let from_q: Vec<usize> = (0..reference.len()).filter(|&i| tree_p.any_within(&reference.points[i], radius)).collect();
    let mut s = moved.select(&from_p).concat(&reference.select(&from_q));
    s.frame = reference.frame.clone();
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelStats {
    pub in_bounds: usize,
    pub dropped: usize,
}

/// Point indices per voxel; out-of-bounds points are counted and dropped.
pub fn voxelize(points: &[Vec3], grid: &GridSpec) -> (Vec<Vec<usize>>, VoxelStats) {
    let mut cells = vec![Vec::new(); grid.voxel_count()];
    let mut dropped = 0;
    for (i, p) in points.iter().enumerate() {
        match grid.voxel_of(p) {
            Some(v) => cells[v].push(i),
            None => dropped += 1,
        }
    }
    let in_bounds = points.len() - dropped;
    (cells, VoxelStats { in_bounds, dropped })
}

/// Descriptor of an overlap cloud that already carries surfaces.
pub fn describe_overlap(overlap: &PointCloud, grid: &GridSpec) -> Result<(Descriptor, VoxelStats)> {
    grid.validate()?;
    let surfaces = match &overlap.surfaces {
        Some(s) => s,
        None if overlap.is_empty() => return Ok((Descriptor::zeros(grid.descriptor_len()), VoxelStats { in_bounds: 0, dropped: 0 })),
        None => return Err(Error::invalid("overlap", "cloud has no surface attributes")),
    };
    let (cells, stats) = voxelize(&overlap.points, grid);
    let per_voxel = crate::par::map_indexed(cells.len(), |v| {
        let local: Vec<LocalSurface> = cells[v].iter().map(|&i| surfaces[i]).collect();
        let (p, c) = shape_features(&local);
        let h = normal_histogram9(&local);
        let mut out = [0.0; FEATURES_PER_VOXEL];
        out[0] = p;
        out[1] = c;
        out[2..].copy_from_slice(&h);
        out
    });
    Ok((Descriptor(per_voxel.into_iter().flatten().collect()), stats))
}

fn with_surfaces(cloud: &PointCloud, k: usize) -> Result<PointCloud> {
    if cloud.has_normals() {
        Ok(cloud.clone())
    } else {
        cloud::estimate_normals(cloud, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescriptorConfig {
    pub grid: GridSpec,
    pub overlap_radius: f64,
    pub normal_neighbors: usize,
}

impl Default for DescriptorConfig {
    fn default() -> Self {
        DescriptorConfig {
            grid: GridSpec::default(),
            overlap_radius: DEFAULT_OVERLAP_RADIUS,
            normal_neighbors: cloud::DEFAULT_NORMAL_NEIGHBORS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDescription {
    pub descriptor: Descriptor,
    /// The overlap cloud in the reference frame, reusable for augmentation.
    pub overlap: PointCloud,
    pub stats: VoxelStats,
    /// No overlap point fell inside the grid.
    pub empty: bool,
}

/// Features are computed per point on each full cloud, then the overlap set
/// is voxelised.
pub fn describe_pair(reading: &PointCloud, reference: &PointCloud, t: &RigidTransform, config: &DescriptorConfig) -> Result<PairDescription> {
    let p = with_surfaces(reading, config.normal_neighbors)?;
    let q = with_surfaces(reference, config.normal_neighbors)?;
    let overlap = extract_overlap(&p, &q, t, config.overlap_radius)?;
    let (descriptor, stats) = describe_overlap(&overlap, &config.grid)?;
    Ok(PairDescription {
        descriptor,
        empty: stats.in_bounds == 0,
        overlap,
        stats,
    })
}

/// Rotates the overlap about z by `theta`, recomputes its descriptor and
/// pushes the covariance through the adjoint of the rotation.
pub fn augment(overlap: &PointCloud, covariance: &Covariance, theta: f64, grid: &GridSpec) -> Result<(Descriptor, Covariance)> {
    let r = RigidTransform::rot_z(theta);
    let rotated = cloud::transform_cloud(overlap, &r);
    let (d, _) = describe_overlap(&rotated, grid)?;
    Ok((d, covariance.transform(&r)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub id: String,
    pub descriptor: Descriptor,
    pub covariance: Covariance,
    /// Rotation about z applied for augmentation (rad).
    #[serde(default)]
    pub augmentation: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::se3::Covariance;

    fn surf(n: Vec3) -> LocalSurface {
        LocalSurface { normal: n, valid: true, planarity: 1.0, cylindricality: 0.0 }
    }

    #[test]
    fn grid_indexing() {
        let g = GridSpec::default();
        assert_eq!(g.descriptor_len(), 704);
        // The grid centre (0, 0, 2.5) is the corner shared by voxels (2,2,2)…
        assert_eq!(g.voxel_of(&Vec3::new(0.0, 0.0, 2.5)), Some(2 * 16 + 2 * 4 + 2));
        assert_eq!(g.voxel_of(&Vec3::new(-12.5, -12.5, -2.5)), Some(0));
        assert_eq!(g.voxel_of(&Vec3::new(13.0, 0.0, 0.0)), None);
        assert_eq!(g.voxel_of(&Vec3::new(12.5, 0.0, 0.0)), None);
        assert_eq!(g.voxel_of(&Vec3::new(10.0, -10.0, 7.0)), Some(3 * 16 + 3));
    }

    #[test]
    fn histogram_basics() {
        let h = normal_histogram9(&[surf(Vec3::z()); 5]);
        assert_eq!(h[2], 1.0);
        assert_eq!(h.iter().sum::<f64>(), 1.0);
        assert_eq!(normal_histogram9(&[]), [0.0; 9]);
        let mut mixed = vec![surf(-Vec3::x()); 3];
        mixed.push(LocalSurface { valid: false, ..surf(Vec3::y()) });
        let h = normal_histogram9(&mixed);
        assert_eq!(h[0], 0.75);
        assert_eq!(h.iter().sum::<f64>(), 0.75);
    }

    #[test]
    fn codebook_is_unit() {
        for d in NORMAL_CODEBOOK {
            assert!((Vec3::from(d).norm() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_overlap_gives_zero_descriptor() {
        let far = PointCloud::new((0..40).map(|i| Vec3::new(100.0 + i as f64 * 0.1, 0.0, (i % 5) as f64 * 0.1)).collect());
        let near = PointCloud::new((0..40).map(|i| Vec3::new(i as f64 * 0.1, 0.0, (i % 5) as f64 * 0.1)).collect());
        let d = describe_pair(&far, &near, &RigidTransform::identity(), &DescriptorConfig { normal_neighbors: 4, ..Default::default() }).unwrap();
        assert!(d.empty);
        assert_eq!(d.descriptor, Descriptor::zeros(704));
    }

    #[test]
    fn augmentation_at_zero_is_identity() {
        let pts: Vec<Vec3> = (0..400).map(|i| Vec3::new((i % 20) as f64 * 0.2 - 2.0, (i / 20) as f64 * 0.2 - 2.0, -1.0)).collect();
        let s = cloud::estimate_normals(&PointCloud::new(pts), 10).unwrap();
        let y = Covariance::from_diagonal([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (d0, _) = describe_overlap(&s, &GridSpec::default()).unwrap();
        let (d, ya) = augment(&s, &y, 0.0, &GridSpec::default()).unwrap();
        assert_eq!(d, d0);
        assert_eq!(ya, y);
    }
}
