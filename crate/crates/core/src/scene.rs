//! Synthetic scenes: surface-sampled clouds with known ground truth.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::dataset::SequenceDataset;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::se3::{RigidTransform, Twist, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    /// Surface of an axis-aligned cube centred on the sensor.
    Cube,
    /// Closed cylinder (with caps) around the sensor, axis along z.
    CylinderPair,
    /// Corridor along x: two walls, floor and ceiling.
    Hallway,
    /// Floor and two walls meeting at a corner.
    Corner,
    /// Floor and a single wall.
    Planes,
}

impl Archetype {
    pub const ALL: [Archetype; 5] = [
        Archetype::Cube,
        Archetype::CylinderPair,
        Archetype::Hallway,
        Archetype::Corner,
        Archetype::Planes,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Archetype::Cube => "cube",
            Archetype::CylinderPair => "cylinder_pair",
            Archetype::Hallway => "hallway",
            Archetype::Corner => "corner",
            Archetype::Planes => "planes",
        }
    }

    pub fn default_size(&self) -> f64 {
        match self {
            Archetype::Cube => 1.0,
            Archetype::CylinderPair => 1.0,
            Archetype::Hallway => 20.0,
            Archetype::Corner => 6.0,
            Archetype::Planes => 6.0,
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Archetype {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Archetype::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| Error::invalid("archetype", format!("unknown archetype `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub archetype: Archetype,
    /// Characteristic dimension in metres (cube edge, cylinder diameter,
    /// corridor length, wall extent).
    pub size: f64,
    pub points: usize,
    /// Per-axis Gaussian noise standard deviation (m), both clouds.
    pub sigma: f64,
    pub seed: u64,
    /// Ground-truth motion `T̄ = exp(motion)` taking reading to reference.
    pub motion: Twist,
}

impl SceneSpec {
    pub fn new(archetype: Archetype) -> Self {
        SceneSpec {
            archetype,
            size: archetype.default_size(),
            points: 1500,
            sigma: 0.0,
            seed: 0,
            motion: default_motion(),
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_points(mut self, points: usize) -> Self {
        self.points = points;
        self
    }

    pub fn with_size(mut self, size: f64) -> Self {
        self.size = size;
        self
    }

    pub fn with_motion(mut self, motion: Twist) -> Self {
        self.motion = motion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.size > 0.0) {
            return Err(Error::invalid("size", "must be positive"));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::invalid("sigma", "must be non-negative"));
        }
        if self.points == 0 {
            return Err(Error::invalid("points", "must be positive"));
        }
        if !self.motion.is_finite() {
            return Err(Error::invalid("motion", "must be finite"));
        }
        Ok(())
    }
}

pub fn default_motion() -> Twist {
    Twist::new(Vec3::new(0.05, 0.02, 0.01), Vec3::new(0.01, -0.01, 0.03))
}

/// A registration problem with known answer: `reference ≈ T̄ · reading`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub reading: PointCloud,
    pub reference: PointCloud,
    pub ground_truth: RigidTransform,
}

struct Patch {
    origin: Vec3,
    e1: Vec3,
    e2: Vec3,
}

impl Patch {
    fn area(&self) -> f64 {
        self.e1.cross(&self.e2).norm()
    }
    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec3 {
        self.origin + self.e1 * rng.random::<f64>() + self.e2 * rng.random::<f64>()
    }
}

fn rect(origin: [f64; 3], e1: [f64; 3], e2: [f64; 3]) -> Patch {
    Patch {
        origin: Vec3::from(origin),
        e1: Vec3::from(e1),
        e2: Vec3::from(e2),
    }
}

fn patches(archetype: Archetype, s: f64) -> Vec<Patch> {
    let h = s / 2.0;
    match archetype {
        Archetype::Cube => vec![
            rect([-h, -h, -h], [s, 0.0, 0.0], [0.0, s, 0.0]),
            rect([-h, -h, h], [s, 0.0, 0.0], [0.0, s, 0.0]),
            rect([-h, -h, -h], [s, 0.0, 0.0], [0.0, 0.0, s]),
            rect([-h, h, -h], [s, 0.0, 0.0], [0.0, 0.0, s]),
            rect([-h, -h, -h], [0.0, s, 0.0], [0.0, 0.0, s]),
            rect([h, -h, -h], [0.0, s, 0.0], [0.0, 0.0, s]),
        ],
        Archetype::Hallway => {
            let (w, ht, floor) = (2.5, 2.5, -1.0);
            vec![
                rect([-h, -w / 2.0, floor], [s, 0.0, 0.0], [0.0, 0.0, ht]),
                rect([-h, w / 2.0, floor], [s, 0.0, 0.0], [0.0, 0.0, ht]),
                rect([-h, -w / 2.0, floor], [s, 0.0, 0.0], [0.0, w, 0.0]),
                rect([-h, -w / 2.0, floor + ht], [s, 0.0, 0.0], [0.0, w, 0.0]),
            ]
        }
        Archetype::Corner => vec![
            rect([-h, -h, -1.0], [s, 0.0, 0.0], [0.0, s, 0.0]),
            rect([h, -h, -1.0], [0.0, s, 0.0], [0.0, 0.0, h]),
            rect([-h, h, -1.0], [s, 0.0, 0.0], [0.0, 0.0, h]),
        ],
        Archetype::Planes => vec![
            rect([-h, -h, -1.0], [s, 0.0, 0.0], [0.0, s, 0.0]),
            rect([h, -h, -1.0], [0.0, s, 0.0], [0.0, 0.0, h]),
        ],
        Archetype::CylinderPair => unreachable!("curved surface"),
    }
}

fn sample_surface(archetype: Archetype, size: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    if archetype == Archetype::CylinderPair {
        let r = size / 2.0;
        let height = 2.0 * size;
        let side = std::f64::consts::TAU * r * height;
        let cap = std::f64::consts::PI * r * r;
        let total = side + 2.0 * cap;
        return (0..n)
            .map(|_| {
                let pick = rng.random::<f64>() * total;
                let a = rng.random::<f64>() * std::f64::consts::TAU;
                if pick < side {
                    Vec3::new(r * a.cos(), r * a.sin(), (rng.random::<f64>() - 0.5) * height)
                } else {
                    // Uniform on the disc.
                    let rho = r * rng.random::<f64>().sqrt();
                    let z = if pick < side + cap { -height / 2.0 } else { height / 2.0 };
                    Vec3::new(rho * a.cos(), rho * a.sin(), z)
                }
            })
            .collect();
    }
    sample_patches(&patches(archetype, size), n, rng)
}

fn sample_patches(ps: &[Patch], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let areas: Vec<f64> = ps.iter().map(Patch::area).collect();
    let total: f64 = areas.iter().sum();
    (0..n)
        .map(|_| {
            let mut pick = rng.random::<f64>() * total;
            let mut k = 0;
            while k + 1 < ps.len() && pick >= areas[k] {
                pick -= areas[k];
                k += 1;
            }
            ps[k].sample(rng)
        })
        .collect()
}

fn add_noise(points: &mut [Vec3], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma == 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    for p in points {
        *p += Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
    }
}

/// Noiseless surface samples of an archetype in its world frame.
pub fn sample_archetype(archetype: Archetype, size: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    sample_surface(archetype, size, n, rng)
}

/// Two independent noisy scans of the same surface. The reference lives in
/// the world frame; the reading is expressed in a frame displaced by `T̄`.
pub fn generate_scene(spec: &SceneSpec) -> Result<ScenePair> {
    spec.validate()?;
    let ground_truth = spec.motion.exp();
    let mut rng_q = stream(spec.seed, "scene/reference", 0);
    let mut rng_p = stream(spec.seed, "scene/reading", 0);

    let mut q = sample_surface(spec.archetype, spec.size, spec.points, &mut rng_q);
    add_noise(&mut q, spec.sigma, &mut rng_q);

    let to_reading = ground_truth.inverse();
    let mut p: Vec<Vec3> = sample_surface(spec.archetype, spec.size, spec.points, &mut rng_p)
        .iter()
        .map(|x| to_reading.apply(x))
        .collect();
    add_noise(&mut p, spec.sigma, &mut rng_p);

    Ok(ScenePair {
        reading: PointCloud::new(p).with_frame("reading"),
        reference: PointCloud::new(q).with_frame("reference"),
        ground_truth,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    /// Number of scans.
    pub scans: usize,
    /// Forward motion between consecutive scans (m).
    pub step: f64,
    pub points: usize,
    pub sigma: f64,
    /// Only surfaces within this distance along the corridor are scanned.
    pub range: f64,
    /// Spacing of the pillars lining both walls (m).
    pub pillar_spacing: f64,
    pub seed: u64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        SequenceSpec {
            scans: 6,
            step: 1.0,
            points: 1500,
            sigma: 0.01,
            range: 8.0,
            pillar_spacing: 3.0,
            seed: 0,
        }
    }
}

const CORRIDOR_HALF_WIDTH: f64 = 1.25;
const CORRIDOR_FLOOR: f64 = -1.0;
const CORRIDOR_HEIGHT: f64 = 2.5;
const PILLAR_DEPTH: f64 = 0.3;
const PILLAR_HALF_LENGTH: f64 = 0.2;

/// Corridor surfaces between `x0` and `x1`, with pillars whose centres fall
/// inside the window.
fn corridor_patches(x0: f64, x1: f64, spacing: f64) -> Vec<Patch> {
    let (w, f, h) = (CORRIDOR_HALF_WIDTH, CORRIDOR_FLOOR, CORRIDOR_HEIGHT);
    let len = x1 - x0;
    let mut ps = vec![
        rect([x0, -w, f], [len, 0.0, 0.0], [0.0, 0.0, h]),
        rect([x0, w, f], [len, 0.0, 0.0], [0.0, 0.0, h]),
        rect([x0, -w, f], [len, 0.0, 0.0], [0.0, 2.0 * w, 0.0]),
        rect([x0, -w, f + h], [len, 0.0, 0.0], [0.0, 2.0 * w, 0.0]),
    ];
    let first = (x0 / spacing).ceil() as i64;
    let last = (x1 / spacing).floor() as i64;
    for k in first..=last {
        let cx = k as f64 * spacing;
        let (a, b) = (cx - PILLAR_HALF_LENGTH, cx + PILLAR_HALF_LENGTH);
        for side in [-1.0, 1.0] {
            let wall = side * w;
            let face = side * (w - PILLAR_DEPTH);
            ps.push(rect([a, face, f], [b - a, 0.0, 0.0], [0.0, 0.0, h]));
            ps.push(rect([a, face, f], [0.0, wall - face, 0.0], [0.0, 0.0, h]));
            ps.push(rect([b, face, f], [0.0, wall - face, 0.0], [0.0, 0.0, h]));
        }
    }
    ps
}

/// A robot driving down a pillared corridor. Scan `i` is taken at
/// `x = i · step` and expressed in the sensor frame.
pub fn generate_sequence(spec: &SequenceSpec) -> Result<SequenceDataset> {
    if spec.scans < 2 {
        return Err(Error::invalid("scans", "a sequence needs at least two scans"));
    }
    if !(spec.step.is_finite() && spec.range > 0.0 && spec.pillar_spacing > 0.0 && spec.sigma >= 0.0) {
        return Err(Error::invalid("sequence", "step, range, pillar spacing and sigma must be valid"));
    }
    let mut names = Vec::new();
    let mut clouds = Vec::new();
    let mut poses = Vec::new();
    for i in 0..spec.scans {
        let x = i as f64 * spec.step;
        let pose = RigidTransform::from_translation(Vec3::new(x, 0.0, 0.0));
        let ps = corridor_patches(x - spec.range, x + spec.range, spec.pillar_spacing);
        let mut rng = stream(spec.seed, "sequence/scan", i as u64);
        let world = sample_patches(&ps, spec.points, &mut rng);
        let to_sensor = pose.inverse();
        let mut local: Vec<Vec3> = world.iter().map(|p| to_sensor.apply(p)).collect();
        add_noise(&mut local, spec.sigma, &mut rng);
        let name = format!("scan_{i:03}");
        clouds.push(PointCloud::new(local).with_frame(name.clone()));
        names.push(name);
        poses.push(pose);
    }
    SequenceDataset::new(names, clouds, poses)
}

/// Distance from a point to the surface of a cube of edge `size` centred at
/// the origin.
pub fn cube_surface_distance(p: &Vec3, size: f64) -> f64 {
    let h = size / 2.0;
    let d = p.abs() - Vec3::repeat(h);
    let outside = d.map(|x| x.max(0.0)).norm();
    let inside = d.max().min(0.0);
    (outside + inside).abs()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_cube_on_surface() {
        let pair = generate_scene(&SceneSpec::new(Archetype::Cube).with_seed(1)).unwrap();
        for p in &pair.reference.points {
            assert!(cube_surface_distance(p, 1.0) < 1e-12);
        }
        for p in &pair.reading.points {
            assert!(cube_surface_distance(&pair.ground_truth.apply(p), 1.0) < 1e-12);
        }
    }

    #[test]
    fn noisy_cube_rms() {
        let spec = SceneSpec::new(Archetype::Cube).with_sigma(0.01).with_points(10_000).with_seed(3);
        let pair = generate_scene(&spec).unwrap();
        let ms: f64 = pair
            .reference
            .points
            .iter()
            .map(|p| cube_surface_distance(p, 1.0).powi(2))
            .sum::<f64>()
            / 10_000.0;
        let rms = ms.sqrt();
        assert!((0.008..=0.012).contains(&rms), "{rms}");
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SceneSpec::new(Archetype::Hallway).with_sigma(0.01).with_seed(5);
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
        let other = generate_scene(&spec.with_seed(6)).unwrap();
        assert_ne!(generate_scene(&spec).unwrap().reference, other.reference);
    }

    #[test]
    fn archetype_names_parse() {
        for a in Archetype::ALL {
            assert_eq!(a.name().parse::<Archetype>().unwrap(), a);
        }
        assert_eq!("cylinder-pair".parse::<Archetype>().unwrap(), Archetype::CylinderPair);
        assert!("sphere".parse::<Archetype>().is_err());
    }

    #[test]
    fn sequence_poses_and_frames() {
        let seq = generate_sequence(&SequenceSpec { sigma: 0.0, scans: 3, ..Default::default() }).unwrap();
        assert_eq!(seq.len(), 3);
        assert_eq!(seq.relative(0, 1).translation, Vec3::new(1.0, 0.0, 0.0));
        // Every scan point lies inside the corridor box in world coordinates.
        for (c, pose) in seq.clouds.iter().zip(&seq.poses) {
            for p in &c.points {
                let w = pose.apply(p);
                assert!(w.y.abs() <= CORRIDOR_HALF_WIDTH + 1e-12);
                assert!(w.z >= CORRIDOR_FLOOR - 1e-12 && w.z <= CORRIDOR_FLOOR + CORRIDOR_HEIGHT + 1e-12);
            }
        }
    }

    #[test]
    fn cylinder_points_on_surface() {
        let pair = generate_scene(&SceneSpec::new(Archetype::CylinderPair).with_seed(2)).unwrap();
        for p in &pair.reference.points {
            let rho = (p.x * p.x + p.y * p.y).sqrt();
            let on_side = (rho - 0.5).abs() < 1e-12 && p.z.abs() <= 1.0;
            let on_cap = (p.z.abs() - 1.0).abs() < 1e-12 && rho <= 0.5 + 1e-12;
            assert!(on_side || on_cap);
        }
    }
}
