//! On-disk sequences and the small CSV formats shared by every tool.
//!
//! A sequence directory holds one `x,y,z` CSV per cloud (taken in file name
//! order) and `poses.csv`, whose rows are sensor-to-world poses flattened
//! as the row-major 3×4 matrix `[R | t]`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::se3::{Covariance, Mat6, RigidTransform, Vec3};

pub const POSES_FILE: &str = "poses.csv";
pub const MAX_PAIR_GAP: usize = 4;
pub const POSE_ORTHONORMAL_TOL: f64 = 1e-6;

/// Writes `bytes` to a temporary sibling of `path`, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn malformed(path: &Path, row: usize, reason: impl Into<String>) -> Error {
    Error::Malformed { path: path.to_path_buf(), row, reason: reason.into() }
}

fn parse_rows(path: &Path, text: &str, width: usize, header: Option<&[&str]>) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(header.is_some())
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    if let Some(want) = header {
        let got = rdr.headers()?.clone();
        if got.iter().collect::<Vec<_>>() != want {
            return Err(malformed(path, 1, format!("expected header `{}`", want.join(","))));
        }
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1 + usize::from(header.is_some());
        let rec = rec.map_err(|e| malformed(path, row, e.to_string()))?;
        if rec.len() != width {
            return Err(malformed(path, row, format!("expected {width} values, found {}", rec.len())));
        }
        let vals = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| malformed(path, row, format!("`{s}` is not a number"))))
            .collect::<Result<Vec<f64>>>()?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(malformed(path, row, "non-finite value"));
        }
        rows.push(vals);
    }
    Ok(rows)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn read_cloud_csv(path: &Path) -> Result<PointCloud> {
    let rows = parse_rows(path, &read_text(path)?, 3, Some(&["x", "y", "z"]))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(PointCloud::new(rows.into_iter().map(|r| Vec3::new(r[0], r[1], r[2])).collect()).with_frame(name))
}

pub fn cloud_csv(cloud: &PointCloud) -> String {
    let mut s = String::from("x,y,z\n");
    for p in &cloud.points {
        s.push_str(&format!("{},{},{}\n", fmt_f64(p.x), fmt_f64(p.y), fmt_f64(p.z)));
    }
    s
}

pub fn write_cloud_csv(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, cloud_csv(cloud).as_bytes())
}

pub fn read_poses_csv(path: &Path) -> Result<Vec<RigidTransform>> {
    let rows = parse_rows(path, &read_text(path)?, 12, None)?;
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let v: [f64; 12] = r.as_slice().try_into().expect("width checked");
            let t = RigidTransform::from_row_major(&v);
            if !t.is_valid(POSE_ORTHONORMAL_TOL) {
                return Err(malformed(path, i + 1, "rotation is not orthonormal"));
            }
            Ok(t)
        })
        .collect()
}

pub fn poses_csv(poses: &[RigidTransform]) -> String {
    let mut s = String::new();
    for t in poses {
        let row: Vec<String> = t.to_row_major().iter().map(|x| fmt_f64(*x)).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// `(i, j)` with `i < j < l` and `j - i ≤ 4`, sorted by `i` then `j`.
pub fn pair_indices(l: usize) -> Vec<(usize, usize)> {
    (0..l)
        .flat_map(|i| (i + 1..l.min(i + MAX_PAIR_GAP + 1)).map(move |j| (i, j)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceDataset {
    pub names: Vec<String>,
    pub clouds: Vec<PointCloud>,
    /// Sensor-to-world pose of every cloud.
    pub poses: Vec<RigidTransform>,
}

impl SequenceDataset {
    pub fn new(names: Vec<String>, clouds: Vec<PointCloud>, poses: Vec<RigidTransform>) -> Result<Self> {
        if clouds.len() != poses.len() || names.len() != clouds.len() {
            return Err(Error::LengthMismatch { left: clouds.len(), right: poses.len() });
        }
        Ok(SequenceDataset { names, clouds, poses })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        pair_indices(self.len())
    }

    /// Ground truth taking cloud `j` (reading) into the frame of cloud `i`
    /// (reference).
    pub fn relative(&self, i: usize, j: usize) -> RigidTransform {
        self.poses[i].inverse().compose(&self.poses[j])
    }
}

pub fn load_dataset(dir: &Path) -> Result<SequenceDataset> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        let is_csv = p.extension().is_some_and(|x| x == "csv");
        if is_csv && p.file_name().is_some_and(|n| n != POSES_FILE) {
            files.push(p);
        }
    }
    files.sort();
    let poses_path = dir.join(POSES_FILE);
    let poses = read_poses_csv(&poses_path)?;
    if poses.len() != files.len() {
        return Err(malformed(
            &poses_path,
            poses.len(),
            format!("{} poses for {} cloud files", poses.len(), files.len()),
        ));
    }
    let clouds = files.iter().map(|f| read_cloud_csv(f)).collect::<Result<Vec<_>>>()?;
    let names = clouds.iter().map(|c| c.frame.clone()).collect();
    SequenceDataset::new(names, clouds, poses)
}

pub fn save_dataset(dir: &Path, data: &SequenceDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, cloud) in data.names.iter().zip(&data.clouds) {
        write_cloud_csv(&dir.join(format!("{name}.csv")), cloud)?;
    }
    write_atomic(&dir.join(POSES_FILE), poses_csv(&data.poses).as_bytes())
}

/// 6×6 matrix as CSV: a shape comment, a header and six row-major rows.
pub fn matrix_csv(m: &Mat6) -> String {
    let mut s = String::from("# shape 6x6 row-major\nc0,c1,c2,c3,c4,c5\n");
    for r in 0..6 {
        let row: Vec<String> = (0..6).map(|c| fmt_f64(m[(r, c)])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn read_matrix_csv(path: &Path) -> Result<Covariance> {
    let rows = parse_rows(path, &read_text(path)?, 6, Some(&["c0", "c1", "c2", "c3", "c4", "c5"]))?;
    if rows.len() != 6 {
        return Err(malformed(path, rows.len() + 1, "expected 6 rows"));
    }
    Ok(Covariance::new(Mat6::from_fn(|r, c| rows[r][c])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_rule_small_cases() {
        assert_eq!(pair_indices(2), vec![(0, 1)]);
        assert_eq!(pair_indices(1), vec![]);
        let six = pair_indices(6);
        assert_eq!(six.len(), 14);
        assert_eq!(&six[..4], &[(0, 1), (0, 2), (0, 3), (0, 4)]);
        assert!(!six.contains(&(0, 5)));
    }

    #[test]
    fn identity_pose_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("poses.csv");
        fs::write(&p, "1,0,0,0, 0,1,0,0, 0,0,1,0\n").unwrap();
        assert_eq!(read_poses_csv(&p).unwrap(), vec![RigidTransform::identity()]);
        fs::write(&p, "1,0,0,0,0,1,0,0,0,0,2,0\n").unwrap();
        let err = read_poses_csv(&p).unwrap_err().to_string();
        assert!(err.contains("poses.csv") && err.contains("row 1"), "{err}");
    }

    #[test]
    fn malformed_cloud_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        fs::write(&p, "x,y,z\n1,2,3\n1,oops,3\n").unwrap();
        let err = read_cloud_csv(&p).unwrap_err().to_string();
        assert!(err.contains("row 3"), "{err}");
        fs::write(&p, "a,b,c\n1,2,3\n").unwrap();
        assert!(read_cloud_csv(&p).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clouds = vec![
            PointCloud::new(vec![Vec3::new(0.1, 0.2, 0.3), Vec3::new(1.0 / 3.0, -2.0, 1e-17)]).with_frame("s000"),
            PointCloud::new(vec![Vec3::new(5.0, 6.0, 7.0)]).with_frame("s001"),
        ];
        let poses = vec![RigidTransform::identity(), RigidTransform::rot_z(0.3).compose(&RigidTransform::from_translation(Vec3::new(1.0, 0.0, 0.0)))];
        let data = SequenceDataset::new(vec!["s000".into(), "s001".into()], clouds, poses).unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = Mat6::from_fn(|r, c| (r * 6 + c) as f64 / 7.0);
        write_atomic(&p, matrix_csv(&m).as_bytes()).unwrap();
        assert_eq!(*read_matrix_csv(&p).unwrap().matrix(), (m + m.transpose()) * 0.5);
    }
}
