//! Gaussian-cloud scene model: vectors, quaternions, clouds, the neighbor
//! graph backing the rigid loss, and deformation application.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("quaternion norm {0} too small to normalize")]
    DegenerateQuaternion(f64),
    #[error("cloud has {0} points, need at least 2")]
    CloudTooSmall(usize),
    #[error("deformation has {deformation} entries, cloud has {cloud}")]
    CardinalityMismatch { deformation: usize, cloud: usize },
}

/// 3-vector in scene units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        Vec3::new(self.x / n, self.y / n, self.z / n)
    }

    pub fn scaled(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    /// Elementwise product.
    pub fn hadamard(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn exp(self) -> Vec3 {
        Vec3::new(self.x.exp(), self.y.exp(), self.z.exp())
    }

    pub fn mean(self) -> f64 {
        (self.x + self.y + self.z) / 3.0
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Vec3 {
        Vec3::new(a[0], a[1], a[2])
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Quaternion stored (w, x, y, z). Unit quaternions represent rotations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    /// Rotation of `angle` radians about a (not necessarily unit) axis.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Quat {
        let a = axis.normalized();
        let (s, c) = (angle * 0.5).sin_cos();
        Quat::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(self, o: Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn conjugate(self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn scaled(self, s: f64) -> Quat {
        Quat::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn add(self, o: Quat) -> Quat {
        Quat::new(self.w + o.w, self.x + o.x, self.y + o.y, self.z + o.z)
    }

    /// Rotation angle in [0, pi] represented by a unit quaternion.
    pub fn angle(self) -> f64 {
        2.0 * self.w.abs().min(1.0).acos()
    }

    /// Rotate a vector by this (unit) quaternion.
    pub fn rotate(self, v: Vec3) -> Vec3 {
        let u = Vec3::new(self.x, self.y, self.z);
        let uv = u.cross(v);
        let uuv = u.cross(uv);
        v + uv.scaled(2.0 * self.w) + uuv.scaled(2.0)
    }
}

/// Normalize a quaternion to unit length.
pub fn quat_normalize(q: Quat) -> Result<Quat, SceneError> {
    let n = q.norm();
    if n <= 1e-12 {
        return Err(SceneError::DegenerateQuaternion(n));
    }
    Ok(q.scaled(1.0 / n))
}

/// Hamilton product a*b, renormalized. Applying `quat_compose(delta, q)`
/// rotates by `q` first, then by `delta` in the world frame.
pub fn quat_compose(a: Quat, b: Quat) -> Result<Quat, SceneError> {
    let q = Quat::new(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    );
    quat_normalize(q)
}

/// One Gaussian primitive. Opacity and color are clamped to valid ranges by
/// every constructor and update path; scales stay positive by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub center: Vec3,
    pub rotation: Quat,
    pub scale: Vec3,
    pub opacity: f64,
    pub color: [f64; 3],
}

impl Gaussian {
    pub fn new(center: Vec3, rotation: Quat, scale: Vec3, opacity: f64, color: [f64; 3]) -> Self {
        let mut g = Gaussian { center, rotation, scale, opacity, color };
        g.clamp_appearance();
        g
    }

    /// Clamp opacity and color into [0,1].
    pub fn clamp_appearance(&mut self) {
        self.opacity = self.opacity.clamp(0.0, 1.0);
        for c in &mut self.color {
            *c = c.clamp(0.0, 1.0);
        }
    }

    pub fn mean_scale(&self) -> f64 {
        self.scale.mean()
    }
}

/// Ordered, non-empty set of Gaussians. Index identity persists across
/// deformation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    pub timestamp: Option<f64>,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>) -> Self {
        assert!(!gaussians.is_empty(), "cloud must be non-empty");
        GaussianCloud { gaussians, timestamp: None }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn centers(&self) -> impl Iterator<Item = Vec3> + '_ {
        self.gaussians.iter().map(|g| g.center)
    }

    /// Diagonal of the axis-aligned bounding box of the centers.
    pub fn bbox_diagonal(&self) -> f64 {
        let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for c in self.centers() {
            lo = Vec3::new(lo.x.min(c.x), lo.y.min(c.y), lo.z.min(c.z));
            hi = Vec3::new(hi.x.max(c.x), hi.y.max(c.y), hi.z.max(c.z));
        }
        (hi - lo).norm()
    }
}

/// k-nearest-neighbor structure over canonical centers. Canonical distances
/// are stored once at build time and never change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborGraph {
    pub k: usize,
    /// neighbors[i] holds the indices of point i's nearest neighbors.
    pub neighbors: Vec<Vec<usize>>,
    /// distances[i][j] is the canonical distance to neighbors[i][j].
    pub distances: Vec<Vec<f64>>,
}

impl NeighborGraph {
    pub fn point_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn pair_count(&self) -> usize {
        self.neighbors.iter().map(|n| n.len()).sum()
    }
}

/// Exact k-nearest neighbors by Euclidean center distance, ties broken by
/// lower index. k is capped at n-1.
pub fn build_neighbors(cloud: &GaussianCloud, k: usize) -> Result<NeighborGraph, SceneError> {
    let n = cloud.len();
    if n < 2 {
        return Err(SceneError::CloudTooSmall(n));
    }
    let k = k.min(n - 1);
    let centers: Vec<Vec3> = cloud.centers().collect();
    let per_point: Vec<(Vec<usize>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| ((centers[i] - centers[j]).norm(), j))
                .collect();
            cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            cand.truncate(k);
            let (dists, idx): (Vec<f64>, Vec<usize>) = cand.into_iter().unzip();
            (idx, dists)
        })
        .collect();
    let (neighbors, distances) = per_point.into_iter().unzip();
    Ok(NeighborGraph { k, neighbors, distances })
}

/// Per-point deformation: displacement, rotation increment, log-scale change.
#[derive(Debug, Clone, PartialEq)]
pub struct Deformation {
    pub dp: Vec<Vec3>,
    pub dr: Vec<Quat>,
    pub ds: Vec<Vec3>,
}

impl Deformation {
    pub fn identity(n: usize) -> Deformation {
        Deformation {
            dp: vec![Vec3::ZERO; n],
            dr: vec![Quat::IDENTITY; n],
            ds: vec![Vec3::ZERO; n],
        }
    }

    pub fn len(&self) -> usize {
        self.dp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dp.is_empty()
    }
}

/// Apply a deformation: mu' = mu + dp, q' = normalize(dr * q), s' = s .* exp(ds).
/// Point count, index order, opacity and color are preserved; scale positivity
/// is algebraic (multiplicative exp), not a clamp.
pub fn apply_deformation(
    cloud: &GaussianCloud,
    d: &Deformation,
) -> Result<GaussianCloud, SceneError> {
    if d.len() != cloud.len() {
        return Err(SceneError::CardinalityMismatch {
            deformation: d.len(),
            cloud: cloud.len(),
        });
    }
    let gaussians = cloud
        .gaussians
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let rotation = quat_compose(d.dr[i], g.rotation)?;
            Ok(Gaussian {
                center: g.center + d.dp[i],
                rotation,
                scale: g.scale.hadamard(d.ds[i].exp()),
                opacity: g.opacity,
                color: g.color,
            })
        })
        .collect::<Result<Vec<_>, SceneError>>()?;
    Ok(GaussianCloud { gaussians, timestamp: cloud.timestamp })
}
