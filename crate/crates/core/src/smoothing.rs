//! Cascaded trajectory smoothing: sliding-window slerp-EMA on per-Gaussian
//! rotations and EMA on scales, gated by track visibility. Positions,
//! opacities and colors are never touched.

use thiserror::Error;

use crate::io::{IoError, Tensor};
use crate::renderer::Camera;
use crate::scene::{GaussianCloud, Quat, Vec3};

#[derive(Debug, Error)]
pub enum SmoothError {
    #[error("visible track sample {track} at frame {frame} has depth {depth} <= 0")]
    InvalidDepth { track: usize, frame: usize, depth: f64 },
    #[error("sequence mismatch: {0}")]
    SequenceMismatch(String),
    #[error("quaternion norm {0} too small")]
    DegenerateQuaternion(f64),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// One tracked point sample: pixel position, depth, visibility flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSample {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    pub visible: bool,
}

/// N tracked points over T frames, the in-memory image of a track file
/// ([N, T, 4] tensor with channels x, y, depth, visibility).
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    pub tracks: usize,
    pub frames: usize,
    samples: Vec<TrackSample>,
}

impl TrackSet {
    pub fn new(tracks: usize, frames: usize, samples: Vec<TrackSample>) -> TrackSet {
        assert_eq!(samples.len(), tracks * frames);
        TrackSet { tracks, frames, samples }
    }

    pub fn sample(&self, track: usize, frame: usize) -> TrackSample {
        self.samples[track * self.frames + frame]
    }

    pub fn sample_mut(&mut self, track: usize, frame: usize) -> &mut TrackSample {
        &mut self.samples[track * self.frames + frame]
    }

    pub fn from_tensor(t: &Tensor) -> Result<TrackSet, SmoothError> {
        if t.dims.len() != 3 || t.dims[2] != 4 {
            return Err(SmoothError::SequenceMismatch(format!(
                "track tensor must be [N,T,4], got {:?}",
                t.dims
            )));
        }
        let samples = t
            .data
            .chunks_exact(4)
            .map(|c| TrackSample {
                x: c[0] as f64,
                y: c[1] as f64,
                depth: c[2] as f64,
                visible: c[3] >= 0.5,
            })
            .collect();
        Ok(TrackSet { tracks: t.dims[0], frames: t.dims[1], samples })
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(self.samples.len() * 4);
        for s in &self.samples {
            data.extend([
                s.x as f32,
                s.y as f32,
                s.depth as f32,
                if s.visible { 1.0 } else { 0.0 },
            ]);
        }
        Tensor::new(vec![self.tracks, self.frames, 4], data).expect("consistent dims")
    }

    /// Fraction of frames a track is visible inside [start, start+len).
    pub fn visibility_ratio(&self, track: usize, start: usize, len: usize) -> f64 {
        let visible = (start..start + len)
            .filter(|&f| self.sample(track, f).visible)
            .count();
        visible as f64 / len as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SmoothingParams {
    /// Sliding window length in frames.
    pub window: usize,
    /// EMA decay factor in (0, 1].
    pub alpha: f64,
    /// Minimum fraction of window frames a track must be visible.
    pub visibility_ratio: f64,
    /// Maximum smoothing passes; passes stop early once the pass-over-pass
    /// variation reduction falls below 1%.
    pub passes: usize,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        SmoothingParams { window: 8, alpha: 0.5, visibility_ratio: 0.8, passes: 2 }
    }
}

impl SmoothingParams {
    pub fn validate(&self) -> Result<(), SmoothError> {
        if self.window < 2 {
            return Err(SmoothError::SequenceMismatch(format!(
                "window must be >= 2, got {}",
                self.window
            )));
        }
        if !(0.0 < self.alpha && self.alpha <= 1.0) {
            return Err(SmoothError::SequenceMismatch(format!("alpha {} not in (0,1]", self.alpha)));
        }
        if !(0.0 < self.visibility_ratio && self.visibility_ratio <= 1.0) {
            return Err(SmoothError::SequenceMismatch(format!(
                "visibility_ratio {} not in (0,1]",
                self.visibility_ratio
            )));
        }
        Ok(())
    }
}

/// Back-project tracked pixels to world-space 3D points. Entries are None
/// where the track is invisible; a visible sample with non-positive depth is
/// an error.
pub fn lift_tracks(
    tracks: &TrackSet,
    camera: &Camera,
) -> Result<Vec<Vec<Option<Vec3>>>, SmoothError> {
    let focal = camera.focal();
    let mut lifted = Vec::with_capacity(tracks.tracks);
    for ti in 0..tracks.tracks {
        let mut per_frame = Vec::with_capacity(tracks.frames);
        for fi in 0..tracks.frames {
            let s = tracks.sample(ti, fi);
            if !s.visible {
                per_frame.push(None);
                continue;
            }
            if s.depth <= 0.0 {
                return Err(SmoothError::InvalidDepth { track: ti, frame: fi, depth: s.depth });
            }
            let cam = Vec3::new(
                (s.x - camera.width as f64 / 2.0) * s.depth / focal,
                (s.y - camera.height as f64 / 2.0) * s.depth / focal,
                s.depth,
            );
            per_frame.push(Some(camera.cam_to_world(cam)));
        }
        lifted.push(per_frame);
    }
    Ok(lifted)
}

/// Slerp-weighted EMA step:
/// q = sin(alpha*theta)/sin(theta) * q_curr + sin((1-alpha)*theta)/sin(theta) * q_prev
/// with q_prev sign-aligned to q_curr first. Falls back to a normalized
/// linear blend when theta is tiny.
pub fn slerp_ema_step(q_prev: Quat, q_curr: Quat, alpha: f64) -> Result<Quat, SmoothError> {
    let np = q_prev.norm();
    let nc = q_curr.norm();
    if np <= 1e-12 || nc <= 1e-12 {
        return Err(SmoothError::DegenerateQuaternion(np.min(nc)));
    }
    let mut prev = q_prev.scaled(1.0 / np);
    let curr = q_curr.scaled(1.0 / nc);
    if prev.dot(curr) < 0.0 {
        prev = prev.scaled(-1.0);
    }
    let cos_theta = prev.dot(curr).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let blended = if theta < 1e-5 {
        curr.scaled(alpha).add(prev.scaled(1.0 - alpha))
    } else {
        let sin_theta = theta.sin();
        curr.scaled((alpha * theta).sin() / sin_theta)
            .add(prev.scaled(((1.0 - alpha) * theta).sin() / sin_theta))
    };
    let n = blended.norm();
    if n <= 1e-12 {
        return Err(SmoothError::DegenerateQuaternion(n));
    }
    Ok(blended.scaled(1.0 / n))
}

/// Elementwise convex blend of scales; positivity follows from convexity.
pub fn ema_scale_step(s_prev: Vec3, s_curr: Vec3, alpha: f64) -> Vec3 {
    s_curr.scaled(alpha) + s_prev.scaled(1.0 - alpha)
}

/// Total rotational variation of a cloud sequence:
/// sum over frames and points of angle(q_t^-1 q_{t+1}).
pub fn rotational_variation(clouds: &[GaussianCloud]) -> f64 {
    let mut total = 0.0;
    for w in clouds.windows(2) {
        for (a, b) in w[0].gaussians.iter().zip(w[1].gaussians.iter()) {
            let rel = Quat::new(
                a.rotation.w * b.rotation.w
                    + a.rotation.x * b.rotation.x
                    + a.rotation.y * b.rotation.y
                    + a.rotation.z * b.rotation.z,
                0.0,
                0.0,
                0.0,
            );
            // angle(q_a^-1 q_b) = 2 acos(|<q_a, q_b>|).
            total += 2.0 * rel.w.abs().min(1.0).acos();
        }
    }
    total
}

/// Smooth rotations and scales of a per-frame cloud sequence with sliding
/// windows gated by track visibility. Each Gaussian is associated to its
/// nearest lifted track at the window's first frame (within twice its mean
/// scale); Gaussians without an associated sufficiently-visible track stay
/// bit-identical. Runs up to `params.passes` passes, stopping early when a
/// pass reduces total rotational variation by less than 1%.
pub fn smooth_sequence(
    clouds: &[GaussianCloud],
    tracks: &TrackSet,
    camera: &Camera,
    params: &SmoothingParams,
) -> Result<Vec<GaussianCloud>, SmoothError> {
    params.validate()?;
    let t_count = clouds.len();
    if t_count == 0 {
        return Err(SmoothError::SequenceMismatch("empty cloud sequence".into()));
    }
    if tracks.frames != t_count {
        return Err(SmoothError::SequenceMismatch(format!(
            "tracks cover {} frames, sequence has {t_count}",
            tracks.frames
        )));
    }
    let n = clouds[0].len();
    for (t, c) in clouds.iter().enumerate() {
        if c.len() != n {
            return Err(SmoothError::SequenceMismatch(format!(
                "cloud at frame {t} has {} points, frame 0 has {n}",
                c.len()
            )));
        }
    }
    let lifted = lift_tracks(tracks, camera)?;
    let mut out: Vec<GaussianCloud> = clouds.to_vec();
    let window = params.window.min(t_count);

    let mut prev_variation = rotational_variation(&out);
    for _pass in 0..params.passes {
        for start in 0..=(t_count - window) {
            // Associate each Gaussian to the nearest visible lifted track at
            // the window's first frame.
            let assoc = associate(&out[start], &lifted, start);
            for (gi, track) in assoc.iter().enumerate() {
                let Some(ti) = track else { continue };
                if tracks.visibility_ratio(*ti, start, window) + 1e-12
                    < params.visibility_ratio
                {
                    continue;
                }
                // Forward causal EMA over the window.
                let mut q = out[start].gaussians[gi].rotation;
                let mut s = out[start].gaussians[gi].scale;
                for t in (start + 1)..(start + window) {
                    let g = &mut out[t].gaussians[gi];
                    q = slerp_ema_step(q, g.rotation, params.alpha)?;
                    s = ema_scale_step(s, g.scale, params.alpha);
                    g.rotation = q;
                    g.scale = s;
                }
            }
        }
        let variation = rotational_variation(&out);
        if prev_variation > 0.0 && (prev_variation - variation) / prev_variation < 0.01 {
            break;
        }
        prev_variation = variation;
    }
    Ok(out)
}

/// Nearest visible lifted track per Gaussian at a frame, within a radius of
/// twice the Gaussian's mean scale.
fn associate(
    cloud: &GaussianCloud,
    lifted: &[Vec<Option<Vec3>>],
    frame: usize,
) -> Vec<Option<usize>> {
    cloud
        .gaussians
        .iter()
        .map(|g| {
            let radius = 2.0 * g.mean_scale();
            let mut best: Option<(f64, usize)> = None;
            for (ti, track) in lifted.iter().enumerate() {
                if let Some(p) = track[frame] {
                    let d = (p - g.center).norm();
                    if d <= radius && best.map(|(bd, _)| d < bd).unwrap_or(true) {
                        best = Some((d, ti));
                    }
                }
            }
            best.map(|(_, ti)| ti)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::project_point;
    use crate::scene::Gaussian;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn cam() -> Camera {
        Camera::orbit(64, 64, 49.1, 1.5, 0.0, 0.0)
    }

    #[test]
    fn lift_principal_point() {
        let camera = cam();
        let mut samples = Vec::new();
        samples.push(TrackSample { x: 32.0, y: 32.0, depth: 1.5, visible: true });
        let tracks = TrackSet::new(1, 1, samples);
        let lifted = lift_tracks(&tracks, &camera).unwrap();
        // Principal-point pixel at depth 1.5 is the camera-frame point
        // (0, 0, 1.5), which is the world origin for this orbit camera.
        assert!(lifted[0][0].unwrap().norm() < 1e-9);
    }

    #[test]
    fn lift_depth_linearity() {
        let camera = cam();
        let focal = camera.focal();
        let t = TrackSet::new(
            2,
            1,
            vec![
                TrackSample { x: 40.0, y: 28.0, depth: 1.0, visible: true },
                TrackSample { x: 40.0, y: 28.0, depth: 2.0, visible: true },
            ],
        );
        let lifted = lift_tracks(&t, &camera).unwrap();
        let a = camera.world_to_cam(lifted[0][0].unwrap());
        let b = camera.world_to_cam(lifted[1][0].unwrap());
        assert!((b.x - 2.0 * a.x).abs() < 1e-9);
        assert!((b.y - 2.0 * a.y).abs() < 1e-9);
        assert!((b.z - 2.0 * a.z).abs() < 1e-9);
        let _ = focal;
    }

    #[test]
    fn lift_project_roundtrip() {
        let camera = Camera::orbit(64, 64, 49.1, 1.5, 37.0, 12.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let p = Vec3::new(
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
                rng.random_range(-0.4..0.4),
            );
            let cam_p = camera.world_to_cam(p);
            let (u, v) = project_point(cam_p, camera.focal(), 64, 64);
            let t = TrackSet::new(
                1,
                1,
                vec![TrackSample { x: u, y: v, depth: cam_p.z, visible: true }],
            );
            let lifted = lift_tracks(&t, &camera).unwrap();
            assert!((lifted[0][0].unwrap() - p).norm() < 1e-5);
        }
    }

    #[test]
    fn lift_invalid_depth() {
        let t = TrackSet::new(
            1,
            1,
            vec![TrackSample { x: 10.0, y: 10.0, depth: -0.5, visible: true }],
        );
        assert!(matches!(
            lift_tracks(&t, &cam()),
            Err(SmoothError::InvalidDepth { track: 0, frame: 0, .. })
        ));
    }

    #[test]
    fn slerp_ema_endpoints() {
        let z = Vec3::new(0.0, 0.0, 1.0);
        let prev = Quat::from_axis_angle(z, 0.3);
        let curr = Quat::from_axis_angle(z, 1.1);
        let at1 = slerp_ema_step(prev, curr, 1.0).unwrap();
        assert!((at1.dot(curr).abs() - 1.0).abs() < 1e-12);
        let at0 = slerp_ema_step(prev, curr, 0.0).unwrap();
        assert!((at0.dot(prev).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slerp_ema_geodesic_midpoint() {
        let z = Vec3::new(0.0, 0.0, 1.0);
        let q90 = Quat::from_axis_angle(z, std::f64::consts::FRAC_PI_2);
        let mid = slerp_ema_step(Quat::IDENTITY, q90, 0.5).unwrap();
        let q45 = Quat::from_axis_angle(z, std::f64::consts::FRAC_PI_4);
        assert!((mid.dot(q45).abs() - 1.0).abs() < 1e-6);
        assert!((mid.norm() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn slerp_ema_sign_flip_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let axis = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let prev = Quat::from_axis_angle(axis, rng.random_range(0.0..2.0));
            let curr = Quat::from_axis_angle(axis, rng.random_range(0.0..2.0));
            let alpha = rng.random_range(0.1..0.9);
            let a = slerp_ema_step(prev, curr, alpha).unwrap();
            let b = slerp_ema_step(prev.scaled(-1.0), curr.scaled(-1.0), alpha).unwrap();
            assert!((a.dot(b).abs() - 1.0).abs() < 1e-9);
            assert!((a.norm() - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn slerp_ema_degenerate_rejected() {
        assert!(matches!(
            slerp_ema_step(Quat::new(0.0, 0.0, 0.0, 0.0), Quat::IDENTITY, 0.5),
            Err(SmoothError::DegenerateQuaternion(_))
        ));
    }

    #[test]
    fn ema_scale_blends() {
        let a = Vec3::new(1.0, 1.0, 1.0);
        let b = Vec3::new(3.0, 3.0, 3.0);
        assert_eq!(ema_scale_step(a, b, 1.0), b);
        assert_eq!(ema_scale_step(a, a, 0.3), a);
        let mid = ema_scale_step(a, b, 0.5);
        assert!((mid - Vec3::new(2.0, 2.0, 2.0)).norm() < 1e-12);
    }

    fn noisy_sequence(
        frames: usize,
        points: usize,
        noise_deg: f64,
        seed: u64,
    ) -> (Vec<GaussianCloud>, TrackSet, Camera) {
        let camera = cam();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Keep points further apart than the association radius (2 * mean
        // scale = 0.1) so each Gaussian pairs with its own track only.
        let mut centers: Vec<Vec3> = Vec::new();
        while centers.len() < points {
            let c = Vec3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            );
            if centers.iter().all(|&o| (o - c).norm() > 0.15) {
                centers.push(c);
            }
        }
        let clouds: Vec<GaussianCloud> = (0..frames)
            .map(|_| {
                GaussianCloud::new(
                    centers
                        .iter()
                        .map(|&c| {
                            let axis = Vec3::new(
                                rng.random_range(-1.0..1.0),
                                rng.random_range(-1.0..1.0),
                                rng.random_range(-1.0..1.0),
                            );
                            let angle = rng.random_range(-1.0..1.0) * noise_deg.to_radians();
                            Gaussian::new(
                                c,
                                Quat::from_axis_angle(axis, angle),
                                Vec3::new(0.05, 0.05, 0.05),
                                0.9,
                                [0.5, 0.5, 0.5],
                            )
                        })
                        .collect(),
                )
            })
            .collect();
        // One perfectly visible track per point, sitting on the point.
        let mut samples = Vec::new();
        for c in &centers {
            let cam_p = camera.world_to_cam(*c);
            let (u, v) = project_point(cam_p, camera.focal(), 64, 64);
            for _ in 0..frames {
                samples.push(TrackSample { x: u, y: v, depth: cam_p.z, visible: true });
            }
        }
        (clouds, TrackSet::new(points, frames, samples), camera)
    }

    #[test]
    fn constant_sequence_is_fixed_point() {
        let (mut clouds, tracks, camera) = noisy_sequence(10, 5, 0.0, 3);
        // Make all frames identical to frame 0.
        let first = clouds[0].clone();
        for c in &mut clouds {
            *c = first.clone();
        }
        let smoothed =
            smooth_sequence(&clouds, &tracks, &camera, &SmoothingParams::default()).unwrap();
        assert_eq!(smoothed, clouds);
    }

    #[test]
    fn invisible_tracks_leave_gaussians_untouched() {
        let (clouds, mut tracks, camera) = noisy_sequence(12, 6, 10.0, 4);
        // Track 0 visible in under 80% of every window.
        for f in 0..12 {
            if f % 2 == 0 {
                tracks.sample_mut(0, f).visible = false;
            }
        }
        let smoothed =
            smooth_sequence(&clouds, &tracks, &camera, &SmoothingParams::default()).unwrap();
        for t in 0..12 {
            assert_eq!(smoothed[t].gaussians[0], clouds[t].gaussians[0], "frame {t}");
        }
        // Other gaussians did change.
        assert_ne!(smoothed[5].gaussians[1].rotation, clouds[5].gaussians[1].rotation);
    }

    #[test]
    fn positions_opacity_color_count_bitwise_preserved() {
        let (clouds, tracks, camera) = noisy_sequence(12, 6, 10.0, 5);
        let smoothed =
            smooth_sequence(&clouds, &tracks, &camera, &SmoothingParams::default()).unwrap();
        assert_eq!(smoothed.len(), clouds.len());
        for (a, b) in clouds.iter().zip(smoothed.iter()) {
            assert_eq!(a.len(), b.len());
            for (ga, gb) in a.gaussians.iter().zip(b.gaussians.iter()) {
                assert_eq!(ga.center, gb.center);
                assert_eq!(ga.opacity, gb.opacity);
                assert_eq!(ga.color, gb.color);
            }
        }
    }

    #[test]
    fn noisy_rotations_variation_halved() {
        let (clouds, tracks, camera) = noisy_sequence(16, 8, 10.0, 6);
        let params = SmoothingParams { window: 8, alpha: 0.5, visibility_ratio: 0.8, passes: 1 };
        let smoothed = smooth_sequence(&clouds, &tracks, &camera, &params).unwrap();
        let before = rotational_variation(&clouds);
        let after = rotational_variation(&smoothed);
        assert!(
            after <= 0.5 * before,
            "variation before {before}, after {after}"
        );
        for c in &smoothed {
            for g in &c.gaussians {
                assert!((g.rotation.norm() - 1.0).abs() <= 1e-7);
            }
        }
    }

    #[test]
    fn sequence_mismatch_rejected() {
        let (clouds, tracks, camera) = noisy_sequence(8, 4, 5.0, 7);
        let bad = &clouds[..6];
        assert!(matches!(
            smooth_sequence(bad, &tracks, &camera, &SmoothingParams::default()),
            Err(SmoothError::SequenceMismatch(_))
        ));
    }
}
