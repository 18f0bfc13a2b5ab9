//! Losses and the two-stage per-fragment fitting loop: a static canonical
//! cloud optimized from keyframe views, then a dynamic deformation field
//! trained against the fragment's reference video with mask and rigidity
//! regularization.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::deformation::{
    field_backward, field_eval_batch_cached, DeformationGrad, FieldError, FieldGradients,
    HexPlaneField,
};
use crate::io::{Frame, Mask};
use crate::renderer::{render, render_backward, Camera, CloudGrads, RenderError, RenderOutput};
use crate::scene::{
    apply_deformation, build_neighbors, Gaussian, GaussianCloud, NeighborGraph, Quat, SceneError,
    Vec3,
};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("resolution mismatch: supervision {supervision:?}, camera {camera:?}")]
    ResolutionMismatch { supervision: (usize, usize), camera: (usize, usize) },
    #[error("neighbor graph has {graph} points, cloud has {cloud}")]
    GraphCloudMismatch { graph: usize, cloud: usize },
    #[error("need at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("all supervision masks are empty")]
    EmptyForeground,
    #[error("optimization diverged: loss became non-finite at iteration {0}")]
    Diverged(usize),
    #[error("invalid loss weights: {0}")]
    BadWeights(String),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}

/// Weights of the total objective: lambda1 * L_ref + lambda2 * L_mask +
/// lambda3 * L_rigid.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_ref: f64,
    pub lambda_mask: f64,
    pub lambda_rigid: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // The mask weight stays low: binary masks against soft rendered
        // alpha shift the photometric optimum, and the shift grows with
        // lambda2 (see the static fit tests).
        LossWeights { lambda_ref: 1.0, lambda_mask: 0.05, lambda_rigid: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        let all = [self.lambda_ref, self.lambda_mask, self.lambda_rigid];
        if all.iter().any(|&w| w < 0.0) {
            return Err(OptimizeError::BadWeights("weights must be non-negative".into()));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(OptimizeError::BadWeights("weights must not all be zero".into()));
        }
        Ok(())
    }
}

/// Weighted sum of the three loss parts.
pub fn total_loss(weights: &LossWeights, parts: (f64, f64, f64)) -> f64 {
    weights.lambda_ref * parts.0 + weights.lambda_mask * parts.1 + weights.lambda_rigid * parts.2
}

/// One supervision view: camera plus per-frame images and masks.
#[derive(Debug, Clone)]
pub struct ViewSupervision {
    pub camera: Camera,
    pub frames: Vec<Frame>,
    pub masks: Vec<Mask>,
}

/// Everything needed to fit one fragment: the reference view video, extra
/// views with masks, the canonical frame index, and (in synthetic mode)
/// ground-truth point trajectories.
#[derive(Debug, Clone)]
pub struct FragmentSupervision {
    pub reference: ViewSupervision,
    pub extra_views: Vec<ViewSupervision>,
    pub canonical_index: usize,
    pub gt_trajectories: Option<Vec<Vec<Vec3>>>,
}

impl FragmentSupervision {
    pub fn frame_count(&self) -> usize {
        self.reference.frames.len()
    }

    /// Fragment-local time of frame t, in [0,1].
    pub fn tau(&self, t: usize) -> f64 {
        let n = self.frame_count();
        if n <= 1 {
            0.0
        } else {
            t as f64 / (n - 1) as f64
        }
    }

    pub fn validate(&self) -> Result<(), OptimizeError> {
        if self.frame_count() < 2 {
            return Err(OptimizeError::TooFewViews(self.frame_count()));
        }
        Ok(())
    }
}

/// Mean per-pixel-and-channel squared error against a target frame, with the
/// gradient image of the unweighted loss.
pub fn color_mse(out: &RenderOutput, target: &Frame) -> Result<(f64, Vec<f64>), OptimizeError> {
    if out.height != target.height || out.width != target.width {
        return Err(OptimizeError::ResolutionMismatch {
            supervision: (target.height, target.width),
            camera: (out.height, out.width),
        });
    }
    let n = out.image.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; out.image.len()];
    for i in 0..out.image.len() {
        let diff = out.image[i] - target.rgb[i];
        loss += diff * diff;
        grad[i] = 2.0 * diff / n;
    }
    Ok((loss / n, grad))
}

/// Mean per-pixel L1 between rendered alpha and a binary mask, with the
/// subgradient (zero at exact ties).
pub fn alpha_l1(out: &RenderOutput, mask: &Mask) -> Result<(f64, Vec<f64>), OptimizeError> {
    if out.height != mask.height || out.width != mask.width {
        return Err(OptimizeError::ResolutionMismatch {
            supervision: (mask.height, mask.width),
            camera: (out.height, out.width),
        });
    }
    let n = out.alpha.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; out.alpha.len()];
    for i in 0..out.alpha.len() {
        let diff = out.alpha[i] - mask.values[i];
        loss += diff.abs();
        grad[i] = if diff > 0.0 {
            1.0 / n
        } else if diff < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((loss / n, grad))
}

/// Map renderer gradients on a deformed cloud back onto the deformation
/// outputs: mu' = mu + dp so center gradients pass through; s' = s*exp(ds)
/// so scale gradients pick up a factor s'; rotation has no render gradient.
pub fn cloud_grads_to_deformation(grads: &CloudGrads, deformed: &GaussianCloud) -> DeformationGrad {
    let n = deformed.len();
    let mut up = DeformationGrad::zeros(n);
    for i in 0..n {
        up.dp[i] = grads.center[i];
        let s = deformed.gaussians[i].scale;
        up.ds[i] = Vec3::new(
            grads.scale[i].x * s.x,
            grads.scale[i].y * s.y,
            grads.scale[i].z * s.z,
        );
    }
    up
}

/// L_ref: mean over all frames of the per-pixel MSE between the rendered
/// deformed cloud and the reference video, with gradients through the
/// renderer and field.
pub fn loss_ref(
    field: &HexPlaneField,
    cloud: &GaussianCloud,
    camera: &Camera,
    frames: &[Frame],
) -> Result<(f64, FieldGradients), OptimizeError> {
    let t_count = frames.len();
    let mut total = 0.0;
    let mut grads = FieldGradients::zeros(field);
    for (t, frame) in frames.iter().enumerate() {
        let tau = if t_count <= 1 { 0.0 } else { t as f64 / (t_count - 1) as f64 };
        let (loss, g) = ref_term(field, cloud, camera, frame, tau)?;
        total += loss / t_count as f64;
        for (a, b) in grads.0.iter_mut().zip(g.0.iter()) {
            *a += b / t_count as f64;
        }
    }
    Ok((total, grads))
}

/// One reference-view color term at a single timestamp.
fn ref_term(
    field: &HexPlaneField,
    cloud: &GaussianCloud,
    camera: &Camera,
    frame: &Frame,
    tau: f64,
) -> Result<(f64, FieldGradients), OptimizeError> {
    let (deformation, cache) = field_eval_batch_cached(field, cloud, tau);
    let deformed = apply_deformation(cloud, &deformation)?;
    let out = render(&deformed, camera)?;
    let (loss, grad_image) = color_mse(&out, frame)?;
    let cg = render_backward(&deformed, camera, &out, &grad_image, &vec![0.0; out.alpha.len()])?;
    let up = cloud_grads_to_deformation(&cg, &deformed);
    Ok((loss, field_backward(field, &cache, &up)?))
}

/// L_mask at a single timestamp: L1 between rendered alpha and the mask.
pub fn loss_mask(
    field: &HexPlaneField,
    cloud: &GaussianCloud,
    camera: &Camera,
    mask: &Mask,
    tau: f64,
) -> Result<(f64, FieldGradients), OptimizeError> {
    let (deformation, cache) = field_eval_batch_cached(field, cloud, tau);
    let deformed = apply_deformation(cloud, &deformation)?;
    let out = render(&deformed, camera)?;
    let (loss, grad_alpha) = alpha_l1(&out, mask)?;
    let cg = render_backward(&deformed, camera, &out, &vec![0.0; out.image.len()], &grad_alpha)?;
    let up = cloud_grads_to_deformation(&cg, &deformed);
    Ok((loss, field_backward(field, &cache, &up)?))
}

/// L_rigid: mean absolute difference between canonical and deformed neighbor
/// distances, with the subgradient with respect to deformed centers.
pub fn loss_rigid(
    canonical: &GaussianCloud,
    deformed: &GaussianCloud,
    graph: &NeighborGraph,
) -> Result<(f64, Vec<Vec3>), OptimizeError> {
    if graph.point_count() != canonical.len() || canonical.len() != deformed.len() {
        return Err(OptimizeError::GraphCloudMismatch {
            graph: graph.point_count(),
            cloud: deformed.len(),
        });
    }
    let pairs = graph.pair_count() as f64;
    let mut loss = 0.0;
    let mut grads = vec![Vec3::ZERO; deformed.len()];
    for i in 0..deformed.len() {
        for (nth, &j) in graph.neighbors[i].iter().enumerate() {
            let d_c = graph.distances[i][nth];
            let delta = deformed.gaussians[i].center - deformed.gaussians[j].center;
            let d_t = delta.norm();
            let diff = d_c - d_t;
            loss += diff.abs();
            // d|d_c - d_t|/d mu_i = sign(d_t - d_c) * (mu_i - mu_j)/d_t.
            if diff != 0.0 && d_t > 0.0 {
                let sign = if d_t > d_c { 1.0 } else { -1.0 };
                let dir = delta.scaled(sign / (d_t * pairs));
                grads[i] = grads[i] + dir;
                grads[j] = grads[j] - dir;
            }
        }
    }
    Ok((loss / pairs, grads))
}

/// Adam state over one flat parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: usize,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, n: usize) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }

    /// Keep only the moment entries whose `keep` slot is true (pruning).
    fn retain(&mut self, keep: &[bool], stride: usize) {
        let filter = |v: &Vec<f64>| {
            v.chunks_exact(stride)
                .zip(keep)
                .filter(|(_, &k)| k)
                .flat_map(|(c, _)| c.iter().copied())
                .collect::<Vec<f64>>()
        };
        self.m = filter(&self.m);
        self.v = filter(&self.v);
    }

    /// Append moment entries copied from parent points (cloning).
    fn extend_from(&mut self, parents: &[usize], stride: usize) {
        for &p in parents {
            for k in 0..stride {
                self.m.push(self.m[p * stride + k]);
                self.v.push(self.v[p * stride + k]);
            }
        }
    }
}

/// One static supervision view: camera, target image, binary foreground mask.
#[derive(Debug, Clone)]
pub struct StaticView {
    pub camera: Camera,
    pub image: Frame,
    pub mask: Mask,
}

#[derive(Debug, Clone)]
pub struct StaticFitOptions {
    pub init_points: usize,
    pub iters: usize,
    pub seed: u64,
    pub lr_position: f64,
    /// Position learning rate decays exponentially to this value by the
    /// final iteration.
    pub lr_position_final: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,
    pub init_scale: f64,
    pub lambda_color: f64,
    pub lambda_mask: f64,
    pub densify_every: usize,
    pub prune_opacity: f64,
    pub clone_percentile: f64,
    pub checkpoint_every: usize,
}

impl Default for StaticFitOptions {
    fn default() -> Self {
        StaticFitOptions {
            init_points: 2000,
            iters: 2000,
            seed: 0,
            lr_position: 1.6e-2,
            lr_position_final: 1.6e-4,
            lr_scale: 5e-3,
            lr_opacity: 5e-2,
            lr_color: 1e-2,
            init_scale: 0.04,
            lambda_color: 1.0,
            lambda_mask: 0.05,
            densify_every: 500,
            prune_opacity: 0.01,
            clone_percentile: 0.95,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct FitReport {
    pub iterations: usize,
    pub final_loss: f64,
}

/// Flat parameter groups of a cloud under static optimization. Scales are
/// parameterized in log space so positivity is algebraic.
struct CloudParams {
    positions: Vec<f64>,
    log_scales: Vec<f64>,
    opacities: Vec<f64>,
    colors: Vec<f64>,
}

impl CloudParams {
    fn from_cloud(cloud: &GaussianCloud) -> CloudParams {
        let n = cloud.len();
        let mut p = CloudParams {
            positions: Vec::with_capacity(3 * n),
            log_scales: Vec::with_capacity(3 * n),
            opacities: Vec::with_capacity(n),
            colors: Vec::with_capacity(3 * n),
        };
        for g in &cloud.gaussians {
            p.positions.extend(g.center.to_array());
            p.log_scales.extend([g.scale.x.ln(), g.scale.y.ln(), g.scale.z.ln()]);
            p.opacities.push(g.opacity);
            p.colors.extend(g.color);
        }
        p
    }

    fn len(&self) -> usize {
        self.opacities.len()
    }

    fn to_cloud(&self) -> GaussianCloud {
        let n = self.len();
        GaussianCloud::new(
            (0..n)
                .map(|i| {
                    Gaussian::new(
                        Vec3::new(
                            self.positions[3 * i],
                            self.positions[3 * i + 1],
                            self.positions[3 * i + 2],
                        ),
                        Quat::IDENTITY,
                        Vec3::new(
                            self.log_scales[3 * i].exp(),
                            self.log_scales[3 * i + 1].exp(),
                            self.log_scales[3 * i + 2].exp(),
                        ),
                        self.opacities[i],
                        [self.colors[3 * i], self.colors[3 * i + 1], self.colors[3 * i + 2]],
                    )
                })
                .collect(),
        )
    }

    fn clamp_appearance(&mut self) {
        for o in &mut self.opacities {
            *o = o.clamp(0.0, 1.0);
        }
        for c in &mut self.colors {
            *c = c.clamp(0.0, 1.0);
        }
    }
}

/// Fit a static Gaussian cloud to keyframe views. Points initialize from
/// random depths along rays through foreground mask pixels, then Adam
/// minimizes lambda1 * color-MSE + lambda2 * mask-L1 with periodic
/// densification (clone high-gradient points) and pruning (drop transparent
/// points).
pub fn fit_static(
    views: &[StaticView],
    opts: &StaticFitOptions,
    mut checkpoint: Option<&mut dyn FnMut(usize, &GaussianCloud)>,
) -> Result<(GaussianCloud, FitReport), OptimizeError> {
    if views.len() < 2 {
        return Err(OptimizeError::TooFewViews(views.len()));
    }
    for v in views {
        if v.image.height != v.camera.height || v.image.width != v.camera.width {
            return Err(OptimizeError::ResolutionMismatch {
                supervision: (v.image.height, v.image.width),
                camera: (v.camera.height, v.camera.width),
            });
        }
    }
    if views.iter().all(|v| v.mask.coverage() == 0.0) {
        return Err(OptimizeError::EmptyForeground);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let cloud = init_from_masks(views, opts.init_points, opts.init_scale, &mut rng);
    let mut params = CloudParams::from_cloud(&cloud);

    let mut adam_pos = Adam::new(opts.lr_position, params.positions.len());
    let mut adam_scale = Adam::new(opts.lr_scale, params.log_scales.len());
    let mut adam_opacity = Adam::new(opts.lr_opacity, params.opacities.len());
    let mut adam_color = Adam::new(opts.lr_color, params.colors.len());

    // Mean position-gradient norms since the last densification drive cloning.
    let mut grad_norm_accum = vec![0.0; params.len()];
    let mut grad_norm_count = 0usize;
    let mut last_loss = 0.0;

    let lr_decay = (opts.lr_position_final / opts.lr_position)
        .powf(1.0 / opts.iters.max(1) as f64);
    for it in 0..opts.iters {
        adam_pos.learning_rate = opts.lr_position * lr_decay.powi(it as i32);
        let view = &views[it % views.len()];
        let cloud = params.to_cloud();
        let out = render(&cloud, &view.camera)?;
        let (color_loss, grad_image) = color_mse(&out, &view.image)?;
        let (mask_loss, grad_alpha_raw) = alpha_l1(&out, &view.mask)?;
        last_loss = opts.lambda_color * color_loss + opts.lambda_mask * mask_loss;
        if !last_loss.is_finite() {
            return Err(OptimizeError::Diverged(it));
        }
        let grad_image: Vec<f64> =
            grad_image.iter().map(|&g| g * opts.lambda_color).collect();
        let grad_alpha: Vec<f64> =
            grad_alpha_raw.iter().map(|&g| g * opts.lambda_mask).collect();
        let cg = render_backward(&cloud, &view.camera, &out, &grad_image, &grad_alpha)?;

        let n = params.len();
        let mut g_pos = vec![0.0; 3 * n];
        let mut g_scale = vec![0.0; 3 * n];
        let mut g_color = vec![0.0; 3 * n];
        let mut g_opacity = vec![0.0; n];
        for i in 0..n {
            let gc = cg.center[i];
            g_pos[3 * i] = gc.x;
            g_pos[3 * i + 1] = gc.y;
            g_pos[3 * i + 2] = gc.z;
            // s = exp(log_s): chain the scale gradient through the exp.
            let s = cloud.gaussians[i].scale;
            g_scale[3 * i] = cg.scale[i].x * s.x;
            g_scale[3 * i + 1] = cg.scale[i].y * s.y;
            g_scale[3 * i + 2] = cg.scale[i].z * s.z;
            g_opacity[i] = cg.opacity[i];
            g_color[3 * i] = cg.color[i][0];
            g_color[3 * i + 1] = cg.color[i][1];
            g_color[3 * i + 2] = cg.color[i][2];
            grad_norm_accum[i] += gc.norm();
        }
        grad_norm_count += 1;

        adam_pos.step(&mut params.positions, &g_pos);
        adam_scale.step(&mut params.log_scales, &g_scale);
        adam_opacity.step(&mut params.opacities, &g_opacity);
        adam_color.step(&mut params.colors, &g_color);
        params.clamp_appearance();

        let at_densify = opts.densify_every > 0
            && (it + 1) % opts.densify_every == 0
            && it + 1 < opts.iters;
        if at_densify {
            densify_and_prune(
                &mut params,
                &mut [&mut adam_pos, &mut adam_scale, &mut adam_color],
                &mut adam_opacity,
                &mut grad_norm_accum,
                grad_norm_count,
                opts,
            );
            grad_norm_accum = vec![0.0; params.len()];
            grad_norm_count = 0;
        }

        if opts.checkpoint_every > 0 && (it + 1) % opts.checkpoint_every == 0 {
            if let Some(cb) = checkpoint.as_deref_mut() {
                cb(it + 1, &params.to_cloud());
            }
        }
    }

    Ok((params.to_cloud(), FitReport { iterations: opts.iters, final_loss: last_loss }))
}

/// Sample initial points at random depths along rays through foreground
/// pixels, clipped to the orbit sphere.
fn init_from_masks(
    views: &[StaticView],
    count: usize,
    init_scale: f64,
    rng: &mut ChaCha8Rng,
) -> GaussianCloud {
    // Foreground pixel lists per view.
    let foreground: Vec<Vec<(usize, usize)>> = views
        .iter()
        .map(|v| {
            let mut px = Vec::new();
            for y in 0..v.mask.height {
                for x in 0..v.mask.width {
                    if v.mask.values[y * v.mask.width + x] > 0.5 {
                        px.push((y, x));
                    }
                }
            }
            px
        })
        .collect();
    let usable: Vec<usize> = (0..views.len()).filter(|&i| !foreground[i].is_empty()).collect();
    let mut gaussians = Vec::with_capacity(count);
    while gaussians.len() < count {
        let vi = usable[rng.random_range(0..usable.len())];
        let view = &views[vi];
        let (y, x) = foreground[vi][rng.random_range(0..foreground[vi].len())];
        let focal = view.camera.focal();
        let dir_cam = Vec3::new(
            (x as f64 + 0.5 - view.camera.width as f64 / 2.0) / focal,
            (y as f64 + 0.5 - view.camera.height as f64 / 2.0) / focal,
            1.0,
        )
        .normalized();
        let [r, d, f] = view.camera.rotation_rows();
        let dir = Vec3::new(
            r.x * dir_cam.x + d.x * dir_cam.y + f.x * dir_cam.z,
            r.y * dir_cam.x + d.y * dir_cam.y + f.y * dir_cam.z,
            r.z * dir_cam.x + d.z * dir_cam.y + f.z * dir_cam.z,
        );
        let origin = view.camera.position();
        // Camera sits on the orbit sphere, so the chord through it has
        // parameter range [0, -2 (o . d)].
        let t_exit = -2.0 * origin.dot(dir);
        if t_exit <= 0.0 {
            continue;
        }
        let t = rng.random_range(0.1..0.9) * t_exit;
        gaussians.push(Gaussian::new(
            origin + dir.scaled(t),
            Quat::IDENTITY,
            Vec3::new(init_scale, init_scale, init_scale),
            0.3,
            [0.5, 0.5, 0.5],
        ));
    }
    GaussianCloud::new(gaussians)
}

/// Prune transparent points, clone points whose accumulated position
/// gradient exceeds the configured percentile. Adam moments follow: pruned
/// entries drop, cloned entries copy the parent's moments.
fn densify_and_prune(
    params: &mut CloudParams,
    adams3: &mut [&mut Adam; 3],
    adam1: &mut Adam,
    grad_norms: &[f64],
    grad_norm_count: usize,
    opts: &StaticFitOptions,
) {
    let n = params.len();
    let keep: Vec<bool> = params.opacities.iter().map(|&o| o >= opts.prune_opacity).collect();
    let kept = keep.iter().filter(|&&k| k).count();
    let mut norms: Vec<f64> = grad_norms.to_vec();
    if kept > 0 && kept < n {
        let filter3 = |v: &Vec<f64>| {
            v.chunks_exact(3)
                .zip(&keep)
                .filter(|(_, &k)| k)
                .flat_map(|(c, _)| c.iter().copied())
                .collect::<Vec<f64>>()
        };
        params.positions = filter3(&params.positions);
        params.log_scales = filter3(&params.log_scales);
        params.colors = filter3(&params.colors);
        params.opacities = params
            .opacities
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&o, _)| o)
            .collect();
        for a in adams3.iter_mut() {
            a.retain(&keep, 3);
        }
        adam1.retain(&keep, 1);
        norms = norms
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(&g, _)| g)
            .collect();
    }
    if grad_norm_count == 0 || params.len() == 0 {
        return;
    }
    let means: Vec<f64> = norms.iter().map(|&g| g / grad_norm_count as f64).collect();
    let mut sorted = means.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((sorted.len() as f64 - 1.0) * opts.clone_percentile).floor() as usize;
    let threshold = sorted[idx];
    if threshold <= 0.0 {
        return;
    }
    let parents: Vec<usize> = means
        .iter()
        .enumerate()
        .filter(|(_, &m)| m > threshold)
        .map(|(i, _)| i)
        .collect();
    for &p in &parents {
        // Offset the clone by half the mean scale so the pair can separate.
        let s = (params.log_scales[3 * p].exp()
            + params.log_scales[3 * p + 1].exp()
            + params.log_scales[3 * p + 2].exp())
            / 3.0;
        for k in 0..3 {
            let offset = if k == 0 { 0.5 * s } else { 0.0 };
            params.positions.push(params.positions[3 * p + k] + offset);
            params.log_scales.push(params.log_scales[3 * p + k]);
            params.colors.push(params.colors[3 * p + k]);
        }
        params.opacities.push(params.opacities[p]);
    }
    for a in adams3.iter_mut() {
        a.extend_from(&parents, 3);
    }
    adam1.extend_from(&parents, 1);
}

#[derive(Debug, Clone)]
pub struct MotionFitOptions {
    pub iters: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub neighbors: usize,
    pub weights: LossWeights,
    pub checkpoint_every: usize,
}

impl Default for MotionFitOptions {
    fn default() -> Self {
        MotionFitOptions {
            iters: 2000,
            learning_rate: 1e-3,
            seed: 0,
            neighbors: 8,
            weights: LossWeights::default(),
            checkpoint_every: 500,
        }
    }
}

/// Train the deformation field against a fragment's supervision. The
/// canonical cloud stays frozen; each iteration couples one reference-view
/// color term at a sampled timestep, one random extra view's mask term at
/// the same timestep, and the rigid term.
pub fn fit_motion(
    mut field: HexPlaneField,
    cloud: &GaussianCloud,
    supervision: &FragmentSupervision,
    opts: &MotionFitOptions,
    mut checkpoint: Option<&mut dyn FnMut(usize, &HexPlaneField)>,
) -> Result<(HexPlaneField, FitReport), OptimizeError> {
    supervision.validate()?;
    opts.weights.validate()?;
    let graph = build_neighbors(cloud, opts.neighbors)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut adam = Adam::new(opts.learning_rate, field.param_count());
    let t_count = supervision.frame_count();
    let mut last_loss = 0.0;

    for it in 0..opts.iters {
        let t = rng.random_range(0..t_count);
        let tau = supervision.tau(t);
        let extra = if supervision.extra_views.is_empty() {
            None
        } else {
            Some(rng.random_range(0..supervision.extra_views.len()))
        };

        let (deformation, cache) = field_eval_batch_cached(&field, cloud, tau);
        let deformed = apply_deformation(cloud, &deformation)?;
        let mut upstream = DeformationGrad::zeros(cloud.len());
        let mut loss_parts = (0.0, 0.0, 0.0);

        if opts.weights.lambda_ref > 0.0 {
            let out = render(&deformed, &supervision.reference.camera)?;
            let (l, grad_image) = color_mse(&out, &supervision.reference.frames[t])?;
            loss_parts.0 = l;
            let grad_image: Vec<f64> =
                grad_image.iter().map(|&g| g * opts.weights.lambda_ref).collect();
            let cg = render_backward(
                &deformed,
                &supervision.reference.camera,
                &out,
                &grad_image,
                &vec![0.0; out.alpha.len()],
            )?;
            add_upstream(&mut upstream, &cloud_grads_to_deformation(&cg, &deformed));
        }
        if opts.weights.lambda_mask > 0.0 {
            if let Some(vi) = extra {
                let view = &supervision.extra_views[vi];
                let out = render(&deformed, &view.camera)?;
                let (l, grad_alpha) = alpha_l1(&out, &view.masks[t])?;
                loss_parts.1 = l;
                let grad_alpha: Vec<f64> =
                    grad_alpha.iter().map(|&g| g * opts.weights.lambda_mask).collect();
                let cg = render_backward(
                    &deformed,
                    &view.camera,
                    &out,
                    &vec![0.0; out.image.len()],
                    &grad_alpha,
                )?;
                add_upstream(&mut upstream, &cloud_grads_to_deformation(&cg, &deformed));
            }
        }
        if opts.weights.lambda_rigid > 0.0 {
            let (l, grads) = loss_rigid(cloud, &deformed, &graph)?;
            loss_parts.2 = l;
            for (u, g) in upstream.dp.iter_mut().zip(grads.iter()) {
                *u = *u + g.scaled(opts.weights.lambda_rigid);
            }
        }

        last_loss = total_loss(&opts.weights, loss_parts);
        if !last_loss.is_finite() {
            return Err(OptimizeError::Diverged(it));
        }
        let grads = field_backward(&field, &cache, &upstream)?;
        adam.step(field.params_mut(), &grads.0);

        if opts.checkpoint_every > 0 && (it + 1) % opts.checkpoint_every == 0 {
            if let Some(cb) = checkpoint.as_deref_mut() {
                cb(it + 1, &field);
            }
        }
    }

    Ok((field, FitReport { iterations: opts.iters, final_loss: last_loss }))
}

fn add_upstream(dst: &mut DeformationGrad, src: &DeformationGrad) {
    for i in 0..dst.len() {
        dst.dp[i] = dst.dp[i] + src.dp[i];
        for k in 0..4 {
            dst.dr[i][k] += src.dr[i][k];
        }
        dst.ds[i] = dst.ds[i] + src.ds[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformation::{init_identity, FieldShape};
    use crate::renderer::Camera;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn cam(az: f64) -> Camera {
        Camera::orbit(48, 48, 49.1, 1.5, az, 0.0)
    }

    fn cam64(az: f64) -> Camera {
        Camera::orbit(64, 64, 49.1, 1.5, az, 0.0)
    }

    fn make_views64(cloud: &GaussianCloud, azimuths: &[f64]) -> Vec<StaticView> {
        azimuths
            .iter()
            .map(|&az| {
                let camera = cam64(az);
                let out = render(cloud, &camera).unwrap();
                let mask = Mask::new(
                    64,
                    64,
                    out.alpha.iter().map(|&a| if a > 0.5 { 1.0 } else { 0.0 }).collect(),
                );
                StaticView { camera, image: out.to_frame(), mask }
            })
            .collect()
    }

    fn blob_cloud(n: usize, seed: u64) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GaussianCloud::new(
            (0..n)
                .map(|_| {
                    Gaussian::new(
                        Vec3::new(
                            rng.random_range(-0.25..0.25),
                            rng.random_range(-0.25..0.25),
                            rng.random_range(-0.25..0.25),
                        ),
                        Quat::IDENTITY,
                        Vec3::new(0.08, 0.08, 0.08),
                        rng.random_range(0.5..0.95),
                        [
                            rng.random_range(0.2..1.0),
                            rng.random_range(0.2..1.0),
                            rng.random_range(0.2..1.0),
                        ],
                    )
                })
                .collect(),
        )
    }

    fn small_field() -> HexPlaneField {
        init_identity(
            FieldShape {
                spatial: 6,
                temporal: 4,
                features: 4,
                hidden: 16,
                fusion: crate::deformation::FusionMode::Concat,
                bounds_min: Vec3::new(-1.0, -1.0, -1.0),
                bounds_max: Vec3::new(1.0, 1.0, 1.0),
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn total_loss_weighted_sum() {
        let w = LossWeights { lambda_ref: 1.0, lambda_mask: 0.5, lambda_rigid: 0.1 };
        assert!((total_loss(&w, (2.0, 4.0, 10.0)) - 5.0).abs() < 1e-12);
        let only_ref = LossWeights { lambda_ref: 1.0, lambda_mask: 0.0, lambda_rigid: 0.0 };
        assert_eq!(total_loss(&only_ref, (3.0, 7.0, 9.0)), 3.0);
        assert_eq!(total_loss(&w, (0.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn weights_validated() {
        assert!(LossWeights { lambda_ref: -1.0, lambda_mask: 0.0, lambda_rigid: 0.0 }
            .validate()
            .is_err());
        assert!(LossWeights { lambda_ref: 0.0, lambda_mask: 0.0, lambda_rigid: 0.0 }
            .validate()
            .is_err());
        assert!(LossWeights::default().validate().is_ok());
    }

    #[test]
    fn loss_ref_zero_on_exact_targets() {
        let cloud = blob_cloud(20, 1);
        let field = small_field();
        let camera = cam(0.0);
        let frames: Vec<Frame> = (0..3)
            .map(|_| render(&cloud, &camera).unwrap().to_frame())
            .collect();
        let (loss, grads) = loss_ref(&field, &cloud, &camera, &frames).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
        assert!(grads.0.iter().all(|&g| g.abs() < 1e-9));
    }

    #[test]
    fn loss_ref_constant_offset_closed_form() {
        // A single differing pixel channel by delta gives delta^2/(H*W*3).
        let cloud = blob_cloud(10, 2);
        let field = small_field();
        let camera = cam(0.0);
        let out = render(&cloud, &camera).unwrap();
        let mut target = out.to_frame();
        let delta = 0.25;
        target.rgb[100] += delta;
        let (loss, _) = loss_ref(&field, &cloud, &camera, &[target]).unwrap();
        let expect = delta * delta / (48.0 * 48.0 * 3.0);
        assert!((loss - expect).abs() < 1e-12, "loss {loss} expect {expect}");
    }

    #[test]
    fn loss_mask_counting() {
        let cloud = blob_cloud(10, 3);
        let field = small_field();
        let camera = cam(0.0);
        let out = render(&cloud, &camera).unwrap();
        // Mask equal to the rendered alpha: zero loss.
        let mask = Mask::new(48, 48, out.alpha.clone());
        let (loss, _) = loss_mask(&field, &cloud, &camera, &mask, 0.0).unwrap();
        assert!(loss < 1e-12);
        // All-ones mask vs alpha: mean |1 - alpha|.
        let ones = Mask::new(48, 48, vec![1.0; 48 * 48]);
        let (loss, _) = loss_mask(&field, &cloud, &camera, &ones, 0.0).unwrap();
        let expect =
            out.alpha.iter().map(|a| (1.0 - a).abs()).sum::<f64>() / (48.0 * 48.0);
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn rigid_zero_under_rigid_transform() {
        let cloud = blob_cloud(60, 4);
        let graph = build_neighbors(&cloud, 6).unwrap();
        let rot = Quat::from_axis_angle(Vec3::new(0.3, 1.0, -0.2), 0.8);
        let shift = Vec3::new(0.4, -0.2, 0.1);
        let moved = GaussianCloud::new(
            cloud
                .gaussians
                .iter()
                .map(|g| {
                    let mut m = *g;
                    m.center = rot.rotate(g.center) + shift;
                    m
                })
                .collect(),
        );
        let (loss, grads) = loss_rigid(&cloud, &moved, &graph).unwrap();
        assert!(loss < 1e-6, "loss {loss}");
        let _ = grads;
    }

    #[test]
    fn rigid_uniform_scale_closed_form() {
        let cloud = blob_cloud(40, 5);
        let graph = build_neighbors(&cloud, 5).unwrap();
        let scaled = GaussianCloud::new(
            cloud
                .gaussians
                .iter()
                .map(|g| {
                    let mut m = *g;
                    m.center = g.center.scaled(2.0);
                    m
                })
                .collect(),
        );
        let (loss, _) = loss_rigid(&cloud, &scaled, &graph).unwrap();
        // |2d - d| = d per pair: the loss is the mean canonical distance.
        let mean_d: f64 = graph.distances.iter().flatten().sum::<f64>()
            / graph.pair_count() as f64;
        assert!((loss - mean_d).abs() < 1e-9, "loss {loss} mean {mean_d}");
    }

    #[test]
    fn rigid_single_pair_value() {
        let mk = |x: f64| {
            Gaussian::new(Vec3::new(x, 0.0, 0.0), Quat::IDENTITY, Vec3::new(0.1, 0.1, 0.1), 1.0, [1.0; 3])
        };
        let canonical = GaussianCloud::new(vec![mk(0.0), mk(1.0)]);
        let graph = build_neighbors(&canonical, 1).unwrap();
        let deformed = GaussianCloud::new(vec![mk(0.0), mk(1.3)]);
        let (loss, _) = loss_rigid(&canonical, &deformed, &graph).unwrap();
        assert!((loss - 0.3).abs() < 1e-12);
    }

    #[test]
    fn rigid_gradients_match_finite_differences() {
        let cloud = blob_cloud(8, 6);
        let graph = build_neighbors(&cloud, 3).unwrap();
        let mut deformed = blob_cloud(8, 7);
        let (_, grads) = loss_rigid(&cloud, &deformed, &graph).unwrap();
        let h = 1e-6;
        for i in 0..8 {
            for axis in 0..3 {
                let orig = deformed.gaussians[i].center;
                let mut d = [0.0; 3];
                d[axis] = h;
                deformed.gaussians[i].center = orig + Vec3::from_array(d);
                let (fp, _) = loss_rigid(&cloud, &deformed, &graph).unwrap();
                deformed.gaussians[i].center = orig - Vec3::from_array(d);
                let (fm, _) = loss_rigid(&cloud, &deformed, &graph).unwrap();
                deformed.gaussians[i].center = orig;
                let fd = (fp - fm) / (2.0 * h);
                let an = grads[i].to_array()[axis];
                assert!(
                    (fd - an).abs() < 1e-5 || (fd - an).abs() / fd.abs().max(an.abs()) < 1e-3,
                    "point {i} axis {axis}: fd={fd} an={an}"
                );
            }
        }
    }

    #[test]
    fn adam_moves_toward_minimum() {
        // Minimize (x - 3)^2.
        let mut x = vec![0.0];
        let mut adam = Adam::new(0.1, 1);
        for _ in 0..500 {
            let g = vec![2.0 * (x[0] - 3.0)];
            adam.step(&mut x, &g);
        }
        assert!((x[0] - 3.0).abs() < 1e-3, "x = {}", x[0]);
    }

    #[test]
    fn adam_zero_gradient_fixed_point() {
        let mut x = vec![1.5, -0.5];
        let mut adam = Adam::new(0.1, 2);
        for _ in 0..10 {
            adam.step(&mut x, &[0.0, 0.0]);
        }
        assert_eq!(x, vec![1.5, -0.5]);
    }

    #[test]
    fn fit_static_too_few_views() {
        let v = StaticView {
            camera: cam(0.0),
            image: Frame::zeros(48, 48),
            mask: Mask::new(48, 48, vec![0.0; 48 * 48]),
        };
        assert!(matches!(
            fit_static(&[v], &StaticFitOptions::default(), None),
            Err(OptimizeError::TooFewViews(1))
        ));
    }

    #[test]
    fn fit_static_empty_foreground() {
        let v = |az| StaticView {
            camera: cam(az),
            image: Frame::zeros(48, 48),
            mask: Mask::new(48, 48, vec![0.0; 48 * 48]),
        };
        assert!(matches!(
            fit_static(&[v(0.0), v(90.0)], &StaticFitOptions::default(), None),
            Err(OptimizeError::EmptyForeground)
        ));
    }

    fn make_views(cloud: &GaussianCloud, azimuths: &[f64]) -> Vec<StaticView> {
        azimuths
            .iter()
            .map(|&az| {
                let camera = cam(az);
                let out = render(cloud, &camera).unwrap();
                let mask = Mask::new(
                    48,
                    48,
                    out.alpha.iter().map(|&a| if a > 0.5 { 1.0 } else { 0.0 }).collect(),
                );
                StaticView { camera, image: out.to_frame(), mask }
            })
            .collect()
    }

    #[test]
    fn fit_static_seed_deterministic() {
        let truth = blob_cloud(30, 8);
        let views = make_views(&truth, &[0.0, 72.0, 144.0, 216.0, 288.0]);
        let opts = StaticFitOptions {
            init_points: 40,
            iters: 60,
            seed: 5,
            densify_every: 25,
            checkpoint_every: 0,
            ..Default::default()
        };
        let (a, _) = fit_static(&views, &opts, None).unwrap();
        let (b, _) = fit_static(&views, &opts, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fit_static_self_reconstruction() {
        // Near-opaque truth keeps alpha nearly binary, so the mask term does
        // not fight the photometric one at convergence.
        let mut truth = blob_cloud(60, 9);
        for g in &mut truth.gaussians {
            g.opacity = 1.0;
            g.scale = Vec3::new(0.09, 0.09, 0.09);
            // Smooth positional coloring, like a coherent textured object.
            g.color = [
                0.25 + (g.center.x + 0.25).clamp(0.0, 0.5),
                0.6,
                0.25 + (g.center.z + 0.25).clamp(0.0, 0.5),
            ];
        }
        let views = make_views64(&truth, &[0.0, 72.0, 144.0, 216.0, 288.0]);
        let opts = StaticFitOptions {
            init_points: 60,
            iters: 2000,
            seed: 1,
            ..Default::default()
        };
        let (fitted, report) = fit_static(&views, &opts, None).unwrap();
        let out = render(&fitted, &views[0].camera).unwrap();
        let (mse, _) = color_mse(&out, &views[0].image).unwrap();
        assert!(mse <= 1e-3, "reference view mse {mse}, report loss {}", report.final_loss);
    }

    #[test]
    fn fit_motion_rigid_only_stays_identity() {
        let cloud = blob_cloud(15, 10);
        let field = small_field();
        let camera = cam(0.0);
        let frames: Vec<Frame> = (0..4)
            .map(|_| render(&cloud, &camera).unwrap().to_frame())
            .collect();
        let masks: Vec<Mask> = (0..4)
            .map(|_| Mask::new(48, 48, vec![0.0; 48 * 48]))
            .collect();
        let supervision = FragmentSupervision {
            reference: ViewSupervision { camera, frames, masks },
            extra_views: vec![],
            canonical_index: 0,
            gt_trajectories: None,
        };
        let opts = MotionFitOptions {
            iters: 50,
            weights: LossWeights { lambda_ref: 0.0, lambda_mask: 0.0, lambda_rigid: 1.0 },
            checkpoint_every: 0,
            ..Default::default()
        };
        let before = field.params().to_vec();
        let (after, _) = fit_motion(field, &cloud, &supervision, &opts, None).unwrap();
        assert_eq!(after.params(), &before[..]);
    }

    #[test]
    fn fit_motion_static_supervision_stays_near_identity() {
        let cloud = blob_cloud(15, 11);
        let field = small_field();
        let camera = cam(0.0);
        let canonical_render = render(&cloud, &camera).unwrap();
        let frames: Vec<Frame> = (0..4).map(|_| canonical_render.to_frame()).collect();
        let masks: Vec<Mask> = (0..4).map(|_| canonical_render.alpha_mask()).collect();
        let extra_cam = cam(90.0);
        let extra_out = render(&cloud, &extra_cam).unwrap();
        let supervision = FragmentSupervision {
            reference: ViewSupervision { camera, frames, masks },
            extra_views: vec![ViewSupervision {
                camera: extra_cam,
                frames: vec![],
                masks: (0..4).map(|_| extra_out.alpha_mask()).collect(),
            }],
            canonical_index: 0,
            gt_trajectories: None,
        };
        let opts = MotionFitOptions { iters: 200, checkpoint_every: 0, ..Default::default() };
        let (fitted, _) = fit_motion(field, &cloud, &supervision, &opts, None).unwrap();
        let mut worst: f64 = 0.0;
        for g in &cloud.gaussians {
            for tau in [0.0, 0.33, 0.66, 1.0] {
                let (dp, _, _) = crate::deformation::field_eval(&fitted, g.center, tau);
                worst = worst.max(dp.norm());
            }
        }
        assert!(worst <= 1e-2, "max |dp| = {worst}");
    }
}
