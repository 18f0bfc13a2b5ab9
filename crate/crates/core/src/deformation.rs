//! HexPlane deformation field: six bilinear feature planes over the axis
//! pairs (xy, xz, yz, xt, yt, zt) feeding a small MLP decoder that maps
//! (point, time) to displacement, rotation increment, and log-scale change.
//! Forward evaluation and exact reverse-mode gradients are hand-rolled so
//! the optimizer can run without an autodiff framework.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

use crate::io::{self, Tensor};
use crate::scene::{Deformation, GaussianCloud, Quat, Vec3};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("bad field shape: {0}")]
    BadShape(String),
    #[error("forward cache is stale: {0}")]
    StaleForwardState(String),
    #[error("field io: {0}")]
    Io(#[from] io::IoError),
    #[error("field metadata: {0}")]
    Metadata(String),
}

/// Plane axis pairs in the fixed concatenation order.
pub const PLANE_NAMES: [&str; 6] = ["xy", "xz", "yz", "xt", "yt", "zt"];

/// How the six per-plane feature vectors combine into the decoder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Concatenation: decoder input is 6*F.
    Concat,
    /// Elementwise product across planes: decoder input is F.
    Product,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldShape {
    /// Spatial plane resolution G (per axis).
    pub spatial: usize,
    /// Temporal resolution of the xt/yt/zt planes.
    pub temporal: usize,
    /// Features per plane cell.
    pub features: usize,
    /// Decoder hidden width.
    pub hidden: usize,
    pub fusion: FusionMode,
    /// Scene-space AABB mapped onto the spatial grid range.
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
}

impl Default for FieldShape {
    fn default() -> Self {
        FieldShape {
            spatial: 32,
            temporal: 16,
            features: 16,
            hidden: 64,
            fusion: FusionMode::Concat,
            bounds_min: Vec3::new(-1.5, -1.5, -1.5),
            bounds_max: Vec3::new(1.5, 1.5, 1.5),
        }
    }
}

impl FieldShape {
    fn validate(&self) -> Result<(), FieldError> {
        if self.spatial < 2 || self.temporal < 2 {
            return Err(FieldError::BadShape(format!(
                "grid dims must be >= 2, got spatial {} temporal {}",
                self.spatial, self.temporal
            )));
        }
        if self.features == 0 || self.hidden == 0 {
            return Err(FieldError::BadShape("features and hidden must be >= 1".into()));
        }
        let ext = self.bounds_max - self.bounds_min;
        if ext.x <= 0.0 || ext.y <= 0.0 || ext.z <= 0.0 {
            return Err(FieldError::BadShape("bounds_max must exceed bounds_min".into()));
        }
        Ok(())
    }

    fn decoder_input(&self) -> usize {
        match self.fusion {
            FusionMode::Concat => 6 * self.features,
            FusionMode::Product => self.features,
        }
    }

    /// (rows, cols) of each plane grid, in plane order.
    fn plane_dims(&self) -> [(usize, usize); 6] {
        let g = self.spatial;
        let t = self.temporal;
        [(g, g), (g, g), (g, g), (g, t), (g, t), (g, t)]
    }
}

const DECODER_OUT: usize = 10;

/// Offsets of each parameter group inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
struct ParamLayout {
    plane_offsets: [usize; 6],
    plane_lens: [usize; 6],
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    total: usize,
}

impl ParamLayout {
    fn new(shape: &FieldShape) -> ParamLayout {
        let f = shape.features;
        let d_in = shape.decoder_input();
        let h = shape.hidden;
        let mut off = 0;
        let mut plane_offsets = [0; 6];
        let mut plane_lens = [0; 6];
        for (i, (a, b)) in shape.plane_dims().iter().enumerate() {
            plane_offsets[i] = off;
            plane_lens[i] = a * b * f;
            off += plane_lens[i];
        }
        let w1 = off;
        let b1 = w1 + h * d_in;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + DECODER_OUT * h;
        let total = b3 + DECODER_OUT;
        ParamLayout { plane_offsets, plane_lens, w1, b1, w2, b2, w3, b3, total }
    }
}

/// The deformation field. All parameters live in one flat vector; `version`
/// increments on every mutation so cached forward state can detect staleness.
#[derive(Debug, Clone, PartialEq)]
pub struct HexPlaneField {
    pub shape: FieldShape,
    params: Vec<f64>,
    layout: ParamLayout,
    version: u64,
}

/// Gradients for every plane cell and decoder weight, flat, congruent with
/// the field's parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGradients(pub Vec<f64>);

impl FieldGradients {
    pub fn zeros(field: &HexPlaneField) -> FieldGradients {
        FieldGradients(vec![0.0; field.params.len()])
    }

    fn accumulate(&mut self, other: &FieldGradients) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a += b;
        }
    }
}

/// Bilinear lookup footprint in one plane: corner cell plus fractional
/// weights along both axes.
#[derive(Debug, Clone, Copy)]
struct PlaneLookup {
    i0: usize,
    j0: usize,
    fa: f64,
    fb: f64,
}

/// Per-point forward state retained for the backward pass.
#[derive(Debug, Clone)]
struct PointTape {
    lookups: [PlaneLookup; 6],
    /// Per-plane interpolated feature vectors (needed for product fusion).
    plane_feats: Vec<f64>,
    h0: Vec<f64>,
    z1: Vec<f64>,
    h1: Vec<f64>,
    z2: Vec<f64>,
    h2: Vec<f64>,
    out: [f64; DECODER_OUT],
}

/// Forward cache for a batch evaluation.
pub struct EvalCache {
    field_version: u64,
    param_count: usize,
    tapes: Vec<PointTape>,
}

impl EvalCache {
    pub fn point_count(&self) -> usize {
        self.tapes.len()
    }
}

/// Upstream gradients on a batch deformation output: d-loss/d-(dp, dr, ds)
/// per point. `dr` is the gradient with respect to the normalized rotation
/// increment, components (w, x, y, z).
#[derive(Debug, Clone)]
pub struct DeformationGrad {
    pub dp: Vec<Vec3>,
    pub dr: Vec<[f64; 4]>,
    pub ds: Vec<Vec3>,
}

impl DeformationGrad {
    pub fn zeros(n: usize) -> DeformationGrad {
        DeformationGrad {
            dp: vec![Vec3::ZERO; n],
            dr: vec![[0.0; 4]; n],
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

/// Identity-initialized field: plane features uniform in (-1e-2, 1e-2),
/// hidden layers He-initialized, final decoder layer zero so that every
/// (point, time) decodes to the identity deformation.
pub fn init_identity(shape: FieldShape, seed: u64) -> Result<HexPlaneField, FieldError> {
    shape.validate()?;
    let layout = ParamLayout::new(&shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![0.0; layout.total];
    for i in 0..6 {
        let s = layout.plane_offsets[i];
        for v in &mut params[s..s + layout.plane_lens[i]] {
            *v = rng.random_range(-1e-2..1e-2);
        }
    }
    let d_in = shape.decoder_input();
    let h = shape.hidden;
    he_init(&mut rng, &mut params[layout.w1..layout.w1 + h * d_in], d_in);
    he_init(&mut rng, &mut params[layout.w2..layout.w2 + h * h], h);
    // w3, b3 stay zero: identity at init.
    Ok(HexPlaneField { shape, params, layout, version: 0 })
}

fn he_init(rng: &mut ChaCha8Rng, w: &mut [f64], fan_in: usize) {
    let std = (2.0 / fan_in as f64).sqrt();
    for v in w.iter_mut() {
        // Box-Muller from two uniforms keeps the dependency surface small.
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        *v = std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}

impl HexPlaneField {
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mutable access to the flat parameters; bumps the version so stale
    /// forward caches are rejected.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    /// Overwrite all parameters (optimizer step, deserialization).
    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.params.len());
        self.params.copy_from_slice(params);
        self.version += 1;
    }

    /// Fill every parameter group with seeded random values. Testing hook
    /// for gradient and continuity checks that need a non-identity field.
    pub fn randomize_params(&mut self, seed: u64, amplitude: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut self.params {
            *v = rng.random_range(-amplitude..amplitude);
        }
        self.version += 1;
    }

    fn normalized_spatial(&self, p: Vec3) -> (Vec3, bool) {
        let lo = self.shape.bounds_min;
        let hi = self.shape.bounds_max;
        let u = Vec3::new(
            (p.x - lo.x) / (hi.x - lo.x),
            (p.y - lo.y) / (hi.y - lo.y),
            (p.z - lo.z) / (hi.z - lo.z),
        );
        let clamped = Vec3::new(u.x.clamp(0.0, 1.0), u.y.clamp(0.0, 1.0), u.z.clamp(0.0, 1.0));
        ((clamped), (clamped - u).norm() > 0.0)
    }

    fn lookup(&self, plane: usize, a: f64, b: f64) -> PlaneLookup {
        let (ra, rb) = self.shape.plane_dims()[plane];
        let ga = a * (ra - 1) as f64;
        let gb = b * (rb - 1) as f64;
        let i0 = (ga.floor() as usize).min(ra - 2);
        let j0 = (gb.floor() as usize).min(rb - 2);
        PlaneLookup { i0, j0, fa: ga - i0 as f64, fb: gb - j0 as f64 }
    }

    fn plane_cell(&self, plane: usize, i: usize, j: usize) -> &[f64] {
        let (_, cols) = self.shape.plane_dims()[plane];
        let f = self.shape.features;
        let base = self.layout.plane_offsets[plane] + (i * cols + j) * f;
        &self.params[base..base + f]
    }

    fn interpolate_plane(&self, plane: usize, l: &PlaneLookup, out: &mut [f64]) {
        let c00 = self.plane_cell(plane, l.i0, l.j0);
        let c10 = self.plane_cell(plane, l.i0 + 1, l.j0);
        let c01 = self.plane_cell(plane, l.i0, l.j0 + 1);
        let c11 = self.plane_cell(plane, l.i0 + 1, l.j0 + 1);
        let (fa, fb) = (l.fa, l.fb);
        for k in 0..out.len() {
            out[k] = (1.0 - fa) * (1.0 - fb) * c00[k]
                + fa * (1.0 - fb) * c10[k]
                + (1.0 - fa) * fb * c01[k]
                + fa * fb * c11[k];
        }
    }

    fn forward_point(&self, p: Vec3, tau: f64) -> (PointTape, bool) {
        let f = self.shape.features;
        let (u, was_clamped) = self.normalized_spatial(p);
        let t = tau.clamp(0.0, 1.0);
        let t_clamped = tau < 0.0 || tau > 1.0;
        let coords = [
            (u.x, u.y),
            (u.x, u.z),
            (u.y, u.z),
            (u.x, t),
            (u.y, t),
            (u.z, t),
        ];
        let mut lookups = [PlaneLookup { i0: 0, j0: 0, fa: 0.0, fb: 0.0 }; 6];
        let mut plane_feats = vec![0.0; 6 * f];
        for (i, &(a, b)) in coords.iter().enumerate() {
            lookups[i] = self.lookup(i, a, b);
            let slice = &mut plane_feats[i * f..(i + 1) * f];
            self.interpolate_plane(i, &lookups[i], slice);
        }
        let h0 = match self.shape.fusion {
            FusionMode::Concat => plane_feats.clone(),
            FusionMode::Product => {
                let mut h = vec![1.0; f];
                for i in 0..6 {
                    for k in 0..f {
                        h[k] *= plane_feats[i * f + k];
                    }
                }
                h
            }
        };
        let h = self.shape.hidden;
        let d_in = self.shape.decoder_input();
        let w = &self.params;
        let l = &self.layout;
        let mut z1 = vec![0.0; h];
        matvec(&w[l.w1..l.b1], &w[l.b1..l.w2], &h0, &mut z1, h, d_in);
        let h1: Vec<f64> = z1.iter().map(|&v| v.max(0.0)).collect();
        let mut z2 = vec![0.0; h];
        matvec(&w[l.w2..l.b2], &w[l.b2..l.w3], &h1, &mut z2, h, h);
        let h2: Vec<f64> = z2.iter().map(|&v| v.max(0.0)).collect();
        let mut out = [0.0; DECODER_OUT];
        matvec(&w[l.w3..l.b3], &w[l.b3..], &h2, &mut out, DECODER_OUT, h);
        (
            PointTape { lookups, plane_feats, h0, z1, h1, z2, h2, out },
            was_clamped || t_clamped,
        )
    }
}

fn matvec(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = b[r];
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        out[r] = acc;
    }
}

fn decode_outputs(out: &[f64; DECODER_OUT]) -> (Vec3, Quat, Vec3) {
    let dp = Vec3::new(out[0], out[1], out[2]);
    let raw = Quat::new(1.0 + out[3], out[4], out[5], out[6]);
    let dr = raw.scaled(1.0 / raw.norm());
    let ds = Vec3::new(out[7], out[8], out[9]);
    (dp, dr, ds)
}

/// Evaluate the field at one (point, time). Out-of-bounds coordinates are
/// clamped into the grid with a logged warning.
pub fn field_eval(field: &HexPlaneField, p: Vec3, tau: f64) -> (Vec3, Quat, Vec3) {
    let (tape, clamped) = field.forward_point(p, tau);
    if clamped {
        log::warn!("field_eval: coordinates outside normalization bounds were clamped");
    }
    decode_outputs(&tape.out)
}

/// Batch evaluation over all cloud centers at one timestamp.
pub fn field_eval_batch(field: &HexPlaneField, cloud: &GaussianCloud, tau: f64) -> Deformation {
    let (d, _) = field_eval_batch_cached(field, cloud, tau);
    d
}

const POINT_CHUNK: usize = 256;

/// Batch evaluation that also retains the forward tape for `field_backward`.
pub fn field_eval_batch_cached(
    field: &HexPlaneField,
    cloud: &GaussianCloud,
    tau: f64,
) -> (Deformation, EvalCache) {
    let centers: Vec<Vec3> = cloud.centers().collect();
    let results: Vec<(PointTape, bool)> = centers
        .par_chunks(POINT_CHUNK)
        .flat_map_iter(|chunk| {
            chunk
                .iter()
                .map(|&p| field.forward_point(p, tau))
                .collect::<Vec<_>>()
        })
        .collect();
    let clamped = results.iter().filter(|(_, c)| *c).count();
    if clamped > 0 {
        log::warn!("field_eval_batch: {clamped} points clamped into normalization bounds");
    }
    let mut dp = Vec::with_capacity(results.len());
    let mut dr = Vec::with_capacity(results.len());
    let mut ds = Vec::with_capacity(results.len());
    let mut tapes = Vec::with_capacity(results.len());
    for (tape, _) in results {
        let (p, r, s) = decode_outputs(&tape.out);
        dp.push(p);
        dr.push(r);
        ds.push(s);
        tapes.push(tape);
    }
    (
        Deformation { dp, dr, ds },
        EvalCache {
            field_version: field.version,
            param_count: field.params.len(),
            tapes,
        },
    )
}

/// Exact reverse-mode gradients through the decoder, fusion, and bilinear
/// plane lookups. Gradients scatter to the four corners of every lookup.
pub fn field_backward(
    field: &HexPlaneField,
    cache: &EvalCache,
    upstream: &DeformationGrad,
) -> Result<FieldGradients, FieldError> {
    if cache.field_version != field.version || cache.param_count != field.params.len() {
        return Err(FieldError::StaleForwardState(format!(
            "cache built at version {}, field is at {}",
            cache.field_version, field.version
        )));
    }
    if upstream.len() != cache.tapes.len() {
        return Err(FieldError::StaleForwardState(format!(
            "upstream has {} entries, cache has {}",
            upstream.len(),
            cache.tapes.len()
        )));
    }
    let chunk_grads: Vec<FieldGradients> = cache
        .tapes
        .par_chunks(POINT_CHUNK)
        .enumerate()
        .map(|(ci, tapes)| {
            let mut g = FieldGradients(vec![0.0; field.params.len()]);
            let base = ci * POINT_CHUNK;
            for (k, tape) in tapes.iter().enumerate() {
                let i = base + k;
                backward_point(
                    field,
                    tape,
                    upstream.dp[i],
                    upstream.dr[i],
                    upstream.ds[i],
                    &mut g.0,
                );
            }
            g
        })
        .collect();
    let mut total = FieldGradients(vec![0.0; field.params.len()]);
    for g in &chunk_grads {
        total.accumulate(g);
    }
    Ok(total)
}

fn backward_point(
    field: &HexPlaneField,
    tape: &PointTape,
    g_dp: Vec3,
    g_dr: [f64; 4],
    g_ds: Vec3,
    grads: &mut [f64],
) {
    let shape = &field.shape;
    let l = &field.layout;
    let h = shape.hidden;
    let d_in = shape.decoder_input();
    let f = shape.features;

    // Gradient w.r.t. the 10 raw decoder outputs.
    let mut g_out = [0.0; DECODER_OUT];
    g_out[0] = g_dp.x;
    g_out[1] = g_dp.y;
    g_out[2] = g_dp.z;
    // dr = v / |v| with v = (1 + o3, o4, o5, o6).
    let v = [1.0 + tape.out[3], tape.out[4], tape.out[5], tape.out[6]];
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
    let n = [v[0] / norm, v[1] / norm, v[2] / norm, v[3] / norm];
    let gn_dot_n: f64 = (0..4).map(|i| g_dr[i] * n[i]).sum();
    for i in 0..4 {
        g_out[3 + i] = (g_dr[i] - gn_dot_n * n[i]) / norm;
    }
    g_out[7] = g_ds.x;
    g_out[8] = g_ds.y;
    g_out[9] = g_ds.z;

    // Decoder backward: out = w3*h2 + b3.
    let w = &field.params;
    let mut g_h2 = vec![0.0; h];
    for r in 0..DECODER_OUT {
        let gz = g_out[r];
        grads[l.b3 + r] += gz;
        let row = l.w3 + r * h;
        for c in 0..h {
            grads[row + c] += gz * tape.h2[c];
            g_h2[c] += w[row + c] * gz;
        }
    }
    // h2 = relu(z2), z2 = w2*h1 + b2.
    let mut g_h1 = vec![0.0; h];
    for r in 0..h {
        let gz = if tape.z2[r] > 0.0 { g_h2[r] } else { 0.0 };
        if gz == 0.0 {
            continue;
        }
        grads[l.b2 + r] += gz;
        let row = l.w2 + r * h;
        for c in 0..h {
            grads[row + c] += gz * tape.h1[c];
            g_h1[c] += w[row + c] * gz;
        }
    }
    // h1 = relu(z1), z1 = w1*h0 + b1.
    let mut g_h0 = vec![0.0; d_in];
    for r in 0..h {
        let gz = if tape.z1[r] > 0.0 { g_h1[r] } else { 0.0 };
        if gz == 0.0 {
            continue;
        }
        grads[l.b1 + r] += gz;
        let row = l.w1 + r * d_in;
        for c in 0..d_in {
            grads[row + c] += gz * tape.h0[c];
            g_h0[c] += w[row + c] * gz;
        }
    }

    // Fusion backward: gradient onto each plane's interpolated features.
    let mut g_plane = vec![0.0; 6 * f];
    match shape.fusion {
        FusionMode::Concat => g_plane.copy_from_slice(&g_h0),
        FusionMode::Product => {
            for i in 0..6 {
                for k in 0..f {
                    let mut others = 1.0;
                    for j in 0..6 {
                        if j != i {
                            others *= tape.plane_feats[j * f + k];
                        }
                    }
                    g_plane[i * f + k] = g_h0[k] * others;
                }
            }
        }
    }

    // Scatter through bilinear weights into the four corners of each plane.
    for plane in 0..6 {
        let lkp = &tape.lookups[plane];
        let (_, cols) = shape.plane_dims()[plane];
        let (fa, fb) = (lkp.fa, lkp.fb);
        let weights = [
            (lkp.i0, lkp.j0, (1.0 - fa) * (1.0 - fb)),
            (lkp.i0 + 1, lkp.j0, fa * (1.0 - fb)),
            (lkp.i0, lkp.j0 + 1, (1.0 - fa) * fb),
            (lkp.i0 + 1, lkp.j0 + 1, fa * fb),
        ];
        for &(i, j, wgt) in &weights {
            if wgt == 0.0 {
                continue;
            }
            let base = l.plane_offsets[plane] + (i * cols + j) * f;
            for k in 0..f {
                grads[base + k] += wgt * g_plane[plane * f + k];
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FieldMeta {
    shape: FieldShape,
}

/// Serialize the field as TNSR tensors per plane plus decoder weights and a
/// JSON metadata file into `dir`.
pub fn save_field(field: &HexPlaneField, dir: &Path) -> Result<(), FieldError> {
    std::fs::create_dir_all(dir).map_err(io::IoError::from)?;
    let meta = FieldMeta { shape: field.shape.clone() };
    let json = serde_json::to_string_pretty(&meta).expect("field meta serializes");
    std::fs::write(dir.join("field.json"), json).map_err(io::IoError::from)?;
    let f = field.shape.features;
    let l = &field.layout;
    for (i, name) in PLANE_NAMES.iter().enumerate() {
        let (a, b) = field.shape.plane_dims()[i];
        let s = l.plane_offsets[i];
        let t = Tensor::from_f64(vec![a, b, f], &field.params[s..s + l.plane_lens[i]])?;
        io::write_tensor(&t, &dir.join(format!("plane_{name}.tnsr")))?;
    }
    let h = field.shape.hidden;
    let d_in = field.shape.decoder_input();
    let groups: [(&str, usize, usize, Vec<usize>); 6] = [
        ("w1", l.w1, h * d_in, vec![h, d_in]),
        ("b1", l.b1, h, vec![h]),
        ("w2", l.w2, h * h, vec![h, h]),
        ("b2", l.b2, h, vec![h]),
        ("w3", l.w3, DECODER_OUT * h, vec![DECODER_OUT, h]),
        ("b3", l.b3, DECODER_OUT, vec![DECODER_OUT]),
    ];
    for (name, off, len, dims) in groups {
        let t = Tensor::from_f64(dims, &field.params[off..off + len])?;
        io::write_tensor(&t, &dir.join(format!("decoder_{name}.tnsr")))?;
    }
    Ok(())
}

pub fn load_field(dir: &Path) -> Result<HexPlaneField, FieldError> {
    let meta: FieldMeta = serde_json::from_str(
        &std::fs::read_to_string(dir.join("field.json")).map_err(io::IoError::from)?,
    )
    .map_err(|e| FieldError::Metadata(e.to_string()))?;
    meta.shape.validate()?;
    let layout = ParamLayout::new(&meta.shape);
    let mut params = vec![0.0; layout.total];
    let f = meta.shape.features;
    for (i, name) in PLANE_NAMES.iter().enumerate() {
        let t = io::read_tensor(&dir.join(format!("plane_{name}.tnsr")))?;
        let (a, b) = meta.shape.plane_dims()[i];
        if t.dims != vec![a, b, f] {
            return Err(FieldError::Metadata(format!(
                "plane {name} dims {:?} do not match shape",
                t.dims
            )));
        }
        let s = layout.plane_offsets[i];
        for (dst, &v) in params[s..s + layout.plane_lens[i]].iter_mut().zip(&t.data) {
            *dst = v as f64;
        }
    }
    let h = meta.shape.hidden;
    let d_in = meta.shape.decoder_input();
    let groups: [(&str, usize, usize); 6] = [
        ("w1", layout.w1, h * d_in),
        ("b1", layout.b1, h),
        ("w2", layout.w2, h * h),
        ("b2", layout.b2, h),
        ("w3", layout.w3, DECODER_OUT * h),
        ("b3", layout.b3, DECODER_OUT),
    ];
    for (name, off, len) in groups {
        let t = io::read_tensor(&dir.join(format!("decoder_{name}.tnsr")))?;
        if t.element_count() != len {
            return Err(FieldError::Metadata(format!(
                "decoder {name} has {} values, expected {len}",
                t.element_count()
            )));
        }
        for (dst, &v) in params[off..off + len].iter_mut().zip(&t.data) {
            *dst = v as f64;
        }
    }
    Ok(HexPlaneField { shape: meta.shape, params, layout, version: 0 })
}
