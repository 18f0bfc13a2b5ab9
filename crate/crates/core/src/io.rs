//! Bit-exact readers and writers for tensors, Gaussian clouds and images.
//! Every external-tool boundary passes through these formats.
//!
//! The tensor container is `TNSR`: magic(4) + version(1) + ndim(u32 LE) +
//! dims(u32 LE each) + row-major f32 LE payload. Clouds are PLY point lists
//! with a fixed 14-float schema, binary little-endian on write; the ASCII
//! variant is accepted on read.

use crate::scene::{Gaussian, GaussianCloud, Quat, Vec3};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const TNSR_MAGIC: [u8; 4] = *b"TNSR";
pub const TNSR_VERSION: u8 = 1;
const MAX_ELEMENTS: u64 = 1 << 31;

const CLOUD_PROPERTIES: [&str; 14] = [
    "x", "y", "z", "qw", "qx", "qy", "qz", "sx", "sy", "sz", "opacity", "r", "g", "b",
];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("bad magic bytes, expected TNSR")]
    BadMagic,
    #[error("unsupported TNSR version {0}")]
    UnsupportedVersion(u8),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("tensor dims overflow: {0} elements exceeds 2^31")]
    DimOverflow(u64),
    #[error("invalid tensor dims: {0}")]
    BadDims(String),
    #[error("cloud schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("rotation norm {norm} deviates from unit by more than 1e-2 at point {index}")]
    NonUnitRotation { index: usize, norm: f64 },
    #[error("cloud record out of range: {0}")]
    BadRecord(String),
    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

/// Row-major f32 tensor, the in-memory image of a TNSR file.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Tensor, IoError> {
        if dims.is_empty() {
            return Err(IoError::BadDims("ndim must be >= 1".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(IoError::BadDims(format!("zero dim in {dims:?}")));
        }
        let count = dims.iter().map(|&d| d as u64).product::<u64>();
        if count > MAX_ELEMENTS {
            return Err(IoError::DimOverflow(count));
        }
        if count as usize != data.len() {
            return Err(IoError::BadDims(format!(
                "dims {dims:?} imply {count} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Tensor {
        let count: usize = dims.iter().product();
        Tensor { dims, data: vec![0.0; count] }
    }

    pub fn element_count(&self) -> usize {
        self.data.len()
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Tensor, IoError> {
        Tensor::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

pub fn read_tensor(path: &Path) -> Result<Tensor, IoError> {
    let mut file = BufReader::new(File::open(path)?);
    read_tensor_from(&mut file)
}

pub fn read_tensor_from<R: Read>(r: &mut R) -> Result<Tensor, IoError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| IoError::TruncatedPayload { expected: 4, found: 0 })?;
    if magic != TNSR_MAGIC {
        return Err(IoError::BadMagic);
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != TNSR_VERSION {
        return Err(IoError::UnsupportedVersion(version[0]));
    }
    let ndim = read_u32(r)? as usize;
    if ndim == 0 {
        return Err(IoError::BadDims("ndim must be >= 1".into()));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: u64 = 1;
    for _ in 0..ndim {
        let d = read_u32(r)? as u64;
        if d == 0 {
            return Err(IoError::BadDims("zero dim".into()));
        }
        count = count.saturating_mul(d);
        if count > MAX_ELEMENTS {
            return Err(IoError::DimOverflow(count));
        }
        dims.push(d as usize);
    }
    let mut payload = vec![0u8; count as usize * 4];
    let mut found = 0usize;
    while found < payload.len() {
        let n = r.read(&mut payload[found..])?;
        if n == 0 {
            return Err(IoError::TruncatedPayload {
                expected: count * 4,
                found: found as u64,
            });
        }
        found += n;
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor { dims, data })
}

pub fn write_tensor(t: &Tensor, path: &Path) -> Result<(), IoError> {
    let mut file = BufWriter::new(File::create(path)?);
    write_tensor_to(t, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn write_tensor_to<W: Write>(t: &Tensor, w: &mut W) -> Result<(), IoError> {
    w.write_all(&TNSR_MAGIC)?;
    w.write_all(&[TNSR_VERSION])?;
    w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
    for &d in &t.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, IoError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| IoError::TruncatedPayload { expected: 4, found: 0 })?;
    Ok(u32::from_le_bytes(buf))
}

/// Read a Gaussian cloud from a PLY point list with the 14-property schema.
/// Rotations with norm within 1e-2 of unit are renormalized; larger
/// deviations are rejected.
pub fn read_cloud(path: &Path) -> Result<GaussianCloud, IoError> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != "ply" {
        return Err(IoError::SchemaMismatch("missing ply header".into()));
    }
    let mut binary = true;
    let mut count: Option<usize> = None;
    let mut props: Vec<String> = Vec::new();
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(IoError::SchemaMismatch("unterminated header".into()));
        }
        let l = line.trim_end();
        if l == "end_header" {
            break;
        }
        let mut parts = l.split_whitespace();
        match parts.next() {
            Some("format") => match parts.next() {
                Some("binary_little_endian") => binary = true,
                Some("ascii") => binary = false,
                other => {
                    return Err(IoError::SchemaMismatch(format!(
                        "unsupported format {other:?}"
                    )))
                }
            },
            Some("element") => {
                if parts.next() != Some("vertex") {
                    return Err(IoError::SchemaMismatch("expected element vertex".into()));
                }
                count = Some(
                    parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| IoError::SchemaMismatch("bad vertex count".into()))?,
                );
            }
            Some("property") => {
                if parts.next() != Some("float") {
                    return Err(IoError::SchemaMismatch("properties must be float".into()));
                }
                props.push(
                    parts
                        .next()
                        .ok_or_else(|| IoError::SchemaMismatch("unnamed property".into()))?
                        .to_string(),
                );
            }
            Some("comment") => {}
            other => {
                return Err(IoError::SchemaMismatch(format!(
                    "unexpected header line {other:?}"
                )))
            }
        }
    }
    if props != CLOUD_PROPERTIES {
        return Err(IoError::SchemaMismatch(format!(
            "expected properties {CLOUD_PROPERTIES:?}, found {props:?}"
        )));
    }
    let count = count.ok_or_else(|| IoError::SchemaMismatch("missing element vertex".into()))?;
    if count == 0 {
        return Err(IoError::SchemaMismatch("empty cloud".into()));
    }

    let mut values = vec![0f32; count * 14];
    if binary {
        let mut payload = vec![0u8; count * 14 * 4];
        reader.read_exact(&mut payload).map_err(|_| IoError::TruncatedPayload {
            expected: (count * 14 * 4) as u64,
            found: 0,
        })?;
        for (v, b) in values.iter_mut().zip(payload.chunks_exact(4)) {
            *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        }
    } else {
        let mut flat = Vec::with_capacity(count * 14);
        for l in reader.lines() {
            let l = l?;
            for tok in l.split_whitespace() {
                flat.push(tok.parse::<f32>().map_err(|_| {
                    IoError::SchemaMismatch(format!("bad ascii float {tok:?}"))
                })?);
            }
        }
        if flat.len() != count * 14 {
            return Err(IoError::TruncatedPayload {
                expected: (count * 14) as u64,
                found: flat.len() as u64,
            });
        }
        values = flat;
    }

    let mut gaussians = Vec::with_capacity(count);
    for (i, rec) in values.chunks_exact(14).enumerate() {
        let q = Quat::new(rec[3] as f64, rec[4] as f64, rec[5] as f64, rec[6] as f64);
        let norm = q.norm();
        if (norm - 1.0).abs() > 1e-2 {
            return Err(IoError::NonUnitRotation { index: i, norm });
        }
        // Within 1e-4 of unit the value is kept bit-for-bit so that
        // write . read round-trips exactly; coarser deviations renormalize.
        let rotation = if (norm - 1.0).abs() <= 1e-4 { q } else { q.scaled(1.0 / norm) };
        let scale = Vec3::new(rec[7] as f64, rec[8] as f64, rec[9] as f64);
        if scale.x <= 0.0 || scale.y <= 0.0 || scale.z <= 0.0 {
            return Err(IoError::BadRecord(format!("non-positive scale at point {i}")));
        }
        let opacity = rec[10] as f64;
        if !(0.0..=1.0).contains(&opacity) {
            return Err(IoError::BadRecord(format!("opacity out of [0,1] at point {i}")));
        }
        let color = [rec[11] as f64, rec[12] as f64, rec[13] as f64];
        if color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(IoError::BadRecord(format!("color out of [0,1] at point {i}")));
        }
        gaussians.push(Gaussian {
            center: Vec3::new(rec[0] as f64, rec[1] as f64, rec[2] as f64),
            rotation,
            scale,
            opacity,
            color,
        });
    }
    Ok(GaussianCloud { gaussians, timestamp: None })
}

pub fn write_cloud(cloud: &GaussianCloud, path: &Path) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "ply")?;
    writeln!(w, "format binary_little_endian 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for p in CLOUD_PROPERTIES {
        writeln!(w, "property float {p}")?;
    }
    writeln!(w, "end_header")?;
    for g in &cloud.gaussians {
        let rec: [f32; 14] = [
            g.center.x as f32,
            g.center.y as f32,
            g.center.z as f32,
            g.rotation.w as f32,
            g.rotation.x as f32,
            g.rotation.y as f32,
            g.rotation.z as f32,
            g.scale.x as f32,
            g.scale.y as f32,
            g.scale.z as f32,
            g.opacity as f32,
            g.color[0] as f32,
            g.color[1] as f32,
            g.color[2] as f32,
        ];
        for v in rec {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One RGB image frame, channels in [0,1], row-major H x W x 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<f64>,
}

impl Frame {
    pub fn new(height: usize, width: usize, rgb: Vec<f64>) -> Frame {
        assert_eq!(rgb.len(), height * width * 3);
        Frame { height, width, rgb }
    }

    pub fn zeros(height: usize, width: usize) -> Frame {
        Frame { height, width, rgb: vec![0.0; height * width * 3] }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

/// Scalar image plane (masks, alpha), row-major H x W.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Mask {
        assert_eq!(values.len(), height * width);
        Mask { height, width, values }
    }

    pub fn coverage(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Pack frames into a [T, H, W, 3] tensor.
pub fn frames_to_tensor(frames: &[Frame]) -> Result<Tensor, IoError> {
    let (h, w) = (frames[0].height, frames[0].width);
    let mut data = Vec::with_capacity(frames.len() * h * w * 3);
    for f in frames {
        if f.height != h || f.width != w {
            return Err(IoError::BadDims("frame resolutions differ".into()));
        }
        data.extend(f.rgb.iter().map(|&v| v as f32));
    }
    Tensor::new(vec![frames.len(), h, w, 3], data)
}

pub fn tensor_to_frames(t: &Tensor) -> Result<Vec<Frame>, IoError> {
    if t.dims.len() != 4 || t.dims[3] != 3 {
        return Err(IoError::BadDims(format!("expected [T,H,W,3], got {:?}", t.dims)));
    }
    let (n, h, w) = (t.dims[0], t.dims[1], t.dims[2]);
    Ok((0..n)
        .map(|i| {
            let chunk = &t.data[i * h * w * 3..(i + 1) * h * w * 3];
            Frame::new(h, w, chunk.iter().map(|&v| v as f64).collect())
        })
        .collect())
}

/// Pack masks into a [T, H, W] tensor.
pub fn masks_to_tensor(masks: &[Mask]) -> Result<Tensor, IoError> {
    let (h, w) = (masks[0].height, masks[0].width);
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        if m.height != h || m.width != w {
            return Err(IoError::BadDims("mask resolutions differ".into()));
        }
        data.extend(m.values.iter().map(|&v| v as f32));
    }
    Tensor::new(vec![masks.len(), h, w], data)
}

pub fn tensor_to_masks(t: &Tensor) -> Result<Vec<Mask>, IoError> {
    if t.dims.len() != 3 {
        return Err(IoError::BadDims(format!("expected [T,H,W], got {:?}", t.dims)));
    }
    let (n, h, w) = (t.dims[0], t.dims[1], t.dims[2]);
    Ok((0..n)
        .map(|i| {
            let chunk = &t.data[i * h * w..(i + 1) * h * w];
            Mask::new(h, w, chunk.iter().map(|&v| v as f64).collect())
        })
        .collect())
}

/// Write an RGB frame plus alpha plane as 8-bit RGBA PNG.
pub fn write_image_rgba(frame: &Frame, alpha: &[f64], path: &Path) -> Result<(), IoError> {
    assert_eq!(alpha.len(), frame.height * frame.width);
    let mut buf = Vec::with_capacity(alpha.len() * 4);
    for (px, &a) in frame.rgb.chunks_exact(3).zip(alpha.iter()) {
        for &c in px {
            buf.push((c.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        buf.push((a.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    let img = image::RgbaImage::from_raw(frame.width as u32, frame.height as u32, buf)
        .expect("buffer size matches dimensions");
    img.save(path)
        .map_err(|e| IoError::IoFailure(std::io::Error::other(e)))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tensor_roundtrip_small() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tnsr");
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        write_tensor(&t, &path).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn tensor_write_read_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.tnsr");
        let b = dir.path().join("b.tnsr");
        let t = Tensor::new(vec![4, 2], (0..8).map(|i| i as f32 * 0.5).collect()).unwrap();
        write_tensor(&t, &a).unwrap();
        let back = read_tensor(&a).unwrap();
        write_tensor(&back, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn tensor_single_element_payload() {
        let mut buf = Vec::new();
        let t = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        write_tensor_to(&t, &mut buf).unwrap();
        // magic + version + ndim + 2 dims + 1 float
        assert_eq!(buf.len(), 4 + 1 + 4 + 8 + 4);
    }

    #[test]
    fn tensor_3d_payload_size() {
        let t = Tensor::zeros(vec![16, 64, 32]);
        assert_eq!(t.element_count(), 16 * 64 * 32);
        let mut bytes = Vec::new();
        write_tensor_to(&t, &mut bytes).unwrap();
        let header = 4 + 1 + 4 + 3 * 4;
        assert_eq!(bytes.len() - header, 131072); // f32 payload bytes
    }

    #[test]
    fn tensor_roundtrip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dir = tempfile::tempdir().unwrap();
        for i in 0..100 {
            let ndim = rng.random_range(1..=4usize);
            let dims: Vec<usize> = (0..ndim).map(|_| rng.random_range(1..=6usize)).collect();
            let count: usize = dims.iter().product();
            let data: Vec<f32> = (0..count).map(|_| rng.random_range(-10.0..10.0)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let path = dir.path().join(format!("t{i}.tnsr"));
            write_tensor(&t, &path).unwrap();
            assert_eq!(read_tensor(&path).unwrap(), t);
        }
    }

    #[test]
    fn tensor_bad_magic() {
        let mut bytes = Vec::new();
        write_tensor_to(&Tensor::new(vec![1], vec![1.0]).unwrap(), &mut bytes).unwrap();
        bytes[0] = b'X';
        assert!(matches!(
            read_tensor_from(&mut bytes.as_slice()),
            Err(IoError::BadMagic)
        ));
    }

    #[test]
    fn tensor_truncated() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let mut bytes = Vec::new();
        write_tensor_to(&t, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 4); // drop one float: 5 floats for dims [2,3]
        assert!(matches!(
            read_tensor_from(&mut bytes.as_slice()),
            Err(IoError::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn tensor_dim_overflow() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&TNSR_MAGIC);
        bytes.push(TNSR_VERSION);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&(1u32 << 16).to_le_bytes());
        bytes.extend_from_slice(&(1u32 << 16).to_le_bytes());
        assert!(matches!(
            read_tensor_from(&mut bytes.as_slice()),
            Err(IoError::DimOverflow(_))
        ));
    }

    fn synthetic_cloud(n: usize, seed: u64) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GaussianCloud::new(
            (0..n)
                .map(|_| {
                    let axis = Vec3::new(
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0f64),
                    );
                    Gaussian::new(
                        Vec3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        ),
                        Quat::from_axis_angle(axis, rng.random_range(0.0..3.0)),
                        Vec3::new(
                            rng.random_range(0.01..0.2),
                            rng.random_range(0.01..0.2),
                            rng.random_range(0.01..0.2),
                        ),
                        rng.random_range(0.0..1.0),
                        [
                            rng.random_range(0.0..1.0),
                            rng.random_range(0.0..1.0),
                            rng.random_range(0.0..1.0),
                        ],
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn cloud_single_point() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ply");
        let cloud = GaussianCloud::new(vec![Gaussian::new(
            Vec3::ZERO,
            Quat::IDENTITY,
            Vec3::new(0.1, 0.1, 0.1),
            1.0,
            [1.0, 0.0, 0.0],
        )]);
        write_cloud(&cloud, &path).unwrap();
        let back = read_cloud(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back.gaussians[0].center, Vec3::ZERO);
    }

    #[test]
    fn cloud_roundtrip_1000_points() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ply");
        let b = dir.path().join("b.ply");
        let cloud = synthetic_cloud(1000, 9);
        write_cloud(&cloud, &a).unwrap();
        let back = read_cloud(&a).unwrap();
        write_cloud(&back, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn cloud_zero_rotation_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        let mut cloud = synthetic_cloud(1, 3);
        cloud.gaussians[0].rotation = Quat::new(0.0, 0.0, 0.0, 0.0);
        write_cloud(&cloud, &path).unwrap();
        assert!(matches!(
            read_cloud(&path),
            Err(IoError::NonUnitRotation { index: 0, .. })
        ));
    }

    #[test]
    fn cloud_slightly_off_unit_renormalized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("near.ply");
        let mut cloud = synthetic_cloud(1, 4);
        cloud.gaussians[0].rotation = Quat::new(1.005, 0.0, 0.0, 0.0);
        write_cloud(&cloud, &path).unwrap();
        let back = read_cloud(&path).unwrap();
        assert!((back.gaussians[0].rotation.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cloud_ascii_variant_reads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ply");
        let mut s = String::from("ply\nformat ascii 1.0\nelement vertex 1\n");
        for p in CLOUD_PROPERTIES {
            s.push_str(&format!("property float {p}\n"));
        }
        s.push_str("end_header\n0.5 0 0 1 0 0 0 0.1 0.1 0.1 0.75 1 0.5 0\n");
        std::fs::write(&path, s).unwrap();
        let cloud = read_cloud(&path).unwrap();
        assert_eq!(cloud.len(), 1);
        assert!((cloud.gaussians[0].center.x - 0.5).abs() < 1e-7);
        assert!((cloud.gaussians[0].opacity - 0.75).abs() < 1e-7);
    }

    #[test]
    fn cloud_wrong_schema_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n0\n",
        )
        .unwrap();
        assert!(matches!(read_cloud(&path), Err(IoError::SchemaMismatch(_))));
    }

    #[test]
    fn frames_tensor_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames: Vec<Frame> = (0..3)
            .map(|_| {
                Frame::new(
                    4,
                    5,
                    (0..60).map(|_| rng.random_range(0.0..1.0f32) as f64).collect(),
                )
            })
            .collect();
        let t = frames_to_tensor(&frames).unwrap();
        assert_eq!(t.dims, vec![3, 4, 5, 3]);
        let back = tensor_to_frames(&t).unwrap();
        for (a, b) in frames.iter().zip(back.iter()) {
            for (x, y) in a.rgb.iter().zip(b.rgb.iter()) {
                assert!((x - y).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn png_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let frame = Frame::new(2, 2, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        write_image_rgba(&frame, &[1.0, 1.0, 0.5, 0.0], &path).unwrap();
        let img = image::open(&path).unwrap().to_rgba8();
        assert_eq!(img.dimensions(), (2, 2));
        assert_eq!(img.get_pixel(0, 0).0, [255, 0, 0, 255]);
        assert_eq!(img.get_pixel(1, 1).0, [255, 255, 255, 0]);
    }
}
