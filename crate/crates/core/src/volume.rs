//! CT sub-volume container and preprocessing: resampling, isocenter crops,
//! intensity windowing and 3-channel slice inputs.
//!
//! World coordinates are in millimetres. Voxel `[i, j, k]` has its centre at
//! `origin + [i, j, k] · spacing`, and the volume occupies the cell box
//! `[origin − spacing/2, origin + (shape − 1/2) · spacing]`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Isocentres up to this far outside the cell box only warn.
pub const ISOCENTER_SLACK_MM: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub isocenter_mm: [f64; 3],
    /// x-fastest, then y, then z.
    pub voxels: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "i16")]
    I16,
    #[serde(rename = "f32")]
    F32,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::I16 => 2,
            Dtype::F32 => 4,
        }
    }
}

/// `<id>.meta.json` contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub isocenter_mm: [f64; 3],
    pub dtype: Dtype,
}

impl Volume {
    pub fn new(
        shape: [usize; 3],
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
        isocenter_mm: [f64; 3],
        voxels: Vec<f32>,
    ) -> Result<Self> {
        let v = Self { shape, spacing_mm, origin_mm, isocenter_mm, voxels };
        v.validate()?;
        Ok(v)
    }

    pub fn filled(
        shape: [usize; 3],
        spacing_mm: [f64; 3],
        origin_mm: [f64; 3],
        isocenter_mm: [f64; 3],
        value: f32,
    ) -> Result<Self> {
        Self::new(shape, spacing_mm, origin_mm, isocenter_mm, vec![value; shape.iter().product()])
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::validation(format!("volume shape {:?} has a zero axis", self.shape)));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::validation(format!("spacing {:?} must be strictly positive", self.spacing_mm)));
        }
        let n: usize = self.shape.iter().product();
        if self.voxels.len() != n {
            return Err(Error::validation(format!(
                "voxel count {} does not match shape {:?}",
                self.voxels.len(),
                self.shape
            )));
        }
        let d = self.isocenter_distance_outside();
        if d > ISOCENTER_SLACK_MM {
            return Err(Error::validation(format!(
                "isocenter {:?} lies {d:.2} mm outside the volume",
                self.isocenter_mm
            )));
        } else if d > 0.0 {
            log::warn!("isocenter {:?} lies {d:.2} mm outside the volume", self.isocenter_mm);
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    /// `(lo, hi)` corners of the cell box in world coordinates.
    pub fn world_bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            lo[a] = self.origin_mm[a] - self.spacing_mm[a] / 2.0;
            hi[a] = self.origin_mm[a] + (self.shape[a] as f64 - 0.5) * self.spacing_mm[a];
        }
        (lo, hi)
    }

    /// Euclidean distance from the isocentre to the cell box (0 when inside).
    pub fn isocenter_distance_outside(&self) -> f64 {
        let (lo, hi) = self.world_bounds();
        (0..3)
            .map(|a| {
                let p = self.isocenter_mm[a];
                let d = (lo[a] - p).max(p - hi[a]).max(0.0);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// `foo.meta.json` → `foo.raw`
pub fn raw_path_for(meta_path: &Path) -> PathBuf {
    let name = meta_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.strip_suffix(".meta.json").unwrap_or(&name);
    meta_path.with_file_name(format!("{stem}.raw"))
}

pub fn load_volume(meta_path: &Path) -> Result<Volume> {
    let text = fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
    let meta: VolumeMeta =
        serde_json::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", meta_path.display())))?;
    let raw_path = raw_path_for(meta_path);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n: usize = meta.shape.iter().product();
    let expected = n * meta.dtype.size();
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "{}: expected {expected} bytes for shape {:?} ({:?}), found {}",
            raw_path.display(),
            meta.shape,
            meta.dtype,
            bytes.len()
        )));
    }
    let voxels = match meta.dtype {
        Dtype::I16 => bytes.chunks_exact(2).map(|c| f32::from(i16::from_le_bytes([c[0], c[1]]))).collect(),
        Dtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
    };
    Volume::new(meta.shape, meta.spacing_mm, meta.origin_mm, meta.isocenter_mm, voxels)
}

/// Writes `<meta_path>` and its sibling `.raw`. `I16` rounds and saturates.
pub fn save_volume(v: &Volume, meta_path: &Path, dtype: Dtype) -> Result<()> {
    let meta = VolumeMeta {
        shape: v.shape,
        spacing_mm: v.spacing_mm,
        origin_mm: v.origin_mm,
        isocenter_mm: v.isocenter_mm,
        dtype,
    };
    let mut bytes = Vec::with_capacity(v.len() * dtype.size());
    match dtype {
        Dtype::I16 => {
            for &x in &v.voxels {
                let q = x.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16;
                bytes.extend_from_slice(&q.to_le_bytes());
            }
        }
        Dtype::F32 => {
            for &x in &v.voxels {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let json = serde_json::to_string_pretty(&meta)?;
    fs::write(meta_path, json).map_err(|e| Error::io(meta_path, e))?;
    let raw = raw_path_for(meta_path);
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    AxialRepeat,
    Orthogonal,
}

impl InputMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::AxialRepeat => "axial_repeat",
            InputMode::Orthogonal => "orthogonal",
        }
    }
}

impl std::str::FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" | "axial_repeat" => Ok(InputMode::AxialRepeat),
            "ortho" | "orthogonal" => Ok(InputMode::Orthogonal),
            other => Err(Error::validation(format!("unknown input mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    pub target_spacing_mm: [f64; 3],
    pub crop_side_mm: f64,
    pub window_lo_hu: f64,
    pub window_hi_hu: f64,
    pub fill_hu: f64,
    pub input_resolution: usize,
    pub input_mode: InputMode,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            target_spacing_mm: [1.0, 1.0, 2.0],
            crop_side_mm: 50.0,
            window_lo_hu: -500.0,
            window_hi_hu: 200.0,
            fill_hu: -1000.0,
            input_resolution: 224,
            input_mode: InputMode::Orthogonal,
        }
    }
}

impl PrepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_lo_hu < self.window_hi_hu) {
            return Err(Error::validation(format!("window [{}, {}] is empty", self.window_lo_hu, self.window_hi_hu)));
        }
        if !(self.crop_side_mm > 0.0) {
            return Err(Error::validation("crop side must be positive"));
        }
        if self.input_resolution < 16 {
            return Err(Error::validation(format!("input resolution {} is below 16", self.input_resolution)));
        }
        if self.target_spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::validation("target spacing must be positive"));
        }
        Ok(())
    }
}

/// 3-channel square model input, channel-major `[3, R, R]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputImage {
    pub resolution: usize,
    pub values: Vec<f32>,
    pub provenance: InputMode,
}

impl InputImage {
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.resolution * self.resolution;
        &self.values[c * n..(c + 1) * n]
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Trilinear resampling onto `target_spacing_mm`.
///
/// The output grid starts at the same cell-box corner with
/// `round(extent / target)` voxels per axis. Samples beyond the source cell
/// box take `fill_hu`; samples inside it but past the outermost voxel centres
/// clamp to the edge.
pub fn resample(v: &Volume, target_spacing_mm: [f64; 3], fill_hu: f64) -> Result<Volume> {
    v.validate()?;
    if target_spacing_mm.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::validation(format!("target spacing {target_spacing_mm:?} must be positive")));
    }
    let mut shape = [0usize; 3];
    let mut origin = [0.0; 3];
    // continuous source index for each output index, per axis
    let mut coords: [Vec<Option<(usize, usize, f64)>>; 3] = Default::default();
    for a in 0..3 {
        let (s, t, n) = (v.spacing_mm[a], target_spacing_mm[a], v.shape[a]);
        let extent = n as f64 * s;
        shape[a] = ((extent / t).round() as usize).max(1);
        origin[a] = v.origin_mm[a] + (t - s) / 2.0;
        coords[a] = (0..shape[a])
            .map(|i| {
                let mut u = (i as f64 * t + (t - s) / 2.0) / s;
                if (u - u.round()).abs() < 1e-9 {
                    u = u.round();
                }
                if u < -0.5 - 1e-9 || u > n as f64 - 0.5 + 1e-9 {
                    return None;
                }
                let u = u.clamp(0.0, (n - 1) as f64);
                let i0 = u.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                Some((i0, i1, u - i0 as f64))
            })
            .collect();
    }
    let mut voxels = Vec::with_capacity(shape.iter().product());
    for cz in &coords[2] {
        for cy in &coords[1] {
            for cx in &coords[0] {
                let value = match (cx, cy, cz) {
                    (Some(x), Some(y), Some(z)) => {
                        let at = |i, j, k| f64::from(v.get(i, j, k));
                        let c00 = lerp(at(x.0, y.0, z.0), at(x.1, y.0, z.0), x.2);
                        let c10 = lerp(at(x.0, y.1, z.0), at(x.1, y.1, z.0), x.2);
                        let c01 = lerp(at(x.0, y.0, z.1), at(x.1, y.0, z.1), x.2);
                        let c11 = lerp(at(x.0, y.1, z.1), at(x.1, y.1, z.1), x.2);
                        lerp(lerp(c00, c10, y.2), lerp(c01, c11, y.2), z.2)
                    }
                    _ => fill_hu,
                };
                voxels.push(value as f32);
            }
        }
    }
    Ok(Volume { shape, spacing_mm: target_spacing_mm, origin_mm: origin, isocenter_mm: v.isocenter_mm, voxels })
}

/// Voxels per axis for a cube of physical side `side_mm`.
pub fn crop_shape(side_mm: f64, spacing_mm: [f64; 3]) -> [usize; 3] {
    spacing_mm.map(|s| ((side_mm / s) - 1e-9).ceil().max(1.0) as usize)
}

/// Cube of side `side_mm` centred on the isocentre, copied voxel-aligned.
///
/// The isocentre's nearest voxel lands on index `floor(n/2)` of each output
/// axis; regions outside `v` are padded with `fill_hu`.
pub fn crop_isocenter(v: &Volume, side_mm: f64, fill_hu: f64) -> Result<Volume> {
    if !(side_mm > 0.0) {
        return Err(Error::validation("crop side must be positive"));
    }
    let outside = v.isocenter_distance_outside();
    if outside > side_mm {
        return Err(Error::validation(format!(
            "isocenter lies {outside:.1} mm outside the volume; a {side_mm} mm crop would be all padding"
        )));
    }
    let shape = crop_shape(side_mm, v.spacing_mm);
    let mut start = [0i64; 3];
    let mut origin = [0.0; 3];
    for a in 0..3 {
        let k = ((v.isocenter_mm[a] - v.origin_mm[a]) / v.spacing_mm[a]).round() as i64;
        start[a] = k - (shape[a] / 2) as i64;
        origin[a] = v.origin_mm[a] + start[a] as f64 * v.spacing_mm[a];
    }
    let fill = fill_hu as f32;
    let mut voxels = Vec::with_capacity(shape.iter().product());
    let inside = |i: i64, a: usize| i >= 0 && (i as usize) < v.shape[a];
    for z in 0..shape[2] as i64 {
        let sz = start[2] + z;
        for y in 0..shape[1] as i64 {
            let sy = start[1] + y;
            for x in 0..shape[0] as i64 {
                let sx = start[0] + x;
                let value = if inside(sx, 0) && inside(sy, 1) && inside(sz, 2) {
                    v.get(sx as usize, sy as usize, sz as usize)
                } else {
                    fill
                };
                voxels.push(value);
            }
        }
    }
    Ok(Volume { shape, spacing_mm: v.spacing_mm, origin_mm: origin, isocenter_mm: v.isocenter_mm, voxels })
}

/// `clamp((hu − lo) / (hi − lo), 0, 1)` elementwise.
pub fn window_normalize(v: &Volume, lo_hu: f64, hi_hu: f64) -> Result<Volume> {
    if !(lo_hu < hi_hu) {
        return Err(Error::validation(format!("window [{lo_hu}, {hi_hu}] is empty")));
    }
    let width = hi_hu - lo_hu;
    let voxels = v.voxels.iter().map(|&hu| ((f64::from(hu) - lo_hu) / width).clamp(0.0, 1.0) as f32).collect();
    Ok(Volume { voxels, ..v.clone() })
}

/// Row-major 2D slice, `rows × cols`.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice2d {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl Slice2d {
    /// Bilinear resize with half-pixel centres and edge clamping.
    pub fn resize(&self, out_rows: usize, out_cols: usize) -> Slice2d {
        let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
            (0..n_out)
                .map(|o| {
                    let u = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                    let i0 = u.floor() as usize;
                    (i0, (i0 + 1).min(n_in - 1), u - i0 as f64)
                })
                .collect()
        };
        let rt = taps(self.rows, out_rows);
        let ct = taps(self.cols, out_cols);
        let at = |r: usize, c: usize| f64::from(self.values[r * self.cols + c]);
        let mut values = Vec::with_capacity(out_rows * out_cols);
        for &(r0, r1, fr) in &rt {
            for &(c0, c1, fc) in &ct {
                let top = lerp(at(r0, c0), at(r0, c1), fc);
                let bottom = lerp(at(r1, c0), at(r1, c1), fc);
                values.push(lerp(top, bottom, fr) as f32);
            }
        }
        Slice2d { rows: out_rows, cols: out_cols, values }
    }
}

fn check_slice_axes(v: &Volume) -> Result<()> {
    if v.shape.iter().any(|&n| n < 2) {
        return Err(Error::validation(format!("crop {:?} needs at least 2 voxels per axis for slicing", v.shape)));
    }
    Ok(())
}

/// Plane `z = floor(Z/2)`, rows indexed by x, columns by y.
pub fn mid_axial(v: &Volume) -> Slice2d {
    let [nx, ny, nz] = v.shape;
    let z = nz / 2;
    let values = (0..nx).flat_map(|x| (0..ny).map(move |y| (x, y))).map(|(x, y)| v.get(x, y, z)).collect();
    Slice2d { rows: nx, cols: ny, values }
}

/// Plane `y = floor(Y/2)`, rows x, columns z.
pub fn mid_coronal(v: &Volume) -> Slice2d {
    let [nx, ny, nz] = v.shape;
    let y = ny / 2;
    let values = (0..nx).flat_map(|x| (0..nz).map(move |z| (x, z))).map(|(x, z)| v.get(x, y, z)).collect();
    Slice2d { rows: nx, cols: nz, values }
}

/// Plane `x = floor(X/2)`, rows y, columns z.
pub fn mid_sagittal(v: &Volume) -> Slice2d {
    let [nx, ny, nz] = v.shape;
    let x = nx / 2;
    let values = (0..ny).flat_map(|y| (0..nz).map(move |z| (y, z))).map(|(y, z)| v.get(x, y, z)).collect();
    Slice2d { rows: ny, cols: nz, values }
}

fn check_resolution(resolution: usize) -> Result<()> {
    if resolution < 16 {
        return Err(Error::validation(format!("input resolution {resolution} is below 16")));
    }
    Ok(())
}

/// Channels (axial, coronal, sagittal) through the crop centre.
pub fn extract_orthogonal(v: &Volume, resolution: usize) -> Result<InputImage> {
    check_slice_axes(v)?;
    check_resolution(resolution)?;
    let mut values = Vec::with_capacity(3 * resolution * resolution);
    for s in [mid_axial(v), mid_coronal(v), mid_sagittal(v)] {
        values.extend(s.resize(resolution, resolution).values);
    }
    Ok(InputImage { resolution, values, provenance: InputMode::Orthogonal })
}

/// Mid-axial slice copied into all three channels.
pub fn extract_axial_repeat(v: &Volume, resolution: usize) -> Result<InputImage> {
    check_slice_axes(v)?;
    check_resolution(resolution)?;
    let axial = mid_axial(v).resize(resolution, resolution).values;
    let mut values = Vec::with_capacity(3 * axial.len());
    for _ in 0..3 {
        values.extend_from_slice(&axial);
    }
    Ok(InputImage { resolution, values, provenance: InputMode::AxialRepeat })
}

/// Windowed, normalised crop at the configured spacing.
pub fn preprocess_volume(v: &Volume, cfg: &PrepConfig) -> Result<Volume> {
    cfg.validate()?;
    let resampled = resample(v, cfg.target_spacing_mm, cfg.fill_hu)?;
    let crop = crop_isocenter(&resampled, cfg.crop_side_mm, cfg.fill_hu)?;
    window_normalize(&crop, cfg.window_lo_hu, cfg.window_hi_hu)
}

/// Full pipeline from a raw HU volume to a model input.
pub fn preprocess(v: &Volume, cfg: &PrepConfig) -> Result<InputImage> {
    let normalized = preprocess_volume(v, cfg)?;
    match cfg.input_mode {
        InputMode::AxialRepeat => extract_axial_repeat(&normalized, cfg.input_resolution),
        InputMode::Orthogonal => extract_orthogonal(&normalized, cfg.input_resolution),
    }
}

/// Stores an input image as an f32 container of shape `[R, R, 3]`.
pub fn image_to_volume(img: &InputImage) -> Volume {
    let r = img.resolution;
    Volume {
        shape: [r, r, 3],
        spacing_mm: [1.0; 3],
        origin_mm: [0.0; 3],
        isocenter_mm: [(r / 2) as f64, (r / 2) as f64, 1.0],
        voxels: img.values.clone(),
    }
}

pub fn image_from_volume(v: &Volume, provenance: InputMode) -> Result<InputImage> {
    let [r, r2, c] = v.shape;
    if r != r2 || c != 3 {
        return Err(Error::format(format!("{:?} is not a [R, R, 3] input image", v.shape)));
    }
    if v.voxels.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(Error::format("cached input values fall outside [0, 1]"));
    }
    Ok(InputImage { resolution: r, values: v.voxels.clone(), provenance })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 3], spacing: [f64; 3], f: impl Fn([f64; 3]) -> f64) -> Volume {
        let mut voxels = Vec::new();
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    let p = [x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]];
                    voxels.push(f(p) as f32);
                }
            }
        }
        let iso = [0, 1, 2].map(|a| shape[a] as f64 * spacing[a] / 2.0);
        Volume::new(shape, spacing, [0.0; 3], iso, voxels).unwrap()
    }

    #[test]
    fn load_roundtrip_i16() {
        let dir = tempfile::tempdir().unwrap();
        let meta = dir.path().join("scan.meta.json");
        let v = ramp([4, 4, 2], [1.0, 1.0, 2.0], |p| p[0] * 10.0 - p[2] * 3.0);
        save_volume(&v, &meta, Dtype::I16).unwrap();
        let back = load_volume(&meta).unwrap();
        assert_eq!(back.len(), 32);
        assert_eq!(back, v);
    }

    #[test]
    fn truncated_raw_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let meta = dir.path().join("scan.meta.json");
        let v = Volume::filled([4, 4, 2], [1.0, 1.0, 2.0], [0.0; 3], [2.0, 2.0, 2.0], -100.0).unwrap();
        save_volume(&v, &meta, Dtype::I16).unwrap();
        let raw = raw_path_for(&meta);
        let bytes = std::fs::read(&raw).unwrap();
        std::fs::write(&raw, &bytes[..31 * 2]).unwrap();
        assert!(matches!(load_volume(&meta), Err(Error::Format(_))));
    }

    #[test]
    fn zero_spacing_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let meta = dir.path().join("scan.meta.json");
        let json = r#"{"shape":[4,4,2],"spacing_mm":[0,1,2],"origin_mm":[0,0,0],"isocenter_mm":[2,2,2],"dtype":"i16"}"#;
        std::fs::write(&meta, json).unwrap();
        std::fs::write(raw_path_for(&meta), vec![0u8; 64]).unwrap();
        assert!(matches!(load_volume(&meta), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_raw_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let meta = dir.path().join("scan.meta.json");
        let json = r#"{"shape":[1,1,1],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"isocenter_mm":[0,0,0],"dtype":"f32"}"#;
        std::fs::write(&meta, json).unwrap();
        assert!(matches!(load_volume(&meta), Err(Error::Io { .. })));
    }

    #[test]
    fn resample_identity_is_exact() {
        let v = ramp([6, 5, 4], [1.0, 1.0, 2.0], |p| (p[0] * 1.3 + p[1] * p[2]).sin() * 400.0);
        let out = resample(&v, [1.0, 1.0, 2.0], -1000.0).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn resample_constant() {
        let v = Volume::filled([7, 6, 5], [0.7, 0.9, 1.7], [3.0, -2.0, 1.0], [5.0, 0.0, 4.0], -100.0).unwrap();
        for t in [[1.0, 1.0, 2.0], [0.3, 0.5, 0.8], [2.5, 2.0, 3.0]] {
            let out = resample(&v, t, -1000.0).unwrap();
            assert!(out.voxels.iter().all(|&x| x == -100.0), "target {t:?}");
        }
    }

    #[test]
    fn resample_shape_rounding() {
        let v = Volume::filled([10, 10, 10], [0.5; 3], [0.0; 3], [2.0; 3], 0.0).unwrap();
        let out = resample(&v, [1.0, 1.0, 2.0], -1000.0).unwrap();
        assert_eq!(out.shape, [5, 5, 3]);
        assert_eq!(out.isocenter_mm, v.isocenter_mm);
    }

    #[test]
    fn resample_reproduces_linear_ramp() {
        let v = ramp([20, 18, 16], [0.8, 0.8, 1.25], |p| 3.0 * p[0] - 2.0 * p[1] + 5.0 * p[2] - 200.0);
        let out = resample(&v, [1.0, 1.0, 2.0], -1000.0).unwrap();
        let (lo, hi) = v.world_bounds();
        let inner_lo = [0, 1, 2].map(|a| lo[a] + v.spacing_mm[a]);
        let inner_hi = [0, 1, 2].map(|a| hi[a] - v.spacing_mm[a]);
        let mut checked = 0;
        for z in 0..out.shape[2] {
            for y in 0..out.shape[1] {
                for x in 0..out.shape[0] {
                    let p = [0, 1, 2].map(|a| out.origin_mm[a] + [x, y, z][a] as f64 * out.spacing_mm[a]);
                    if (0..3).all(|a| p[a] >= inner_lo[a] && p[a] <= inner_hi[a]) {
                        let expect = 3.0 * p[0] - 2.0 * p[1] + 5.0 * p[2] - 200.0;
                        assert!((f64::from(out.get(x, y, z)) - expect).abs() <= 1e-5 * expect.abs().max(1.0));
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 100);
    }

    #[test]
    fn crop_shapes_use_ceiling() {
        assert_eq!(crop_shape(50.0, [1.0, 1.0, 2.0]), [50, 50, 25]);
        assert_eq!(crop_shape(75.0, [1.0, 1.0, 2.0]), [75, 75, 38]);
    }

    #[test]
    fn crop_centres_isocenter_and_pads_corner() {
        let v = Volume::filled([60, 60, 30], [1.0, 1.0, 2.0], [0.0; 3], [30.0, 30.0, 30.0], -100.0).unwrap();
        let c = crop_isocenter(&v, 50.0, -1000.0).unwrap();
        assert_eq!(c.shape, [50, 50, 25]);
        for a in 0..3 {
            let centre = c.origin_mm[a] + (c.shape[a] / 2) as f64 * c.spacing_mm[a];
            assert!((centre - v.isocenter_mm[a]).abs() < 1e-9);
        }
        assert!(c.voxels.iter().all(|&x| x == -100.0));

        let corner = Volume::filled([60, 60, 30], [1.0, 1.0, 2.0], [0.0; 3], [0.0, 30.0, 30.0], -100.0).unwrap();
        let c = crop_isocenter(&corner, 50.0, -1000.0).unwrap();
        let padded = c.voxels.iter().filter(|&&x| x == -1000.0).count();
        assert_eq!(padded, 25 * 50 * 25);
    }

    #[test]
    fn crop_far_outside_errors() {
        let mut v = Volume::filled([10, 10, 10], [1.0; 3], [0.0; 3], [5.0; 3], 0.0).unwrap();
        v.isocenter_mm = [80.0, 5.0, 5.0];
        assert!(matches!(crop_isocenter(&v, 50.0, -1000.0), Err(Error::Validation(_))));
    }

    #[test]
    fn window_endpoints() {
        let v = Volume::new(
            [6, 1, 1],
            [1.0; 3],
            [0.0; 3],
            [2.0, 0.0, 0.0],
            vec![-500.0, 200.0, -150.0, -1000.0, 500.0, 0.0],
        )
        .unwrap();
        let w = window_normalize(&v, -500.0, 200.0).unwrap();
        assert_eq!(&w.voxels[..5], &[0.0, 1.0, 0.5, 0.0, 1.0]);
        assert!(window_normalize(&v, 200.0, -500.0).is_err());
        assert!(window_normalize(&v, 10.0, 10.0).is_err());
    }

    #[test]
    fn orthogonal_and_axial_inputs() {
        let v = ramp([50, 50, 25], [1.0, 1.0, 2.0], |p| ((p[0] + 2.0 * p[1] + p[2]) / 150.0).min(1.0));
        assert_eq!(mid_axial(&v).rows * mid_axial(&v).cols, 50 * 50);
        assert_eq!((mid_coronal(&v).rows, mid_coronal(&v).cols), (50, 25));
        assert_eq!((mid_sagittal(&v).rows, mid_sagittal(&v).cols), (50, 25));
        let ortho = extract_orthogonal(&v, 224).unwrap();
        assert_eq!(ortho.values.len(), 3 * 224 * 224);
        let axial = extract_axial_repeat(&v, 224).unwrap();
        assert_eq!(axial.channel(0), axial.channel(1));
        assert_eq!(axial.channel(1), axial.channel(2));
        assert_eq!(axial.channel(0), ortho.channel(0));
    }

    #[test]
    fn constant_volume_gives_constant_image() {
        let v = Volume::filled([50, 50, 25], [1.0, 1.0, 2.0], [0.0; 3], [25.0, 25.0, 24.0], 0.5).unwrap();
        let img = extract_orthogonal(&v, 64).unwrap();
        assert!(img.values.iter().all(|&x| (x - 0.5).abs() < 1e-6));
    }

    #[test]
    fn xy_symmetric_volume_gives_symmetric_axial() {
        let v = ramp([20, 20, 6], [1.0; 3], |p| p[0] * p[1] + p[2]);
        let img = extract_axial_repeat(&v, 32).unwrap();
        let ch = img.channel(0);
        for r in 0..32 {
            for c in 0..32 {
                assert_eq!(ch[r * 32 + c], ch[c * 32 + r]);
            }
        }
    }

    #[test]
    fn thin_crop_rejected() {
        let v = Volume::filled([10, 10, 1], [1.0; 3], [0.0; 3], [5.0, 5.0, 0.0], 0.5).unwrap();
        assert!(matches!(extract_orthogonal(&v, 32), Err(Error::Validation(_))));
        assert!(matches!(extract_axial_repeat(&v, 32), Err(Error::Validation(_))));
    }

    #[test]
    fn isocenter_slack() {
        let mut v = Volume::filled([4, 4, 4], [1.0; 3], [0.0; 3], [2.0; 3], 0.0).unwrap();
        v.isocenter_mm = [6.0, 2.0, 2.0];
        assert!(v.validate().is_ok());
        v.isocenter_mm = [12.0, 2.0, 2.0];
        assert!(v.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn window_is_monotone_and_bounded(a in -3000.0f32..3000.0, b in -3000.0f32..3000.0) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let v = Volume::new([2, 1, 1], [1.0; 3], [0.0; 3], [0.5, 0.0, 0.0], vec![lo, hi]).unwrap();
                let w = window_normalize(&v, -500.0, 200.0).unwrap();
                prop_assert!(w.voxels[0] <= w.voxels[1]);
                prop_assert!(w.voxels.iter().all(|x| (0.0..=1.0).contains(x)));
            }

            #[test]
            fn crop_is_idempotent(ix in 10.0f64..50.0, iy in 10.0f64..50.0, iz in 10.0f64..50.0, side in 8.0f64..30.0) {
                let v = ramp([60, 60, 30], [1.0, 1.0, 2.0], |p| p[0] + 100.0 * p[1] + 10_000.0 * p[2]);
                let mut v = v;
                v.isocenter_mm = [ix, iy, iz];
                let once = crop_isocenter(&v, side, -1000.0).unwrap();
                let twice = crop_isocenter(&once, side, -1000.0).unwrap();
                prop_assert_eq!(&once.voxels, &twice.voxels);
                prop_assert_eq!(once.isocenter_mm, v.isocenter_mm);
            }

            #[test]
            fn isocenter_world_position_is_preserved(sx in 0.4f64..2.0, sz in 0.5f64..3.0) {
                let v = Volume::filled([30, 30, 20], [sx, sx, sz], [-7.0, 3.0, 11.0], [-7.0 + 15.0 * sx, 3.0 + 14.0 * sx, 11.0 + 9.0 * sz], -800.0).unwrap();
                let r = resample(&v, [1.0, 1.0, 2.0], -1000.0).unwrap();
                let c = crop_isocenter(&r, 20.0, -1000.0).unwrap();
                for a in 0..3 {
                    prop_assert!((c.isocenter_mm[a] - v.isocenter_mm[a]).abs() < 1e-6);
                }
            }
        }
    }
}
