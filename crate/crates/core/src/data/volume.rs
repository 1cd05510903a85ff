//! Volumes with spacing and orientation, and the spatial/intensity stages of preprocessing.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Direction a voxel axis increases toward, in patient coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AxisCode {
    R,
    L,
    A,
    P,
    S,
    I,
}

impl AxisCode {
    /// World axis (0 = left-right, 1 = posterior-anterior, 2 = inferior-superior) and sign.
    fn world(self) -> (usize, bool) {
        match self {
            AxisCode::R => (0, true),
            AxisCode::L => (0, false),
            AxisCode::A => (1, true),
            AxisCode::P => (1, false),
            AxisCode::S => (2, true),
            AxisCode::I => (2, false),
        }
    }

    fn from_world(axis: usize, positive: bool) -> Self {
        match (axis, positive) {
            (0, true) => AxisCode::R,
            (0, false) => AxisCode::L,
            (1, true) => AxisCode::A,
            (1, false) => AxisCode::P,
            (2, true) => AxisCode::S,
            _ => AxisCode::I,
        }
    }

    fn letter(self) -> char {
        match self {
            AxisCode::R => 'R',
            AxisCode::L => 'L',
            AxisCode::A => 'A',
            AxisCode::P => 'P',
            AxisCode::S => 'S',
            AxisCode::I => 'I',
        }
    }
}

/// Axis code triple such as `RAS` or `LPS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Orientation(pub [AxisCode; 3]);

pub const RAS: Orientation = Orientation([AxisCode::R, AxisCode::A, AxisCode::S]);

impl Orientation {
    pub fn new(codes: [AxisCode; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for c in codes {
            let (axis, _) = c.world();
            if seen[axis] {
                return Err(Error::InvalidRange(format!(
                    "orientation {} repeats a world axis",
                    Orientation(codes)
                )));
            }
            seen[axis] = true;
        }
        Ok(Orientation(codes))
    }

    /// Orientation of the voxel axes of a 3×3 voxel-to-world (RAS) matrix, rows are world axes.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        let mut codes = [AxisCode::R; 3];
        for (j, code) in codes.iter_mut().enumerate() {
            let col = [m[0][j], m[1][j], m[2][j]];
            let (k, v) = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(k, v)| (k, *v))
                .unwrap_or((0, 0.0));
            if !v.is_finite() || v == 0.0 {
                return Err(Error::InvalidRange(format!("affine column {j} is degenerate")));
            }
            *code = AxisCode::from_world(k, v > 0.0);
        }
        Orientation::new(codes)
    }

    /// Diagonal voxel-to-world matrix for these codes with the given spacing.
    pub fn to_matrix(self, spacing: [f64; 3]) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for (j, c) in self.0.iter().enumerate() {
            let (k, pos) = c.world();
            m[k][j] = if pos { spacing[j] } else { -spacing[j] };
        }
        m
    }

    pub fn is_ras(self) -> bool {
        self == RAS
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in self.0 {
            write!(f, "{}", c.letter())?;
        }
        Ok(())
    }
}

impl FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let chars: Vec<char> = s.trim().to_ascii_uppercase().chars().collect();
        if chars.len() != 3 {
            return Err(Error::InvalidRange(format!("orientation code {s:?} must have 3 letters")));
        }
        let mut codes = [AxisCode::R; 3];
        for (c, code) in chars.iter().zip(codes.iter_mut()) {
            *code = match c {
                'R' => AxisCode::R,
                'L' => AxisCode::L,
                'A' => AxisCode::A,
                'P' => AxisCode::P,
                'S' => AxisCode::S,
                'I' => AxisCode::I,
                other => return Err(Error::InvalidRange(format!("unknown axis code {other:?}"))),
            };
        }
        Orientation::new(codes)
    }
}

impl Serialize for Orientation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Orientation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A 3-d voxel grid with millimetre spacing and axis orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub voxels: Array3<T>,
    pub spacing: [f64; 3],
    pub orientation: Orientation,
}

impl<T: Copy> Volume<T> {
    pub fn new(voxels: Array3<T>, spacing: [f64; 3], orientation: Orientation) -> Result<Self> {
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidRange(format!("spacing {spacing:?} must be positive")));
        }
        if voxels.is_empty() {
            return Err(Error::Degenerate("volume has an empty extent".into()));
        }
        Ok(Volume {
            voxels,
            spacing,
            orientation,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }

    /// Permutes and flips axes so that they point right, anterior and superior.
    pub fn reorient_ras(&self) -> Volume<T> {
        self.reorient(RAS)
    }

    /// Permutes and flips axes so that they follow `target`; voxel values are only moved.
    pub fn reorient(&self, target: Orientation) -> Volume<T> {
        if self.orientation == target {
            return self.clone();
        }
        let mut src = [0usize; 3];
        let mut flip = [false; 3];
        for (k, t) in target.0.iter().enumerate() {
            let (tw, tpos) = t.world();
            for (j, c) in self.orientation.0.iter().enumerate() {
                let (w, pos) = c.world();
                if w == tw {
                    src[k] = j;
                    flip[k] = pos != tpos;
                }
            }
        }
        let mut view = self.voxels.view().permuted_axes(src);
        for (k, &f) in flip.iter().enumerate() {
            if f {
                view.invert_axis(Axis(k));
            }
        }
        let voxels = view.as_standard_layout().into_owned();
        Volume {
            voxels,
            spacing: [self.spacing[src[0]], self.spacing[src[1]], self.spacing[src[2]]],
            orientation: target,
        }
    }

    /// Mid-index slice along the first (left-right after reorientation) axis, as `[Y, Z]`.
    pub fn central_slice(&self) -> Array2<T> {
        let x = self.voxels.shape()[0] / 2;
        self.voxels.index_axis(Axis(0), x).to_owned()
    }
}

/// Index-space source coordinate of output voxel `i` when resampling `spacing` to `target`.
///
/// Voxel centres are aligned, so equal spacings map every index onto itself.
fn source_coord(i: usize, spacing: f64, target: f64, len: usize) -> f64 {
    let x = (i as f64 + 0.5) * target / spacing - 0.5;
    x.clamp(0.0, (len - 1) as f64)
}

fn resampled_len(len: usize, spacing: f64, target: f64) -> usize {
    ((len as f64 * spacing / target).round() as usize).max(1)
}

fn resample_axis<T: Copy + Default>(
    a: &Array3<T>,
    axis: usize,
    spacing: f64,
    target: f64,
    pick: &impl Fn(T, T, f64) -> T,
) -> Array3<T> {
    let len = a.shape()[axis];
    let new_len = resampled_len(len, spacing, target);
    let mut shape = [a.shape()[0], a.shape()[1], a.shape()[2]];
    shape[axis] = new_len;
    let mut out = Array3::from_elem(shape, T::default());
    let coords: Vec<(usize, usize, f64)> = (0..new_len)
        .map(|i| {
            let x = source_coord(i, spacing, target, len);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, x - i0 as f64)
        })
        .collect();
    for (src, mut dst) in a.lanes(Axis(axis)).into_iter().zip(out.lanes_mut(Axis(axis))) {
        for (o, &(i0, i1, frac)) in dst.iter_mut().zip(&coords) {
            *o = if frac == 0.0 { src[i0] } else { pick(src[i0], src[i1], frac) };
        }
    }
    out
}

impl Volume<f32> {
    /// Trilinear resampling to isotropic `target_mm` spacing.
    pub fn resample_linear(&self, target_mm: f64) -> Result<Volume<f32>> {
        self.resample_with(target_mm, &|a: f32, b: f32, f: f64| {
            (a as f64 * (1.0 - f) + b as f64 * f) as f32
        })
    }

    /// Divides by the 98th-percentile intensity, clips to [0, 1] and scales to [0, 255].
    pub fn normalize_intensity(&self, percentile: f64) -> Result<Volume<f32>> {
        let mut sorted: Vec<f32> = self.voxels.iter().copied().collect();
        if sorted.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidRange("volume contains non-finite intensities".into()));
        }
        sorted.sort_by(f32::total_cmp);
        let ref_value = nearest_rank(&sorted, percentile)?;
        if ref_value <= 0.0 {
            return Err(Error::Degenerate(format!(
                "{percentile}th percentile intensity is {ref_value}; cannot normalize"
            )));
        }
        let scale = 255.0 / ref_value;
        let voxels = self.voxels.mapv(|v| {
            if v >= ref_value {
                255.0
            } else {
                (v * scale).clamp(0.0, 255.0)
            }
        });
        Ok(Volume {
            voxels,
            spacing: self.spacing,
            orientation: self.orientation,
        })
    }
}

impl<T: Copy + Default> Volume<T> {
    /// Nearest-neighbour resampling to isotropic `target_mm` spacing; introduces no new values.
    pub fn resample_nearest(&self, target_mm: f64) -> Result<Volume<T>> {
        self.resample_with(target_mm, &|a: T, b: T, f: f64| if f < 0.5 { a } else { b })
    }

    fn resample_with(&self, target_mm: f64, pick: &impl Fn(T, T, f64) -> T) -> Result<Volume<T>> {
        if !target_mm.is_finite() || target_mm <= 0.0 {
            return Err(Error::InvalidRange(format!("target spacing {target_mm} must be positive")));
        }
        if self.voxels.is_empty() {
            return Err(Error::Degenerate("volume has an empty extent".into()));
        }
        let mut voxels = self.voxels.clone();
        for axis in 0..3 {
            if self.spacing[axis] != target_mm {
                voxels = resample_axis(&voxels, axis, self.spacing[axis], target_mm, pick);
            }
        }
        Ok(Volume {
            voxels,
            spacing: [target_mm; 3],
            orientation: self.orientation,
        })
    }
}

/// Nearest-rank percentile of sorted data: the element at 1-based rank `ceil(q/100 · n)`.
pub fn nearest_rank(sorted: &[f32], q: f64) -> Result<f32> {
    if sorted.is_empty() {
        return Err(Error::Degenerate("percentile of an empty set".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidRange(format!("percentile {q} outside [0, 100]")));
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

fn pad_square<T: Copy + Default>(a: &Array2<T>) -> Array2<T> {
    let (h, w) = a.dim();
    let m = h.max(w);
    if h == w {
        return a.clone();
    }
    let mut out = Array2::from_elem((m, m), T::default());
    let (oy, ox) = ((m - h) / 2, (m - w) / 2);
    out.slice_mut(ndarray::s![oy..oy + h, ox..ox + w]).assign(a);
    out
}

fn resize_square<T: Copy + Default>(a: &Array2<T>, size: usize, pick: impl Fn(&Array2<T>, f64, f64) -> T) -> Array2<T> {
    let m = a.dim().0;
    if m == size {
        return a.clone();
    }
    let coord = |i: usize| ((i as f64 + 0.5) * m as f64 / size as f64 - 0.5).clamp(0.0, (m - 1) as f64);
    Array2::from_shape_fn((size, size), |(i, j)| pick(a, coord(i), coord(j)))
}

/// Centre-pads to a square with zeros, then bilinearly resizes to `size × size`.
pub fn resize_image(a: &Array2<f32>, size: usize) -> Result<Array2<f32>> {
    check_resizable(a.dim(), size)?;
    let sq = pad_square(a);
    Ok(resize_square(&sq, size, |a, y, x| {
        let m = a.dim().0;
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(m - 1), (x0 + 1).min(m - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let v = a[(y0, x0)] as f64 * (1.0 - fy) * (1.0 - fx)
            + a[(y0, x1)] as f64 * (1.0 - fy) * fx
            + a[(y1, x0)] as f64 * fy * (1.0 - fx)
            + a[(y1, x1)] as f64 * fy * fx;
        v as f32
    }))
}

/// Centre-pads to a square with background, then nearest-neighbour resizes to `size × size`.
pub fn resize_labels<T: Copy + Default>(a: &Array2<T>, size: usize) -> Result<Array2<T>> {
    check_resizable(a.dim(), size)?;
    let sq = pad_square(a);
    Ok(resize_square(&sq, size, |a, y, x| {
        a[((y + 0.5).floor() as usize, (x + 0.5).floor() as usize)]
    }))
}

fn check_resizable((h, w): (usize, usize), size: usize) -> Result<()> {
    if h == 0 || w == 0 || size == 0 {
        return Err(Error::Degenerate(format!("cannot resize a {h}×{w} slice to {size}")));
    }
    Ok(())
}
