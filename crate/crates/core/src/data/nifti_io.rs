//! NIfTI-1 reading and writing for volumes and output maps.

use std::path::Path;

use bytemuck::Pod;
use ndarray::{Array, Array3, ArrayBase, Data, Dimension, Ix3, RemoveAxis};
use nifti::writer::WriterOptions;
use nifti::{DataElement, IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};

use super::volume::{Orientation, Volume, RAS};
use crate::error::{Error, Result};

fn quaternion_matrix(h: &NiftiHeader) -> [[f64; 3]; 3] {
    let (b, c, d) = (h.quatern_b as f64, h.quatern_c as f64, h.quatern_d as f64);
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
    let s = [h.pixdim[1] as f64, h.pixdim[2] as f64, qfac * h.pixdim[3] as f64];
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * s[j];
        }
    }
    m
}

/// Voxel-to-world matrix: sform when set, else qform, else the pixdim diagonal (RAS).
fn voxel_matrix(h: &NiftiHeader) -> [[f64; 3]; 3] {
    if h.sform_code > 0 {
        let rows = [h.srow_x, h.srow_y, h.srow_z];
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = rows[i][j] as f64;
            }
        }
        m
    } else if h.qform_code > 0 {
        quaternion_matrix(h)
    } else {
        RAS.to_matrix([h.pixdim[1] as f64, h.pixdim[2] as f64, h.pixdim[3] as f64])
    }
}

fn spacing_of(m: &[[f64; 3]; 3]) -> [f64; 3] {
    let mut s = [0.0; 3];
    for (j, sj) in s.iter_mut().enumerate() {
        *sj = (0..3).map(|i| m[i][j] * m[i][j]).sum::<f64>().sqrt();
    }
    s
}

fn read_array<T: DataElement>(path: &Path) -> Result<(Array3<T>, NiftiHeader)> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| Error::file(path, format!("cannot read NIfTI: {e}")))?;
    let header = obj.header().clone();
    let arr = obj
        .into_volume()
        .into_ndarray::<T>()
        .map_err(|e| Error::file(path, format!("cannot decode voxels: {e}")))?;
    let shape = arr.shape().to_vec();
    if shape.len() < 3 && shape.iter().all(|&d| d > 0) {
        let mut s3 = shape.clone();
        s3.resize(3, 1);
        let arr = arr
            .into_shape_with_order(s3.as_slice())
            .map_err(|e| Error::file(path, e))?;
        return Ok((to_ix3(path, arr)?, header));
    }
    if shape.len() > 3 && shape[3..].iter().any(|&d| d != 1) {
        return Err(Error::file(path, format!("expected a 3-d volume, got shape {shape:?}")));
    }
    let arr = arr
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order(&shape[..3.min(shape.len())])
        .map_err(|e| Error::file(path, e))?;
    Ok((to_ix3(path, arr)?, header))
}

fn to_ix3<T: Clone>(path: &Path, arr: Array<T, ndarray::IxDyn>) -> Result<Array3<T>> {
    let arr = arr
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::file(path, e))?;
    Ok(arr.as_standard_layout().into_owned())
}

fn geometry(path: &Path, h: &NiftiHeader) -> Result<([f64; 3], Orientation)> {
    let m = voxel_matrix(h);
    let orientation = Orientation::from_matrix(m).map_err(|e| Error::file(path, e))?;
    let spacing = spacing_of(&m);
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::file(path, format!("invalid voxel spacing {spacing:?}")));
    }
    Ok((spacing, orientation))
}

/// Reads an intensity volume with its spacing and orientation.
pub fn read_image(path: &Path) -> Result<Volume<f32>> {
    let (voxels, h) = read_array::<f32>(path)?;
    let (spacing, orientation) = geometry(path, &h)?;
    Volume::new(voxels, spacing, orientation).map_err(|e| Error::file(path, e))
}

/// Reads an integer label volume; non-integral codes are rejected.
pub fn read_labels(path: &Path) -> Result<Volume<i32>> {
    let (voxels, h) = read_array::<f64>(path)?;
    if voxels.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
        return Err(Error::file(path, "label volume holds non-integer or negative codes"));
    }
    let (spacing, orientation) = geometry(path, &h)?;
    Volume::new(voxels.mapv(|v| v as i32), spacing, orientation).map_err(|e| Error::file(path, e))
}

fn header_for(spacing: [f64; 3], orientation: Orientation, description: &str) -> NiftiHeader {
    let mut h = NiftiHeader::default();
    let m = orientation.to_matrix(spacing);
    h.srow_x = [m[0][0] as f32, m[0][1] as f32, m[0][2] as f32, 0.0];
    h.srow_y = [m[1][0] as f32, m[1][1] as f32, m[1][2] as f32, 0.0];
    h.srow_z = [m[2][0] as f32, m[2][1] as f32, m[2][2] as f32, 0.0];
    h.sform_code = 1;
    h.qform_code = 0;
    h.pixdim = [1.0, spacing[0] as f32, spacing[1] as f32, spacing[2] as f32, 1.0, 1.0, 1.0, 1.0];
    h.xyzt_units = 2;
    let _ = h.set_description_str(description);
    h
}

/// Writes any array as NIfTI (gzip when the path ends in `.gz`).
pub fn write_array<A, S, D>(
    path: &Path,
    data: &ArrayBase<S, D>,
    spacing: [f64; 3],
    orientation: Orientation,
    description: &str,
) -> Result<()>
where
    S: Data<Elem = A>,
    A: DataElement + Pod,
    D: Dimension + RemoveAxis,
{
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let header = header_for(spacing, orientation, description);
    let gz = path.to_string_lossy().ends_with(".gz");
    WriterOptions::new(path)
        .reference_header(&header)
        .compress(gz)
        .write_nifti(data)
        .map_err(|e| Error::file(path, format!("cannot write NIfTI: {e}")))
}

pub fn write_image(path: &Path, v: &Volume<f32>) -> Result<()> {
    write_array(path, &v.voxels, v.spacing, v.orientation, "image")
}

pub fn write_labels(path: &Path, v: &Volume<i32>) -> Result<()> {
    write_array(path, &v.voxels, v.spacing, v.orientation, "labels")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let voxels = Array3::from_shape_fn((3, 4, 5), |(i, j, k)| (i * 20 + j * 5 + k) as f32);
        let v = Volume::new(voxels, [3.0, 1.0, 0.5], "LPS".parse().unwrap()).unwrap();
        let p = dir.path().join("v.nii.gz");
        write_image(&p, &v).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn qform_orientation() {
        let mut h = NiftiHeader::default();
        h.sform_code = 0;
        h.qform_code = 1;
        // 180° about z: x → -x, y → -y.
        h.quatern_b = 0.0;
        h.quatern_c = 0.0;
        h.quatern_d = 1.0;
        h.pixdim = [1.0, 2.0, 2.0, 4.0, 1.0, 1.0, 1.0, 1.0];
        let (s, o) = geometry(Path::new("x"), &h).unwrap();
        assert_eq!(o.to_string(), "LPS");
        assert!((s[2] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn truncated_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("broken.nii");
        std::fs::write(&p, b"not a nifti file").unwrap();
        let err = read_image(&p).unwrap_err();
        assert!(err.to_string().contains("broken.nii"));
        assert!(err.is_user_error());
    }
}
