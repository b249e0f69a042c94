//! Raw volume files: `<name>.f32raw` (little-endian f32, x-fastest) plus a JSON
//! sidecar `<name>.json` holding dims, voxel size and traversal order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume3D, VoxelSize};

pub const RAW_EXT: &str = "f32raw";
pub const SIDECAR_EXT: &str = "json";
pub const ORDER_X_FASTEST: &str = "x-fastest";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub voxel_size_um: [f64; 3],
    pub order: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ReadOptions {
    /// Accept NaN and infinities instead of failing.
    pub allow_non_finite: bool,
}

/// Resolves `<name>`, `<name>.f32raw` or `<name>.json` to the raw and sidecar paths.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some(RAW_EXT) | Some(SIDECAR_EXT) => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut raw = base.clone().into_os_string();
    raw.push(".");
    raw.push(RAW_EXT);
    let mut side = base.into_os_string();
    side.push(".");
    side.push(SIDECAR_EXT);
    (raw.into(), side.into())
}

pub fn write_volume(vol: &Volume3D, path: &Path) -> Result<()> {
    let (raw, side) = volume_paths(path);
    if let Some(dir) = raw.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let sidecar = Sidecar {
        dims: vol.dims().as_array(),
        voxel_size_um: vol.voxel_size().0,
        order: ORDER_X_FASTEST.to_string(),
    };
    let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&side, json).map_err(|e| Error::io(&side, e))?;
    let mut bytes = Vec::with_capacity(4 * vol.len());
    for &v in vol.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

pub fn read_volume(path: &Path) -> Result<Volume3D> {
    read_volume_with(path, ReadOptions::default())
}

pub fn read_volume_with(path: &Path, opts: ReadOptions) -> Result<Volume3D> {
    let (raw, side) = volume_paths(path);
    if !side.exists() {
        return Err(Error::MissingSidecar(side));
    }
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::Sidecar { path: side.clone(), reason: e.to_string() })?;
    if sidecar.order != ORDER_X_FASTEST {
        return Err(Error::Sidecar {
            path: side,
            reason: format!("unsupported order {:?}", sidecar.order),
        });
    }
    let dims = Dims::from_array(sidecar.dims);
    let [rx, ry, rz] = sidecar.voxel_size_um;
    let voxel = VoxelSize::new(rx, ry, rz)?;
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::DataLength { dims, len: bytes.len() / 4, expected: dims.len() });
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if !opts.allow_non_finite {
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { path: raw, index });
        }
    }
    Volume3D::new(dims, voxel, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_is_bit_exact_for_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = Dims::new(5, 3, 4);
        let v = Volume3D::from_fn(d, VoxelSize::new(0.05, 0.05, 0.1).unwrap(), |_, _, _| {
            rng.random_range(-10.0f32..10.0) as f64
        });
        let p = dir.path().join("vol");
        write_volume(&v, &p).unwrap();
        let back = read_volume(&dir.path().join("vol.f32raw")).unwrap();
        assert_eq!(back, v);
        let back2 = read_volume(&dir.path().join("vol.json")).unwrap();
        assert_eq!(back2, v);
        // Rewriting produces identical bytes.
        let p2 = dir.path().join("vol2");
        write_volume(&back, &p2).unwrap();
        assert_eq!(fs::read(dir.path().join("vol.f32raw")).unwrap(), fs::read(dir.path().join("vol2.f32raw")).unwrap());
    }

    #[test]
    fn sidecar_layout() {
        let dir = tempfile::tempdir().unwrap();
        let v = Volume3D::zeros(Dims::new(2, 3, 4), VoxelSize::new(0.05, 0.05, 0.1).unwrap());
        write_volume(&v, &dir.path().join("a")).unwrap();
        let text = fs::read_to_string(dir.path().join("a.json")).unwrap();
        let val: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(val["dims"], serde_json::json!([2, 3, 4]));
        assert_eq!(val["order"], "x-fastest");
        assert_eq!(val["voxel_size_um"][2], 0.1);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let side = Sidecar { dims: [2, 2, 2], voxel_size_um: [1.0, 1.0, 1.0], order: ORDER_X_FASTEST.into() };
        fs::write(dir.path().join("b.json"), serde_json::to_string(&side).unwrap()).unwrap();
        let bytes: Vec<u8> = (0..7).flat_map(|i| (i as f32).to_le_bytes()).collect();
        fs::write(dir.path().join("b.f32raw"), bytes).unwrap();
        let err = read_volume(&dir.path().join("b")).unwrap_err();
        assert!(matches!(err, Error::DataLength { len: 7, expected: 8, .. }), "{err}");
    }

    #[test]
    fn nan_is_reported_with_flat_index() {
        let dir = tempfile::tempdir().unwrap();
        let mut v = Volume3D::zeros(Dims::new(3, 3, 3), VoxelSize::isotropic(1.0).unwrap());
        v.data_mut()[13] = f64::NAN;
        write_volume(&v, &dir.path().join("c")).unwrap();
        let err = read_volume(&dir.path().join("c")).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 13, .. }), "{err}");
        let ok = read_volume_with(&dir.path().join("c"), ReadOptions { allow_non_finite: true }).unwrap();
        assert!(ok.data()[13].is_nan());
    }

    #[test]
    fn missing_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("d.f32raw"), [0u8; 4]).unwrap();
        assert!(matches!(read_volume(&dir.path().join("d")), Err(Error::MissingSidecar(_))));
    }
}
