//! Dataset manifests, the synthetic scene generator, configuration, and the
//! command-line front end.

pub mod cli;
mod config;
mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{Config, EvalConfig, SynthConfig};
pub use synth::{face_crop_box, frontal_cameras, generate_synthetic, sphere_trace, SceneSpec, SynthOutput};

use crate::diffcore::write_atomic;
use crate::error::{Error, Result};
use crate::meshing::Aabb;
use crate::renderer::{det3, Camera, Image, Vec3};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRecord {
    /// Relative to the manifest directory.
    pub image: PathBuf,
    pub intrinsics: [[f64; 3]; 3],
    /// Row-major camera-to-world.
    pub c2w: [[f64; 4]; 4],
    pub split: Split,
    pub width: usize,
    pub height: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdentityRecord {
    pub id: String,
    pub views: Vec<ViewRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_mesh: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Free-form note on scene units.
    pub scene_scale: String,
    pub background: Vec3,
    /// Region used when comparing meshes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_box: Option<Aabb>,
    pub identities: Vec<IdentityRecord>,
}

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(&dir.join(MANIFEST_NAME), text.as_bytes())
    }
}

/// A posed view with a validated camera; the image decodes on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image_path: PathBuf,
    pub camera: Camera,
    pub split: Split,
}

impl View {
    pub fn load_image(&self) -> Result<Image> {
        let img = Image::load_png(&self.image_path)?;
        if img.width != self.camera.width || img.height != self.camera.height {
            return Err(Error::data(
                &self.image_path,
                format!("image is {}×{}, camera expects {}×{}", img.width, img.height, self.camera.width, self.camera.height),
            ));
        }
        Ok(img)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Identity {
    pub id: String,
    pub views: Vec<View>,
    pub gt_mesh: Option<PathBuf>,
}

impl Identity {
    pub fn views_in(&self, split: Split) -> impl Iterator<Item = &View> {
        self.views.iter().filter(move |v| v.split == split)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub background: Vec3,
    pub crop_box: Option<Aabb>,
    pub identities: Vec<Identity>,
}

impl Dataset {
    pub fn identity(&self, id: &str) -> Result<&Identity> {
        self.identities.iter().find(|i| i.id == id).ok_or_else(|| Error::UnknownIdentity(id.to_string()))
    }

    /// Keeps only the listed identities, in the given order.
    pub fn subset(&self, ids: &[String]) -> Result<Dataset> {
        let identities = ids.iter().map(|id| self.identity(id).cloned()).collect::<Result<_>>()?;
        Ok(Dataset { identities, ..self.clone() })
    }
}

/// Re-orthonormalizes a nearly orthonormal rotation (Gram–Schmidt on the
/// columns); deviations above `tol` or a reflection are rejected.
pub fn normalize_rotation(r: [[f64; 3]; 3], tol: f64) -> std::result::Result<[[f64; 3]; 3], String> {
    let mut dev = 0.0f64;
    for i in 0..3 {
        for j in 0..3 {
            let d: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            dev = dev.max((d - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    if !(dev <= tol) {
        return Err(format!("rotation deviates from orthonormal by {dev:e}"));
    }
    if det3(&r) < 0.0 {
        return Err("rotation has determinant -1".into());
    }
    let col = |c: usize| [r[0][c], r[1][c], r[2][c]];
    let unit = |v: Vec3| {
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let x = unit(col(0));
    let y0 = col(1);
    let d = x[0] * y0[0] + x[1] * y0[1] + x[2] * y0[2];
    let y = unit([y0[0] - d * x[0], y0[1] - d * x[1], y0[2] - d * x[2]]);
    let z = crate::renderer::cross(x, y);
    Ok([[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]])
}

fn png_size(path: &Path) -> Result<(usize, usize)> {
    let file = std::fs::File::open(path).map_err(|e| Error::data(path, format!("cannot open image: {e}")))?;
    let dec = png::Decoder::new(std::io::BufReader::new(file));
    let reader = dec.read_info().map_err(|e| Error::data(path, format!("not a decodable PNG: {e}")))?;
    let info = reader.info();
    Ok((info.width as usize, info.height as usize))
}

/// Loads and validates a manifest (a file, or a directory holding
/// `manifest.json`). Image headers are checked; pixels decode later.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = if path.is_dir() { path.join(MANIFEST_NAME) } else { path.to_path_buf() };
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::data(&file, e.to_string()))?;
    if manifest.identities.is_empty() {
        return Err(Error::data(&file, "manifest lists no identities"));
    }
    let mut identities = Vec::with_capacity(manifest.identities.len());
    for rec in manifest.identities {
        if identities.iter().any(|i: &Identity| i.id == rec.id) {
            return Err(Error::data(&file, format!("duplicate identity `{}`", rec.id)));
        }
        let mut views = Vec::with_capacity(rec.views.len());
        let mut dims = None;
        for (vi, v) in rec.views.iter().enumerate() {
            let ctx = |m: String| Error::data(&file, format!("identity `{}` view {vi}: {m}", rec.id));
            let m = v.c2w;
            if m[3] != [0.0, 0.0, 0.0, 1.0] {
                return Err(ctx("camera-to-world bottom row must be [0, 0, 0, 1]".into()));
            }
            let r = [[m[0][0], m[0][1], m[0][2]], [m[1][0], m[1][1], m[1][2]], [m[2][0], m[2][1], m[2][2]]];
            let r = normalize_rotation(r, 1e-8).map_err(ctx)?;
            let camera = Camera::new(v.intrinsics, r, [m[0][3], m[1][3], m[2][3]], v.width, v.height).map_err(|e| ctx(e.to_string()))?;
            let image_path = root.join(&v.image);
            let size = png_size(&image_path)?;
            if size != (v.width, v.height) {
                return Err(Error::data(&image_path, format!("image is {}×{}, manifest says {}×{}", size.0, size.1, v.width, v.height)));
            }
            if *dims.get_or_insert(size) != size {
                return Err(ctx("image dimensions differ within the identity".into()));
            }
            views.push(View { image_path, camera, split: v.split });
        }
        let gt_mesh = rec.gt_mesh.map(|p| root.join(p));
        if let Some(p) = &gt_mesh {
            if !p.exists() {
                return Err(Error::data(p, "ground-truth mesh not found"));
            }
        }
        identities.push(Identity { id: rec.id, views, gt_mesh });
    }
    Ok(Dataset { root, background: manifest.background, crop_box: manifest.crop_box, identities })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_normalization() {
        let eps = 1e-10;
        let r = [[1.0, eps, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let n = normalize_rotation(r, 1e-8).unwrap();
        assert!((det3(&n) - 1.0).abs() < 1e-14);
        assert!(normalize_rotation([[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], 1e-8).is_err());
        let flip = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(normalize_rotation(flip, 1e-8).unwrap_err().contains("determinant"));
    }
}
