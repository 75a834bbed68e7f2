//! Analytic head-like scenes with ground truth, rendered by sphere tracing.
//!
//! Every identity shares one base ellipsoid and a nose bump; identities
//! differ by an anisotropic scaling, the nose height, a high-frequency bump
//! field and their albedo.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{IdentityRecord, Manifest, Split, SynthConfig, ViewRecord};
use crate::error::{Error, Result};
use crate::meshing::{marching_cubes, sample_grid, Aabb, GridSpec, TriangleMesh};
use crate::renderer::{dot, normalize, Camera, Image, Ray, Vec3};

const BASE_RADII: Vec3 = [0.42, 0.52, 0.46];
const NOSE_WIDTH: f64 = 0.09;
const LIGHT: Vec3 = [0.4, 0.6, 1.0];
const AMBIENT: f64 = 0.35;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: String,
    pub radii: Vec3,
    pub nose_height: f64,
    pub bump_amplitude: f64,
    pub bump_frequency: f64,
    pub bump_phase: Vec3,
    pub albedo: Vec3,
    pub albedo_variation: f64,
    pub background: Vec3,
}

impl SceneSpec {
    /// Identity `index` of a scene family; depends only on `(seed, index)`.
    pub fn random(seed: u64, index: usize, background: Vec3) -> Self {
        let mut rng = identity_rng(seed, index, 0);
        let radii = BASE_RADII.map(|r| r * rng.gen_range(0.9..1.1));
        let hue = rng.gen_range(0.0..std::f64::consts::TAU);
        let albedo = [0.0, 2.1, 4.2].map(|o: f64| 0.55 + 0.3 * (hue + o).cos());
        Self {
            id: format!("id{index}"),
            radii,
            nose_height: rng.gen_range(0.05..0.09),
            bump_amplitude: rng.gen_range(0.015..0.025),
            bump_frequency: rng.gen_range(10.0..14.0),
            bump_phase: std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU)),
            albedo,
            albedo_variation: 0.15,
            background,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let min_r = self.radii.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min_r > 0.0) {
            return Err(Error::Input("ellipsoid radii must be positive".into()));
        }
        if !(self.bump_amplitude.abs() < 0.2 * min_r) {
            return Err(Error::Input(format!("bump amplitude {} exceeds 0.2 × min radius", self.bump_amplitude)));
        }
        Ok(())
    }

    /// Upper bound on the gradient norm of the unnormalized field.
    fn lipschitz(&self) -> f64 {
        1.0 + self.nose_height / NOSE_WIDTH * (-0.5f64).exp() + self.bump_amplitude.abs() * self.bump_frequency * 3f64.sqrt()
    }

    /// Signed distance lower bound (negative inside).
    pub fn sdf(&self, p: Vec3) -> f64 {
        let r = self.radii;
        let q = [p[0] / r[0], p[1] / r[1], p[2] / r[2]];
        let min_r = r[0].min(r[1]).min(r[2]);
        let ellipsoid = (dot(q, q).sqrt() - 1.0) * min_r;
        let nose_c = [0.0, -0.05 * r[1], r[2]];
        let dn = [p[0] - nose_c[0], p[1] - nose_c[1], p[2] - nose_c[2]];
        let nose = self.nose_height * (-dot(dn, dn) / (2.0 * NOSE_WIDTH * NOSE_WIDTH)).exp();
        let f = self.bump_frequency;
        let ph = self.bump_phase;
        let bump = self.bump_amplitude * (f * p[0] + ph[0]).sin() * (f * p[1] + ph[1]).sin() * (f * p[2] + ph[2]).sin();
        (ellipsoid - nose - bump) / self.lipschitz()
    }

    pub fn normal(&self, p: Vec3) -> Vec3 {
        let h = 1e-5;
        let g: Vec3 = std::array::from_fn(|a| {
            let (mut pa, mut pb) = (p, p);
            pa[a] += h;
            pb[a] -= h;
            self.sdf(pa) - self.sdf(pb)
        });
        normalize(g)
    }

    pub fn albedo_at(&self, p: Vec3) -> Vec3 {
        let m = 1.0 + self.albedo_variation * (4.0 * p[1] + 2.0 * p[0]).sin();
        self.albedo.map(|a| (a * m).clamp(0.0, 1.0))
    }

    /// Lambertian shading under a fixed directional light.
    pub fn shade(&self, p: Vec3) -> Vec3 {
        let l = normalize(LIGHT);
        let k = AMBIENT + (1.0 - AMBIENT) * dot(self.normal(p), l).max(0.0);
        self.albedo_at(p).map(|a| a * k)
    }

    pub fn render(&self, camera: &Camera) -> Result<Image> {
        let mut img = Image::filled(camera.width, camera.height, self.background);
        for v in 0..camera.height {
            for u in 0..camera.width {
                let ray = Ray::bounded(camera.center(), camera.pixel_direction(u, v)?);
                if let Some(t) = sphere_trace(|p| self.sdf(p), &ray, 512, 1e-6) {
                    img.pixels[v * camera.width + u] = self.shade(ray.at(t));
                }
            }
        }
        Ok(img)
    }

    pub fn mesh(&self, resolution: usize) -> Result<TriangleMesh> {
        let grid = sample_grid(|pts| Ok(pts.iter().map(|&p| self.sdf(p)).collect()), GridSpec::cubic(resolution, 1.0))?;
        Ok(marching_cubes(&grid, 0.0))
    }
}

fn identity_rng(seed: u64, index: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((index as u64) << 8 | purpose);
    rng
}

/// Marches `t += sdf(r(t))` from `near` until `|sdf| < eps` (hit) or the
/// ray passes `far` (miss).
pub fn sphere_trace(sdf: impl Fn(Vec3) -> f64, ray: &Ray, max_steps: usize, eps: f64) -> Option<f64> {
    let mut t = ray.near;
    for _ in 0..max_steps {
        if t > ray.far {
            return None;
        }
        let d = sdf(ray.at(t));
        if d.abs() < eps {
            return Some(t);
        }
        t += d;
    }
    None
}

/// Front-facing region used for mesh comparison.
pub fn face_crop_box() -> Aabb {
    Aabb { min: [-0.6, -0.65, 0.0], max: [0.6, 0.65, 0.8] }
}

/// Cameras on the frontal arc (±60° azimuth, ±15° elevation) looking at the
/// origin. Azimuths are stratified; the last `n_test` views are drawn from
/// interior strata so held-out views interpolate between training views.
pub fn frontal_cameras(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(Camera, Split)>> {
    let n = cfg.views;
    let fov = cfg.fov_degrees.to_radians();
    let focal = 0.5 * cfg.image_size as f64 / (0.5 * fov).tan();
    let mut strata: Vec<usize> = (0..n).collect();
    let n_test = cfg.test_views.min(n.saturating_sub(1));
    // Interior strata, spread evenly, become held-out views.
    let test: Vec<usize> = (0..n_test).map(|k| (k + 1) * n / (n_test + 1)).collect();
    strata.retain(|s| !test.contains(s));
    strata.extend(&test);
    strata
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let az = (-60.0 + 120.0 * (s as f64 + rng.gen_range(0.25..0.75)) / n as f64).to_radians();
            let el = rng.gen_range(-15.0f64..15.0).to_radians();
            let eye = [cfg.distance * el.cos() * az.sin(), cfg.distance * el.sin(), cfg.distance * el.cos() * az.cos()];
            let cam = Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], focal, cfg.image_size, cfg.image_size)?;
            Ok((cam, if i + n_test >= n { Split::Test } else { Split::Train }))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub manifest: Manifest,
    pub specs: Vec<SceneSpec>,
    pub root: PathBuf,
}

/// Writes `cfg.identities` identities × `cfg.views` PNG views, ground-truth
/// OBJ meshes and `manifest.json` under `out`.
pub fn generate_synthetic(cfg: &SynthConfig, out: &Path, seed: u64) -> Result<SynthOutput> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut identities = Vec::with_capacity(cfg.identities);
    let mut specs = Vec::with_capacity(cfg.identities);
    for index in 0..cfg.identities {
        let spec = SceneSpec::random(seed, index, cfg.background);
        spec.validate()?;
        let dir = out.join(&spec.id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut rng = identity_rng(seed, index, 1);
        let mut views = Vec::with_capacity(cfg.views);
        for (vi, (cam, split)) in frontal_cameras(cfg, &mut rng)?.into_iter().enumerate() {
            let rel = PathBuf::from(&spec.id).join(format!("view_{vi:02}.png"));
            spec.render(&cam)?.save_png(&out.join(&rel))?;
            views.push(ViewRecord {
                image: rel,
                intrinsics: cam.intrinsics,
                c2w: cam.c2w(),
                split,
                width: cam.width,
                height: cam.height,
            });
        }
        let mesh_rel = PathBuf::from(&spec.id).join("gt.obj");
        spec.mesh(cfg.mesh_resolution)?.save_obj(&out.join(&mesh_rel))?;
        identities.push(IdentityRecord { id: spec.id.clone(), views, gt_mesh: Some(mesh_rel) });
        specs.push(spec);
    }
    let manifest = Manifest {
        scene_scale: "unit scene; heads fit inside the radius-1.5 bounding sphere".into(),
        background: cfg.background,
        crop_box: Some(face_crop_box()),
        identities,
    };
    manifest.save(out)?;
    let scene = serde_json::to_string_pretty(&specs).map_err(|e| Error::Format(e.to_string()))?;
    crate::diffcore::write_atomic(&out.join("scene.json"), scene.as_bytes())?;
    Ok(SynthOutput { manifest, specs, root: out.to_path_buf() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_sphere(p: Vec3) -> f64 {
        dot(p, p).sqrt() - 1.0
    }

    #[test]
    fn trace_hits_and_misses() {
        let ray = Ray::bounded([0.0, 0.0, 3.0], [0.0, 0.0, -1.0]);
        let t = sphere_trace(unit_sphere, &ray, 100, 1e-9).unwrap();
        let p = ray.at(t);
        assert!(p[2] - 1.0 < 1e-9 && p[0] == 0.0);
        let miss = Ray::bounded([0.0, 1.2, 3.0], [0.0, 0.0, -1.0]);
        assert!(sphere_trace(unit_sphere, &miss, 100, 1e-9).is_none());
    }

    #[test]
    fn traced_hits_have_small_residual() {
        let spec = SceneSpec::random(4, 0, [1.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut hits = 0;
        for _ in 0..10_000 {
            let dir = normalize([rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08), -1.0]);
            let ray = Ray::bounded([rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), 2.5], dir);
            match sphere_trace(|p| spec.sdf(p), &ray, 512, 1e-6) {
                Some(t) => {
                    hits += 1;
                    assert!(spec.sdf(ray.at(t)).abs() < 1e-6);
                }
                // A miss must never pass through the interior.
                None => assert!((0..400).all(|k| spec.sdf(ray.at(ray.near + (ray.far - ray.near) * k as f64 / 399.0)) > 0.0)),
            }
        }
        assert!(hits > 9900, "{hits}");
    }

    #[test]
    fn identities_are_reproducible_and_distinct() {
        let a = SceneSpec::random(7, 1, [1.0; 3]);
        assert_eq!(a, SceneSpec::random(7, 1, [1.0; 3]));
        assert_ne!(a, SceneSpec::random(7, 2, [1.0; 3]));
        a.validate().unwrap();
    }

    #[test]
    fn sdf_is_a_distance_lower_bound() {
        // Sampled gradient norms stay at or below one.
        let spec = SceneSpec::random(3, 0, [1.0; 3]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let p: Vec3 = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let h = 1e-6;
            let g: Vec3 = std::array::from_fn(|a| {
                let mut q = p;
                q[a] += h;
                (spec.sdf(q) - spec.sdf(p)) / h
            });
            assert!(dot(g, g).sqrt() <= 1.0 + 1e-4);
        }
    }

    #[test]
    fn ground_truth_mesh_matches_field() {
        let spec = SceneSpec::random(5, 0, [1.0; 3]);
        let res = 48;
        let mesh = spec.mesh(res).unwrap();
        let voxel = 2.0 / (res - 1) as f64;
        let worst = mesh.vertices.iter().map(|&v| spec.sdf(v).abs()).fold(0.0, f64::max);
        assert!(worst < voxel, "{worst}");
    }
}
