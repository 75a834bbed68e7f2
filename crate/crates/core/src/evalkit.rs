//! Mesh and image metrics: surface sampling, Chamfer distance, PSNR, mesh
//! extraction from a trained model, color transfer and the metrics report.

use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{Dataset, EvalConfig, Split};
use crate::diffcore::write_atomic;
use crate::error::{Error, Result};
use crate::fields::{Model, Stage};
use crate::meshing::{crop_mesh, marching_cubes, sample_grid, Aabb, GridSpec, TriangleMesh};
use crate::renderer::{render_image, Camera, Image, ModelField, RenderSettings, Vec3};

/// Area-weighted uniform samples on a triangle mesh.
pub fn sample_surface_points<R: Rng>(mesh: &TriangleMesh, n: usize, rng: &mut R) -> Result<Vec<Vec3>> {
    let areas: Vec<f64> = (0..mesh.faces.len()).map(|f| mesh.face_area(f)).collect();
    let pick = WeightedIndex::new(&areas).map_err(|e| Error::Input(format!("cannot sample an empty or degenerate mesh: {e}")))?;
    Ok((0..n)
        .map(|_| {
            let f = mesh.faces[pick.sample(rng)];
            let (mut u, mut v): (f64, f64) = (rng.gen(), rng.gen());
            if u + v > 1.0 {
                (u, v) = (1.0 - u, 1.0 - v);
            }
            let [a, b, c] = f.map(|i| mesh.vertices[i]);
            std::array::from_fn(|k| a[k] + u * (b[k] - a[k]) + v * (c[k] - a[k]))
        })
        .collect())
}

fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Uniform bucket grid for exact nearest-neighbour queries.
struct PointGrid<'a> {
    points: &'a [Vec3],
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    start: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> PointGrid<'a> {
    fn new(points: &'a [Vec3]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let extent = (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max);
        let per_axis = (points.len() as f64).cbrt().ceil().max(1.0);
        let cell = if extent > 0.0 { extent / per_axis } else { 1.0 };
        let dims: [usize; 3] = std::array::from_fn(|k| (((hi[k] - lo[k]) / cell).floor() as usize + 1).min(1 << 10));
        let mut counts = vec![0usize; dims[0] * dims[1] * dims[2] + 1];
        let mut grid = Self { points, origin: lo, cell, dims, start: Vec::new(), order: Vec::new() };
        let keys: Vec<usize> = points.iter().map(|&p| grid.flat(grid.cell_of(p))).collect();
        for &k in &keys {
            counts[k + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        grid.start = counts;
        grid.order = order;
        grid
    }

    fn cell_of(&self, p: Vec3) -> [i64; 3] {
        std::array::from_fn(|k| (((p[k] - self.origin[k]) / self.cell).floor() as i64).clamp(0, self.dims[k] as i64 - 1))
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        (c[0] as usize) + self.dims[0] * ((c[1] as usize) + self.dims[1] * c[2] as usize)
    }

    /// Squared distance to the nearest point. Searches cubic shells of
    /// cells outward; a shell at Chebyshev radius `r + 1` cannot hold
    /// anything closer than `r · cell`.
    fn nearest2(&self, q: Vec3) -> f64 {
        let c = self.cell_of(q);
        // Slack from a query outside the box; only the smallest per-axis
        // gap is safe to add to every shell.
        let outside: f64 = (0..3)
            .map(|k| {
                let lo = self.origin[k] + c[k] as f64 * self.cell;
                (lo - q[k]).max(q[k] - (lo + self.cell)).max(0.0)
            })
            .fold(f64::INFINITY, f64::min);
        let max_r = self.dims.iter().copied().max().unwrap_or(1) as i64;
        let mut best = f64::INFINITY;
        for r in 0..=max_r {
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let n = [c[0] + dx, c[1] + dy, c[2] + dz];
                        if (0..3).any(|k| n[k] < 0 || n[k] >= self.dims[k] as i64) {
                            continue;
                        }
                        let f = self.flat(n);
                        for &i in &self.order[self.start[f]..self.start[f + 1]] {
                            best = best.min(dist2(q, self.points[i]));
                        }
                    }
                }
            }
            let reach = outside + r as f64 * self.cell;
            if best <= reach * reach {
                break;
            }
        }
        best
    }
}

/// Mean squared distance from each point of `a` to its nearest point in `b`.
pub fn directed_chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("Chamfer distance needs non-empty point sets".into()));
    }
    let grid = PointGrid::new(b);
    Ok(a.iter().map(|&q| grid.nearest2(q)).sum::<f64>() / a.len() as f64)
}

/// Symmetric Chamfer distance: the sum of both directed mean squared
/// nearest-neighbour distances.
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    Ok(directed_chamfer(a, b)? + directed_chamfer(b, a)?)
}

/// PSNR cap for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// `10 log₁₀(1 / MSE)` over the pixels where `mask` is set (all pixels
/// without a mask), for images in `[0, 1]`.
pub fn psnr(pred: &Image, gt: &Image, mask: Option<&[bool]>) -> Result<f64> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Shape(format!("{}×{} vs {}×{} image", pred.width, pred.height, gt.width, gt.height)));
    }
    if mask.is_some_and(|m| m.len() != gt.pixels.len()) {
        return Err(Error::Shape("mask does not match the image".into()));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (i, (p, g)) in pred.pixels.iter().zip(&gt.pixels).enumerate() {
        if mask.map_or(true, |m| m[i]) {
            sum += dist2(*p, *g);
            count += 3;
        }
    }
    if count == 0 {
        return Err(Error::Input("PSNR mask selects no pixels".into()));
    }
    let mse = sum / count as f64;
    Ok(if mse > 0.0 { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP) } else { PSNR_CAP })
}

/// Zero level set of an identity's SDF (`ŝ` for stage-2 models) on a cubic
/// grid.
pub fn extract_mesh(model: &Model, identity: &str, resolution: usize, half_extent: f64) -> Result<TriangleMesh> {
    let idx = model.identity_index(identity)?;
    let refined = model.stage == Stage::Two;
    let grid = sample_grid(|pts| model.sdf_batch(pts, idx, refined), GridSpec::cubic(resolution, half_extent))?;
    Ok(marching_cubes(&grid, 0.0))
}

/// Renders `geometry`'s shape with `color`'s appearance code.
pub fn color_transfer_render(model: &Model, geometry: &str, color: &str, camera: &Camera, settings: &RenderSettings) -> Result<Image> {
    let g = model.identity_index(geometry)?;
    let c = model.identity_index(color)?;
    let mut field = ModelField::new(model, model.stage)?;
    field.color_source = Some(c);
    Ok(render_image(camera, &field, g, settings)?.0)
}

/// Chamfer distance between a reconstruction and the ground-truth mesh,
/// both cropped to `crop` when given.
pub fn mesh_chamfer(pred: &TriangleMesh, gt: &TriangleMesh, crop: Option<&Aabb>, samples: usize, seed: u64) -> Result<f64> {
    let (p, g) = match crop {
        Some(b) => (crop_mesh(pred, b), crop_mesh(gt, b)),
        None => (pred.clone(), gt.clone()),
    };
    if p.is_empty() {
        return Err(Error::Numeric("reconstruction has no surface inside the evaluation region".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = sample_surface_points(&p, samples, &mut rng)?;
    let b = sample_surface_points(&g, samples, &mut rng)?;
    chamfer_distance(&a, &b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityMetrics {
    pub identity: String,
    pub views: usize,
    /// Chamfer distance to ground truth, when a ground-truth mesh exists.
    pub cd: Option<f64>,
    pub psnr_train: Option<f64>,
    pub psnr_novel: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub stage: u8,
    pub identities: Vec<IdentityMetrics>,
    pub mean: IdentityMetrics,
}

fn mean_of(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.flatten().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl MetricsReport {
    pub fn new(stage: Stage, identities: Vec<IdentityMetrics>) -> Self {
        let mean = IdentityMetrics {
            identity: "mean".into(),
            views: identities.iter().map(|m| m.views).sum(),
            cd: mean_of(identities.iter().map(|m| m.cd)),
            psnr_train: mean_of(identities.iter().map(|m| m.psnr_train)),
            psnr_novel: mean_of(identities.iter().map(|m| m.psnr_novel)),
        };
        Self { stage: stage.number(), identities, mean }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }
}

/// Mean PSNR of an identity's rendered views in `split`.
pub fn view_psnr(
    model: &Model,
    identity: &str,
    dataset: &Dataset,
    split: Split,
    limit: Option<usize>,
    settings: &RenderSettings,
) -> Result<Option<f64>> {
    let idx = model.identity_index(identity)?;
    let field = ModelField::new(model, model.stage)?;
    let settings = RenderSettings { background: dataset.background, ..settings.clone() };
    let views: Vec<_> = dataset.identity(identity)?.views_in(split).take(limit.unwrap_or(usize::MAX)).collect();
    let mut values = Vec::with_capacity(views.len());
    for v in views {
        let gt = v.load_image()?;
        let (img, _) = render_image(&v.camera, &field, idx, &settings)?;
        values.push(psnr(&img, &gt, None)?);
    }
    Ok(mean_of(values.into_iter().map(Some)))
}

/// Geometry and appearance metrics for one identity. The extracted mesh is
/// returned alongside so callers can store it.
pub fn evaluate_identity(
    model: &Model,
    identity: &str,
    dataset: &Dataset,
    eval: &EvalConfig,
    settings: &RenderSettings,
) -> Result<(IdentityMetrics, TriangleMesh)> {
    let ident = dataset.identity(identity)?;
    let mesh = extract_mesh(model, identity, eval.mesh_resolution, eval.mesh_half_extent)?;
    let cd = match &ident.gt_mesh {
        Some(p) => Some(mesh_chamfer(&mesh, &TriangleMesh::load_obj(p)?, dataset.crop_box.as_ref(), eval.surface_samples, eval.seed)?),
        None => None,
    };
    let metrics = IdentityMetrics {
        identity: identity.to_string(),
        views: ident.views.len(),
        cd,
        psnr_train: view_psnr(model, identity, dataset, Split::Train, eval.train_psnr_views, settings)?,
        psnr_novel: view_psnr(model, identity, dataset, Split::Test, None, settings)?,
    };
    Ok((metrics, mesh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    // Reference: exhaustive nearest neighbour, summed in query order.
    fn brute(a: &[Vec3], b: &[Vec3]) -> f64 {
        let one = |x: &[Vec3], y: &[Vec3]| {
            x.iter().map(|&p| y.iter().map(|&q| dist2(p, q)).fold(f64::INFINITY, f64::min)).sum::<f64>() / x.len() as f64
        };
        one(a, b) + one(b, a)
    }

    fn cloud(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> Vec<Vec3> {
        (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(-spread..spread))).collect()
    }

    #[test]
    fn chamfer_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..50 {
            let a = cloud(&mut rng, 200, 1.0);
            let b = cloud(&mut rng, 200, if i % 2 == 0 { 1.0 } else { 0.2 });
            assert_eq!(chamfer_distance(&a, &b).unwrap(), brute(&a, &b));
        }
    }

    #[test]
    fn chamfer_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = cloud(&mut rng, 300, 1.0);
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer_distance(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap(), 2.0);
        assert!(chamfer_distance(&a, &[]).is_err());
    }

    proptest! {
        #[test]
        fn chamfer_is_symmetric_and_exact(seed in 0u64..1000, n in 1usize..60, m in 1usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = cloud(&mut rng, n, 2.0);
            let b = cloud(&mut rng, m, 0.5);
            let ab = chamfer_distance(&a, &b).unwrap();
            prop_assert_eq!(ab, brute(&a, &b));
            prop_assert!((ab - chamfer_distance(&b, &a).unwrap()).abs() <= 1e-12 * ab.max(1.0));
            prop_assert!(ab >= 0.0);
        }
    }

    #[test]
    fn psnr_values() {
        let a = Image::filled(4, 4, [0.5; 3]);
        let b = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b, None).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, None).unwrap(), PSNR_CAP);
        let mut c = a.clone();
        c.pixels[0] = [1.0; 3];
        let mut mask = vec![true; 16];
        mask[0] = false;
        assert_eq!(psnr(&c, &a, Some(&mask)).unwrap(), PSNR_CAP);
        assert!(psnr(&a, &Image::filled(2, 2, [0.0; 3]), None).is_err());
    }

    #[test]
    fn surface_samples_lie_on_the_mesh() {
        let mesh = TriangleMesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [4.0, 0.0, 1.0], [0.0, 4.0, 1.0]],
            faces: vec![[0, 1, 2], [3, 4, 5]],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = sample_surface_points(&mesh, 20_000, &mut rng).unwrap();
        let upper = pts.iter().filter(|p| p[2] == 1.0).count() as f64 / pts.len() as f64;
        // The upper triangle has 16× the area.
        assert!((upper - 16.0 / 17.0).abs() < 0.01, "{upper}");
        assert!(pts.iter().all(|p| p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= if p[2] == 1.0 { 4.0 } else { 1.0 } + 1e-12));
    }
}
