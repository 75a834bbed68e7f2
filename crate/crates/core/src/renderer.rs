//! Cameras, rays, sample placement, the Laplace S-density, radiance and
//! transmittance compositing.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{laplace_density_value, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::fields::{FieldEval, Model, RadiancePoint, Stage, LOG_ALPHA, LOG_BETA};

/// Radius of the scene bounding sphere centred at the origin.
pub const BOUND_RADIUS: f64 = 1.5;

pub type Vec3 = [f64; 3];

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Pinhole camera. Camera axes follow the computer-vision convention:
/// `+z` looks forward, `+x` right, `+y` down; pixel `(u, v)` has its centre
/// at `(u + 0.5, v + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: [[f64; 3]; 3],
    /// Columns are the camera axes in world coordinates.
    pub rotation: [[f64; 3]; 3],
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(intrinsics: [[f64; 3]; 3], rotation: [[f64; 3]; 3], translation: Vec3, width: usize, height: usize) -> Result<Self> {
        let k = intrinsics;
        if k[1][0] != 0.0 || k[2][0] != 0.0 || k[2][1] != 0.0 || k[2][2] != 1.0 {
            return Err(Error::Input("intrinsics must be upper-triangular with K[2][2] = 1".into()));
        }
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(Error::Input("focal lengths must be positive".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::Input("image size must be positive".into()));
        }
        let r = rotation;
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (d - want).abs() > 1e-6 {
                    return Err(Error::Input("rotation is not orthonormal".into()));
                }
            }
        }
        if det3(&r) < 0.0 {
            return Err(Error::Input("rotation has determinant -1".into()));
        }
        Ok(Self { intrinsics, rotation, translation, width, height })
    }

    /// Camera at `eye` looking at `target`, with `up` roughly opposite the
    /// image `y` axis.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Result<Self> {
        let z = normalize(sub(target, eye));
        let x = normalize(cross(z, up));
        let y = cross(z, x);
        let rotation = [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]];
        let k = [[focal, 0.0, width as f64 / 2.0], [0.0, focal, height as f64 / 2.0], [0.0, 0.0, 1.0]];
        Self::new(k, rotation, eye, width, height)
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    /// Forward optical axis in world coordinates.
    pub fn axis(&self) -> Vec3 {
        let r = &self.rotation;
        [r[0][2], r[1][2], r[2][2]]
    }

    /// Camera-to-world as a row-major 4×4.
    pub fn c2w(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = self.translation;
        [[r[0][0], r[0][1], r[0][2], t[0]], [r[1][0], r[1][1], r[1][2], t[1]], [r[2][0], r[2][1], r[2][2], t[2]], [0.0, 0.0, 0.0, 1.0]]
    }

    /// World-space unit direction through the centre of pixel `(u, v)`.
    pub fn pixel_direction(&self, u: usize, v: usize) -> Result<Vec3> {
        if u >= self.width || v >= self.height {
            return Err(Error::Input(format!("pixel ({u}, {v}) outside {}×{} image", self.width, self.height)));
        }
        let k = &self.intrinsics;
        let (px, py) = (u as f64 + 0.5, v as f64 + 0.5);
        let yc = (py - k[1][2]) / k[1][1];
        let xc = (px - k[0][2] - k[0][1] * yc) / k[0][0];
        let dc = [xc, yc, 1.0];
        let r = &self.rotation;
        let dw = [dot(r[0], dc), dot(r[1], dc), dot(r[2], dc)];
        Ok(normalize(dw))
    }

    /// Projects a world point to continuous pixel coordinates and depth.
    pub fn project(&self, p: Vec3) -> (f64, f64, f64) {
        let d = sub(p, self.translation);
        let r = &self.rotation;
        let pc = [(0..3).map(|k| r[k][0] * d[k]).sum::<f64>(), (0..3).map(|k| r[k][1] * d[k]).sum(), (0..3).map(|k| r[k][2] * d[k]).sum()];
        let k = &self.intrinsics;
        let x = pc[0] / pc[2];
        let y = pc[1] / pc[2];
        (k[0][0] * x + k[0][1] * y + k[0][2], k[1][1] * y + k[1][2], pc[2])
    }
}

pub(crate) fn det3(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    /// Ray clipped to the bounding sphere. Rays that miss it get a short
    /// segment at the point of closest approach, which renders as empty space.
    pub fn bounded(origin: Vec3, dir: Vec3) -> Self {
        let dir = normalize(dir);
        let b = dot(origin, dir);
        let c = dot(origin, origin) - BOUND_RADIUS * BOUND_RADIUS;
        let disc = b * b - c;
        let (near, far) = if disc > 0.0 {
            let h = disc.sqrt();
            ((-b - h).max(0.0), (-b + h).max(0.0))
        } else {
            ((-b).max(0.0), 0.0)
        };
        let far = if far > near + 1e-3 { far } else { near + 1e-3 };
        Self { origin, dir, near, far }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        [self.origin[0] + t * self.dir[0], self.origin[1] + t * self.dir[1], self.origin[2] + t * self.dir[2]]
    }
}

pub fn generate_rays(camera: &Camera, pixels: &[(usize, usize)]) -> Result<Vec<Ray>> {
    pixels.iter().map(|&(u, v)| Ok(Ray::bounded(camera.center(), camera.pixel_direction(u, v)?))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityParams {
    pub alpha: f64,
    pub beta: f64,
}

impl DensityParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0) {
            return Err(Error::Input(format!("density parameters must be positive (α={alpha}, β={beta})")));
        }
        Ok(Self { alpha, beta })
    }
}

/// `σ = α Φ_β(−s)`.
pub fn s_density(s: f64, p: DensityParams) -> f64 {
    laplace_density_value(s, p.alpha, p.beta)
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct RenderOutput {
    /// `Σ wᵢ cᵢ`, without background.
    pub color: Vec3,
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub t: Vec<f64>,
    pub opacity: f64,
}

impl RenderOutput {
    pub fn with_background(&self, bg: Vec3) -> Vec3 {
        let r = 1.0 - self.opacity;
        [self.color[0] + r * bg[0], self.color[1] + r * bg[1], self.color[2] + r * bg[2]]
    }
}

/// Interval widths `tᵢ₊₁ − tᵢ`, with `far − tₙ` for the last sample.
pub fn intervals(t: &[f64], far: f64) -> Vec<f64> {
    (0..t.len()).map(|i| if i + 1 < t.len() { t[i + 1] - t[i] } else { (far - t[i]).max(0.0) }).collect()
}

/// Front-to-back compositing of `σᵢ`, `cᵢ` at sorted depths `tᵢ`.
pub fn composite(sigma: &[f64], colors: &[Vec3], t: &[f64], far: f64) -> Result<RenderOutput> {
    if sigma.len() != t.len() || colors.len() != t.len() {
        return Err(Error::Shape("sigma, colors and t must have equal length".into()));
    }
    if t.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Input("sample depths must be strictly increasing".into()));
    }
    if sigma.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite density".into()));
    }
    if sigma.iter().any(|&s| s < 0.0) {
        return Err(Error::Input("densities must be non-negative".into()));
    }
    let u = intervals(t, far);
    let mut out = RenderOutput { t: t.to_vec(), ..Default::default() };
    let mut acc = 0.0f64;
    for i in 0..t.len() {
        let tr = (-acc).exp();
        let su = sigma[i] * u[i];
        let w = tr * (1.0 - (-su).exp());
        acc += su;
        out.transmittance.push(tr);
        out.weights.push(w);
        for c in 0..3 {
            out.color[c] += w * colors[i][c];
        }
    }
    // Equal to the weight sum in exact arithmetic; this form is monotone in
    // every density even after rounding.
    out.opacity = 1.0 - (-acc).exp();
    Ok(out)
}

// ── sample placement ──────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSettings {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub background: Vec3,
    /// Randomize stratified and importance samples (training); fixed
    /// positions otherwise.
    pub jitter: bool,
    /// Rays per graph when rendering whole images.
    pub chunk: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { n_coarse: 64, n_fine: 64, background: [1.0, 1.0, 1.0], jitter: false, chunk: 256 }
    }
}

/// `n` stratified depths in `[near, far]`. Without jitter these are evenly
/// spaced with both endpoints included; with jitter each sample is drawn
/// uniformly from the cell around its even position.
pub fn stratified_samples<R: Rng>(near: f64, far: f64, n: usize, rng: Option<&mut R>) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (near + far)];
    }
    let step = (far - near) / (n - 1) as f64;
    let base: Vec<f64> = (0..n).map(|i| if i + 1 == n { far } else { near + step * i as f64 }).collect();
    let Some(rng) = rng else { return base };
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            let lo = if i == 0 { near } else { base[i] - 0.5 * step };
            let hi = if i + 1 == n { far } else { base[i] + 0.5 * step };
            lo + (hi - lo) * rng.gen::<f64>()
        })
        .collect();
    make_strict(&mut out, near, far);
    out
}

/// Inverse-CDF samples from the piecewise-constant density whose mass on
/// `[tᵢ, tᵢ₊₁]` (last: `[tₙ, far]`) is proportional to `weights[i]`.
pub fn importance_samples<R: Rng>(t: &[f64], weights: &[f64], far: f64, n: usize, rng: Option<&mut R>) -> Vec<f64> {
    if n == 0 || t.is_empty() {
        return Vec::new();
    }
    let mut edges = t.to_vec();
    edges.push(far.max(*t.last().unwrap()));
    let pdf: Vec<f64> = weights.iter().map(|w| w.max(0.0) + 1e-5).collect();
    let total: f64 = pdf.iter().sum();
    let mut cdf = Vec::with_capacity(pdf.len() + 1);
    cdf.push(0.0);
    for p in &pdf {
        cdf.push(cdf.last().unwrap() + p / total);
    }
    let us: Vec<f64> = match rng {
        Some(rng) => (0..n).map(|k| (k as f64 + rng.gen::<f64>()) / n as f64).collect(),
        None => (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect(),
    };
    us.into_iter()
        .map(|u| {
            let bin = cdf.partition_point(|&c| c <= u).clamp(1, pdf.len()) - 1;
            let frac = ((u - cdf[bin]) / (cdf[bin + 1] - cdf[bin])).clamp(0.0, 1.0);
            edges[bin] + frac * (edges[bin + 1] - edges[bin])
        })
        .collect()
}

/// Nudges a sorted sequence so it is strictly increasing inside `[lo, hi]`.
fn make_strict(t: &mut [f64], lo: f64, hi: f64) {
    let eps = 1e-9 * (hi - lo).abs().max(1e-9);
    for i in 1..t.len() {
        if t[i] <= t[i - 1] {
            t[i] = t[i - 1] + eps;
        }
    }
    if let Some(last) = t.last_mut() {
        if *last > hi {
            *last = hi;
        }
    }
    for i in (0..t.len().saturating_sub(1)).rev() {
        if t[i] >= t[i + 1] {
            t[i] = t[i + 1] - eps;
        }
    }
    if let Some(first) = t.first_mut() {
        *first = first.max(lo);
    }
}

/// Stratified depths, then (when `n_fine > 0`) one round of importance
/// resampling against the compositing weights from `sdf` at the coarse
/// samples. The merged output is strictly increasing within `[near, far]`.
pub fn sample_along_ray<R, F>(
    ray: &Ray,
    n_coarse: usize,
    n_fine: usize,
    density: DensityParams,
    sdf: F,
    mut rng: Option<&mut R>,
) -> Result<Vec<f64>>
where
    R: Rng,
    F: FnOnce(&[Vec3]) -> Result<Vec<f64>>,
{
    if n_coarse < 2 {
        return Err(Error::Input("need at least two coarse samples".into()));
    }
    let coarse = stratified_samples(ray.near, ray.far, n_coarse, rng.as_deref_mut());
    if n_fine == 0 {
        return Ok(coarse);
    }
    let pts: Vec<Vec3> = coarse.iter().map(|&t| ray.at(t)).collect();
    let s = sdf(&pts)?;
    let sigma: Vec<f64> = s.iter().map(|&v| s_density(v, density)).collect();
    let weights = composite(&sigma, &vec![[0.0; 3]; sigma.len()], &coarse, ray.far)?.weights;
    let fine = importance_samples(&coarse, &weights, ray.far, n_fine, rng);
    Ok(merge_samples(coarse, fine, ray.near, ray.far))
}

pub(crate) fn merge_samples(mut a: Vec<f64>, b: Vec<f64>, near: f64, far: f64) -> Vec<f64> {
    a.extend(b);
    a.sort_by(f64::total_cmp);
    make_strict(&mut a, near, far);
    a
}

// ── fields on the tape ────────────────────────────────────────────────

/// Per-sample density and radiance recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Shading {
    /// `[n, 1]`
    pub sigma: Var,
    /// `[n, 3]` in `[0, 1]`
    pub color: Var,
    /// Geometry evaluation behind `sigma`, when the field is learned.
    pub fields: Option<FieldEval>,
}

/// Anything that can be volume rendered.
pub trait SceneField {
    fn density(&self) -> DensityParams;

    /// Value-only signed distances, used to place samples. `ids` selects the
    /// identity of each point.
    fn sdf(&self, points: &[Vec3], ids: &[usize]) -> Result<Vec<f64>>;

    fn shade(&self, g: &mut Graph, points: &[Vec3], dirs: &[Vec3], ids: &[usize]) -> Result<Shading>;
}

/// The learned model at a given stage. `color_source` overrides the color
/// code for every point, keeping the shape code of the rendered identity.
#[derive(Clone, Copy, Debug)]
pub struct ModelField<'a> {
    pub model: &'a Model,
    pub stage: Stage,
    pub color_source: Option<usize>,
}

impl<'a> ModelField<'a> {
    pub fn new(model: &'a Model, stage: Stage) -> Result<Self> {
        if stage == Stage::Two && model.stage != Stage::Two {
            return Err(Error::Capability("stage-2 rendering requires a promoted model".into()));
        }
        if stage == Stage::One && model.stage == Stage::Two {
            return Err(Error::Contract("a stage-2 model renders at stage 2".into()));
        }
        Ok(Self { model, stage, color_source: None })
    }
}

impl SceneField for ModelField<'_> {
    fn density(&self) -> DensityParams {
        DensityParams { alpha: self.model.alpha(), beta: self.model.beta() }
    }

    fn sdf(&self, points: &[Vec3], ids: &[usize]) -> Result<Vec<f64>> {
        self.model.sdf_batch_mixed(points, ids, self.stage == Stage::Two)
    }

    fn shade(&self, g: &mut Graph, points: &[Vec3], dirs: &[Vec3], ids: &[usize]) -> Result<Shading> {
        let m = self.model;
        let pts = g.constant(Tensor::from_rows(points));
        let ev = m.eval_fields(g, pts, ids, true, self.stage == Stage::Two)?;
        let s = ev.sdf.value(g)?;
        let la = g.param_by_name(&m.params, LOG_ALPHA)?;
        let lb = g.param_by_name(&m.params, LOG_BETA)?;
        let sigma = g.laplace_density(s, la, lb)?;
        let normals = ev.sdf.gradient(g, 0)?;
        let features = ev.features(g)?;
        let rp = match m.options.radiance_point {
            RadiancePoint::Observation => pts,
            RadiancePoint::Deformed => {
                let d = ev.d.value(g)?;
                g.add(pts, d)?
            }
        };
        let dv = g.constant(Tensor::from_rows(dirs));
        let color_ids: Vec<usize> = match self.color_source {
            Some(c) => vec![c; ids.len()],
            None => ids.to_vec(),
        };
        let color = m.radiance_graph(g, rp, dv, &color_ids, features, normals)?;
        Ok(Shading { sigma, color, fields: Some(ev) })
    }
}

/// A sphere with constant albedo, for exercising the renderer without a
/// learned model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnalyticSphere {
    pub center: Vec3,
    pub radius: f64,
    pub albedo: Vec3,
    pub density: DensityParams,
}

impl SceneField for AnalyticSphere {
    fn density(&self) -> DensityParams {
        self.density
    }

    fn sdf(&self, points: &[Vec3], _ids: &[usize]) -> Result<Vec<f64>> {
        Ok(points.iter().map(|&p| dot(sub(p, self.center), sub(p, self.center)).sqrt() - self.radius).collect())
    }

    fn shade(&self, g: &mut Graph, points: &[Vec3], _dirs: &[Vec3], ids: &[usize]) -> Result<Shading> {
        let s = self.sdf(points, ids)?;
        let s = g.constant(Tensor::column(s));
        let la = g.constant(Tensor::scalar(self.density.alpha.ln()));
        let lb = g.constant(Tensor::scalar(self.density.beta.ln()));
        let sigma = g.laplace_density(s, la, lb)?;
        let color = g.constant(Tensor::from_rows(&vec![self.albedo; points.len()]));
        Ok(Shading { sigma, color, fields: None })
    }
}

/// A ray batch rendered on a graph with the same number of samples per ray.
#[derive(Clone, Debug)]
pub struct BatchRender {
    /// `[R, 3]`, background included.
    pub color: Var,
    /// `[R, S]`
    pub weights: Var,
    /// `[R, 1]`
    pub opacity: Var,
    pub shading: Shading,
    pub samples_per_ray: usize,
    pub t: Vec<Vec<f64>>,
    pub points: Vec<Vec3>,
}

/// Places samples, shades them on `g`, and composites each ray.
pub fn render_batch<F: SceneField + ?Sized, R: Rng>(
    g: &mut Graph,
    field: &F,
    rays: &[Ray],
    ids: &[usize],
    settings: &RenderSettings,
    rng: &mut R,
) -> Result<BatchRender> {
    if rays.len() != ids.len() {
        return Err(Error::Shape(format!("{} rays with {} identity indices", rays.len(), ids.len())));
    }
    let density = field.density();
    let jitter = settings.jitter;
    let n_samples = settings.n_coarse + settings.n_fine;

    // Coarse pass over the whole batch at once, value-only.
    let coarse: Vec<Vec<f64>> = rays
        .iter()
        .map(|r| stratified_samples(r.near, r.far, settings.n_coarse, jitter.then_some(&mut *rng)))
        .collect();
    let t: Vec<Vec<f64>> = if settings.n_fine > 0 {
        let mut pts = Vec::with_capacity(rays.len() * settings.n_coarse);
        let mut pid = Vec::with_capacity(pts.capacity());
        for ((r, tc), &id) in rays.iter().zip(&coarse).zip(ids) {
            pts.extend(tc.iter().map(|&t| r.at(t)));
            pid.extend(std::iter::repeat(id).take(tc.len()));
        }
        let s = field.sdf(&pts, &pid)?;
        rays.iter()
            .zip(coarse)
            .zip(s.chunks(settings.n_coarse))
            .map(|((r, tc), s)| {
                let sigma: Vec<f64> = s.iter().map(|&v| s_density(v, density)).collect();
                let w = composite(&sigma, &vec![[0.0; 3]; sigma.len()], &tc, r.far)?.weights;
                let fine = importance_samples(&tc, &w, r.far, settings.n_fine, jitter.then_some(&mut *rng));
                Ok(merge_samples(tc, fine, r.near, r.far))
            })
            .collect::<Result<_>>()?
    } else {
        coarse
    };

    let mut points = Vec::with_capacity(rays.len() * n_samples);
    let mut dirs = Vec::with_capacity(points.capacity());
    let mut pid = Vec::with_capacity(points.capacity());
    let mut u = Vec::with_capacity(points.capacity());
    for ((r, tr), &id) in rays.iter().zip(&t).zip(ids) {
        points.extend(tr.iter().map(|&ti| r.at(ti)));
        dirs.extend(std::iter::repeat(r.dir).take(tr.len()));
        pid.extend(std::iter::repeat(id).take(tr.len()));
        u.extend(intervals(tr, r.far));
    }
    let shading = field.shade(g, &points, &dirs, &pid)?;
    let deltas = Tensor::new(rays.len(), n_samples, u)?;
    let (color, weights, opacity) = composite_graph(g, shading.sigma, shading.color, deltas, settings.background)?;
    Ok(BatchRender { color, weights, opacity, shading, samples_per_ray: n_samples, t, points })
}

/// Differentiable compositing. `sigma` is `[R·S, 1]`, `color` `[R·S, 3]`,
/// `deltas` `[R, S]`. Returns (color with background, weights, opacity).
pub fn composite_graph(g: &mut Graph, sigma: Var, color: Var, deltas: Tensor, background: Vec3) -> Result<(Var, Var, Var)> {
    let [r, s] = deltas.shape();
    let sig = g.reshape(sigma, r, s)?;
    let du = g.constant(deltas);
    let su = g.mul(sig, du)?;
    let acc = g.cumsum_exclusive_cols(su);
    let nacc = g.neg(acc);
    let trans = g.exp(nacc);
    let nsu = g.neg(su);
    let e = g.exp(nsu);
    let ne = g.neg(e);
    let alpha = g.offset(ne, 1.0);
    let weights = g.mul(trans, alpha)?;
    let wcol = g.reshape(weights, r * s, 1)?;
    let wc = g.mul_col(color, wcol)?;
    let c = g.sum_row_groups(wc, s)?;
    let opacity = g.sum_cols(weights);
    let nop = g.neg(opacity);
    let rest = g.offset(nop, 1.0);
    let bg = g.constant(Tensor::from_rows(&vec![background; r]));
    let bgc = g.mul_col(bg, rest)?;
    let out = g.add(c, bgc)?;
    Ok((out, weights, opacity))
}

/// Renders one ray outside any training graph.
pub fn render_ray<F: SceneField + ?Sized, R: Rng>(
    field: &F,
    ray: &Ray,
    id: usize,
    settings: &RenderSettings,
    rng: &mut R,
) -> Result<(Vec3, RenderOutput)> {
    let mut g = Graph::new();
    let b = render_batch(&mut g, field, std::slice::from_ref(ray), &[id], settings, rng)?;
    let c = g.value(b.color).row(0);
    let sigma = g.value(b.shading.sigma).data().to_vec();
    let colors: Vec<Vec3> = g.value(b.shading.color).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let out = composite(&sigma, &colors, &b.t[0], ray.far)?;
    Ok(([c[0], c[1], c[2]], out))
}

pub fn render_pixel<F: SceneField + ?Sized, R: Rng>(
    camera: &Camera,
    pixel: (usize, usize),
    field: &F,
    id: usize,
    settings: &RenderSettings,
    rng: &mut R,
) -> Result<(Vec3, RenderOutput)> {
    let ray = generate_rays(camera, &[pixel])?[0];
    render_ray(field, &ray, id, settings, rng)
}

/// Linear RGB image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<Vec3>,
}

impl Image {
    pub fn filled(width: usize, height: usize, c: Vec3) -> Self {
        Self { width, height, pixels: vec![c; width * height] }
    }

    pub fn get(&self, u: usize, v: usize) -> Vec3 {
        self.pixels[v * self.width + u]
    }

    /// 8-bit RGB, `round(255·c)` after clamping to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let data: Vec<u8> = self.pixels.iter().flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)).collect();
        let mut w = enc.write_header().map_err(|e| Error::data(path, e.to_string()))?;
        w.write_image_data(&data).map_err(|e| Error::data(path, e.to_string()))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dec = png::Decoder::new(std::io::BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| Error::data(path, e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::data(path, e.to_string()))?;
        let ch = match info.color_type {
            png::ColorType::Rgb => 3,
            png::ColorType::Rgba => 4,
            png::ColorType::Grayscale => 1,
            png::ColorType::GrayscaleAlpha => 2,
            png::ColorType::Indexed => return Err(Error::data(path, "unexpanded palette image")),
        };
        let (w, h) = (info.width as usize, info.height as usize);
        let pixels = buf[..w * h * ch]
            .chunks(ch)
            .map(|p| {
                let f = |i: usize| p[i] as f64 / 255.0;
                if ch >= 3 {
                    [f(0), f(1), f(2)]
                } else {
                    [f(0); 3]
                }
            })
            .collect();
        Ok(Self { width: w, height: h, pixels })
    }
}

/// Renders every pixel of `camera` for identity `id`, chunked, with
/// deterministic sample placement.
pub fn render_image<F: SceneField + ?Sized>(camera: &Camera, field: &F, id: usize, settings: &RenderSettings) -> Result<(Image, Vec<f64>)> {
    let pixels: Vec<(usize, usize)> = (0..camera.height).flat_map(|v| (0..camera.width).map(move |u| (u, v))).collect();
    let rays = generate_rays(camera, &pixels)?;
    let mut settings = settings.clone();
    settings.jitter = false;
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut img = Image::filled(camera.width, camera.height, settings.background);
    let mut opacity = vec![0.0; pixels.len()];
    let chunk = settings.chunk.max(1);
    for (ci, rs) in rays.chunks(chunk).enumerate() {
        let mut g = Graph::new();
        let b = render_batch(&mut g, field, rs, &vec![id; rs.len()], &settings, &mut rng)?;
        let cols = g.value(b.color);
        let op = g.value(b.opacity);
        for k in 0..rs.len() {
            let c = cols.row(k);
            img.pixels[ci * chunk + k] = [c[0], c[1], c[2]];
            opacity[ci * chunk + k] = op.get(k, 0);
        }
    }
    Ok((img, opacity))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_cam(w: usize, h: usize, f: f64, cx: f64, cy: f64) -> Camera {
        let k = [[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]];
        let r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        Camera::new(k, r, [0.0, 0.0, -3.0], w, h).unwrap()
    }

    #[test]
    fn principal_point_ray_follows_axis() {
        let cam = identity_cam(5, 5, 4.0, 2.5, 2.5);
        let d = cam.pixel_direction(2, 2).unwrap();
        assert_eq!(d, cam.axis());
    }

    #[test]
    fn corner_pixel_back_projection() {
        // f = 2, c = (1, 1): pixel (0, 0) centre (0.5, 0.5) → (−0.25, −0.25, 1).
        let cam = identity_cam(2, 2, 2.0, 1.0, 1.0);
        let d = cam.pixel_direction(0, 0).unwrap();
        let n = (0.25f64 * 0.25 * 2.0 + 1.0).sqrt();
        for (a, b) in d.iter().zip([-0.25 / n, -0.25 / n, 1.0 / n]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rays_are_unit_and_bounded() {
        let cam = Camera::look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 40.0, 16, 12).unwrap();
        let px: Vec<_> = (0..12).flat_map(|v| (0..16).map(move |u| (u, v))).collect();
        for r in generate_rays(&cam, &px).unwrap() {
            assert!((dot(r.dir, r.dir).sqrt() - 1.0).abs() < 1e-12);
            assert!(0.0 <= r.near && r.near < r.far);
        }
        let c = Ray::bounded([0.0, 0.0, 3.0], [0.0, 0.0, -1.0]);
        assert!((c.near - 1.5).abs() < 1e-12 && (c.far - 4.5).abs() < 1e-12);
        assert!(matches!(generate_rays(&cam, &[(16, 0)]), Err(Error::Input(_))));
    }

    #[test]
    fn look_at_projects_target_to_centre() {
        let cam = Camera::look_at([1.0, 0.5, 3.0], [0.0; 3], [0.0, 1.0, 0.0], 50.0, 20, 10).unwrap();
        let (u, v, z) = cam.project([0.0; 3]);
        assert!((u - 10.0).abs() < 1e-9 && (v - 5.0).abs() < 1e-9 && z > 0.0);
        // World up appears towards the top of the image.
        let (_, v_up, _) = cam.project([0.0, 0.3, 0.0]);
        assert!(v_up < 5.0);
    }

    #[test]
    fn invalid_cameras_rejected() {
        let r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        let k = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Camera::new(k, r, [0.0; 3], 1, 1).is_err());
        let k_bad = [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Camera::new(k_bad, id, [0.0; 3], 1, 1).is_err());
    }

    #[test]
    fn density_examples() {
        let p = DensityParams::new(1.0, 0.1).unwrap();
        assert_eq!(s_density(0.0, DensityParams::new(3.0, 0.2).unwrap()), 1.5);
        assert!((s_density(0.1, p) - 0.5 * (-1f64).exp()).abs() < 1e-15);
        assert!((s_density(0.1, p) - 0.18394).abs() < 1e-5);
        assert!((s_density(-50.0, p) - 1.0).abs() < 1e-15);
        assert!(s_density(50.0, p) < 1e-200);
    }

    #[test]
    fn composite_examples() {
        let zero = composite(&[0.0; 4], &[[1.0; 3]; 4], &[0.0, 1.0, 2.0, 3.0], 4.0).unwrap();
        assert_eq!(zero.color, [0.0; 3]);
        assert_eq!(zero.opacity, 0.0);
        assert!(zero.transmittance.iter().all(|&t| t == 1.0));

        let two = composite(&[2f64.ln(), 20.0], &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], &[0.0, 1.0], 2.0).unwrap();
        assert!((two.weights[0] - 0.5).abs() < 1e-15);
        assert!((two.weights[1] - 0.5 * (1.0 - (-20f64).exp())).abs() < 1e-15);
        assert!((two.color[0] - 0.5).abs() < 1e-15 && (two.color[1] - 0.5).abs() < 1e-8);

        let one = composite(&[2f64.ln()], &[[1.0; 3]], &[0.0], 1.0).unwrap();
        for c in one.color {
            assert!((c - 0.5).abs() < 1e-15);
        }
        assert!(matches!(composite(&[1.0, 1.0], &[[0.0; 3]; 2], &[1.0, 0.5], 2.0), Err(Error::Input(_))));
    }

    #[test]
    fn two_coarse_samples_are_the_endpoints() {
        let t = stratified_samples::<ChaCha8Rng>(1.0, 3.0, 2, None);
        assert_eq!(t, vec![1.0, 3.0]);
    }

    fn opaque_sphere(beta: f64) -> AnalyticSphere {
        AnalyticSphere { center: [0.0; 3], radius: 0.5, albedo: [0.2, 0.6, 0.9], density: DensityParams::new(1.0 / beta, beta).unwrap() }
    }

    #[test]
    fn importance_samples_concentrate_at_surface() {
        let sphere = opaque_sphere(0.05);
        let ray = Ray::bounded([0.0, 0.0, -3.0], [0.0, 0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coarse = stratified_samples(ray.near, ray.far, 64, Some(&mut rng));
        let pts: Vec<Vec3> = coarse.iter().map(|&t| ray.at(t)).collect();
        let s = sphere.sdf(&pts, &[]).unwrap();
        let sigma: Vec<f64> = s.iter().map(|&v| s_density(v, sphere.density)).collect();
        let w = composite(&sigma, &vec![[0.0; 3]; 64], &coarse, ray.far).unwrap().weights;
        let fine = importance_samples(&coarse, &w, ray.far, 64, Some(&mut rng));
        let near_surface = fine.iter().filter(|&&t| (t - 2.5).abs() <= 2.0 * 0.05).count();
        assert!(near_surface as f64 >= 0.6 * 64.0, "{near_surface}");
    }

    #[test]
    fn opaque_sphere_hit_and_miss() {
        let sphere = opaque_sphere(0.01);
        let cam = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 20.0, 8, 8).unwrap();
        let settings = RenderSettings { background: [0.3, 0.3, 0.3], ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (c, out) = render_pixel(&cam, (4, 4), &sphere, 0, &settings, &mut rng).unwrap();
        assert!(out.opacity > 0.95);
        assert!((c[2] - 0.9).abs() < 0.05);
        let (c, out) = render_pixel(&cam, (0, 0), &sphere, 0, &settings, &mut rng).unwrap();
        assert!(out.opacity < 1e-6);
        for v in c {
            assert!((v - 0.3).abs() < 1e-6);
        }
    }

    #[test]
    fn rendering_is_deterministic_given_seed() {
        let sphere = opaque_sphere(0.05);
        let cam = Camera::look_at([0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 20.0, 8, 8).unwrap();
        let settings = RenderSettings { jitter: true, ..Default::default() };
        let a = render_pixel(&cam, (3, 4), &sphere, 0, &settings, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = render_pixel(&cam, (3, 4), &sphere, 0, &settings, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn graph_and_direct_compositing_agree() {
        let sphere = opaque_sphere(0.1);
        let rays = [Ray::bounded([0.0, 0.0, -3.0], [0.0, 0.05, 1.0]), Ray::bounded([0.2, 0.0, -3.0], [0.0, 0.0, 1.0])];
        let mut g = Graph::new();
        let settings = RenderSettings { n_coarse: 16, n_fine: 8, ..Default::default() };
        let b = render_batch(&mut g, &sphere, &rays, &[0, 0], &settings, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (k, r) in rays.iter().enumerate() {
            let pts: Vec<Vec3> = b.t[k].iter().map(|&t| r.at(t)).collect();
            let sigma: Vec<f64> = sphere.sdf(&pts, &[]).unwrap().iter().map(|&s| s_density(s, sphere.density)).collect();
            let out = composite(&sigma, &vec![sphere.albedo; pts.len()], &b.t[k], r.far).unwrap();
            let want = out.with_background(settings.background);
            for c in 0..3 {
                assert!((g.value(b.color).get(k, c) - want[c]).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn weights_form_sub_probability(sig in prop::collection::vec(0.0f64..50.0, 1..24), gaps in prop::collection::vec(0.001f64..0.5, 24)) {
            let mut t = vec![0.0];
            for g in &gaps[..sig.len() - 1] { t.push(t.last().unwrap() + g); }
            let far = t.last().unwrap() + gaps[sig.len() - 1];
            let out = composite(&sig, &vec![[1.0; 3]; sig.len()], &t, far).unwrap();
            prop_assert!(out.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
            prop_assert!(out.opacity <= 1.0 + 1e-6);
            prop_assert_eq!(out.transmittance[0], 1.0);
            prop_assert!(out.transmittance.windows(2).all(|w| w[1] <= w[0]));
            // Constant radiance composites to W·c.
            prop_assert!((out.color[0] - out.opacity).abs() < 1e-12);
        }

        #[test]
        fn opacity_is_monotone_in_density(sig in prop::collection::vec(0.0f64..10.0, 2..12), idx in 0usize..12, bump in 0.0f64..5.0) {
            let t: Vec<f64> = (0..sig.len()).map(|i| 0.1 * i as f64).collect();
            let far = 0.1 * sig.len() as f64;
            let base = composite(&sig, &vec![[0.0; 3]; sig.len()], &t, far).unwrap().opacity;
            let mut s2 = sig.clone();
            s2[idx % sig.len()] += bump;
            let more = composite(&s2, &vec![[0.0; 3]; sig.len()], &t, far).unwrap().opacity;
            prop_assert!(more >= base);
        }

        #[test]
        fn density_is_linear_in_alpha(s in -2.0f64..2.0, a in 0.01f64..100.0, k in 0.01f64..100.0, b in 0.001f64..1.0) {
            let one = s_density(s, DensityParams::new(a, b).unwrap());
            let scaled = s_density(s, DensityParams::new(k * a, b).unwrap());
            prop_assert!((scaled - k * one).abs() <= 1e-12 * scaled.abs().max(1e-300));
        }

        #[test]
        fn samples_strictly_increase_within_bounds(near in 0.0f64..2.0, len in 0.01f64..3.0, nc in 2usize..40, nf in 0usize..40, seed in 0u64..1000) {
            let ray = Ray { origin: [0.0, 0.0, -3.0], dir: [0.0, 0.0, 1.0], near, far: near + len };
            let sphere = opaque_sphere(0.02);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = sample_along_ray(&ray, nc, nf, sphere.density, |p| sphere.sdf(p, &[]), Some(&mut rng)).unwrap();
            prop_assert_eq!(t.len(), nc + nf);
            prop_assert!(t.windows(2).all(|w| w[1] > w[0]));
            prop_assert!(t.iter().all(|&x| x >= near && x <= near + len));
        }
    }
}
