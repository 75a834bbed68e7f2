//! Geometry decomposition: per-identity codes, the deformation field, the
//! shared template SDF, their composition, and the stage-2 displacement
//! refinement.
//!
//! For a query point `x` in observation space and identity shape code `z_s`:
//!
//! ```text
//! (d, F_def) = f_def(PE(x) ⊕ z_s)
//! (s, F_tem) = f_tem(PE(x + d))
//! (δ, F_dis) = f_dis(PE₂(x) ⊕ F_tem ⊕ F_def)      stage 2 only
//! ŝ = s + δ
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{
    init_mlp, mlp_forward, Activation, Graph, Jet, MlpSpec, OutputInit, ParamStore, PositionalEncodingSpec, Tensor, Var,
};
use crate::error::{Error, Result};

pub const SHAPE_CODES: &str = "code.shape";
pub const COLOR_CODES: &str = "code.color";
pub const LOG_ALPHA: &str = "density.log_alpha";
pub const LOG_BETA: &str = "density.log_beta";
pub const DEFORM: &str = "deform";
pub const TEMPLATE: &str = "template";
pub const DISPLACE: &str = "displace";
pub const RENDER: &str = "render";

/// Network sizes. Defaults follow the reference architecture; the desk
/// fixtures shrink widths and code/feature sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub code_dim: usize,
    pub hidden_width: usize,
    pub deform_layers: usize,
    pub template_layers: usize,
    pub displacement_layers: usize,
    pub render_layers: usize,
    pub render_layers_added: usize,
    /// Layer of the stage-2 rendering network that receives the raw input.
    pub render_skip_layer: usize,
    pub template_skip_layers: Vec<usize>,
    pub deform_feature_dim: usize,
    pub template_feature_dim: usize,
    pub displacement_feature_dim: usize,
    pub point_frequencies: usize,
    pub view_frequencies: usize,
    /// Bands added to point and view encodings at stage-2 promotion.
    pub frequencies_added: usize,
    pub softplus_beta: f64,
    pub init_radius: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            code_dim: 128,
            hidden_width: 256,
            deform_layers: 4,
            template_layers: 8,
            displacement_layers: 4,
            render_layers: 4,
            render_layers_added: 2,
            render_skip_layer: 3,
            template_skip_layers: vec![4],
            deform_feature_dim: 192,
            template_feature_dim: 64,
            displacement_feature_dim: 64,
            point_frequencies: 6,
            view_frequencies: 4,
            frequencies_added: 2,
            softplus_beta: 100.0,
            init_radius: 0.5,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.code_dim, self.hidden_width, self.deform_layers, self.template_layers, self.displacement_layers, self.render_layers];
        if positive.contains(&0) {
            return Err(Error::Config("network sizes must be positive".into()));
        }
        if self.template_skip_layers.iter().any(|&l| l == 0 || l >= self.template_layers) {
            return Err(Error::Config("template skip layers must be interior".into()));
        }
        let promoted = self.render_layers + self.render_layers_added;
        if self.render_layers_added > 0 && (self.render_skip_layer == 0 || self.render_skip_layer >= promoted) {
            return Err(Error::Config("render skip layer must be interior to the promoted network".into()));
        }
        if !(self.softplus_beta > 0.0 && self.init_radius > 0.0 && self.init_radius < 1.5) {
            return Err(Error::Config("softplus sharpness and initial radius must be positive, radius inside the bound".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Where spatial gradients for the Eikonal term are taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientSpace {
    /// `∇ₓ s` through the deformation.
    #[default]
    Observation,
    /// `∇_y f_tem` at `y = x + d`.
    Template,
}

/// Which point the rendering network sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RadiancePoint {
    #[default]
    Observation,
    Deformed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct FieldOptions {
    /// Stop gradients of `F_tem`/`F_def` at the displacement input.
    pub detach_displacement_features: bool,
    pub eikonal_space: GradientSpace,
    pub radiance_point: RadiancePoint,
}

/// Identity names and their row in the code tables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct CodeBook {
    ids: Vec<String>,
}

impl CodeBook {
    pub fn new(ids: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = ids.iter().find(|i| !seen.insert(i.as_str())) {
            return Err(Error::Input(format!("duplicate identity `{dup}`")));
        }
        Ok(Self { ids })
    }

    pub fn index(&self, id: &str) -> Result<usize> {
        self.ids.iter().position(|i| i == id).ok_or_else(|| Error::UnknownIdentity(id.to_string()))
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Everything evaluated at one query point.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub x: [f64; 3],
    pub d: [f64; 3],
    pub s: f64,
    pub delta: Option<f64>,
    pub s_hat: f64,
    pub f_def: Vec<f64>,
    pub f_tem: Vec<f64>,
    pub f_dis: Option<Vec<f64>>,
    /// `∇ₓ s`
    pub grad_s: [f64; 3],
    /// `∇ₓ ŝ` (stage 2)
    pub grad_s_hat: Option<[f64; 3]>,
}

/// Graph nodes produced by evaluating the field stack on a batch.
#[derive(Clone, Copy, Debug)]
pub struct FieldEval {
    pub n: usize,
    /// `[n, 3]` query points.
    pub points: Var,
    /// `[n, 3]` deformation offsets (jet).
    pub d: Jet,
    pub f_def: Jet,
    pub s: Jet,
    pub f_tem: Jet,
    pub delta: Option<Jet>,
    pub f_dis: Option<Jet>,
    /// The SDF used for rendering: `s` in stage 1, `ŝ` in stage 2.
    pub sdf: Jet,
}

impl FieldEval {
    /// Feature vector fed to the rendering network, value rows only.
    pub fn features(&self, g: &mut Graph) -> Result<Var> {
        let mut parts = vec![self.f_def.value(g)?, self.f_tem.value(g)?];
        if let Some(f) = self.f_dis {
            parts.push(f.value(g)?);
        }
        g.concat_cols(&parts)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: ArchConfig,
    pub stage: Stage,
    pub options: FieldOptions,
    pub codebook: CodeBook,
    pub params: ParamStore,
    pub deform: MlpSpec,
    pub template: MlpSpec,
    pub displacement: Option<MlpSpec>,
    pub render: MlpSpec,
    pub geometry_pe: PositionalEncodingSpec,
    pub render_point_pe: PositionalEncodingSpec,
    pub render_view_pe: PositionalEncodingSpec,
}

/// Stage-dependent widths of the rendering-network input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderInputLayout {
    pub point: usize,
    pub view: usize,
    pub code: usize,
    pub features: usize,
    pub normal: usize,
}

impl RenderInputLayout {
    pub fn total(&self) -> usize {
        self.point + self.view + self.code + self.features + self.normal
    }
}

impl Model {
    /// A fresh stage-1 model. Shape and color codes start at `N(0, code_std²)`.
    pub fn new(arch: ArchConfig, identities: Vec<String>, options: FieldOptions, code_std: f64, seed: u64) -> Result<Self> {
        let codebook = CodeBook::new(identities)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geometry_pe = PositionalEncodingSpec::new(arch.point_frequencies);
        let render_point_pe = PositionalEncodingSpec::new(arch.point_frequencies);
        let render_view_pe = PositionalEncodingSpec::new(arch.view_frequencies);
        let sdf_act = Activation::Softplus { beta: arch.softplus_beta };

        let deform = MlpSpec::new(
            geometry_pe.output_dim(3) + arch.code_dim,
            arch.hidden_width,
            arch.deform_layers,
            3 + arch.deform_feature_dim,
            sdf_act,
        );
        let template = MlpSpec::new(
            geometry_pe.output_dim(3),
            arch.hidden_width,
            arch.template_layers,
            1 + arch.template_feature_dim,
            sdf_act,
        )
        .with_skips(&arch.template_skip_layers, true);
        let mut model = Self {
            render: MlpSpec::new(1, 1, 1, 1, Activation::Relu),
            arch,
            stage: Stage::One,
            options,
            codebook,
            params: ParamStore::new(),
            deform,
            template,
            displacement: None,
            geometry_pe,
            render_point_pe,
            render_view_pe,
        };
        let layout = model.render_input_layout();
        model.render = MlpSpec::new(layout.total(), model.arch.hidden_width, model.arch.render_layers, 3, Activation::Relu);
        model.deform.validate()?;
        model.template.validate()?;
        model.render.validate()?;

        let n = model.codebook.len();
        let code_dim = model.arch.code_dim;
        let codes = |rng: &mut ChaCha8Rng| {
            let mut t = Tensor::zeros(n, code_dim);
            if code_std > 0.0 {
                let normal = Normal::new(0.0, code_std).expect("positive std");
                t.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
            }
            t
        };
        let shape = codes(&mut rng);
        let color = codes(&mut rng);
        model.params.insert(SHAPE_CODES, shape);
        model.params.insert(COLOR_CODES, color);
        let beta0: f64 = 0.1;
        model.params.insert(LOG_ALPHA, Tensor::scalar((1.0 / beta0).ln()));
        model.params.insert(LOG_BETA, Tensor::scalar(beta0.ln()));
        let radius = model.arch.init_radius;
        init_mlp(&mut model.params, DEFORM, &model.deform, OutputInit::Zero, &mut rng)?;
        init_mlp(&mut model.params, TEMPLATE, &model.template, OutputInit::Sphere { radius }, &mut rng)?;
        init_mlp(&mut model.params, RENDER, &model.render, OutputInit::Uniform, &mut rng)?;
        model.center_template(radius)?;
        Ok(model)
    }

    /// Shifts the template's output bias so its mean over the sphere of
    /// `radius` is zero. Softplus is positive at the origin, which the
    /// geometric init ignores; narrow layers would otherwise start with a
    /// shrunken or empty level set.
    fn center_template(&mut self, radius: f64) -> Result<()> {
        let n = 256;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let pts: Vec<[f64; 3]> = (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - y * y).sqrt();
                let th = golden * i as f64;
                [radius * r * th.cos(), radius * y, radius * r * th.sin()]
            })
            .collect();
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_rows(&pts));
        let y = Jet::seed(&mut g, p, false)?;
        let out = self.template_jet(&mut g, y)?;
        let mean = (0..n).map(|r| g.value(out.var).get(r, 0)).sum::<f64>() / n as f64;
        let id = self.params.id(&MlpSpec::bias_name(TEMPLATE, self.template.num_layers() - 1))?;
        self.params.get_mut(id).data_mut()[0] -= mean;
        Ok(())
    }

    pub fn render_input_layout(&self) -> RenderInputLayout {
        let features = self.arch.deform_feature_dim
            + self.arch.template_feature_dim
            + if self.stage == Stage::Two { self.arch.displacement_feature_dim } else { 0 };
        RenderInputLayout {
            point: self.render_point_pe.output_dim(3),
            view: self.render_view_pe.output_dim(3),
            code: self.arch.code_dim,
            features,
            normal: 3,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.render_input_layout().features
    }

    pub fn alpha(&self) -> f64 {
        self.params.by_name(LOG_ALPHA).map(|t| t.item().exp()).unwrap_or(f64::NAN)
    }

    pub fn beta(&self) -> f64 {
        self.params.by_name(LOG_BETA).map(|t| t.item().exp()).unwrap_or(f64::NAN)
    }

    pub fn identity_index(&self, id: &str) -> Result<usize> {
        self.codebook.index(id)
    }

    pub fn shape_code(&self, idx: usize) -> Vec<f64> {
        self.params.by_name(SHAPE_CODES).expect("codes").row(idx).to_vec()
    }

    pub fn color_code(&self, idx: usize) -> Vec<f64> {
        self.params.by_name(COLOR_CODES).expect("codes").row(idx).to_vec()
    }

    /// Appends a new identity with zero shape and color codes.
    pub fn add_identity(&mut self, id: &str) -> Result<usize> {
        if self.codebook.index(id).is_ok() {
            return Err(Error::Input(format!("identity `{id}` already exists")));
        }
        for name in [SHAPE_CODES, COLOR_CODES] {
            let old = self.params.by_name(name)?.clone();
            let mut data = old.data().to_vec();
            data.extend(std::iter::repeat(0.0).take(old.cols()));
            self.params.insert(name, Tensor::new(old.rows() + 1, old.cols(), data)?);
        }
        self.codebook.ids.push(id.to_string());
        Ok(self.codebook.len() - 1)
    }

    /// Swaps the shape and color codes of two identities.
    pub fn swap_codes(&mut self, a: usize, b: usize) -> Result<()> {
        for name in [SHAPE_CODES, COLOR_CODES] {
            let id = self.params.id(name)?;
            let t = self.params.get_mut(id);
            let k = t.cols();
            for c in 0..k {
                t.data_mut().swap(a * k + c, b * k + c);
            }
        }
        Ok(())
    }

    // ── batched graph evaluation ──────────────────────────────────────

    /// Template SDF and feature, `f_tem(PE(y))`.
    pub fn template_jet(&self, g: &mut Graph, y: Jet) -> Result<Jet> {
        let pe = y.encode(g, self.geometry_pe.num_frequencies, self.geometry_pe.include_input)?;
        mlp_forward(g, &self.params, TEMPLATE, &self.template, pe)
    }

    /// Evaluates the field stack at `points` (`[n, 3]`) with shape codes
    /// `shape_ids[r]`. `refined` adds the displacement (stage 2 only);
    /// `tangents` carries spatial derivatives through every output.
    pub fn eval_fields(&self, g: &mut Graph, points: Var, shape_ids: &[usize], tangents: bool, refined: bool) -> Result<FieldEval> {
        let n = g.shape(points)[0];
        if shape_ids.len() != n {
            return Err(Error::Shape(format!("{} identity indices for {n} points", shape_ids.len())));
        }
        if refined && self.stage != Stage::Two {
            return Err(Error::Capability("refined SDF requires a stage-2 model".into()));
        }
        let x = Jet::seed(g, points, tangents)?;
        let table = g.param_by_name(&self.params, SHAPE_CODES)?;
        let z = g.gather_rows(table, shape_ids.to_vec())?;
        let z = Jet::lift(g, z, x.blocks)?;
        let pe_x = x.encode(g, self.geometry_pe.num_frequencies, self.geometry_pe.include_input)?;
        let def_in = Jet::concat(g, &[pe_x, z])?;
        let def_out = mlp_forward(g, &self.params, DEFORM, &self.deform, def_in)?;
        let d = def_out.slice_cols(g, 0, 3)?;
        let f_def = def_out.slice_cols(g, 3, self.arch.deform_feature_dim)?;
        let y = x.add(g, &d)?;
        let tem_out = self.template_jet(g, y)?;
        let s = tem_out.slice_cols(g, 0, 1)?;
        let f_tem = tem_out.slice_cols(g, 1, self.arch.template_feature_dim)?;

        let (delta, f_dis, sdf) = if refined {
            let spec = self.displacement.as_ref().ok_or_else(|| Error::Capability("missing displacement network".into()))?;
            let pe2 = x.encode(g, self.render_point_pe.num_frequencies, self.render_point_pe.include_input)?;
            let (ft, fd) = if self.options.detach_displacement_features {
                (f_tem.detach(g), f_def.detach(g))
            } else {
                (f_tem, f_def)
            };
            let dis_in = Jet::concat(g, &[pe2, ft, fd])?;
            let dis_out = mlp_forward(g, &self.params, DISPLACE, spec, dis_in)?;
            let delta = dis_out.slice_cols(g, 0, 1)?;
            let f_dis = dis_out.slice_cols(g, 1, self.arch.displacement_feature_dim)?;
            let s_hat = s.add(g, &delta)?;
            (Some(delta), Some(f_dis), s_hat)
        } else {
            (None, None, s)
        };
        Ok(FieldEval { n, points, d, f_def, s, f_tem, delta, f_dis, sdf })
    }

    /// Rendering-network radiance in `[0, 1]³` for value rows.
    ///
    /// `features` must match the stage's feature width, `normals` is the raw
    /// SDF gradient.
    pub fn radiance_graph(
        &self,
        g: &mut Graph,
        points: Var,
        dirs: Var,
        color_ids: &[usize],
        features: Var,
        normals: Var,
    ) -> Result<Var> {
        let layout = self.render_input_layout();
        let fcols = g.shape(features)[1];
        if fcols != layout.features {
            return Err(Error::Contract(format!(
                "stage-{} rendering expects {} feature channels, got {fcols}",
                self.stage.number(),
                layout.features
            )));
        }
        let xp = Jet::lift(g, points, 1)?.encode(g, self.render_point_pe.num_frequencies, true)?;
        let vp = Jet::lift(g, dirs, 1)?.encode(g, self.render_view_pe.num_frequencies, true)?;
        let table = g.param_by_name(&self.params, COLOR_CODES)?;
        let zc = g.gather_rows(table, color_ids.to_vec())?;
        let input = g.concat_cols(&[xp.var, vp.var, zc, features, normals])?;
        let input = Jet::lift(g, input, 1)?;
        let out = mlp_forward(g, &self.params, RENDER, &self.render, input)?;
        Ok(g.sigmoid(out.var))
    }

    // ── point queries ─────────────────────────────────────────────────

    fn points_var(g: &mut Graph, pts: &[[f64; 3]]) -> Var {
        g.constant(Tensor::from_rows(pts))
    }

    /// Deformation offset and feature at `x`.
    pub fn deform(&self, x: [f64; 3], identity: &str) -> Result<([f64; 3], Vec<f64>)> {
        let idx = self.codebook.index(identity)?;
        let mut g = Graph::new();
        let p = Self::points_var(&mut g, &[x]);
        let ev = self.eval_fields(&mut g, p, &[idx], false, false)?;
        let d = g.value(ev.d.var).row(0);
        Ok(([d[0], d[1], d[2]], g.value(ev.f_def.var).row(0).to_vec()))
    }

    /// Template SDF alone, no identity involved.
    pub fn template_sdf(&self, x: [f64; 3]) -> Result<f64> {
        let mut g = Graph::new();
        let p = Self::points_var(&mut g, &[x]);
        let y = Jet::seed(&mut g, p, false)?;
        let out = self.template_jet(&mut g, y)?;
        Ok(g.value(out.var).get(0, 0))
    }

    fn sample(&self, x: [f64; 3], identity: &str, refined: bool) -> Result<FieldSample> {
        let idx = self.codebook.index(identity)?;
        let mut g = Graph::new();
        let p = Self::points_var(&mut g, &[x]);
        let ev = self.eval_fields(&mut g, p, &[idx], true, refined)?;
        let val = |g: &mut Graph, j: Jet| -> Result<Vec<f64>> {
            let v = j.value(g)?;
            Ok(g.value(v).row(0).to_vec())
        };
        let d = val(&mut g, ev.d)?;
        let s = val(&mut g, ev.s)?[0];
        let grad_s = ev.s.gradient(&mut g, 0)?;
        let gs = g.value(grad_s).row(0).to_vec();
        let (delta, f_dis, grad_s_hat, s_hat) = match (ev.delta, ev.f_dis) {
            (Some(dl), Some(fd)) => {
                let delta = val(&mut g, dl)?[0];
                let s_hat = val(&mut g, ev.sdf)?[0];
                let gh = ev.sdf.gradient(&mut g, 0)?;
                let gh = g.value(gh).row(0).to_vec();
                (Some(delta), Some(val(&mut g, fd)?), Some([gh[0], gh[1], gh[2]]), s_hat)
            }
            _ => (None, None, None, s),
        };
        Ok(FieldSample {
            x,
            d: [d[0], d[1], d[2]],
            s,
            delta,
            s_hat,
            f_def: val(&mut g, ev.f_def)?,
            f_tem: val(&mut g, ev.f_tem)?,
            f_dis,
            grad_s: [gs[0], gs[1], gs[2]],
            grad_s_hat,
        })
    }

    /// `s = f_tem(x + d)` with features and gradient.
    pub fn base_sdf(&self, x: [f64; 3], identity: &str) -> Result<FieldSample> {
        self.sample(x, identity, false)
    }

    /// Adds `δ`, `F_dis` and `ŝ = s + δ`. Stage-2 models only.
    pub fn refined_sdf(&self, x: [f64; 3], identity: &str) -> Result<FieldSample> {
        if self.stage != Stage::Two {
            return Err(Error::Capability("refined_sdf requires a stage-2 model".into()));
        }
        self.sample(x, identity, true)
    }

    /// Unit surface normal; `(gradient, true)` when the gradient vanishes.
    pub fn normal(&self, x: [f64; 3], identity: &str, stage: Stage) -> Result<([f64; 3], bool)> {
        let s = self.sample(x, identity, stage == Stage::Two)?;
        let grad = if stage == Stage::Two { s.grad_s_hat.expect("stage-2 sample") } else { s.grad_s };
        Ok(normalize_or_flag(grad))
    }

    /// Value-only SDF at many points for one identity, evaluated in chunks.
    pub fn sdf_batch(&self, points: &[[f64; 3]], identity: usize, refined: bool) -> Result<Vec<f64>> {
        self.sdf_batch_mixed(points, &vec![identity; points.len()], refined)
    }

    pub fn sdf_batch_mixed(&self, points: &[[f64; 3]], ids: &[usize], refined: bool) -> Result<Vec<f64>> {
        const CHUNK: usize = 8192;
        let mut out = Vec::with_capacity(points.len());
        for (pts, idx) in points.chunks(CHUNK).zip(ids.chunks(CHUNK)) {
            let mut g = Graph::new();
            let p = Self::points_var(&mut g, pts);
            let ev = self.eval_fields(&mut g, p, idx, false, refined)?;
            out.extend_from_slice(g.value(ev.sdf.var).data());
        }
        Ok(out)
    }

    // ── stage-2 surgery ───────────────────────────────────────────────

    /// Converts a stage-1 model into a stage-2 one: the rendering network
    /// gains layers, an input skip and extra encoding bands, and a
    /// displacement network with a zero `δ` head is attached. Existing
    /// parameters are carried over unchanged, so rendering and geometry are
    /// the same immediately after promotion.
    pub fn promote(&mut self, seed: u64) -> Result<bool> {
        if self.stage == Stage::Two {
            log::warn!("model is already stage 2; promotion skipped");
            return Ok(false);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let old_layout = self.render_input_layout();
        let old_point = self.render_point_pe;
        let old_view = self.render_view_pe;
        let old_render = self.render.clone();

        self.stage = Stage::Two;
        self.render_point_pe = PositionalEncodingSpec::new(old_point.num_frequencies + self.arch.frequencies_added);
        self.render_view_pe = PositionalEncodingSpec::new(old_view.num_frequencies + self.arch.frequencies_added);
        let layout = self.render_input_layout();
        let width = self.arch.hidden_width;
        let n_layers = self.arch.render_layers + self.arch.render_layers_added;
        let mut render = MlpSpec::new(layout.total(), width, n_layers, 3, Activation::Relu);
        if self.arch.render_layers_added > 0 {
            render = render.with_skips(&[self.arch.render_skip_layer], false);
        }
        render.validate()?;

        // Old input column → new input column.
        let mut col_map = Vec::with_capacity(old_layout.total());
        col_map.extend(0..old_layout.point);
        col_map.extend((0..old_layout.view).map(|c| layout.point + c));
        let base = layout.point + layout.view;
        let carried = old_layout.code + old_layout.features;
        col_map.extend((0..carried).map(|c| base + c));
        let normal_new = base + layout.code + layout.features;
        col_map.extend((0..old_layout.normal).map(|c| normal_new + c));
        debug_assert_eq!(col_map.len(), old_layout.total());

        let mut new_params = Vec::new();
        let w0 = self.params.by_name(&MlpSpec::weight_name(RENDER, 0))?.clone();
        let mut nw0 = Tensor::zeros(layout.total(), w0.cols());
        for (old_r, &new_r) in col_map.iter().enumerate() {
            for c in 0..w0.cols() {
                nw0.set(new_r, c, w0.get(old_r, c));
            }
        }
        new_params.push((MlpSpec::weight_name(RENDER, 0), nw0));
        new_params.push((MlpSpec::bias_name(RENDER, 0), self.params.by_name(&MlpSpec::bias_name(RENDER, 0))?.clone()));

        // Middle layers copied, inserted layers act as identities on the
        // (non-negative) ReLU activations, the old output layer moves last.
        let old_last = old_render.num_layers() - 1;
        let inserted = self.arch.render_layers_added;
        for i in 1..render.num_layers() {
            let (w, b) = if i < old_last {
                (
                    self.params.by_name(&MlpSpec::weight_name(RENDER, i))?.clone(),
                    self.params.by_name(&MlpSpec::bias_name(RENDER, i))?.clone(),
                )
            } else if i < old_last + inserted {
                let rows = render.layer_input(i);
                let mut w = Tensor::zeros(rows, width);
                for c in 0..width {
                    w.set(c, c, 1.0);
                }
                (w, Tensor::zeros(1, width))
            } else {
                let mut w = self.params.by_name(&MlpSpec::weight_name(RENDER, old_last))?.clone();
                if render.is_skip(i) {
                    let mut grown = Tensor::zeros(render.layer_input(i), w.cols());
                    grown.data_mut()[..w.len()].copy_from_slice(w.data());
                    w = grown;
                }
                (w, self.params.by_name(&MlpSpec::bias_name(RENDER, old_last))?.clone())
            };
            if w.rows() != render.layer_input(i) {
                return Err(Error::Config(format!(
                    "render skip layer {} must be an inserted layer",
                    self.arch.render_skip_layer
                )));
            }
            new_params.push((MlpSpec::weight_name(RENDER, i), w));
            new_params.push((MlpSpec::bias_name(RENDER, i), b));
        }

        // Rebuild the store so the rendering layers keep a contiguous order.
        let mut store = ParamStore::new();
        for (_, e) in self.params.iter() {
            if !e.name.starts_with(&format!("{RENDER}.")) {
                store.insert(e.name.clone(), e.value.clone());
            }
        }
        for (name, t) in new_params {
            store.insert(name, t);
        }
        let displacement = MlpSpec::new(
            self.render_point_pe.output_dim(3) + self.arch.template_feature_dim + self.arch.deform_feature_dim,
            width,
            self.arch.displacement_layers,
            1 + self.arch.displacement_feature_dim,
            Activation::Softplus { beta: self.arch.softplus_beta },
        );
        init_mlp(&mut store, DISPLACE, &displacement, OutputInit::ZeroLeading(1), &mut rng)?;
        self.params = store;
        self.displacement = Some(displacement);
        self.render = render;
        Ok(true)
    }

    /// Rounds every parameter through `f32`.
    pub fn quantize_f32(&mut self) {
        let ids: Vec<_> = self.params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let q = self.params.get(id).quantize_f32();
            *self.params.get_mut(id) = q;
        }
    }
}

/// Concatenation `F_def ⊕ F_tem` (stage 1) or `F_def ⊕ F_tem ⊕ F_dis` (stage 2).
pub fn assemble_features(sample: &FieldSample, stage: Stage) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(sample.f_def.len() + sample.f_tem.len() + 64);
    out.extend_from_slice(&sample.f_def);
    out.extend_from_slice(&sample.f_tem);
    if stage == Stage::Two {
        let f = sample.f_dis.as_ref().ok_or_else(|| Error::Contract("stage-2 features need F_dis".into()))?;
        out.extend_from_slice(f);
    }
    Ok(out)
}

pub fn normalize_or_flag(v: [f64; 3]) -> ([f64; 3], bool) {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n > 0.0 && n.is_finite() {
        ([v[0] / n, v[1] / n, v[2] / n], false)
    } else {
        (v, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> ArchConfig {
        ArchConfig {
            code_dim: 8,
            hidden_width: 16,
            deform_feature_dim: 6,
            template_feature_dim: 4,
            displacement_feature_dim: 4,
            point_frequencies: 2,
            view_frequencies: 1,
            softplus_beta: 10.0,
            template_skip_layers: vec![4],
            ..ArchConfig::default()
        }
    }

    fn model() -> Model {
        Model::new(small_arch(), vec!["a".into(), "b".into()], FieldOptions::default(), 0.1, 3).unwrap()
    }

    #[test]
    fn fresh_model_has_zero_offsets() {
        let m = model();
        for x in [[0.0, 0.0, 0.0], [0.3, -0.8, 0.1]] {
            let (d, f) = m.deform(x, "a").unwrap();
            assert_eq!(d, [0.0; 3]);
            assert_eq!(f.len(), 6);
        }
    }

    #[test]
    fn zero_deformation_reduces_to_template() {
        let m = model();
        for x in [[0.1, 0.2, 0.3], [-0.9, 0.4, 0.0], [0.0, 0.0, 1.3]] {
            for id in ["a", "b"] {
                assert_eq!(m.base_sdf(x, id).unwrap().s, m.template_sdf(x).unwrap());
            }
        }
    }

    #[test]
    fn initial_template_is_sphere_like() {
        let m = Model::new(ArchConfig::default(), vec!["a".into()], FieldOptions::default(), 0.0, 0).unwrap();
        assert!(m.template_sdf([0.0, 0.0, 0.0]).unwrap() < 0.0);
        assert!(m.template_sdf([2.0, 0.0, 0.0]).unwrap() > 0.0);
    }

    #[test]
    fn unknown_identity_fails() {
        assert!(matches!(model().base_sdf([0.0; 3], "zz"), Err(Error::UnknownIdentity(_))));
    }

    #[test]
    fn stage_one_has_no_refinement() {
        assert!(matches!(model().refined_sdf([0.0; 3], "a"), Err(Error::Capability(_))));
    }

    #[test]
    fn feature_assembly_order_and_dims() {
        let m = Model::new(ArchConfig::default(), vec!["a".into()], FieldOptions::default(), 0.01, 0).unwrap();
        let s = m.base_sdf([0.1, 0.0, 0.2], "a").unwrap();
        let f1 = assemble_features(&s, Stage::One).unwrap();
        assert_eq!(f1.len(), 256);
        assert_eq!(&f1[..192], s.f_def.as_slice());
        assert!(matches!(assemble_features(&s, Stage::Two), Err(Error::Contract(_))));
        let mut m2 = m.clone();
        m2.promote(1).unwrap();
        let s2 = m2.refined_sdf([0.1, 0.0, 0.2], "a").unwrap();
        assert_eq!(assemble_features(&s2, Stage::Two).unwrap().len(), 320);
    }

    #[test]
    fn render_input_widths() {
        let mut m = Model::new(ArchConfig::default(), vec!["a".into()], FieldOptions::default(), 0.0, 0).unwrap();
        assert_eq!(m.render.input_dim(), 39 + 27 + 128 + 256 + 3);
        m.promote(0).unwrap();
        // 3·17 + 3·13 + 128 + 320 + 3
        assert_eq!(m.render.input_dim(), 541);
        assert_eq!(m.render.num_layers(), 6);
        assert_eq!(m.render.skip_layers, vec![3]);
    }

    #[test]
    fn promotion_is_idempotent() {
        let mut m = model();
        assert!(m.promote(0).unwrap());
        let snapshot = m.clone();
        assert!(!m.promote(0).unwrap());
        assert_eq!(m, snapshot);
    }

    #[test]
    fn displacement_is_structural() {
        let mut m = model();
        m.promote(5).unwrap();
        // Perturb the δ head so the displacement is non-trivial.
        let id = m.params.id(&MlpSpec::weight_name(DISPLACE, 3)).unwrap();
        for (i, v) in m.params.get_mut(id).data_mut().iter_mut().enumerate() {
            *v += 0.01 * ((i as f64) * 0.37).sin();
        }
        for x in [[0.1, 0.2, 0.3], [-0.5, 0.5, 0.2], [0.9, -0.1, -0.3]] {
            let s = m.refined_sdf(x, "b").unwrap();
            let delta = s.delta.unwrap();
            assert!(delta != 0.0);
            assert_eq!(s.s_hat, s.s + delta);
        }
    }

    #[test]
    fn swapping_codes_swaps_geometry() {
        let m = model();
        let mut swapped = m.clone();
        swapped.swap_codes(0, 1).unwrap();
        let x = [0.2, -0.3, 0.4];
        assert_eq!(m.base_sdf(x, "a").unwrap().s, swapped.base_sdf(x, "b").unwrap().s);
        assert_eq!(m.base_sdf(x, "b").unwrap().s, swapped.base_sdf(x, "a").unwrap().s);
    }

    #[test]
    fn normals_are_unit() {
        let m = model();
        for x in [[0.4, 0.1, 0.0], [0.0, -0.6, 0.3]] {
            let (n, degenerate) = m.normal(x, "a", Stage::One).unwrap();
            assert!(!degenerate);
            assert!(((n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt() - 1.0).abs() < 1e-12);
        }
        assert!(normalize_or_flag([0.0; 3]).1);
    }
}
