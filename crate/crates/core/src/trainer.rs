//! Two-stage training: joint template/deformation learning over all
//! identities, promotion, per-identity refinement, and fitting new
//! identities against a frozen template.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataio::{Dataset, Identity, Split};
use crate::diffcore::gradcheck::{check_param_gradients, GradCheckReport};
use crate::diffcore::{
    lr_schedule, AdamConfig, AdamState, Container, Graph, Jet, MlpSpec, ParamId, ParamStore, PositionalEncodingSpec, Precision,
    Tensor, Var,
};
use crate::error::{Error, Result};
use crate::fields::{
    ArchConfig, CodeBook, FieldEval, FieldOptions, GradientSpace, Model, Stage, COLOR_CODES, DEFORM, DISPLACE, LOG_ALPHA, LOG_BETA,
    RENDER, SHAPE_CODES, TEMPLATE,
};
use crate::losses::{
    code_loss, color_loss, deformation_loss, displacement_loss, eikonal_loss, total_loss, LossBreakdown, LossLog, LossTerms,
    LossWeights,
};
use crate::renderer::{render_batch, Camera, Image, ModelField, Ray, RenderSettings, Vec3, BOUND_RADIUS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub rays_per_step: usize,
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub unseen_steps: u64,
    pub lr0: f64,
    pub final_factor: f64,
    pub seed: u64,
    pub render: RenderSettings,
    pub weights: LossWeights,
    /// Eikonal/regularizer probes per step; half reuse ray samples, half are
    /// uniform in the bounding ball.
    pub regularizer_probes: usize,
    /// Training views used per identity (all when unset).
    pub views_per_identity: Option<usize>,
    /// Standard deviation of the initial stage-1 codes.
    pub code_init_std: f64,
    pub stage2_train_template: bool,
    pub stage2_train_deformation: bool,
    pub stage2_train_codes: bool,
    /// Let the rendering network and density adapt when fitting a new
    /// identity; the template is always frozen.
    pub unseen_train_rendering: bool,
    pub checkpoint_precision: Precision,
    /// Checkpoint period in steps (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rays_per_step: 1024,
            stage1_steps: 2000,
            stage2_steps: 3000,
            unseen_steps: 1000,
            lr0: 5e-4,
            final_factor: 0.1,
            seed: 0,
            render: RenderSettings { jitter: true, ..RenderSettings::default() },
            weights: LossWeights::default(),
            regularizer_probes: 1024,
            views_per_identity: None,
            code_init_std: 0.01,
            stage2_train_template: false,
            stage2_train_deformation: true,
            stage2_train_codes: true,
            unseen_train_rendering: true,
            checkpoint_precision: Precision::F32,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rays_per_step == 0 || self.render.n_coarse < 2 {
            return Err(Error::Config("rays_per_step must be positive and n_coarse at least 2".into()));
        }
        if !(self.lr0 > 0.0 && self.final_factor > 0.0) {
            return Err(Error::Config("learning rate and decay factor must be positive".into()));
        }
        if self.views_per_identity == Some(0) {
            return Err(Error::Config("views_per_identity must be positive".into()));
        }
        Ok(())
    }
}

// ── training data ─────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct TrainView {
    pub camera: Camera,
    pub image: Image,
}

#[derive(Clone, Debug)]
pub struct TrainIdentity {
    pub id: String,
    /// Row in the model's code tables.
    pub code: usize,
    pub views: Vec<TrainView>,
}

/// Decoded training views, bound to a model's codebook.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub identities: Vec<TrainIdentity>,
    pub background: Vec3,
}

impl TrainSet {
    pub fn new(identities: &[&Identity], codebook: &CodeBook, views_per_identity: Option<usize>, background: Vec3) -> Result<Self> {
        let mut out = Vec::with_capacity(identities.len());
        for ident in identities {
            let views: Vec<TrainView> = ident
                .views_in(Split::Train)
                .take(views_per_identity.unwrap_or(usize::MAX))
                .map(|v| Ok(TrainView { camera: v.camera.clone(), image: v.load_image()? }))
                .collect::<Result<_>>()?;
            if views.is_empty() {
                return Err(Error::Input(format!("identity `{}` has no training views", ident.id)));
            }
            out.push(TrainIdentity { id: ident.id.clone(), code: codebook.index(&ident.id)?, views });
        }
        if out.is_empty() {
            return Err(Error::Input("no identities to train on".into()));
        }
        Ok(Self { identities: out, background })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaySample {
    /// Index into the train set.
    pub identity: usize,
    pub view: usize,
    pub pixel: (usize, usize),
    pub gt: Vec3,
}

/// Draws rays uniformly: identity, then one of its views, then a pixel.
pub fn sample_ray_batch<R: Rng>(set: &TrainSet, identities: &[usize], n: usize, rng: &mut R) -> Result<Vec<RaySample>> {
    if identities.is_empty() || set.identities.is_empty() {
        return Err(Error::Input("cannot sample rays from an empty dataset".into()));
    }
    (0..n)
        .map(|_| {
            let identity = identities[rng.gen_range(0..identities.len())];
            let ident = set.identities.get(identity).ok_or_else(|| Error::Input(format!("identity index {identity} out of range")))?;
            let view = rng.gen_range(0..ident.views.len());
            let img = &ident.views[view].image;
            let pixel = (rng.gen_range(0..img.width), rng.gen_range(0..img.height));
            Ok(RaySample { identity, view, pixel, gt: img.get(pixel.0, pixel.1) })
        })
        .collect()
}

fn uniform_in_ball<R: Rng>(rng: &mut R, radius: f64) -> Vec3 {
    loop {
        let p: Vec3 = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] <= 1.0 {
            return p.map(|c| c * radius);
        }
    }
}

// ── one optimization step ─────────────────────────────────────────────

/// Per-probe regularizer inputs gathered from ray samples and uniform probes.
struct Probes {
    grad_s: Var,
    d: Var,
    jac_d: Var,
    delta: Option<(Var, Var)>,
}

fn gather_probes(g: &mut Graph, model: &Model, ev: &FieldEval, rows: &[usize]) -> Result<Probes> {
    let grad_s = match model.options.eikonal_space {
        GradientSpace::Observation => ev.s.gradient(g, 0)?,
        GradientSpace::Template => template_gradient(g, model, ev)?,
    };
    let d = ev.d.value(g)?;
    let jac_d = ev.d.jacobian3(g, 0)?;
    let delta = match ev.delta {
        Some(dl) => {
            let v = dl.value(g)?;
            let gr = dl.gradient(g, 0)?;
            Some((g.gather_rows(v, rows.to_vec())?, g.gather_rows(gr, rows.to_vec())?))
        }
        None => None,
    };
    Ok(Probes {
        grad_s: g.gather_rows(grad_s, rows.to_vec())?,
        d: g.gather_rows(d, rows.to_vec())?,
        jac_d: g.gather_rows(jac_d, rows.to_vec())?,
        delta,
    })
}

/// `∇_y f_tem` at `y = x + d`, with `y` held fixed so only the template
/// receives this gradient.
fn template_gradient(g: &mut Graph, model: &Model, ev: &FieldEval) -> Result<Var> {
    let d = ev.d.value(g)?;
    let y = g.add(ev.points, d)?;
    let y = g.detach(y);
    let yj = Jet::seed(g, y, true)?;
    let out = model.template_jet(g, yj)?;
    out.gradient(g, 0)
}

fn concat_probes(g: &mut Graph, a: Probes, b: Probes) -> Result<Probes> {
    Ok(Probes {
        grad_s: g.concat_rows(&[a.grad_s, b.grad_s])?,
        d: g.concat_rows(&[a.d, b.d])?,
        jac_d: g.concat_rows(&[a.jac_d, b.jac_d])?,
        delta: match (a.delta, b.delta) {
            (Some((va, ga)), Some((vb, gb))) => Some((g.concat_rows(&[va, vb])?, g.concat_rows(&[ga, gb])?)),
            _ => None,
        },
    })
}

/// Builds the full training loss for a ray batch.
pub fn training_loss<R: Rng>(
    g: &mut Graph,
    model: &Model,
    stage: Stage,
    set: &TrainSet,
    batch: &[RaySample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Var, LossBreakdown)> {
    let field = ModelField::new(model, stage)?;
    let rays: Vec<Ray> = batch
        .iter()
        .map(|s| {
            let cam = &set.identities[s.identity].views[s.view].camera;
            Ok(Ray::bounded(cam.center(), cam.pixel_direction(s.pixel.0, s.pixel.1)?))
        })
        .collect::<Result<_>>()?;
    let ids: Vec<usize> = batch.iter().map(|s| set.identities[s.identity].code).collect();
    let settings = RenderSettings { background: set.background, ..cfg.render.clone() };
    let br = render_batch(g, &field, &rays, &ids, &settings, rng)?;
    let gt = g.constant(Tensor::from_rows(&batch.iter().map(|s| s.gt).collect::<Vec<_>>()));
    let w = &cfg.weights;
    let col = color_loss(g, br.color, gt, w.color)?;

    let ev = br.shading.fields.ok_or_else(|| Error::Contract("model shading carries field evaluations".into()))?;
    let n_ray = cfg.regularizer_probes / 2;
    let n_uni = cfg.regularizer_probes - n_ray;
    let rows: Vec<usize> = (0..n_ray).map(|_| rng.gen_range(0..ev.n)).collect();
    let mut probes = gather_probes(g, model, &ev, &rows)?;
    if n_uni > 0 {
        let pts: Vec<Vec3> = (0..n_uni).map(|_| uniform_in_ball(rng, BOUND_RADIUS)).collect();
        let pid: Vec<usize> = (0..n_uni).map(|_| ids[rng.gen_range(0..ids.len())]).collect();
        let pv = g.constant(Tensor::from_rows(&pts));
        let ev_u = model.eval_fields(g, pv, &pid, true, stage == Stage::Two)?;
        let all: Vec<usize> = (0..n_uni).collect();
        let uni = gather_probes(g, model, &ev_u, &all)?;
        probes = concat_probes(g, probes, uni)?;
    }
    let eik = eikonal_loss(g, probes.grad_s, w.eikonal)?;
    let def = deformation_loss(g, probes.d, probes.jac_d, w.offset, w.offset_grad)?;
    let dis = match stage {
        Stage::One => None,
        Stage::Two => Some(displacement_loss(g, probes.delta, w.displacement, w.displacement_tv)?),
    };
    let zs_t = g.param_by_name(&model.params, SHAPE_CODES)?;
    let zc_t = g.param_by_name(&model.params, COLOR_CODES)?;
    let zs = g.gather_rows(zs_t, ids.clone())?;
    let zc = g.gather_rows(zc_t, ids)?;
    let cod = code_loss(g, zs, zc, w.code)?;
    total_loss(g, LossTerms { col, def, eik, dis, cod })
}

/// Optimizer state for one training phase. Parameters whose names start
/// with any of `frozen` are held constant.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub step: u64,
    pub total_steps: u64,
    pub stage: Stage,
    pub frozen: Vec<String>,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: Model, stage: Stage, frozen: Vec<String>, total_steps: u64, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(&model.params, AdamConfig::default());
        Ok(Self { model, adam, step: 0, total_steps, stage, frozen, config })
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        self.model
            .params
            .iter()
            .filter(|(_, e)| self.frozen.iter().any(|f| e.name.starts_with(f.as_str())))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn lr(&self) -> f64 {
        lr_schedule(self.step, self.total_steps, self.config.lr0, self.config.final_factor)
    }

    /// One Adam update on a freshly sampled batch. On a non-finite loss or
    /// gradient the model is left untouched and a numeric error returned.
    pub fn step<R: Rng>(&mut self, set: &TrainSet, identities: &[usize], rng: &mut R) -> Result<LossBreakdown> {
        let batch = sample_ray_batch(set, identities, self.config.rays_per_step, rng)?;
        let mut g = Graph::new();
        g.freeze(self.frozen_ids());
        let (loss, breakdown) = training_loss(&mut g, &self.model, self.stage, set, &batch, &self.config, rng)?;
        let grads = g.backward(loss)?;
        if grads.params().any(|(_, gr)| gr.is_some_and(|v| v.iter().any(|x| !x.is_finite()))) {
            return Err(Error::Numeric(format!("non-finite gradient at step {}", self.step)));
        }
        let lr = self.lr();
        self.adam.step(&mut self.model.params, &grads, lr)?;
        self.step += 1;
        Ok(breakdown)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            step: self.step,
            adam: Some(self.adam.clone()),
            config: serde_json::to_value(&self.config).unwrap_or(serde_json::Value::Null),
            frozen: self.frozen.clone(),
        }
    }

    /// Resumes from a checkpoint holding optimizer state.
    pub fn resume(ckpt: Checkpoint, total_steps: u64, config: TrainConfig) -> Result<Self> {
        let adam = ckpt.adam.ok_or_else(|| Error::Input("checkpoint has no optimizer state".into()))?;
        let stage = ckpt.model.stage;
        Ok(Self { model: ckpt.model, adam, step: ckpt.step, total_steps, stage, frozen: ckpt.frozen, config })
    }

    /// Runs until `total_steps`, logging each step and checkpointing to
    /// `out/<name>.ckpt`. On a numeric failure the last good state is saved
    /// before the error is returned.
    pub fn run<R: Rng>(&mut self, set: &TrainSet, identities: &[usize], rng: &mut R, out: Option<(&Path, &str)>) -> Result<Vec<LossBreakdown>> {
        let mut log = match out {
            Some((dir, name)) => Some(LossLog::open(&dir.join(format!("{name}_log.csv")))?),
            None => None,
        };
        let mut history = Vec::with_capacity((self.total_steps - self.step.min(self.total_steps)) as usize);
        while self.step < self.total_steps {
            let lr = self.lr();
            match self.step(set, identities, rng) {
                Ok(b) => {
                    if let Some(log) = log.as_mut() {
                        log.append(self.step, lr, &b)?;
                    }
                    if self.step % 100 == 0 || self.step == 1 {
                        log::info!("step {}/{} lr {lr:.3e} loss {:.5} (col {:.5})", self.step, self.total_steps, b.total, b.col);
                    }
                    history.push(b);
                    let every = self.config.checkpoint_every;
                    if let (Some((dir, name)), true) = (out, every > 0 && self.step % every == 0) {
                        self.checkpoint().save(&dir.join(format!("{name}.ckpt")), self.config.checkpoint_precision)?;
                    }
                }
                Err(e @ Error::Numeric(_)) => {
                    if let Some((dir, name)) = out {
                        let path = dir.join(format!("{name}.last_good.ckpt"));
                        self.checkpoint().save(&path, self.config.checkpoint_precision)?;
                        log::error!("aborting: {e}; last good state saved to {}", path.display());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        if let Some((dir, name)) = out {
            self.checkpoint().save(&dir.join(format!("{name}.ckpt")), self.config.checkpoint_precision)?;
        }
        Ok(history)
    }
}

fn phase_rng(seed: u64, phase: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(phase);
    rng
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<LossBreakdown>,
}

/// Joint training of template, deformation, rendering network, codes and
/// density over every identity in `dataset`.
pub fn train_stage1(
    dataset: &Dataset,
    arch: &ArchConfig,
    options: FieldOptions,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    if dataset.identities.is_empty() {
        return Err(Error::Input("stage 1 needs at least one identity".into()));
    }
    let ids: Vec<String> = dataset.identities.iter().map(|i| i.id.clone()).collect();
    let model = Model::new(arch.clone(), ids, options, cfg.code_init_std, cfg.seed)?;
    let refs: Vec<&Identity> = dataset.identities.iter().collect();
    let set = TrainSet::new(&refs, &model.codebook, cfg.views_per_identity, dataset.background)?;
    let all: Vec<usize> = (0..set.identities.len()).collect();
    let mut trainer = Trainer::new(model, Stage::One, Vec::new(), cfg.stage1_steps, cfg.clone())?;
    let mut rng = phase_rng(cfg.seed, 1);
    let history = trainer.run(&set, &all, &mut rng, out.map(|d| (d, "stage1")))?;
    Ok(TrainOutcome { checkpoint: trainer.checkpoint(), history })
}

/// Stage-2 copy of a stage-1 checkpoint's model. A stage-2 input is
/// returned unchanged with a warning.
pub fn promote_to_stage2(ckpt: &Checkpoint, seed: u64) -> Result<Model> {
    let mut model = ckpt.model.clone();
    model.promote(seed)?;
    Ok(model)
}

fn stage2_frozen(cfg: &TrainConfig) -> Vec<String> {
    let mut frozen = Vec::new();
    if !cfg.stage2_train_template {
        frozen.push(format!("{TEMPLATE}."));
    }
    if !cfg.stage2_train_deformation {
        frozen.push(format!("{DEFORM}."));
    }
    if !cfg.stage2_train_codes {
        frozen.push("code.".into());
    }
    frozen
}

/// Per-identity refinement with the displacement field active. Returns a
/// checkpoint for this identity only.
pub fn train_stage2(identity: &str, ckpt: &Checkpoint, dataset: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let model = promote_to_stage2(ckpt, cfg.seed)?;
    model.codebook.index(identity)?;
    let ident = dataset.identity(identity)?;
    let set = TrainSet::new(&[ident], &model.codebook, cfg.views_per_identity, dataset.background)?;
    let mut trainer = Trainer::new(model, Stage::Two, stage2_frozen(cfg), cfg.stage2_steps, cfg.clone())?;
    let mut rng = phase_rng(cfg.seed, 2);
    let name = format!("stage2_{identity}");
    let history = trainer.run(&set, &[0], &mut rng, out.map(|d| (d, name.as_str())))?;
    Ok(TrainOutcome { checkpoint: trainer.checkpoint(), history })
}

/// Adds `identity` with zero codes to a stage-1 model and fits it from its
/// views while the template stays frozen. With `refine`, a stage-2 pass
/// follows.
pub fn fit_unseen_identity(
    identity: &Identity,
    template: &Checkpoint,
    background: Vec3,
    cfg: &TrainConfig,
    refine: bool,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    if template.model.stage != Stage::One {
        return Err(Error::Input("unseen-identity fitting starts from a stage-1 checkpoint".into()));
    }
    if identity.views_in(Split::Train).next().is_none() {
        return Err(Error::Input(format!("identity `{}` has no posed training views", identity.id)));
    }
    let mut model = template.model.clone();
    let code = model.add_identity(&identity.id)?;
    let set = TrainSet::new(&[identity], &model.codebook, cfg.views_per_identity, background)?;
    debug_assert_eq!(set.identities[0].code, code);
    let mut frozen = vec![format!("{TEMPLATE}.")];
    if !cfg.unseen_train_rendering {
        frozen.extend([format!("{RENDER}."), LOG_ALPHA.to_string(), LOG_BETA.to_string()]);
    }
    let mut trainer = Trainer::new(model, Stage::One, frozen, cfg.unseen_steps, cfg.clone())?;
    let mut rng = phase_rng(cfg.seed, 3);
    let name = format!("unseen_{}", identity.id);
    let mut history = trainer.run(&set, &[0], &mut rng, out.map(|d| (d, name.as_str())))?;
    let mut ckpt = trainer.checkpoint();
    if refine {
        let mut cfg2 = cfg.clone();
        cfg2.stage2_train_template = false;
        let model = promote_to_stage2(&ckpt, cfg.seed)?;
        let mut t2 = Trainer::new(model, Stage::Two, stage2_frozen(&cfg2), cfg.stage2_steps, cfg2)?;
        let mut rng = phase_rng(cfg.seed, 4);
        let name = format!("unseen_{}_stage2", identity.id);
        history.extend(t2.run(&set, &[0], &mut rng, out.map(|d| (d, name.as_str())))?);
        ckpt = t2.checkpoint();
    }
    Ok(TrainOutcome { checkpoint: ckpt, history })
}

// ── checkpoints ───────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub step: u64,
    pub adam: Option<AdamState>,
    pub config: serde_json::Value,
    pub frozen: Vec<String>,
}

const PARAM_PREFIX: &str = "param:";
const M_PREFIX: &str = "adam.m:";
const V_PREFIX: &str = "adam.v:";

impl Checkpoint {
    pub fn to_container(&self, precision: Precision) -> Container {
        let m = &self.model;
        let header = json!({
            "kind": "headsdf-model",
            "stage": m.stage.number(),
            "step": self.step,
            "arch": m.arch,
            "options": m.options,
            "identities": m.codebook.ids(),
            "networks": {
                "deform": m.deform,
                "template": m.template,
                "displacement": m.displacement,
                "render": m.render,
            },
            "encodings": {
                "geometry": m.geometry_pe,
                "render_point": m.render_point_pe,
                "render_view": m.render_view_pe,
            },
            "adam": self.adam.as_ref().map(|a| json!({"config": a.config, "step": a.step})),
            "frozen": self.frozen,
            "config": self.config,
        });
        let mut arrays: Vec<(String, Tensor)> =
            m.params.iter().map(|(_, e)| (format!("{PARAM_PREFIX}{}", e.name), e.value.clone())).collect();
        if let Some(a) = &self.adam {
            for (id, e) in m.params.iter() {
                let (r, c) = (e.value.rows(), e.value.cols());
                arrays.push((format!("{M_PREFIX}{}", e.name), Tensor::new(r, c, a.m[id.index()].clone()).expect("moment shape")));
                arrays.push((format!("{V_PREFIX}{}", e.name), Tensor::new(r, c, a.v[id.index()].clone()).expect("moment shape")));
            }
        }
        Container { precision, header, arrays }
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let h = &c.header;
        let field = |k: &str| h.get(k).cloned().ok_or_else(|| Error::Format(format!("checkpoint header lacks `{k}`")));
        let de = |v: serde_json::Value, what: &str| -> Result<serde_json::Value> {
            if v.is_null() {
                Err(Error::Format(format!("checkpoint header `{what}` is null")))
            } else {
                Ok(v)
            }
        };
        fn parse<T: serde::de::DeserializeOwned>(v: serde_json::Value, what: &str) -> Result<T> {
            serde_json::from_value(v).map_err(|e| Error::Format(format!("checkpoint `{what}`: {e}")))
        }
        if h.get("kind").and_then(|k| k.as_str()) != Some("headsdf-model") {
            return Err(Error::Format("not a model checkpoint".into()));
        }
        let stage = match h.get("stage").and_then(|s| s.as_u64()) {
            Some(1) => Stage::One,
            Some(2) => Stage::Two,
            other => return Err(Error::Format(format!("invalid stage tag {other:?}"))),
        };
        let nets = field("networks")?;
        let enc = field("encodings")?;
        let get = |v: &serde_json::Value, k: &str| v.get(k).cloned().unwrap_or(serde_json::Value::Null);
        let displacement: Option<MlpSpec> = parse(get(&nets, "displacement"), "displacement")?;
        let mut params = ParamStore::new();
        let mut moments: Vec<(String, Tensor)> = Vec::new();
        for (name, t) in &c.arrays {
            if let Some(n) = name.strip_prefix(PARAM_PREFIX) {
                params.insert(n, t.clone());
            } else {
                moments.push((name.clone(), t.clone()));
            }
        }
        let model = Model {
            arch: parse(field("arch")?, "arch")?,
            stage,
            options: parse(field("options")?, "options")?,
            codebook: CodeBook::new(parse(field("identities")?, "identities")?)?,
            params,
            deform: parse(de(get(&nets, "deform"), "deform")?, "deform")?,
            template: parse(de(get(&nets, "template"), "template")?, "template")?,
            displacement,
            render: parse(de(get(&nets, "render"), "render")?, "render")?,
            geometry_pe: parse::<PositionalEncodingSpec>(get(&enc, "geometry"), "geometry")?,
            render_point_pe: parse(get(&enc, "render_point"), "render_point")?,
            render_view_pe: parse(get(&enc, "render_view"), "render_view")?,
        };
        validate_model(&model)?;
        let adam = match h.get("adam").filter(|a| !a.is_null()) {
            Some(a) => {
                let mut st = AdamState::new(&model.params, parse(get(a, "config"), "adam.config")?);
                st.step = get(a, "step").as_u64().ok_or_else(|| Error::Format("adam step".into()))?;
                for (id, e) in model.params.iter() {
                    let find = |p: &str| {
                        moments
                            .iter()
                            .find(|(n, _)| n.strip_prefix(p) == Some(e.name.as_str()))
                            .map(|(_, t)| t.data().to_vec())
                            .ok_or_else(|| Error::Format(format!("missing optimizer moments for `{}`", e.name)))
                    };
                    st.m[id.index()] = find(M_PREFIX)?;
                    st.v[id.index()] = find(V_PREFIX)?;
                }
                Some(st)
            }
            None => None,
        };
        Ok(Self {
            model,
            step: h.get("step").and_then(|s| s.as_u64()).unwrap_or(0),
            adam,
            config: h.get("config").cloned().unwrap_or(serde_json::Value::Null),
            frozen: h.get("frozen").map(|f| parse(f.clone(), "frozen")).transpose()?.unwrap_or_default(),
        })
    }

    pub fn save(&self, path: &Path, precision: Precision) -> Result<()> {
        self.to_container(precision).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// Checks that every network's parameters exist with the expected shapes
/// and that the stage tag matches the networks present.
pub fn validate_model(m: &Model) -> Result<()> {
    let check = |prefix: &str, spec: &MlpSpec| -> Result<()> {
        spec.validate()?;
        for i in 0..spec.num_layers() {
            let w = m.params.by_name(&MlpSpec::weight_name(prefix, i)).map_err(|_| Error::Format(format!("missing `{prefix}.{i}.weight`")))?;
            let b = m.params.by_name(&MlpSpec::bias_name(prefix, i)).map_err(|_| Error::Format(format!("missing `{prefix}.{i}.bias`")))?;
            let out = spec.layer_widths[i + 1];
            if w.shape() != [spec.layer_input(i), out] || b.shape() != [1, out] {
                return Err(Error::Format(format!("`{prefix}.{i}` has mismatched shapes")));
            }
        }
        Ok(())
    };
    check(DEFORM, &m.deform)?;
    check(TEMPLATE, &m.template)?;
    check(RENDER, &m.render)?;
    match (m.stage, &m.displacement) {
        (Stage::Two, Some(spec)) => check(DISPLACE, spec)?,
        (Stage::One, None) => {
            if !m.params.ids_with_prefix(&format!("{DISPLACE}.")).is_empty() {
                return Err(Error::Format("stage-1 checkpoint carries displacement parameters".into()));
            }
        }
        _ => return Err(Error::Format("stage tag disagrees with the displacement network".into())),
    }
    if m.render.input_dim() != m.render_input_layout().total() {
        return Err(Error::Format("rendering network input does not match the encodings".into()));
    }
    let n = m.codebook.len();
    for name in [SHAPE_CODES, COLOR_CODES] {
        if m.params.by_name(name)?.shape() != [n, m.arch.code_dim] {
            return Err(Error::Format(format!("`{name}` does not match the codebook")));
        }
    }
    m.params.by_name(LOG_ALPHA)?;
    m.params.by_name(LOG_BETA)?;
    Ok(())
}

/// Locates the checkpoint for `stage` (and `identity` in stage 2) under a
/// run directory.
pub fn checkpoint_path(dir: &Path, stage: Stage, identity: Option<&str>) -> PathBuf {
    match (stage, identity) {
        (Stage::Two, Some(id)) => dir.join(format!("stage2_{id}.ckpt")),
        _ => dir.join("stage1.ckpt"),
    }
}

// ── gradient verification ─────────────────────────────────────────────

/// Tiny 64-bit networks (two hidden layers of width 16) for gradient checks.
pub fn toy_arch() -> ArchConfig {
    ArchConfig {
        code_dim: 4,
        hidden_width: 16,
        deform_layers: 3,
        template_layers: 3,
        displacement_layers: 3,
        render_layers: 3,
        render_layers_added: 2,
        render_skip_layer: 3,
        template_skip_layers: vec![],
        deform_feature_dim: 4,
        template_feature_dim: 4,
        displacement_feature_dim: 4,
        point_frequencies: 2,
        view_frequencies: 1,
        frequencies_added: 1,
        softplus_beta: 10.0,
        init_radius: 0.5,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradSuiteEntry {
    pub report: GradCheckReport,
    /// Threshold on the report's maximum relative error.
    pub tolerance: f64,
    /// Whether the term differentiates through spatial gradients.
    pub second_order: bool,
}

impl GradSuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

/// Analytic-versus-central-difference checks for every loss term, each on
/// its own, through the full field stack of a toy model. Parameters are
/// randomized away from their structured initialization so no term sits at
/// a kink.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradSuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids = vec!["a".to_string(), "b".to_string()];
    let mut model = Model::new(toy_arch(), ids, FieldOptions::default(), 0.3, seed)?;
    model.promote(seed)?;
    let pids: Vec<ParamId> = model.params.iter().map(|(id, _)| id).collect();
    for id in pids {
        for v in model.params.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    let probes: Vec<Vec3> = (0..6).map(|_| uniform_in_ball(&mut rng, 0.8)).collect();
    let probe_ids: Vec<usize> = (0..probes.len()).map(|i| i % 2).collect();
    let cam = Camera::look_at([0.3, 0.2, 2.5], [0.0; 3], [0.0, 1.0, 0.0], 6.0, 4, 4)?;
    let rays: Vec<Ray> = [(0, 0), (2, 1), (3, 3)]
        .iter()
        .map(|&(u, v)| Ok(Ray::bounded(cam.center(), cam.pixel_direction(u, v)?)))
        .collect::<Result<_>>()?;
    let gt: Vec<Vec3> = (0..rays.len()).map(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.0))).collect();
    let settings = RenderSettings { n_coarse: 8, n_fine: 0, jitter: false, chunk: 64, background: [1.0; 3] };

    #[derive(Clone, Copy, PartialEq)]
    enum Term {
        Color,
        Offset,
        OffsetGrad,
        Eikonal,
        Displacement,
        DisplacementTv,
        Code,
    }
    let terms = [
        ("color", Term::Color, false),
        ("offset", Term::Offset, false),
        ("offset_gradient", Term::OffsetGrad, true),
        ("eikonal", Term::Eikonal, true),
        ("displacement", Term::Displacement, false),
        ("displacement_tv", Term::DisplacementTv, true),
        ("code", Term::Code, false),
    ];
    let mut out = Vec::with_capacity(terms.len());
    for (label, term, second_order) in terms {
        let loss_fn = |g: &mut Graph, store: &ParamStore| -> Result<Var> {
            let mut m = model.clone();
            m.params = store.clone();
            if term == Term::Color {
                let field = ModelField::new(&m, Stage::Two)?;
                let mut r = rand::rngs::mock::StepRng::new(0, 0);
                let br = render_batch(g, &field, &rays, &[0, 1, 0], &settings, &mut r)?;
                let t = g.constant(Tensor::from_rows(&gt));
                return color_loss(g, br.color, t, 1.0);
            }
            if term == Term::Code {
                let zs = g.param_by_name(&m.params, SHAPE_CODES)?;
                let zc = g.param_by_name(&m.params, COLOR_CODES)?;
                return code_loss(g, zs, zc, 1.0);
            }
            let pts = g.constant(Tensor::from_rows(&probes));
            let ev = m.eval_fields(g, pts, &probe_ids, true, true)?;
            let d = ev.d.value(g)?;
            let jac = ev.d.jacobian3(g, 0)?;
            match term {
                Term::Offset => deformation_loss(g, d, jac, 1.0, 0.0),
                Term::OffsetGrad => deformation_loss(g, d, jac, 0.0, 1.0),
                Term::Eikonal => {
                    let gr = ev.s.gradient(g, 0)?;
                    eikonal_loss(g, gr, 1.0)
                }
                _ => {
                    let dl = ev.delta.ok_or_else(|| Error::Contract("stage-2 toy model".into()))?;
                    let v = dl.value(g)?;
                    let gr = dl.gradient(g, 0)?;
                    let (l5, l6) = if term == Term::Displacement { (1.0, 0.0) } else { (0.0, 1.0) };
                    displacement_loss(g, Some((v, gr)), l5, l6)
                }
            }
        };
        let mut store = model.params.clone();
        let report = check_param_gradients(label, &mut store, 1e-6, 12, |_| true, loss_fn)?;
        out.push(GradSuiteEntry { report, tolerance: if second_order { 1e-4 } else { 1e-5 }, second_order });
    }
    Ok(out)
}
