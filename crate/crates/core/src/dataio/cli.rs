//! Command-line front end. Every subcommand reads the JSON config, honors
//! `--seed`, and writes only below `--out`.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::{generate_synthetic, load_dataset, Config, Dataset, Split, MANIFEST_NAME};
use crate::diffcore::write_atomic;
use crate::error::{Error, Result};
use crate::evalkit::{color_transfer_render, evaluate_identity, extract_mesh, IdentityMetrics, MetricsReport};
use crate::fields::{Model, Stage};
use crate::renderer::{render_image, Camera, ModelField};
use crate::trainer::{checkpoint_path, fit_unseen_identity, gradient_suite, train_stage1, train_stage2, Checkpoint};

#[derive(Debug, Parser)]
#[command(name = "headsdf", version, about = "Template-based neural head reconstruction")]
pub struct Cli {
    /// JSON configuration; built-in desk defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory; all outputs go here.
    #[arg(long, global = true, default_value = "run")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Views per identity (synthesis) or training views used (fitting).
    #[arg(long, global = true)]
    pub views: Option<usize>,
    /// Comma-separated identity names, or a count for `synth`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub identities: Option<Vec<String>>,
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: Option<u8>,
    /// Grid resolution for mesh extraction and evaluation.
    #[arg(long, global = true)]
    pub resolution: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic multi-identity dataset with ground-truth meshes.
    Synth,
    /// Stage 1: joint template, deformation and appearance training.
    TrainTemplate,
    /// Stage 2: promote and refine one identity.
    Refine { id: String },
    /// Fit identities absent from the template checkpoint.
    FitUnseen,
    /// Marching-cubes mesh of an identity.
    ExtractMesh { id: String },
    /// Render an identity from a dataset view index or a pose JSON file.
    Render { id: String, view: String },
    /// Chamfer distance and PSNR for every trained identity.
    Eval,
    /// Render one identity's geometry with another's appearance.
    TransferColor { geo_id: String, color_id: String },
    /// Finite-difference verification of all loss gradients.
    Gradcheck,
}

/// Parses `argv` and runs; returns the process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.eval.seed = seed;
    }
    if let Some(r) = cli.resolution {
        cfg.eval.mesh_resolution = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage_arg(cli: &Cli) -> Option<Stage> {
    cli.stage.map(|s| if s == 2 { Stage::Two } else { Stage::One })
}

fn dataset(cli: &Cli, cfg: &Config) -> Result<Dataset> {
    let path = cfg.dataset.clone().unwrap_or_else(|| cli.out.join("data"));
    if !path.exists() {
        return Err(Error::data(&path, "dataset not found (run `synth` or set `dataset` in the config)"));
    }
    load_dataset(&path)
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// The checkpoint holding `id` at `stage`: a trained identity's own
/// checkpoint, or one produced by unseen-identity fitting.
fn model_for(out: &Path, id: &str, stage: Option<Stage>) -> Result<Model> {
    let stage1 = checkpoint_path(out, Stage::One, None);
    let candidates: Vec<PathBuf> = match stage {
        Some(Stage::Two) => vec![checkpoint_path(out, Stage::Two, Some(id)), out.join(format!("unseen_{id}_stage2.ckpt"))],
        Some(Stage::One) => vec![stage1, out.join(format!("unseen_{id}.ckpt"))],
        None => vec![
            checkpoint_path(out, Stage::Two, Some(id)),
            out.join(format!("unseen_{id}_stage2.ckpt")),
            stage1,
            out.join(format!("unseen_{id}.ckpt")),
        ],
    };
    for p in &candidates {
        if p.exists() {
            let ck = Checkpoint::load(p)?;
            if ck.model.codebook.index(id).is_ok() {
                return Ok(ck.model);
            }
        }
    }
    Err(Error::UnknownIdentity(format!("{id} (no checkpoint under {} contains it)", out.display())))
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseFile {
    intrinsics: [[f64; 3]; 3],
    c2w: [[f64; 4]; 4],
    width: usize,
    height: usize,
}

fn camera_for(ds: &Dataset, id: &str, view: &str) -> Result<(Camera, String)> {
    if let Ok(k) = view.parse::<usize>() {
        let ident = ds.identity(id)?;
        let v = ident.views.get(k).ok_or_else(|| Error::Usage(format!("identity `{id}` has {} views, asked for {k}", ident.views.len())))?;
        return Ok((v.camera.clone(), format!("view{k:02}")));
    }
    let p = Path::new(view);
    let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    let pose: PoseFile = serde_json::from_str(&text).map_err(|e| Error::data(p, e.to_string()))?;
    let m = pose.c2w;
    let r = [[m[0][0], m[0][1], m[0][2]], [m[1][0], m[1][1], m[1][2]], [m[2][0], m[2][1], m[2][2]]];
    let r = super::normalize_rotation(r, 1e-8).map_err(|e| Error::data(p, e))?;
    let cam = Camera::new(pose.intrinsics, r, [m[0][3], m[1][3], m[2][3]], pose.width, pose.height)?;
    let stem = p.file_stem().map_or("pose".into(), |s| s.to_string_lossy().into_owned());
    Ok((cam, stem))
}

fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn execute(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let out = cli.out.as_path();
    ensure_dir(out)?;
    match &cli.command {
        Command::Synth => {
            if let Some(v) = cli.views {
                cfg.synth.views = v;
            }
            if let Some(ids) = &cli.identities {
                let [n] = ids.as_slice() else {
                    return Err(Error::Usage("synth takes --identities <count>".into()));
                };
                cfg.synth.identities = n.parse().map_err(|_| Error::Usage(format!("`{n}` is not an identity count")))?;
            }
            let seed = cli.seed.unwrap_or(cfg.train.seed);
            let res = generate_synthetic(&cfg.synth, &out.join("data"), seed)?;
            println!("wrote {} identities to {}", res.specs.len(), out.join("data").join(MANIFEST_NAME).display());
        }
        Command::TrainTemplate => {
            let mut ds = dataset(cli, &cfg)?;
            if let Some(ids) = &cli.identities {
                ds = ds.subset(ids)?;
            }
            if cli.views.is_some() {
                cfg.train.views_per_identity = cli.views;
            }
            let res = train_stage1(&ds, &cfg.arch, cfg.fields, &cfg.train, Some(out))?;
            report_losses("stage 1", &res.history);
        }
        Command::Refine { id } => {
            let ds = dataset(cli, &cfg)?;
            let ck = Checkpoint::load(&checkpoint_path(out, Stage::One, None))?;
            if cli.views.is_some() {
                cfg.train.views_per_identity = cli.views;
            }
            let res = train_stage2(id, &ck, &ds, &cfg.train, Some(out))?;
            report_losses("stage 2", &res.history);
        }
        Command::FitUnseen => {
            let ds = dataset(cli, &cfg)?;
            let ck = Checkpoint::load(&checkpoint_path(out, Stage::One, None))?;
            let ids: Vec<String> = match &cli.identities {
                Some(ids) => ids.clone(),
                None => ds.identities.iter().map(|i| i.id.clone()).filter(|id| ck.model.codebook.index(id).is_err()).collect(),
            };
            if ids.is_empty() {
                return Err(Error::Usage("every dataset identity is already in the template; pass --identities".into()));
            }
            if cli.views.is_some() {
                cfg.train.views_per_identity = cli.views;
            }
            let refine = stage_arg(cli) == Some(Stage::Two);
            for id in ids {
                let res = fit_unseen_identity(ds.identity(&id)?, &ck, ds.background, &cfg.train, refine, Some(out))?;
                report_losses(&format!("unseen {id}"), &res.history);
            }
        }
        Command::ExtractMesh { id } => {
            let model = model_for(out, id, stage_arg(cli))?;
            let mesh = extract_mesh(&model, id, cfg.eval.mesh_resolution, cfg.eval.mesh_half_extent)?;
            let dir = out.join("meshes");
            ensure_dir(&dir)?;
            let path = dir.join(format!("{id}_stage{}.obj", model.stage.number()));
            mesh.save_obj(&path)?;
            println!("{} vertices, {} faces → {}", mesh.vertices.len(), mesh.faces.len(), path.display());
        }
        Command::Render { id, view } => {
            let model = model_for(out, id, stage_arg(cli))?;
            let ds = dataset(cli, &cfg)?;
            let (cam, tag) = camera_for(&ds, id, view)?;
            let field = ModelField::new(&model, model.stage)?;
            let settings = crate::renderer::RenderSettings { background: ds.background, ..cfg.train.render.clone() };
            let (img, _) = render_image(&cam, &field, model.identity_index(id)?, &settings)?;
            let dir = out.join("renders");
            ensure_dir(&dir)?;
            let path = dir.join(format!("{id}_{tag}_stage{}.png", model.stage.number()));
            img.save_png(&path)?;
            println!("{}", path.display());
        }
        Command::Eval => {
            let ds = dataset(cli, &cfg)?;
            let stage = stage_arg(cli);
            let ids: Vec<String> = match &cli.identities {
                Some(ids) => ids.clone(),
                None => ds.identities.iter().map(|i| i.id.clone()).collect(),
            };
            let settings = cfg.train.render.clone();
            let mut rows: Vec<IdentityMetrics> = Vec::new();
            let mut report_stage = stage.unwrap_or(Stage::One);
            for id in &ids {
                let model = match model_for(out, id, stage) {
                    Ok(m) => m,
                    Err(Error::UnknownIdentity(_)) if cli.identities.is_none() => continue,
                    Err(e) => return Err(e),
                };
                if model.stage == Stage::Two {
                    report_stage = Stage::Two;
                }
                let (m, mesh) = evaluate_identity(&model, id, &ds, &cfg.eval, &settings)?;
                let dir = out.join("meshes");
                ensure_dir(&dir)?;
                mesh.save_obj(&dir.join(format!("{id}_stage{}.obj", model.stage.number())))?;
                rows.push(m);
            }
            if rows.is_empty() {
                return Err(Error::Input("no trained identity to evaluate".into()));
            }
            let report = MetricsReport::new(report_stage, rows);
            let path = out.join(match stage {
                Some(s) => format!("metrics_stage{}.json", s.number()),
                None => "metrics.json".into(),
            });
            report.save(&path)?;
            println!("{}", serde_json::to_string_pretty(&report.mean).unwrap_or_default());
        }
        Command::TransferColor { geo_id, color_id } => {
            let model = model_for(out, geo_id, stage_arg(cli))?;
            model.identity_index(color_id)?;
            let ds = dataset(cli, &cfg)?;
            let cam = ds.identity(geo_id)?.views_in(Split::Train).next().map(|v| v.camera.clone()).ok_or_else(|| {
                Error::Input(format!("identity `{geo_id}` has no training view to render from"))
            })?;
            let settings = crate::renderer::RenderSettings { background: ds.background, ..cfg.train.render.clone() };
            let img = color_transfer_render(&model, geo_id, color_id, &cam, &settings)?;
            let dir = out.join("renders");
            ensure_dir(&dir)?;
            let path = dir.join(format!("transfer_{geo_id}_{color_id}.png"));
            img.save_png(&path)?;
            println!("{}", path.display());
        }
        Command::Gradcheck => {
            let suite = gradient_suite(cfg.train.seed)?;
            save_json(&out.join("gradcheck.json"), &suite)?;
            let mut ok = true;
            for e in &suite {
                println!("{:<18} max rel err {:.3e} (tol {:.0e}) {}", e.report.label, e.report.max_rel_error, e.tolerance, if e.passes() { "ok" } else { "FAIL" });
                ok &= e.passes();
            }
            if !ok {
                return Err(Error::Numeric("gradient check exceeded tolerance".into()));
            }
        }
    }
    Ok(())
}

fn report_losses(label: &str, history: &[crate::losses::LossBreakdown]) {
    if let (Some(a), Some(b)) = (history.first(), history.last()) {
        println!("{label}: {} steps, total loss {:.5} → {:.5}", history.len(), a.total, b.total);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_with_one() {
        assert_eq!(run_cli(["headsdf", "frobnicate"]), 1);
        assert_eq!(run_cli(["headsdf", "eval", "--bogus"]), 1);
        assert_eq!(run_cli(["headsdf", "refine"]), 1);
        assert_eq!(run_cli(["headsdf", "--stage", "3", "eval"]), 1);
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from(["headsdf", "--identities", "id0,id2", "--seed", "9", "render", "id0", "3"]).unwrap();
        assert_eq!(cli.identities.unwrap(), ["id0", "id2"]);
        assert_eq!(cli.seed, Some(9));
        assert!(matches!(cli.command, Command::Render { ref id, ref view } if id == "id0" && view == "3"));
    }
}
