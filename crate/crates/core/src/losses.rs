//! Training objectives. Every term reduces by a mean over batch elements and
//! a sum over components inside its norm.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// λ1, color
    pub color: f64,
    /// λ2, offset magnitude
    pub offset: f64,
    /// λ3, offset Jacobian
    pub offset_grad: f64,
    /// λ4, Eikonal
    pub eikonal: f64,
    /// λ5, displacement magnitude
    pub displacement: f64,
    /// λ6, displacement total variation
    pub displacement_tv: f64,
    /// Latent-code prior. Kept separate from λ6 even though both default to
    /// the same value.
    pub code: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            color: 0.01,
            offset: 0.001,
            offset_grad: 0.001,
            eikonal: 0.001,
            displacement: 0.001,
            displacement_tv: 0.001,
            code: 0.001,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub col: f64,
    pub def: f64,
    pub eik: f64,
    pub dis: f64,
    pub cod: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.col, self.def, self.eik, self.dis, self.cod, self.total].iter().all(|v| v.is_finite())
    }
}

fn rows(g: &Graph, x: Var) -> usize {
    g.shape(x)[0]
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// `Σ_rows f(row) / rows`, for a `[n, 1]` column or a row-summed matrix.
fn mean_over_rows(g: &mut Graph, x: Var) -> Var {
    let n = rows(g, x).max(1);
    let s = g.sum_all(x);
    g.scale(s, 1.0 / n as f64)
}

/// `λ1 · mean_r ‖C_r − Ĉ_r‖₁`
pub fn color_loss(g: &mut Graph, c: Var, gt: Var, lambda: f64) -> Result<Var> {
    if g.shape(c) != g.shape(gt) {
        return Err(Error::Shape(format!("color batch {:?} vs target {:?}", g.shape(c), g.shape(gt))));
    }
    if rows(g, c) == 0 {
        log::warn!("color loss on an empty batch");
        return Ok(zero(g));
    }
    let d = g.sub(c, gt)?;
    let a = g.abs(d);
    let m = mean_over_rows(g, a);
    Ok(g.scale(m, lambda))
}

/// `λ2 · mean ‖d‖₂ + λ3 · mean ‖∂d/∂x‖_F`; `jacobian` is `[n, 9]`.
pub fn deformation_loss(g: &mut Graph, d: Var, jacobian: Var, lambda_offset: f64, lambda_grad: f64) -> Result<Var> {
    if g.shape(d)[1] != 3 || g.shape(jacobian)[1] != 9 {
        return Err(Error::Shape("deformation loss expects [n,3] offsets and [n,9] Jacobians".into()));
    }
    if rows(g, d) == 0 {
        return Ok(zero(g));
    }
    let nd = g.norm_rows(d);
    let md = mean_over_rows(g, nd);
    let nj = g.norm_rows(jacobian);
    let mj = mean_over_rows(g, nj);
    let a = g.scale(md, lambda_offset);
    let b = g.scale(mj, lambda_grad);
    g.add(a, b)
}

/// `λ4 · mean (‖∇s‖₂ − 1)²`
pub fn eikonal_loss(g: &mut Graph, grad: Var, lambda: f64) -> Result<Var> {
    if g.shape(grad)[1] != 3 {
        return Err(Error::Shape("eikonal loss expects [n,3] gradients".into()));
    }
    if rows(g, grad) == 0 {
        return Ok(zero(g));
    }
    let n = g.norm_rows(grad);
    let e = g.offset(n, -1.0);
    let sq = g.square(e);
    let m = mean_over_rows(g, sq);
    Ok(g.scale(m, lambda))
}

/// `λ5 · mean |δ| + λ6 · mean ‖∇δ‖₁`; zero when there is no displacement.
pub fn displacement_loss(g: &mut Graph, delta: Option<(Var, Var)>, lambda_mag: f64, lambda_tv: f64) -> Result<Var> {
    let Some((delta, grad)) = delta else { return Ok(zero(g)) };
    if g.shape(delta)[1] != 1 || g.shape(grad)[1] != 3 {
        return Err(Error::Shape("displacement loss expects [n,1] values and [n,3] gradients".into()));
    }
    if rows(g, delta) == 0 {
        return Ok(zero(g));
    }
    let ad = g.abs(delta);
    let md = mean_over_rows(g, ad);
    let ag = g.abs(grad);
    let mg = mean_over_rows(g, ag);
    let a = g.scale(md, lambda_mag);
    let b = g.scale(mg, lambda_tv);
    g.add(a, b)
}

/// `λ · mean_b (‖z_s‖₂ + ‖z_c‖₂)` over the batch's code rows.
pub fn code_loss(g: &mut Graph, z_shape: Var, z_color: Var, lambda: f64) -> Result<Var> {
    if g.shape(z_shape)[0] != g.shape(z_color)[0] {
        return Err(Error::Shape("shape and color code batches differ in length".into()));
    }
    if rows(g, z_shape) == 0 {
        return Ok(zero(g));
    }
    let a = g.norm_rows(z_shape);
    let b = g.norm_rows(z_color);
    let s = g.add(a, b)?;
    let m = mean_over_rows(g, s);
    Ok(g.scale(m, lambda))
}

/// The five loss components on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub col: Var,
    pub def: Var,
    pub eik: Var,
    pub dis: Option<Var>,
    pub cod: Var,
}

/// Sums the components (displacement omitted when absent) and reads back
/// their values. Fails with a numeric error if any component is not finite.
pub fn total_loss(g: &mut Graph, terms: LossTerms) -> Result<(Var, LossBreakdown)> {
    let mut total = g.add(terms.col, terms.eik)?;
    total = g.add(total, terms.def)?;
    if let Some(dis) = terms.dis {
        total = g.add(total, dis)?;
    }
    total = g.add(total, terms.cod)?;
    let val = |v: Var| g.value(v).item();
    let b = LossBreakdown {
        col: val(terms.col),
        def: val(terms.def),
        eik: val(terms.eik),
        dis: terms.dis.map_or(0.0, val),
        cod: val(terms.cod),
        total: val(total),
    };
    if !b.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss component: {b:?}")));
    }
    Ok((total, b))
}

/// Per-step CSV training log.
pub struct LossLog {
    path: std::path::PathBuf,
    file: std::io::BufWriter<std::fs::File>,
}

pub const LOG_HEADER: &str = "step,lr,col,def,eik,dis,cod,total";

impl LossLog {
    /// Opens `path` for appending, writing the header if the file is new.
    pub fn open(path: &Path) -> Result<Self> {
        let exists = path.exists() && std::fs::metadata(path).map(|m| m.len() > 0).unwrap_or(false);
        let f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        let mut file = std::io::BufWriter::new(f);
        if !exists {
            writeln!(file, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { path: path.to_path_buf(), file })
    }

    pub fn append(&mut self, step: u64, lr: f64, b: &LossBreakdown) -> Result<()> {
        writeln!(self.file, "{step},{lr:e},{:e},{:e},{:e},{:e},{:e},{:e}", b.col, b.def, b.eik, b.dis, b.cod, b.total)
            .and_then(|_| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::check_param_gradients;
    use crate::diffcore::ParamStore;
    use proptest::prelude::*;

    fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    fn c(g: &mut Graph, rows: &[[f64; 3]]) -> Var {
        g.constant(Tensor::from_rows(rows))
    }

    #[test]
    fn color_examples() {
        assert_eq!(eval(|g| { let a = c(g, &[[0.2, 0.4, 0.6]]); color_loss(g, a, a, 0.01) }), 0.0);
        let l = eval(|g| { let a = c(g, &[[1.0; 3]]); let b = c(g, &[[0.0; 3]]); color_loss(g, a, b, 0.01) });
        assert!((l - 0.03).abs() < 1e-15);
        let l = eval(|g| { let a = g.constant(Tensor::zeros(0, 3)); color_loss(g, a, a, 0.01) });
        assert_eq!(l, 0.0);
    }

    #[test]
    fn deformation_examples() {
        let zero = eval(|g| { let d = g.constant(Tensor::zeros(4, 3)); let j = g.constant(Tensor::zeros(4, 9)); deformation_loss(g, d, j, 0.001, 0.001) });
        assert_eq!(zero, 0.0);
        let constant = eval(|g| {
            let d = c(g, &[[1.0, 0.0, 0.0]; 5]);
            let j = g.constant(Tensor::zeros(5, 9));
            deformation_loss(g, d, j, 0.001, 0.001)
        });
        assert!((constant - 0.001).abs() < 1e-15);
        let identity = eval(|g| {
            let d = c(g, &[[1.0, 0.0, 0.0]]);
            let j = g.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]]));
            deformation_loss(g, d, j, 0.001, 0.001)
        });
        assert!((identity - (0.001 + 0.001 * 3f64.sqrt())).abs() < 1e-15);
    }

    #[test]
    fn eikonal_examples() {
        let two = eval(|g| { let v = c(g, &[[2.0, 0.0, 0.0], [0.0, 0.0, -2.0]]); eikonal_loss(g, v, 0.001) });
        assert!((two - 0.001).abs() < 1e-15);
        let zero_grad = eval(|g| { let v = c(g, &[[0.0; 3]]); eikonal_loss(g, v, 0.001) });
        assert!((zero_grad - 0.001).abs() < 1e-15);
        // Gradients of a sphere SDF away from its centre.
        let sphere: Vec<[f64; 3]> = [[0.3f64, 0.4, 0.0], [-1.0, 2.0, 2.0]].iter().map(|p| {
            let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            [p[0] / n, p[1] / n, p[2] / n]
        }).collect();
        assert!(eval(|g| { let v = c(g, &sphere); eikonal_loss(g, v, 0.001) }) < 1e-18);
    }

    #[test]
    fn displacement_examples() {
        assert_eq!(eval(|g| displacement_loss(g, None, 0.001, 0.001)), 0.0);
        let constant = eval(|g| {
            let d = g.constant(Tensor::column(vec![0.1; 6]));
            let gr = g.constant(Tensor::zeros(6, 3));
            displacement_loss(g, Some((d, gr)), 0.001, 0.001)
        });
        assert!((constant - 0.0001).abs() < 1e-15);
        // δ(x) = x₁: ∇δ = (1, 0, 0); probes at x₁ = 0 isolate the TV term.
        let tv = eval(|g| {
            let d = g.constant(Tensor::column(vec![0.0; 3]));
            let gr = c(g, &[[1.0, 0.0, 0.0]; 3]);
            displacement_loss(g, Some((d, gr)), 0.001, 0.001)
        });
        assert!((tv - 0.001).abs() < 1e-15);
    }

    #[test]
    fn code_examples() {
        let unit = eval(|g| {
            let zs = g.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0, 0.0]]));
            let zc = g.constant(Tensor::zeros(1, 4));
            code_loss(g, zs, zc, 0.001)
        });
        assert!((unit - 0.001).abs() < 1e-15);
        assert_eq!(eval(|g| { let z = g.constant(Tensor::zeros(3, 4)); code_loss(g, z, z, 0.001) }), 0.0);
    }

    #[test]
    fn total_is_additive_and_rejects_nan() {
        let mut g = Graph::new();
        let mk = |g: &mut Graph, v: f64| g.constant(Tensor::scalar(v));
        let terms = LossTerms { col: mk(&mut g, 0.03), def: mk(&mut g, 0.001), eik: mk(&mut g, 0.001), dis: Some(mk(&mut g, 0.0)), cod: mk(&mut g, 0.001) };
        let (_, b) = total_loss(&mut g, terms).unwrap();
        assert!((b.total - 0.033).abs() < 1e-15);
        assert_eq!(b.total, b.col + b.eik + b.def + b.dis + b.cod);
        let terms = LossTerms { col: mk(&mut g, f64::NAN), ..terms };
        assert!(matches!(total_loss(&mut g, terms), Err(Error::Numeric(_))));
    }

    /// Every loss term, with inputs driven by parameters, against central
    /// differences.
    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let vals = |n: usize, k: usize, s: f64| Tensor::new(n, k, (0..n * k).map(|i| ((i as f64 + 1.0) * s).sin()).collect()).unwrap();
        let pc = store.insert("c", vals(4, 3, 0.7));
        let pd = store.insert("d", vals(4, 3, 1.3));
        let pj = store.insert("j", vals(4, 9, 0.4));
        let pgr = store.insert("grad", vals(5, 3, 0.9));
        let pdl = store.insert("delta", vals(5, 1, 2.1));
        let pz = store.insert("z", vals(3, 6, 0.5));
        let gt = vals(4, 3, 0.2);
        let report = check_param_gradients("losses", &mut store, 1e-6, 64, |_| true, |g, s| {
            let cv = g.param(s, pc);
            let t = g.constant(gt.clone());
            let col = color_loss(g, cv, t, 0.01)?;
            let d = g.param(s, pd);
            let j = g.param(s, pj);
            let def = deformation_loss(g, d, j, 0.001, 0.002)?;
            let gr = g.param(s, pgr);
            let eik = eikonal_loss(g, gr, 0.003)?;
            let dl = g.param(s, pdl);
            let dis = displacement_loss(g, Some((dl, gr)), 0.004, 0.005)?;
            let z = g.param(s, pz);
            let zs = g.slice_cols(z, 0, 3)?;
            let zc = g.slice_cols(z, 3, 3)?;
            let cod = code_loss(g, zs, zc, 0.006)?;
            Ok(total_loss(g, LossTerms { col, def, eik, dis: Some(dis), cod })?.0)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:#?}");
    }

    #[test]
    fn log_writes_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        LossLog::open(&p).unwrap().append(1, 5e-4, &LossBreakdown::default()).unwrap();
        LossLog::open(&p).unwrap().append(2, 5e-4, &LossBreakdown::default()).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("2,"));
    }

    proptest! {
        #[test]
        fn components_are_non_negative(v in prop::collection::vec(-3.0f64..3.0, 27)) {
            let mut g = Graph::new();
            let a = g.constant(Tensor::new(3, 3, v[..9].to_vec()).unwrap());
            let b = g.constant(Tensor::new(3, 3, v[9..18].to_vec()).unwrap());
            let j = g.constant(Tensor::new(1, 9, v[18..].to_vec()).unwrap());
            let d = g.slice_rows(a, 0, 1).unwrap();
            let dl = g.slice_cols(b, 0, 1).unwrap();
            for l in [
                color_loss(&mut g, a, b, 0.01).unwrap(),
                deformation_loss(&mut g, d, j, 0.001, 0.001).unwrap(),
                eikonal_loss(&mut g, a, 0.001).unwrap(),
                displacement_loss(&mut g, Some((dl, b)), 0.001, 0.001).unwrap(),
                code_loss(&mut g, a, b, 0.001).unwrap(),
            ] {
                prop_assert!(g.value(l).item() >= 0.0);
            }
        }

        #[test]
        fn color_loss_permutation_and_scaling(v in prop::collection::vec(0.0f64..1.0, 24), k in 0.001f64..10.0) {
            let a: Vec<[f64; 3]> = v[..12].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let b: Vec<[f64; 3]> = v[12..].chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            let (mut ar, mut br) = (a.clone(), b.clone());
            ar.reverse();
            br.reverse();
            let l = |a: &[[f64; 3]], b: &[[f64; 3]], lam: f64| eval(|g| { let x = c(g, a); let y = c(g, b); color_loss(g, x, y, lam) });
            let base = l(&a, &b, 0.01);
            prop_assert!((base - l(&ar, &br, 0.01)).abs() < 1e-15);
            prop_assert_eq!(l(&a, &b, 0.02), 2.0 * base);
            // Code loss is positively homogeneous.
            let z = |s: f64| eval(|g| { let zs = c(g, &a); let zc = c(g, &b); let zs = g.scale(zs, s); let zc = g.scale(zc, s); code_loss(g, zs, zc, 0.001) });
            prop_assert!((z(k) - k * z(1.0)).abs() < 1e-12 * z(k).max(1e-12));
        }
    }
}
