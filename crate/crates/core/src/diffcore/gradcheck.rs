//! Central finite-difference checks of analytic parameter gradients.

use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)` over the
    /// checked coordinates; absolute difference when both norms vanish.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub label: String,
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Relative error between two gradient vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compares `∂loss/∂θ` from one backward pass against central differences
/// with step `h`, for every parameter whose name passes `filter`. At most
/// `max_coords` evenly strided coordinates are probed per tensor.
pub fn check_param_gradients<F>(
    label: &str,
    store: &mut ParamStore,
    h: f64,
    max_coords: usize,
    filter: impl Fn(&str) -> bool,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<(usize, Vec<f64>)> = store
        .iter()
        .map(|(id, e)| (id.index(), grads.param(id).map_or_else(|| vec![0.0; e.value.len()], <[f64]>::to_vec)))
        .collect();
    drop(g);

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, store)?;
        Ok(g.value(l).item())
    };

    let mut entries = Vec::new();
    let ids: Vec<_> = store.iter().map(|(id, e)| (id, e.name.clone(), e.value.len())).collect();
    for (id, name, len) in ids {
        if !filter(&name) || len == 0 {
            continue;
        }
        let stride = len.div_ceil(max_coords.max(1)).max(1);
        let coords: Vec<usize> = (0..len).step_by(stride).collect();
        let mut a = Vec::with_capacity(coords.len());
        let mut n = Vec::with_capacity(coords.len());
        for &c in &coords {
            let orig = store.get(id).data()[c];
            store.get_mut(id).data_mut()[c] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[c] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[c] = orig;
            n.push((plus - minus) / (2.0 * h));
            a.push(analytic[id.index()].1[c]);
        }
        let analytic_norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        entries.push(GradCheckEntry { name, checked: coords.len(), rel_error: relative_error(&a, &n), analytic_norm });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { label: label.to_string(), entries, max_rel_error })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::{init_mlp, mlp_forward, spatial_gradient, Activation, Jet, MlpSpec, OutputInit, Tensor};

    #[test]
    fn quadratic_gradient_is_twice_the_weights() {
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::from_rows(&[[0.5, -1.5, 2.0]]));
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let sq = g.square(w);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.param(id).unwrap(), &[1.0, -3.0, 4.0]);
    }

    #[test]
    fn unreachable_parameter_gets_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.insert("a", Tensor::scalar(2.0));
        let b = store.insert("b", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let _vb = g.param(&store, b);
        let loss = g.square(va);
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(b).map_or(true, |gb| gb.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn non_scalar_root_is_a_usage_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 2));
        assert!(matches!(g.backward(x), Err(crate::Error::Usage(_))));
    }

    fn toy(store: &mut ParamStore, act: Activation, seed: u64) -> MlpSpec {
        let spec = MlpSpec::new(3, 16, 3, 2, act).with_skips(&[1], true);
        init_mlp(store, "net", &spec, OutputInit::Uniform, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        spec
    }

    fn probe_points() -> Tensor {
        Tensor::from_rows(&[[0.1, 0.2, -0.3], [0.5, -0.4, 0.05], [-0.7, 0.3, 0.6]])
    }

    #[test]
    fn mlp_loss_gradients_match_finite_differences() {
        let mut store = ParamStore::new();
        let spec = toy(&mut store, Activation::Softplus { beta: 3.0 }, 4);
        let pts = probe_points();
        let report = check_param_gradients("mlp", &mut store, 1e-5, 64, |_| true, |g, s| {
            let x = g.constant(pts.clone());
            let j = Jet::lift(g, x, 1)?;
            let out = mlp_forward(g, s, "net", &spec, j)?;
            let sq = g.square(out.var);
            Ok(g.mean_all(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:#?}");
    }

    #[test]
    fn second_order_path_matches_finite_differences() {
        let mut store = ParamStore::new();
        let spec = toy(&mut store, Activation::Softplus { beta: 5.0 }, 11);
        let pts = probe_points();
        let report = check_param_gradients("eikonal-like", &mut store, 1e-5, 64, |_| true, |g, s| {
            let x = g.constant(pts.clone());
            let grad = spatial_gradient(g, x, |g, j| {
                let out = mlp_forward(g, s, "net", &spec, j)?;
                out.slice_cols(g, 0, 1)
            })?;
            let n = g.norm_rows(grad);
            let d = g.offset(n, -1.0);
            let sq = g.square(d);
            Ok(g.mean_all(sq))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:#?}");
    }

    #[test]
    fn spatial_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let spec = toy(&mut store, Activation::Softplus { beta: 10.0 }, 2);
        let p = [0.2, -0.1, 0.4];
        let f = |q: [f64; 3]| {
            let mut g = Graph::new();
            let x = g.constant(Tensor::from_rows(&[q]));
            let j = Jet::lift(&mut g, x, 1).unwrap();
            let out = mlp_forward(&mut g, &store, "net", &spec, j).unwrap();
            g.value(out.var).get(0, 0)
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[p]));
        let grad = spatial_gradient(&mut g, x, |g, j| {
            let out = mlp_forward(g, &store, "net", &spec, j)?;
            out.slice_cols(g, 0, 1)
        })
        .unwrap();
        let analytic = g.value(grad).data().to_vec();
        let h = 1e-5;
        let numeric: Vec<f64> = (0..3)
            .map(|i| {
                let (mut a, mut b) = (p, p);
                a[i] += h;
                b[i] -= h;
                (f(a) - f(b)) / (2.0 * h)
            })
            .collect();
        assert!(relative_error(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn relu_network_gradients_match() {
        let mut store = ParamStore::new();
        let spec = toy(&mut store, Activation::Relu, 21);
        let pts = probe_points();
        let report = check_param_gradients("relu", &mut store, 1e-6, 64, |_| true, |g, s| {
            let x = g.constant(pts.clone());
            let j = Jet::lift(g, x, 1)?;
            let out = mlp_forward(g, s, "net", &spec, j)?;
            let sg = g.sigmoid(out.var);
            Ok(g.sum_all(sg))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:#?}");
    }
}
