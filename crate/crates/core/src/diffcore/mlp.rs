//! Fully connected networks evaluated over jets.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{Activation, Graph};
use super::jet::Jet;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Layer layout of an MLP.
///
/// `layer_widths = [input, hidden…, output]`; linear layer `i` maps
/// `layer_widths[i]` (plus the raw input when `i` is a skip layer) to
/// `layer_widths[i + 1]`. The last layer has no activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub skip_layers: Vec<usize>,
    pub activation: Activation,
    /// Divide the concatenated skip input by √2.
    #[serde(default)]
    pub skip_scale: bool,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: usize, num_layers: usize, output: usize, activation: Activation) -> Self {
        let mut layer_widths = vec![input];
        layer_widths.extend(std::iter::repeat(hidden).take(num_layers.saturating_sub(1)));
        layer_widths.push(output);
        Self { layer_widths, skip_layers: Vec::new(), activation, skip_scale: false }
    }

    pub fn with_skips(mut self, skips: &[usize], scale: bool) -> Self {
        self.skip_layers = skips.to_vec();
        self.skip_scale = scale;
        self
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("non-empty widths")
    }

    pub fn hidden_width(&self) -> Option<usize> {
        self.layer_widths.get(1).copied().filter(|_| self.num_layers() > 1)
    }

    pub fn is_skip(&self, layer: usize) -> bool {
        self.skip_layers.contains(&layer)
    }

    /// Input width of linear layer `i`.
    pub fn layer_input(&self, i: usize) -> usize {
        self.layer_widths[i] + if self.is_skip(i) { self.layer_widths[0] } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 || self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config(format!("invalid layer widths {:?}", self.layer_widths)));
        }
        if let Some(&s) = self.skip_layers.iter().find(|&&s| s == 0 || s >= self.num_layers()) {
            return Err(Error::Config(format!("skip layer {s} is not an interior layer")));
        }
        Ok(())
    }

    pub fn weight_name(prefix: &str, i: usize) -> String {
        format!("{prefix}.{i}.weight")
    }

    pub fn bias_name(prefix: &str, i: usize) -> String {
        format!("{prefix}.{i}.bias")
    }
}

/// How the last layer's output columns start.
#[derive(Clone, Debug, PartialEq)]
pub enum OutputInit {
    /// Fan-in uniform, like the hidden layers.
    Uniform,
    /// All zeros.
    Zero,
    /// Zeros for columns `0..n`, fan-in uniform for the rest.
    ZeroLeading(usize),
    /// Column 0 approximates `‖x‖ − radius` given an input whose first three
    /// entries are the raw point; other columns fan-in uniform.
    Sphere { radius: f64 },
}

/// Registers and initializes `prefix.{i}.weight` (`[in, out]`) and
/// `prefix.{i}.bias` (`[1, out]`) for every layer.
pub fn init_mlp<R: Rng>(store: &mut ParamStore, prefix: &str, spec: &MlpSpec, output: OutputInit, rng: &mut R) -> Result<()> {
    spec.validate()?;
    let last = spec.num_layers() - 1;
    let geometric = matches!(output, OutputInit::Sphere { .. });
    for i in 0..spec.num_layers() {
        let fan_in = spec.layer_input(i);
        let fan_out = spec.layer_widths[i + 1];
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut w = Tensor::zeros(fan_in, fan_out);
        let mut b = Tensor::zeros(1, fan_out);
        let uniform = |rng: &mut R, t: &mut Tensor, cols: std::ops::Range<usize>| {
            for r in 0..t.rows() {
                for c in cols.clone() {
                    t.set(r, c, rng.gen_range(-bound..bound));
                }
            }
        };
        if geometric && i < last {
            // Hidden layers of a sphere-initialized SDF: N(0, 2/out), with the
            // non-coordinate input columns of the first and skip layers zeroed.
            let normal = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).expect("positive std");
            let skip_start = if spec.is_skip(i) { spec.layer_widths[i] } else { usize::MAX };
            for r in 0..fan_in {
                let raw_col = if i == 0 { Some(r) } else if r >= skip_start { Some(r - skip_start) } else { None };
                let zeroed = matches!(raw_col, Some(c) if c >= 3);
                for c in 0..fan_out {
                    let v = normal.sample(rng);
                    w.set(r, c, if zeroed { 0.0 } else { v });
                }
            }
        } else if i == last {
            match &output {
                OutputInit::Uniform => uniform(rng, &mut w, 0..fan_out),
                OutputInit::Zero => {}
                OutputInit::ZeroLeading(n) => {
                    let n = (*n).min(fan_out);
                    uniform(rng, &mut w, n..fan_out);
                    for c in n..fan_out {
                        b.set(0, c, rng.gen_range(-bound..bound));
                    }
                }
                OutputInit::Sphere { radius } => {
                    let mean = (std::f64::consts::PI / fan_in as f64).sqrt();
                    let normal = Normal::new(mean, 1e-4).expect("positive std");
                    for r in 0..fan_in {
                        w.set(r, 0, normal.sample(rng));
                    }
                    b.set(0, 0, -radius);
                    uniform(rng, &mut w, 1..fan_out);
                }
            }
        } else {
            uniform(rng, &mut w, 0..fan_out);
            for c in 0..fan_out {
                b.set(0, c, rng.gen_range(-bound..bound));
            }
        }
        store.insert(MlpSpec::weight_name(prefix, i), w);
        store.insert(MlpSpec::bias_name(prefix, i), b);
    }
    Ok(())
}

/// Evaluates the network on a jet, recording every layer on the tape.
pub fn mlp_forward(g: &mut Graph, store: &ParamStore, prefix: &str, spec: &MlpSpec, input: Jet) -> Result<Jet> {
    let in_cols = input.cols(g);
    if in_cols != spec.input_dim() {
        return Err(Error::Config(format!(
            "network `{prefix}` expects input width {}, got {in_cols}",
            spec.input_dim()
        )));
    }
    let mut h = input;
    let last = spec.num_layers() - 1;
    for i in 0..spec.num_layers() {
        if spec.is_skip(i) {
            h = Jet::concat(g, &[h, input])?;
            if spec.skip_scale {
                h = h.scale(g, std::f64::consts::FRAC_1_SQRT_2);
            }
        }
        let w = g.param_by_name(store, &MlpSpec::weight_name(prefix, i))?;
        let b = g.param_by_name(store, &MlpSpec::bias_name(prefix, i))?;
        let [wi, wo] = g.shape(w);
        if wi != h.cols(g) || wo != spec.layer_widths[i + 1] {
            return Err(Error::Config(format!(
                "parameter `{prefix}.{i}` has shape [{wi}, {wo}], layer expects [{}, {}]",
                h.cols(g),
                spec.layer_widths[i + 1]
            )));
        }
        h = h.affine(g, w, b)?;
        if i < last {
            h = h.activate(g, spec.activation)?;
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval(store: &ParamStore, spec: &MlpSpec, rows: &[[f64; 2]]) -> Tensor {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(rows));
        let j = Jet::lift(&mut g, x, 1).unwrap();
        let out = mlp_forward(&mut g, store, "net", spec, j).unwrap();
        g.value(out.var).clone()
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let spec = MlpSpec::new(2, 8, 3, 4, Activation::Softplus { beta: 100.0 });
        let mut store = ParamStore::new();
        init_mlp(&mut store, "net", &spec, OutputInit::Zero, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let out = eval(&store, &spec, &[[0.3, -2.0], [5.0, 1.0]]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_clamps_negative_input() {
        let spec = MlpSpec { layer_widths: vec![1, 1, 1], skip_layers: vec![], activation: Activation::Relu, skip_scale: false };
        let mut store = ParamStore::new();
        store.insert("net.0.weight", Tensor::scalar(1.0));
        store.insert("net.0.bias", Tensor::scalar(0.0));
        store.insert("net.1.weight", Tensor::scalar(1.0));
        store.insert("net.1.bias", Tensor::scalar(0.0));
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(-1.0));
        let j = Jet::lift(&mut g, x, 1).unwrap();
        let out = mlp_forward(&mut g, &store, "net", &spec, j).unwrap();
        assert_eq!(g.value(out.var).item(), 0.0);
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = MlpSpec::new(2, 16, 2, 3, Activation::Relu);
        let mut store = ParamStore::new();
        init_mlp(&mut store, "net", &spec, OutputInit::Uniform, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let a = eval(&store, &spec, &[[0.1, 0.2], [-0.4, 0.9]]);
        let b = eval(&store, &spec, &[[0.1, 0.2], [-0.4, 0.9]]);
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn input_width_mismatch_is_a_config_error() {
        let spec = MlpSpec::new(3, 4, 2, 1, Activation::Relu);
        let mut store = ParamStore::new();
        init_mlp(&mut store, "net", &spec, OutputInit::Uniform, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(2, 2));
        let j = Jet::lift(&mut g, x, 1).unwrap();
        assert!(matches!(mlp_forward(&mut g, &store, "net", &spec, j), Err(Error::Config(_))));
    }

    #[test]
    fn invalid_skip_rejected() {
        let spec = MlpSpec::new(3, 4, 3, 1, Activation::Relu).with_skips(&[0], false);
        assert!(spec.validate().is_err());
        let spec = MlpSpec::new(3, 4, 3, 1, Activation::Relu).with_skips(&[3], false);
        assert!(spec.validate().is_err());
        let spec = MlpSpec::new(3, 4, 3, 1, Activation::Relu).with_skips(&[2], false);
        assert!(spec.validate().is_ok());
        assert_eq!(spec.layer_input(2), 7);
    }
}
