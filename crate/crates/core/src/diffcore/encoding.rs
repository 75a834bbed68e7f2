use serde::{Deserialize, Serialize};

/// Sinusoidal positional encoding with frequency bands `2^k π`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncodingSpec {
    pub num_frequencies: usize,
    pub include_input: bool,
}

impl PositionalEncodingSpec {
    pub fn new(num_frequencies: usize) -> Self {
        Self { num_frequencies, include_input: true }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * (2 * self.num_frequencies + usize::from(self.include_input))
    }
}

/// `[x, sin(2⁰πx), cos(2⁰πx), …, sin(2^{L−1}πx), cos(2^{L−1}πx)]`, each
/// term a full copy of the input vector.
pub fn positional_encode(x: &[f64], spec: PositionalEncodingSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.output_dim(x.len()));
    if spec.include_input {
        out.extend_from_slice(x);
    }
    for l in 0..spec.num_frequencies {
        let w = (1u64 << l) as f64 * std::f64::consts::PI;
        out.extend(x.iter().map(|v| (w * v).sin()));
        out.extend(x.iter().map(|v| (w * v).cos()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{Graph, Tensor};

    #[test]
    fn origin_with_two_bands() {
        let out = positional_encode(&[0.0, 0.0, 0.0], PositionalEncodingSpec::new(2));
        assert_eq!(out, vec![0., 0., 0., 0., 0., 0., 1., 1., 1., 0., 0., 0., 1., 1., 1.]);
    }

    #[test]
    fn dimension_counts() {
        assert_eq!(PositionalEncodingSpec::new(6).output_dim(3), 39);
        for l in 0..10 {
            for include_input in [false, true] {
                let spec = PositionalEncodingSpec { num_frequencies: l, include_input };
                let out = positional_encode(&[0.1, 0.2, 0.3], spec);
                assert_eq!(out.len(), 3 * (2 * l + usize::from(include_input)));
                assert_eq!(out.len(), spec.output_dim(3));
            }
        }
    }

    #[test]
    fn zero_bands_is_identity() {
        let x = [0.25, -1.5, 3.0];
        assert_eq!(positional_encode(&x, PositionalEncodingSpec::new(0)), x.to_vec());
    }

    #[test]
    fn graph_op_matches_plain_encoding() {
        let spec = PositionalEncodingSpec::new(3);
        let pts = [[0.1, -0.7, 0.33], [1.2, 0.0, -0.05]];
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&pts));
        let y = g.jet_pe(x, 1, 3, true).unwrap();
        for (r, p) in pts.iter().enumerate() {
            assert_eq!(g.value(y).row(r), positional_encode(p, spec).as_slice());
        }
    }
}
