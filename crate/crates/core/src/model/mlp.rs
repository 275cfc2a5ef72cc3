//! The feedforward predictor N_θ and its tape recording.

use crate::numerics::{DenseMatrix, DenseVector, GradTape, NodeId, RngStream};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
}

/// A k-layer network is k linear layers with ReLU between them
/// (k − 1 activations); `hidden_layers` counts the width-`hidden_width`
/// layers, so k = hidden_layers + 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub activation: Activation,
}

impl MlpSpec {
    /// The "k-layer feedforward network" convention.
    pub fn k_layer(k: usize, input_dim: usize, output_dim: usize, hidden_width: usize) -> Self {
        assert!(k >= 2, "need at least one hidden layer");
        Self {
            input_dim,
            output_dim,
            hidden_layers: k - 1,
            hidden_width,
            activation: Activation::Relu,
        }
    }

    /// (rows, cols) of each linear layer in order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            shapes.push((self.hidden_width, fan_in));
            fan_in = self.hidden_width;
        }
        shapes.push((self.output_dim, fan_in));
        shapes
    }

    pub fn n_params(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c + r).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerParams {
    pub weight: DenseMatrix,
    pub bias: DenseVector,
}

/// All trainable weights θ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    /// He-uniform initialization: W ~ U(−√(6/fan_in), √(6/fan_in)), b = 0.
    pub fn init(spec: &MlpSpec, rng: &mut RngStream) -> Self {
        let layers = spec
            .layer_shapes()
            .iter()
            .map(|&(rows, cols)| {
                let bound = (6.0 / cols as f64).sqrt();
                let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
                LayerParams {
                    weight: DenseMatrix::from_vec(rows, cols, data),
                    bias: DenseVector::zeros(rows),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn validate(&self, spec: &MlpSpec) -> bool {
        let shapes = spec.layer_shapes();
        self.layers.len() == shapes.len()
            && self.layers.iter().zip(&shapes).all(|(l, &(r, c))| {
                l.weight.rows() == r
                    && l.weight.cols() == c
                    && l.bias.len() == r
                    && l.weight.all_finite()
                    && l.bias.all_finite()
            })
    }

    /// Flat view aligned with [`flat_grads`]: weights row-major, then bias,
    /// per layer in order.
    pub fn flatten(&self) -> DenseVector {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend_from_slice(l.weight.as_slice());
            v.extend_from_slice(l.bias.as_slice());
        }
        DenseVector::from_vec(v)
    }

    pub fn unflatten(&mut self, flat: &DenseVector) {
        let mut off = 0;
        for l in &mut self.layers {
            let (r, c) = (l.weight.rows(), l.weight.cols());
            l.weight =
                DenseMatrix::from_vec(r, c, flat.as_slice()[off..off + r * c].to_vec());
            off += r * c;
            l.bias = DenseVector::from_vec(flat.as_slice()[off..off + r].to_vec());
            off += r;
        }
        debug_assert_eq!(off, flat.len());
    }
}

/// Standardization of the input parameters, fit on the training set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: DenseVector,
    pub std: DenseVector,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: DenseVector::zeros(dim), std: DenseVector::filled(dim, 1.0) }
    }

    pub fn fit(samples: &[DenseVector]) -> Self {
        assert!(!samples.is_empty());
        let dim = samples[0].len();
        let n = samples.len() as f64;
        let mut mean = DenseVector::zeros(dim);
        for s in samples {
            mean.axpy(1.0 / n, s);
        }
        let mut var = DenseVector::zeros(dim);
        for s in samples {
            for i in 0..dim {
                var[i] += (s[i] - mean[i]).powi(2) / n;
            }
        }
        let std = DenseVector::from_vec(var.iter().map(|v| v.sqrt().max(1e-8)).collect());
        Self { mean, std }
    }

    pub fn apply(&self, p: &DenseVector) -> DenseVector {
        DenseVector::from_vec(
            (0..p.len()).map(|i| (p[i] - self.mean[i]) / self.std[i]).collect(),
        )
    }
}

/// Plain forward pass: ŷ₀ = N_θ(p).
pub fn forward_net(params: &ModelParams, p: &DenseVector) -> DenseVector {
    let mut h = p.clone();
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        let mut out = layer.weight.matvec(&h);
        out.axpy(1.0, &layer.bias);
        if i < last {
            for v in out.as_mut_slice() {
                *v = v.max(0.0);
            }
        }
        h = out;
    }
    h
}

/// Tape-recorded forward pass. Returns the output node and the (weight,
/// bias) leaf ids per layer, in the [`ModelParams::flatten`] order.
pub fn forward_net_tape(
    tape: &mut GradTape,
    params: &ModelParams,
    p: &DenseVector,
) -> (NodeId, Vec<(NodeId, NodeId)>) {
    let mut h = tape.leaf(p.clone());
    let mut leaves = Vec::with_capacity(params.layers.len());
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        let w = tape.leaf(DenseVector::from_vec(layer.weight.as_slice().to_vec()));
        let b = tape.leaf(layer.bias.clone());
        leaves.push((w, b));
        let wx = tape.matvec_param(w, layer.weight.rows(), layer.weight.cols(), h);
        let z = tape.add(wx, b);
        h = if i < last { tape.relu(z) } else { z };
    }
    (h, leaves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape_backward;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_weights_give_final_bias() {
        let spec = MlpSpec::k_layer(3, 2, 2, 4);
        let mut rng = RngStream::new(1);
        let mut params = ModelParams::init(&spec, &mut rng);
        for l in &mut params.layers {
            l.weight = DenseMatrix::zeros(l.weight.rows(), l.weight.cols());
        }
        let n = params.layers.len();
        params.layers[n - 1].bias = DenseVector::from_vec(vec![0.7, -0.2]);
        let out = forward_net(&params, &DenseVector::from_vec(vec![3.0, -1.0]));
        assert_eq!(out.as_slice(), &[0.7, -0.2]);
    }

    #[test]
    fn single_linear_layer_is_the_map() {
        let spec =
            MlpSpec { input_dim: 2, output_dim: 2, hidden_layers: 1, hidden_width: 2, activation: Activation::Relu };
        let mut params = ModelParams {
            layers: vec![
                LayerParams { weight: DenseMatrix::identity(2), bias: DenseVector::zeros(2) },
                LayerParams {
                    weight: DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]),
                    bias: DenseVector::from_vec(vec![1.0, 1.0]),
                },
            ],
        };
        assert!(params.validate(&spec));
        // Positive input passes the hidden ReLU unchanged.
        let out = forward_net(&params, &DenseVector::from_vec(vec![1.0, 2.0]));
        assert_eq!(out.as_slice(), &[3.0, 7.0]);
        // Flatten/unflatten round-trip.
        let flat = params.flatten();
        let mut params2 = params.clone();
        params2.unflatten(&flat);
        assert_eq!(params2.flatten().as_slice(), flat.as_slice());
        params.layers[0].bias[0] = 9.0;
        assert_ne!(params.flatten().as_slice(), flat.as_slice());
    }

    #[test]
    fn deterministic_init_and_forward() {
        let spec = MlpSpec::k_layer(5, 3, 2, 16);
        let a = ModelParams::init(&spec, &mut RngStream::new(77));
        let b = ModelParams::init(&spec, &mut RngStream::new(77));
        assert_eq!(a.flatten().as_slice(), b.flatten().as_slice());
        let p = DenseVector::from_vec(vec![0.1, -0.4, 0.9]);
        assert_eq!(forward_net(&a, &p).as_slice(), forward_net(&b, &p).as_slice());
    }

    #[test]
    fn tape_forward_matches_value_forward() {
        let spec = MlpSpec::k_layer(3, 2, 1, 8);
        let params = ModelParams::init(&spec, &mut RngStream::new(5));
        let p = DenseVector::from_vec(vec![0.3, -0.8]);
        let direct = forward_net(&params, &p);
        let mut tape = GradTape::new();
        let (out, leaves) = forward_net_tape(&mut tape, &params, &p);
        assert_abs_diff_eq!(tape.value(out)[0], direct[0], epsilon = 1e-14);

        // Gradient of the scalar output wrt every weight, against FD.
        tape.set_root(out);
        let grads = tape_backward(&tape).unwrap();
        let (w0, _) = leaves[0];
        let gw = grads.of(w0, params.layers[0].weight.as_slice().len());
        let h = 1e-6;
        for j in 0..gw.len() {
            let mut pp = params.clone();
            let (r, c) = (pp.layers[0].weight.rows(), pp.layers[0].weight.cols());
            let mut data = pp.layers[0].weight.as_slice().to_vec();
            data[j] += h;
            pp.layers[0].weight = DenseMatrix::from_vec(r, c, data.clone());
            let fp = forward_net(&pp, &p)[0];
            data[j] -= 2.0 * h;
            pp.layers[0].weight = DenseMatrix::from_vec(r, c, data);
            let fm = forward_net(&pp, &p)[0];
            let fd = (fp - fm) / (2.0 * h);
            assert_abs_diff_eq!(gw[j], fd, epsilon = 1e-5);
        }
    }
}
