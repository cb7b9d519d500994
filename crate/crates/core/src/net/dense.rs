//! Fully-connected network with leaky-linear hidden activations and a
//! hand-written reverse pass.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl Topology {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize) -> Result<Self> {
        if input == 0 || output == 0 || hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(Self { input, hidden, output })
    }

    /// Consecutive (fan-in, fan-out) pairs.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let widths: Vec<usize> = std::iter::once(self.input)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.output))
            .collect();
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// out × in
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNetwork {
    topology: Topology,
    layers: Vec<DenseLayer>,
}

/// Intermediate values of a batched forward pass, kept for `backward`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to every layer (N × fan-in).
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of every layer (N × fan-out).
    pre: Vec<DMatrix<f64>>,
    pub output: DMatrix<f64>,
}

/// Same shapes as the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub layers: Vec<DenseLayer>,
}

impl ForwardTrace {
    /// Which side of the kink every hidden pre-activation is on.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden].iter().flat_map(|z| z.iter().map(|v| *v > 0.0)).collect()
    }
}

impl DenseNetwork {
    /// He-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(topology: Topology, rng: &mut R) -> Self {
        let layers = topology
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let bound = (6.0 / fan_in as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                DenseLayer {
                    weight: DMatrix::from_fn(fan_out, fan_in, |_, _| rng.sample(dist)),
                    bias: DVector::zeros(fan_out),
                }
            })
            .collect();
        Self { topology, layers }
    }

    pub fn zeros(topology: Topology) -> Self {
        let layers = topology
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| DenseLayer {
                weight: DMatrix::zeros(fan_out, fan_in),
                bias: DVector::zeros(fan_out),
            })
            .collect();
        Self { topology, layers }
    }

    pub fn from_layers(topology: Topology, layers: Vec<DenseLayer>) -> Result<Self> {
        let shapes = topology.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(Error::Usage(format!(
                "topology has {} layers, got {}",
                shapes.len(),
                layers.len()
            )));
        }
        for (i, ((fan_in, fan_out), layer)) in shapes.iter().zip(&layers).enumerate() {
            if layer.weight.shape() != (*fan_out, *fan_in) || layer.bias.len() != *fan_out {
                return Err(Error::Usage(format!("layer {i} does not match the topology")));
            }
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Usage(format!("layer {i} has non-finite parameters")));
            }
        }
        Ok(Self { topology, layers })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.topology.input
    }

    pub fn output_width(&self) -> usize {
        self.topology.output
    }

    /// Rows of `input` are samples.
    pub fn forward(&self, input: &DMatrix<f64>) -> Result<ForwardTrace> {
        if input.ncols() != self.topology.input {
            return Err(Error::Usage(format!(
                "input width {} does not match network input {}",
                input.ncols(),
                self.topology.input
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &h * layer.weight.transpose();
            for mut row in z.row_iter_mut() {
                row += layer.bias.transpose();
            }
            let next = if i == last { z.clone() } else { z.map(leaky) };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        Ok(ForwardTrace {
            inputs,
            pre,
            output: h,
        })
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<DVector<f64>> {
        let row = DMatrix::from_row_slice(1, x.len(), x);
        Ok(self.forward(&row)?.output.row(0).transpose())
    }

    /// Reverse pass: parameter gradients and the gradient with respect to the
    /// network input, given `d_output = ∂objective/∂output`.
    pub fn backward(&self, trace: &ForwardTrace, d_output: &DMatrix<f64>) -> Result<(NetworkGrads, DMatrix<f64>)> {
        if d_output.shape() != trace.output.shape() || trace.pre.len() != self.layers.len() {
            return Err(Error::Usage("output gradient does not match the forward trace".into()));
        }
        let last = self.layers.len() - 1;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_output.clone();
        for i in (0..self.layers.len()).rev() {
            if i != last {
                delta.zip_apply(&trace.pre[i], |d, z| *d *= leaky_slope(z));
            }
            let weight = delta.transpose() * &trace.inputs[i];
            let bias = DVector::from_iterator(delta.ncols(), delta.column_iter().map(|c| c.sum()));
            let upstream = &delta * &self.layers[i].weight;
            grads.push(DenseLayer { weight, bias });
            delta = upstream;
        }
        grads.reverse();
        Ok((NetworkGrads { layers: grads }, delta))
    }

    pub fn parameter_count(&self) -> usize {
        self.topology.parameter_count()
    }

    pub fn flat_parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(layer.bias.as_slice());
        }
        out
    }

    pub fn set_flat_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::Usage(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for slot in layer.weight.as_mut_slice().iter_mut().chain(layer.bias.as_mut_slice()) {
                *slot = flat[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

impl NetworkGrads {
    pub fn zeros_like(net: &DenseNetwork) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weight: DMatrix::zeros(l.weight.nrows(), l.weight.ncols()),
                    bias: DVector::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &NetworkGrads, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight * scale;
            a.bias += &b.bias * scale;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.as_slice());
            out.extend_from_slice(layer.bias.as_slice());
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn leaky(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        LEAKY_SLOPE * z
    }
}

fn leaky_slope(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}
