//! Dense layers and multilayer perceptrons with explicit forward/backward passes.
//!
//! A layer computes `y = act(x Wᵀ + b)` for a batch `x` of shape
//! `(batch, in_dim)`; weights are stored `(out_dim, in_dim)`.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::rng::RandomStream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
    /// Identity in the forward pass; marks a layer whose outputs feed a softmax loss.
    Logits,
}

impl Activation {
    fn apply(self, z: &mut Matrix) {
        if self == Activation::Relu {
            for v in z.data_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }

    /// Multiplies `grad` in place by the activation derivative, given the activation output.
    fn backprop(self, output: &Matrix, grad: &mut Matrix) {
        if self == Activation::Relu {
            for (g, y) in grad.data_mut().iter_mut().zip(output.data()) {
                if *y <= 0.0 {
                    *g = 0.0;
                }
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
            Activation::Logits => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            2 => Some(Activation::Logits),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::config(format!(
                "bias length {} does not match out_dim {}",
                bias.len(),
                weight.rows()
            )));
        }
        if !weight.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::input("layer parameters must be finite"));
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    /// He-uniform fan-in initialization, zero bias.
    pub fn he_uniform(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        stream: &mut RandomStream,
    ) -> Self {
        let limit = (6.0 / in_dim as f64).sqrt();
        let weight = Matrix::from_fn(out_dim, in_dim, |_, _| stream.uniform_range(-limit, limit));
        Self {
            weight,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Small random weights plus the identity on the leading square block.
    pub fn near_identity(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        scale: f64,
        stream: &mut RandomStream,
    ) -> Self {
        let limit = scale * (6.0 / in_dim as f64).sqrt();
        let mut weight =
            Matrix::from_fn(out_dim, in_dim, |_, _| stream.uniform_range(-limit, limit));
        for i in 0..in_dim.min(out_dim) {
            weight.set(i, i, weight.get(i, i) + 1.0);
        }
        Self {
            weight,
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, input: &Matrix) -> Matrix {
        let mut z = input.matmul_t(&self.weight);
        z.add_row(&self.bias);
        self.activation.apply(&mut z);
        z
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

/// Layerwise activations of one forward pass: `[input, layer_1, …, output]`.
#[derive(Debug, Clone)]
pub struct Activations(pub Vec<Matrix>);

impl Activations {
    pub fn input(&self) -> &Matrix {
        &self.0[0]
    }

    pub fn output(&self) -> &Matrix {
        self.0.last().expect("activations are never empty")
    }

    pub fn into_output(mut self) -> Matrix {
        self.0.pop().expect("activations are never empty")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Parameter gradients of an [`Mlp`] plus the gradient w.r.t. its input.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrad>,
    pub input: Matrix,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
            input: Matrix::zeros(0, mlp.in_dim()),
        }
    }

    /// Zero gradients with the same layer shapes as `other`.
    pub fn zeros_like_grads(other: &MlpGrads) -> Self {
        Self {
            layers: other
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            input: Matrix::zeros(0, other.input.cols()),
        }
    }

    /// `self += alpha * other` over parameter gradients; the input gradient is left alone.
    pub fn accumulate(&mut self, alpha: f64, other: &MlpGrads) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.axpy(alpha, &b.weight);
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += alpha * y;
            }
        }
    }

    pub fn scaled(&self, alpha: f64) -> MlpGrads {
        MlpGrads {
            layers: self
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: l.weight.scale(alpha),
                    bias: l.bias.iter().map(|b| b * alpha).collect(),
                })
                .collect(),
            input: self.input.scale(alpha),
        }
    }

    /// Parameter gradients flattened in the order of [`Mlp::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("an MLP needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::config(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// He-initialized MLP with `dims = [in, hidden…, out]`; hidden layers use
    /// `hidden`, the last layer uses `output`.
    pub fn he(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        stream: &mut RandomStream,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::config(format!("invalid MLP dims {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                DenseLayer::he_uniform(dims[i], dims[i + 1], act, stream)
            })
            .collect();
        Mlp::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::out_dim)
    }

    pub fn forward(&self, input: &Matrix) -> Result<Activations> {
        if input.cols() != self.in_dim() {
            return Err(Error::config(format!(
                "input has {} columns, MLP expects {}",
                input.cols(),
                self.in_dim()
            )));
        }
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.clone());
        for layer in &self.layers {
            let next = layer.forward(acts.last().expect("non-empty"));
            acts.push(next);
        }
        Ok(Activations(acts))
    }

    /// Output only, without keeping intermediate activations.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.in_dim() {
            return Err(Error::config(format!(
                "input has {} columns, MLP expects {}",
                input.cols(),
                self.in_dim()
            )));
        }
        let mut x = self.layers[0].forward(input);
        for layer in &self.layers[1..] {
            x = layer.forward(&x);
        }
        Ok(x)
    }

    pub fn backward(&self, activations: &Activations, loss_grad: &Matrix) -> Result<MlpGrads> {
        let acts = &activations.0;
        if acts.len() != self.layers.len() + 1 {
            return Err(Error::config(format!(
                "expected {} activations, got {}",
                self.layers.len() + 1,
                acts.len()
            )));
        }
        for (layer, (inp, out)) in self.layers.iter().zip(acts.iter().zip(&acts[1..])) {
            if inp.cols() != layer.in_dim() || out.cols() != layer.out_dim() || inp.rows() != out.rows() {
                return Err(Error::config("activations were not produced by this MLP"));
            }
        }
        let out = activations.output();
        if loss_grad.shape() != out.shape() {
            return Err(Error::config(format!(
                "loss gradient {:?} does not match output {:?}",
                loss_grad.shape(),
                out.shape()
            )));
        }

        let mut grad = loss_grad.clone();
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.backprop(&acts[l + 1], &mut grad);
            let weight = grad.t_matmul(&acts[l]);
            let bias = grad.column_sums();
            let input_grad = grad.matmul(&layer.weight);
            layer_grads.push(LayerGrad { weight, bias });
            grad = input_grad;
        }
        layer_grads.reverse();
        Ok(MlpGrads {
            layers: layer_grads,
            input: grad,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Flattened `[W_1, b_1, W_2, b_2, …]`.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_parameters() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                params.len()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let w = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&params[offset..offset + w]);
            offset += w;
            let b = l.bias.len();
            l.bias.copy_from_slice(&params[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_layer(n: usize, act: Activation) -> DenseLayer {
        DenseLayer::new(Matrix::identity(n), vec![0.0; n], act).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mlp = Mlp::new(vec![identity_layer(3, Activation::Identity)]).unwrap();
        let x = Matrix::new(1, 3, vec![0.5, -2.0, 3.0]).unwrap();
        assert_eq!(mlp.predict(&x).unwrap(), x);
    }

    #[test]
    fn relu_layer_clamps_negatives() {
        let mlp = Mlp::new(vec![identity_layer(2, Activation::Relu)]).unwrap();
        let x = Matrix::new(1, 2, vec![-1.0, 2.0]).unwrap();
        assert_eq!(mlp.predict(&x).unwrap().data(), &[0.0, 2.0]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let mlp = Mlp::new(vec![identity_layer(2, Activation::Relu)]).unwrap();
        let x = Matrix::zeros(4, 3);
        assert!(matches!(mlp.forward(&x), Err(Error::Config(_))));
    }

    #[test]
    fn incompatible_layers_rejected() {
        let mut s = RandomStream::new(1);
        let a = DenseLayer::he_uniform(3, 4, Activation::Relu, &mut s);
        let b = DenseLayer::he_uniform(5, 2, Activation::Identity, &mut s);
        assert!(matches!(Mlp::new(vec![a, b]), Err(Error::Config(_))));
    }

    #[test]
    fn squared_error_at_target_gives_zero_gradients() {
        let mut s = RandomStream::new(3);
        let mlp = Mlp::he(&[4, 3], Activation::Identity, Activation::Identity, &mut s).unwrap();
        let x = Matrix::from_fn(5, 4, |_, _| s.normal());
        let acts = mlp.forward(&x).unwrap();
        // d/dy ½‖y − t‖² at t = y
        let residual = acts.output().sub(acts.output());
        let grads = mlp.backward(&acts, &residual).unwrap();
        assert!(grads.flatten().iter().all(|g| *g == 0.0));
        assert!(grads.input.data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn stacked_linear_input_gradient_is_chain_rule() {
        let mut s = RandomStream::new(11);
        let mlp = Mlp::he(&[3, 4, 2], Activation::Identity, Activation::Identity, &mut s).unwrap();
        let x = Matrix::from_fn(2, 3, |_, _| s.normal());
        let g = Matrix::from_fn(2, 2, |_, _| s.normal());
        let acts = mlp.forward(&x).unwrap();
        let grads = mlp.backward(&acts, &g).unwrap();
        let w1 = &mlp.layers()[0].weight;
        let w2 = &mlp.layers()[1].weight;
        // row form of W1ᵀW2ᵀ·g
        let expected = g.matmul(w2).matmul(w1);
        assert!(grads.input.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn backward_rejects_foreign_activations() {
        let mut s = RandomStream::new(2);
        let a = Mlp::he(&[3, 4, 2], Activation::Relu, Activation::Identity, &mut s).unwrap();
        let b = Mlp::he(&[3, 5, 2], Activation::Relu, Activation::Identity, &mut s).unwrap();
        let acts = b.forward(&Matrix::zeros(2, 3)).unwrap();
        assert!(a.backward(&acts, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn parameter_round_trip() {
        let mut s = RandomStream::new(5);
        let mut mlp = Mlp::he(&[3, 4, 2], Activation::Relu, Activation::Identity, &mut s).unwrap();
        let p = mlp.parameters();
        let shifted: Vec<f64> = p.iter().map(|v| v + 1.0).collect();
        mlp.set_parameters(&shifted).unwrap();
        assert_eq!(mlp.parameters(), shifted);
        assert!(mlp.set_parameters(&p[1..]).is_err());
    }
}
