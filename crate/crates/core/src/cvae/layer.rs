//! Dense layers and batched MLP forward/backward passes.
//!
//! Batches are column-major: one sample per column. ELU is used on hidden
//! layers; its derivative is recovered from the post-activation value
//! (`1` above zero, `y + 1` below), so caches hold activations only.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One dense layer: `y = W x + b`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Layer {
    /// Fan-in-scaled uniform initialization.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / in_dim as f64).sqrt();
        Layer {
            w: DMatrix::from_fn(out_dim, in_dim, |_, _| rng.random_range(-bound..bound)),
            b: DVector::zeros(out_dim),
        }
    }

    pub fn zeros_like(&self) -> Layer {
        Layer {
            w: DMatrix::zeros(self.w.nrows(), self.w.ncols()),
            b: DVector::zeros(self.b.len()),
        }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = &self.w * x;
        for mut col in y.column_iter_mut() {
            col += &self.b;
        }
        y
    }

    /// Accumulate gradients for `d_out = dL/dy` and return `dL/dx`.
    pub fn backward(
        &self,
        x: &DMatrix<f64>,
        d_out: &DMatrix<f64>,
        grad: &mut Layer,
    ) -> DMatrix<f64> {
        grad.w += d_out * x.transpose();
        for col in d_out.column_iter() {
            grad.b += col;
        }
        self.w.transpose() * d_out
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

/// ELU derivative expressed through the activation output.
fn elu_grad_from_output(y: f64) -> f64 {
    if y > 0.0 {
        1.0
    } else {
        y + 1.0
    }
}

fn elu_inplace(m: &mut DMatrix<f64>) {
    m.apply(|v| *v = elu(*v));
}

/// A stack of dense layers. Hidden layers apply ELU; the last layer is ELU
/// too when `output_elu` is set (encoder trunks) and linear otherwise.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub output_elu: bool,
}

/// Activations recorded during a forward pass: `acts[0]` is the input,
/// `acts[i + 1]` the output of layer `i`.
pub struct MlpCache {
    pub acts: Vec<DMatrix<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.acts.last().expect("cache is never empty")
    }
}

impl Mlp {
    pub fn init(dims: &[usize], output_elu: bool, rng: &mut ChaCha8Rng) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .map(|w| Layer::init(w[1], w[0], rng))
            .collect();
        Mlp { layers, output_elu }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.nrows())
    }

    fn activated(&self, layer_idx: usize) -> bool {
        self.output_elu || layer_idx + 1 < self.layers.len()
    }

    pub fn forward_cached(&self, x: &DMatrix<f64>) -> MlpCache {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(acts.last().unwrap());
            if self.activated(i) {
                elu_inplace(&mut y);
            }
            acts.push(y);
        }
        MlpCache { acts }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(x).acts.pop().unwrap()
    }

    /// Backpropagate `d_out = dL/d(output)`, accumulating into `grads`
    /// (one entry per layer) and returning `dL/d(input)`.
    pub fn backward(
        &self,
        cache: &MlpCache,
        d_out: DMatrix<f64>,
        grads: &mut [Layer],
    ) -> DMatrix<f64> {
        assert_eq!(grads.len(), self.layers.len());
        let mut d = d_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if self.activated(i) {
                let y = &cache.acts[i + 1];
                d.zip_apply(y, |dv, yv| *dv *= elu_grad_from_output(yv));
            }
            d = layer.backward(&cache.acts[i], &d, &mut grads[i]);
        }
        d
    }

    pub fn zero_grads(&self) -> Vec<Layer> {
        self.layers.iter().map(Layer::zeros_like).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }
}
