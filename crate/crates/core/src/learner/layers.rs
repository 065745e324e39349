//! Dense layers and the fan-based uniform initializer.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;

/// Fully connected layer, weights stored `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Uniform fan-based ("xavier") limit: U(−l, l) with l = √(6/(fan_in+fan_out))
/// has variance 2/(fan_in+fan_out).
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn glorot_matrix<R: Rng>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let limit = glorot_limit(fan_in, fan_out);
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

impl Dense {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, rng: &mut R) -> Dense {
        Dense {
            w: glorot_matrix(out_dim, in_dim, in_dim, out_dim, rng),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    /// `z = x·Wᵀ + b` for a batch `x: (B, in)`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.w.t());
        z += &self.b;
        z
    }

    /// Given `dz = ∂L/∂z`, returns `∂L/∂x` and accumulates parameter grads.
    pub fn backward(
        &self,
        x: &Array2<f64>,
        dz: &Array2<f64>,
        grad: &mut DenseGrad,
    ) -> Array2<f64> {
        grad.w += &dz.t().dot(x);
        grad.b += &dz.sum_axis(Axis(0));
        dz.dot(&self.w)
    }
}

/// Gradient buffer mirroring one [`Dense`] layer.
#[derive(Debug, Clone)]
pub struct DenseGrad {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl DenseGrad {
    pub fn zeros_like(layer: &Dense) -> DenseGrad {
        DenseGrad {
            w: Array2::zeros(layer.w.raw_dim()),
            b: Array1::zeros(layer.b.raw_dim()),
        }
    }
}

pub fn relu(z: &Array2<f64>) -> Array2<f64> {
    z.mapv(|v| v.max(0.0))
}

/// Backprop through ReLU: pass gradient where the pre-activation was > 0.
pub fn relu_backward(z: &Array2<f64>, dout: &Array2<f64>) -> Array2<f64> {
    let mut dz = dout.clone();
    dz.zip_mut_with(z, |d, &zv| {
        if zv <= 0.0 {
            *d = 0.0;
        }
    });
    dz
}

/// A stack of Dense+ReLU layers (ReLU after every layer).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Per-layer tensors cached by the forward pass for backprop: the input to
/// each layer and its pre-activation.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub inputs: Vec<Array2<f64>>,
    pub pre: Vec<Array2<f64>>,
    pub out: Array2<f64>,
}

impl Mlp {
    pub fn init<R: Rng>(in_dim: usize, hidden: &[usize], rng: &mut R) -> Mlp {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut d = in_dim;
        for &h in hidden {
            layers.push(Dense::init(d, h, rng));
            d = h;
        }
        Mlp { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_dim)
    }

    pub fn forward(&self, x: &Array2<f64>) -> MlpCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let z = layer.forward(&cur);
            inputs.push(cur);
            cur = relu(&z);
            pre.push(z);
        }
        MlpCache {
            inputs,
            pre,
            out: cur,
        }
    }

    /// Backprop from `dout = ∂L/∂output`; returns `∂L/∂x`. `grads` must be
    /// aligned with `self.layers`.
    pub fn backward(
        &self,
        cache: &MlpCache,
        dout: &Array2<f64>,
        grads: &mut [DenseGrad],
    ) -> Array2<f64> {
        let mut d = dout.clone();
        for i in (0..self.layers.len()).rev() {
            let dz = relu_backward(&cache.pre[i], &d);
            d = self.layers[i].backward(&cache.inputs[i], &dz, &mut grads[i]);
        }
        d
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Row-wise softmax.
pub fn softmax(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}
