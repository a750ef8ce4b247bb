//! Dense layers, a ReLU MLP with exact reverse-mode gradients, Adam, and a
//! binary checkpoint format. Everything is `f64` and single-threaded.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("{layer}: expected input width {expected}, got {got}")]
    ShapeMismatch {
        layer: String,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor, NnError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NnError::ShapeMismatch {
                layer: format!("tensor {shape:?}"),
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor (1 for a vector).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// U(±√(6/fan_in)), for layers followed by ReLU.
    HeUniform,
    /// U(±√(3/fan_in)), for linear outputs.
    LecunUniform,
}

/// Fully connected layer `y = x Wᵀ + b` with `W` stored `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, init: Init, rng: &mut Rng) -> Linear {
        let limit = match init {
            Init::HeUniform => (6.0 / inputs as f64).sqrt(),
            Init::LecunUniform => (3.0 / inputs as f64).sqrt(),
        };
        let data = (0..inputs * outputs)
            .map(|_| limit * (2.0 * rng.random::<f64>() - 1.0))
            .collect();
        Linear {
            weight: Tensor {
                shape: vec![outputs, inputs],
                data,
            },
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward(&self, x: &Tensor, name: &str) -> Result<Tensor, NnError> {
        let (n_in, n_out) = (self.inputs(), self.outputs());
        if x.cols() != n_in {
            return Err(NnError::ShapeMismatch {
                layer: name.to_string(),
                expected: n_in,
                got: x.cols(),
            });
        }
        let batch = x.rows();
        let mut out = vec![0.0; batch * n_out];
        for b in 0..batch {
            let xr = x.row(b);
            let orow = &mut out[b * n_out..(b + 1) * n_out];
            for (o, y) in orow.iter_mut().enumerate() {
                let w = &self.weight.data[o * n_in..(o + 1) * n_in];
                *y = self.bias.data[o] + dot(w, xr);
            }
        }
        Ok(Tensor {
            shape: vec![batch, n_out],
            data: out,
        })
    }

    /// Gradients `(dW, db, dx)` for upstream gradient `grad_out`.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
        let (n_in, n_out) = (self.inputs(), self.outputs());
        let batch = x.rows();
        let mut gw = vec![0.0; n_out * n_in];
        let mut gb = vec![0.0; n_out];
        let mut gx = vec![0.0; batch * n_in];
        for b in 0..batch {
            let xr = x.row(b);
            let gr = grad_out.row(b);
            let gxr = &mut gx[b * n_in..(b + 1) * n_in];
            for (o, &g) in gr.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                let w = &self.weight.data[o * n_in..(o + 1) * n_in];
                axpy(g, xr, &mut gw[o * n_in..(o + 1) * n_in]);
                axpy(g, w, gxr);
            }
        }
        (
            Tensor {
                shape: vec![n_out, n_in],
                data: gw,
            },
            Tensor {
                shape: vec![n_out],
                data: gb,
            },
            Tensor {
                shape: vec![batch, n_in],
                data: gx,
            },
        )
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input of each layer.
    inputs: Vec<Tensor>,
    /// Pre-activation output of each layer.
    pre: Vec<Tensor>,
}

/// ReLU hidden layers, identity output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new(widths: &[usize], rng: &mut Rng) -> Mlp {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let init = if i == last {
                    Init::LecunUniform
                } else {
                    Init::HeUniform
                };
                Linear::new(w[0], w[1], init, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].inputs()];
        w.extend(self.layers.iter().map(Linear::outputs));
        w
    }

    pub fn activation(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            Activation::Identity
        } else {
            Activation::Relu
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h, &format!("layer {i}"))?;
            if self.activation(i) == Activation::Relu {
                relu_in_place(&mut h);
            }
        }
        debug_assert!(h.is_finite(), "non-finite MLP output");
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, MlpCache), NnError> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h, &format!("layer {i}"))?;
            inputs.push(h);
            h = z.clone();
            if self.activation(i) == Activation::Relu {
                relu_in_place(&mut h);
            }
            pre.push(z);
        }
        Ok((h, MlpCache { inputs, pre }))
    }

    /// Parameter gradients in [`Mlp::params`] order, plus the input gradient.
    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_out: &Tensor,
    ) -> Result<(Vec<Tensor>, Tensor), NnError> {
        let out_width = self.layers.last().map(Linear::outputs).unwrap_or(0);
        if grad_out.cols() != out_width {
            return Err(NnError::ShapeMismatch {
                layer: "output gradient".into(),
                expected: out_width,
                got: grad_out.cols(),
            });
        }
        let mut grads = vec![Tensor::zeros(&[0]); 2 * self.layers.len()];
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            if self.activation(i) == Activation::Relu {
                // subgradient 0 at the kink
                for (gi, z) in g.data.iter_mut().zip(&cache.pre[i].data) {
                    if *z <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            let (gw, gb, gx) = self.layers[i].backward(&cache.inputs[i], &g);
            grads[2 * i] = gw;
            grads[2 * i + 1] = gb;
            g = gx;
        }
        Ok((grads, g))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

fn relu_in_place(t: &mut Tensor) {
    for x in &mut t.data {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[&Tensor], config: AdamConfig) -> Adam {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<(), NnError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::ShapeMismatch {
                layer: "adam parameter list".into(),
                expected: self.m.len(),
                got: grads.len(),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(NnError::ShapeMismatch {
                    layer: format!("adam parameter {i}"),
                    expected: p.len(),
                    got: g.len(),
                });
            }
            if !g.is_finite() {
                return Err(NnError::NonFinite(format!("gradient of parameter {i}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, gi), mi), vi) in p
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(m.data.iter_mut())
                .zip(v.data.iter_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn random_input(batch: usize, width: usize, seed: u64) -> Tensor {
        let mut rng = stream(seed, Purpose::Noise, &[]);
        let data = (0..batch * width)
            .map(|_| crate::rng::gaussian(&mut rng))
            .collect();
        Tensor::from_vec(&[batch, width], data).unwrap()
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut rng = stream(0, Purpose::Init, &[]);
        let mut net = Mlp::new(&[4, 4], &mut rng);
        let layer = &mut net.layers[0];
        layer.weight.data_mut().fill(0.0);
        for i in 0..4 {
            layer.weight.data_mut()[i * 4 + i] = 1.0;
        }
        let x = random_input(3, 4, 1);
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn relu_kink_has_zero_subgradient() {
        let mut rng = stream(0, Purpose::Init, &[]);
        let mut net = Mlp::new(&[1, 1, 1], &mut rng);
        net.layers[0].weight.data_mut()[0] = 1.0;
        net.layers[0].bias.data_mut()[0] = 0.0;
        net.layers[1].weight.data_mut()[0] = 1.0;
        let x = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
        let (_, cache) = net.forward_cached(&x).unwrap();
        let (_, gx) = net
            .backward(&cache, &Tensor::from_vec(&[1, 1], vec![1.0]).unwrap())
            .unwrap();
        assert_eq!(gx.data(), &[0.0]);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut rng = stream(0, Purpose::Init, &[]);
        let net = Mlp::new(&[8, 16, 4], &mut rng);
        let err = net.forward(&random_input(2, 7, 0)).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("layer 0") && msg.contains('8') && msg.contains('7'),
            "{msg}"
        );
    }

    /// Central finite differences of ½‖f(x)‖² against the analytic gradient.
    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream(5, Purpose::Init, &[]);
        let net = Mlp::new(&[8, 16, 4], &mut rng);
        let x = random_input(3, 8, 9);
        let loss = |n: &Mlp, x: &Tensor| -> f64 {
            0.5 * n
                .forward(x)
                .unwrap()
                .data()
                .iter()
                .map(|y| y * y)
                .sum::<f64>()
        };
        let (y, cache) = net.forward_cached(&x).unwrap();
        let (grads, gx) = net.backward(&cache, &y).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (pi, g) in grads.iter().enumerate() {
            for j in 0..g.len() {
                let mut plus = net.clone();
                plus.params_mut()[pi].data_mut()[j] += h;
                let mut minus = net.clone();
                minus.params_mut()[pi].data_mut()[j] -= h;
                let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
                let err = (fd - g.data()[j]).abs() / fd.abs().max(g.data()[j].abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        for j in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[j] += h;
            let mut xm = x.clone();
            xm.data_mut()[j] -= h;
            let fd = (loss(&net, &xp) - loss(&net, &xm)) / (2.0 * h);
            let err = (fd - gx.data()[j]).abs() / fd.abs().max(gx.data()[j].abs()).max(1e-6);
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut adam = Adam::new(&[&p], AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut [&mut p], &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_matches_scalar_oracle() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..AdamConfig::default()
        };
        let g = 0.3;
        let mut p = Tensor::from_vec(&[1], vec![2.0]).unwrap();
        let mut adam = Adam::new(&[&p], cfg);
        adam.step(&mut [&mut p], &[Tensor::from_vec(&[1], vec![g]).unwrap()])
            .unwrap();
        // m = 0.1 g, v = 0.001 g², bias corrections 0.1 and 0.001
        let m_hat = (1.0 - cfg.beta1) * g / (1.0 - cfg.beta1);
        let v_hat = (1.0 - cfg.beta2) * g * g / (1.0 - cfg.beta2);
        let expected = 2.0 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] - (2.0 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let mut p = Tensor::zeros(&[2]);
        let mut adam = Adam::new(&[&p], AdamConfig::default());
        let err = adam.step(
            &mut [&mut p],
            &[Tensor::from_vec(&[2], vec![0.0, f64::NAN]).unwrap()],
        );
        assert!(matches!(err, Err(NnError::NonFinite(_))));
        assert_eq!(adam.steps_taken(), 0);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let run = || {
            let mut rng = stream(3, Purpose::Init, &[]);
            let mut net = Mlp::new(&[4, 8, 2], &mut rng);
            let mut adam = Adam::new(&net.params(), AdamConfig::default());
            let x = random_input(5, 4, 2);
            for _ in 0..100 {
                let (y, cache) = net.forward_cached(&x).unwrap();
                let (grads, _) = net.backward(&cache, &y).unwrap();
                adam.step(&mut net.params_mut(), &grads).unwrap();
            }
            net
        };
        let a = run();
        let b = run();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            let bits_a: Vec<u64> = pa.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = pb.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn he_init_depends_only_on_seed_and_shape() {
        let mut r1 = stream(4, Purpose::Init, &[]);
        let mut r2 = stream(4, Purpose::Init, &[]);
        assert_eq!(Mlp::new(&[3, 5, 2], &mut r1), Mlp::new(&[3, 5, 2], &mut r2));
        let net = Mlp::new(&[3, 5, 2], &mut stream(4, Purpose::Init, &[]));
        let limit = (6.0f64 / 3.0).sqrt();
        assert!(net.layers[0].weight.data().iter().all(|w| w.abs() <= limit));
        assert_eq!(net.param_count(), 3 * 5 + 5 + 5 * 2 + 2);
    }
}
