//! Noise-prediction network: a learned linear projection of the instruction
//! embedding, concatenated with the flattened observation window, a
//! sinusoidal timestep embedding and the noisy action window, fed to an MLP.

use crate::nn::{Init, Linear, Mlp, MlpCache, NnError, Tensor};
use crate::rng::Rng;

/// Sinusoidal embedding of a diffusion timestep: sines then cosines over
/// geometrically spaced frequencies.
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// Input widths of the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserDims {
    pub obs: usize,
    pub instruction: usize,
    pub projection: usize,
    pub time: usize,
    pub action: usize,
}

impl DenoiserDims {
    pub fn mlp_input(&self) -> usize {
        self.obs + self.projection + self.time + self.action
    }
}

/// A batch of denoiser inputs, one row per sample.
#[derive(Debug, Clone)]
pub struct DenoiserInput {
    pub obs: Tensor,
    pub instruction: Tensor,
    pub timesteps: Vec<usize>,
    pub noisy_actions: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenoiserCache {
    instruction: Tensor,
    mlp: MlpCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub dims: DenoiserDims,
    pub projection: Linear,
    pub mlp: Mlp,
}

impl Denoiser {
    pub fn new(dims: DenoiserDims, hidden: &[usize], rng: &mut Rng) -> Denoiser {
        let projection = Linear::new(dims.instruction, dims.projection, Init::LecunUniform, rng);
        let mut widths = vec![dims.mlp_input()];
        widths.extend_from_slice(hidden);
        widths.push(dims.action);
        Denoiser {
            dims,
            projection,
            mlp: Mlp::new(&widths, rng),
        }
    }

    pub fn hidden(&self) -> Vec<usize> {
        let w = self.mlp.widths();
        w[1..w.len() - 1].to_vec()
    }

    pub fn param_count(&self) -> usize {
        self.projection.weight.len() + self.projection.bias.len() + self.mlp.param_count()
    }

    /// Project instruction rows into the conditioning space.
    pub fn project(&self, instruction: &Tensor) -> Result<Tensor, NnError> {
        self.projection
            .forward(instruction, "instruction projection")
    }

    fn assemble(&self, input: &DenoiserInput, projected: &Tensor) -> Result<Tensor, NnError> {
        let d = &self.dims;
        let batch = input.obs.rows();
        let checks = [
            (
                "observation window",
                input.obs.cols(),
                d.obs,
                input.obs.rows(),
            ),
            (
                "noisy action window",
                input.noisy_actions.cols(),
                d.action,
                input.noisy_actions.rows(),
            ),
        ];
        for (layer, got, expected, rows) in checks {
            if got != expected || rows != batch {
                return Err(NnError::ShapeMismatch {
                    layer: layer.into(),
                    expected,
                    got,
                });
            }
        }
        if input.timesteps.len() != batch || projected.rows() != batch {
            return Err(NnError::ShapeMismatch {
                layer: "batch size".into(),
                expected: batch,
                got: input.timesteps.len().min(projected.rows()),
            });
        }
        let width = d.mlp_input();
        let mut data = Vec::with_capacity(batch * width);
        for b in 0..batch {
            data.extend_from_slice(input.obs.row(b));
            data.extend_from_slice(projected.row(b));
            data.extend(time_embedding(input.timesteps[b], d.time));
            data.extend_from_slice(input.noisy_actions.row(b));
        }
        Tensor::from_vec(&[batch, width], data)
    }

    pub fn forward(&self, input: &DenoiserInput) -> Result<Tensor, NnError> {
        let projected = self.project(&input.instruction)?;
        self.forward_projected(input, &projected)
    }

    /// Forward pass with the instruction already projected (the projection is
    /// constant across the reverse chain).
    pub fn forward_projected(
        &self,
        input: &DenoiserInput,
        projected: &Tensor,
    ) -> Result<Tensor, NnError> {
        self.mlp.forward(&self.assemble(input, projected)?)
    }

    pub fn forward_cached(
        &self,
        input: &DenoiserInput,
    ) -> Result<(Tensor, DenoiserCache), NnError> {
        let projected = self.project(&input.instruction)?;
        let (out, mlp) = self
            .mlp
            .forward_cached(&self.assemble(input, &projected)?)?;
        Ok((
            out,
            DenoiserCache {
                instruction: input.instruction.clone(),
                mlp,
            },
        ))
    }

    /// Parameter gradients in [`Denoiser::params`] order.
    pub fn backward(
        &self,
        cache: &DenoiserCache,
        grad_out: &Tensor,
    ) -> Result<Vec<Tensor>, NnError> {
        let (mlp_grads, gx) = self.mlp.backward(&cache.mlp, grad_out)?;
        let d = &self.dims;
        let batch = gx.rows();
        let mut g_proj = Vec::with_capacity(batch * d.projection);
        for b in 0..batch {
            g_proj.extend_from_slice(&gx.row(b)[d.obs..d.obs + d.projection]);
        }
        let g_proj = Tensor::from_vec(&[batch, d.projection], g_proj)?;
        let (gw, gb, _) = self.projection.backward(&cache.instruction, &g_proj);
        let mut grads = vec![gw, gb];
        grads.extend(mlp_grads);
        Ok(grads)
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut p = vec![&self.projection.weight, &self.projection.bias];
        p.extend(self.mlp.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = vec![&mut self.projection.weight, &mut self.projection.bias];
        p.extend(self.mlp.params_mut());
        p
    }

    /// Checkpoint tensor names, in [`Denoiser::params`] order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            "projection.weight".to_string(),
            "projection.bias".to_string(),
        ];
        for i in 0..self.mlp.layers.len() {
            names.push(format!("mlp.{i}.weight"));
            names.push(format!("mlp.{i}.bias"));
        }
        names
    }
}
