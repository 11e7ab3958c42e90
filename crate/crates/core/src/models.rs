//! Trainable components: image encoder, action-conditioned forward model,
//! multi-horizon GRU predictor, and the separable encoder.
//!
//! Models are thin handles over a [`ModelConfig`]; all weights live in a
//! shared [`ParamStore`] under fixed name prefixes (`enc.`, `fwd.`, `gru.`,
//! `sep.`).

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, ParamStore, Tensor, Var};
use crate::renderer::Observation;
use crate::worldsim::ActionPush;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("observation resolution {got} does not match encoder resolution {expected}")]
    Resolution { expected: usize, got: usize },
    #[error("empty latent sequence")]
    EmptySequence,
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error("invalid model config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub resolution: usize,
    pub latent_dim: usize,
    pub conv_channels: [usize; 2],
    pub encoder_hidden: usize,
    pub action_hidden: usize,
    pub action_code: usize,
    pub trunk_hidden: usize,
    pub gru_hidden: usize,
    /// Number of future steps the GRU predictor emits.
    pub horizons: usize,
    /// Frames fed to the GRU before predicting.
    pub context_frames: usize,
    /// Actions are divided by this before entering the action encoder.
    pub action_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            latent_dim: 8,
            conv_channels: [8, 16],
            encoder_hidden: 64,
            action_hidden: 64,
            action_code: 16,
            trunk_hidden: 64,
            gru_hidden: 32,
            horizons: 6,
            context_frames: 4,
            action_scale: 600.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.resolution,
            self.latent_dim,
            self.conv_channels[0],
            self.conv_channels[1],
            self.encoder_hidden,
            self.action_hidden,
            self.action_code,
            self.trunk_hidden,
            self.gru_hidden,
            self.horizons,
            self.context_frames,
        ];
        if sizes.contains(&0) {
            return Err(ModelError::Config(format!("all sizes must be positive: {self:?}")));
        }
        if self.resolution < 4 {
            return Err(ModelError::Config(format!("resolution {} too small", self.resolution)));
        }
        if !(self.action_scale > 0.0) || !self.action_scale.is_finite() {
            return Err(ModelError::Config(format!("action_scale {}", self.action_scale)));
        }
        Ok(())
    }
}

fn conv_out(n: usize) -> usize {
    // 3×3 kernel, stride 2, one pixel of zero padding
    (n + 2 - 3) / 2 + 1
}

fn glorot_dense<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<()> {
    store.insert_glorot(&format!("{prefix}.w"), &[fan_in, fan_out], fan_in, fan_out, rng)?;
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

fn dense(g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(&format!("{prefix}.w"))?;
    let b = g.param(&format!("{prefix}.b"))?;
    let h = g.matmul(x, w)?;
    Ok(g.add_bias(h, b)?)
}

/// Stacks vectors as the rows of a matrix.
pub fn rows_to_tensor(rows: &[Vec<f64>]) -> Tensor {
    let cols = rows.first().map_or(0, Vec::len);
    let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Tensor::new(vec![rows.len(), cols], data).expect("ragged rows")
}

/// Splits a matrix back into row vectors.
pub fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.shape().last().copied().unwrap_or(1).max(1);
    t.data().chunks(cols).map(<[f64]>::to_vec).collect()
}

/// Centers pixels around zero and stacks them as `[B, R, R, 3]`.
pub fn stack_observations(obs: &[Observation], resolution: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(obs.len() * resolution * resolution * 3);
    for o in obs {
        if o.resolution != resolution {
            return Err(ModelError::Resolution {
                expected: resolution,
                got: o.resolution,
            });
        }
        data.extend(o.pixels.iter().map(|p| p - 0.5));
    }
    Ok(Tensor::new(vec![obs.len(), resolution, resolution, 3], data)?)
}

/// Actions scaled into the action encoder's input range, as a `[B, 2]` matrix.
pub fn action_tensor(actions: &[ActionPush], scale: f64) -> Tensor {
    let data = actions
        .iter()
        .flat_map(|a| [a.force.x / scale, a.force.y / scale])
        .collect();
    Tensor::new(vec![actions.len(), 2], data).expect("two columns")
}

/// conv(3→c1) → conv(c1→c2) → fc(hidden) → fc(d); relu between layers.
#[derive(Clone, Copy, Debug)]
pub struct Encoder<'c> {
    pub cfg: &'c ModelConfig,
}

impl<'c> Encoder<'c> {
    pub fn new(cfg: &'c ModelConfig) -> Self {
        Self { cfg }
    }

    pub fn flat_dim(&self) -> usize {
        let side = conv_out(conv_out(self.cfg.resolution));
        side * side * self.cfg.conv_channels[1]
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let [c1, c2] = self.cfg.conv_channels;
        store.insert_glorot("enc.conv1.w", &[3, 3, 3, c1], 27, 9 * c1, rng)?;
        store.insert("enc.conv1.b", Tensor::zeros(&[c1]))?;
        store.insert_glorot("enc.conv2.w", &[3, 3, c1, c2], 9 * c1, 9 * c2, rng)?;
        store.insert("enc.conv2.b", Tensor::zeros(&[c2]))?;
        glorot_dense(store, "enc.fc1", self.flat_dim(), self.cfg.encoder_hidden, rng)?;
        glorot_dense(store, "enc.fc2", self.cfg.encoder_hidden, self.cfg.latent_dim, rng)
    }

    /// `[B, R, R, 3]` images to `[B, d]` latents.
    pub fn forward(&self, g: &mut Graph, images: Var) -> Result<Var> {
        let shape = g.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != self.cfg.resolution || shape[2] != self.cfg.resolution {
            return Err(ModelError::Resolution {
                expected: self.cfg.resolution,
                got: shape.get(1).copied().unwrap_or(0),
            });
        }
        let mut h = images;
        for layer in ["enc.conv1", "enc.conv2"] {
            let k = g.param(&format!("{layer}.w"))?;
            let b = g.param(&format!("{layer}.b"))?;
            let c = g.conv2d(h, k, 2, 1)?;
            let c = g.add_bias(c, b)?;
            h = g.relu(c)?;
        }
        let flat = g.reshape(h, &[shape[0], self.flat_dim()])?;
        let h = dense(g, "enc.fc1", flat)?;
        let h = g.relu(h)?;
        dense(g, "enc.fc2", h)
    }

    /// Latents for a list of observations, computed in fixed-size chunks.
    pub fn encode(&self, store: &ParamStore, obs: &[Observation]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(obs.len());
        for chunk in obs.chunks(128) {
            let mut g = Graph::new(store);
            let x = g.input(stack_observations(chunk, self.cfg.resolution)?)?;
            let z = self.forward(&mut g, x)?;
            out.extend(tensor_rows(g.value(z)));
        }
        Ok(out)
    }
}

/// `g(z, a) = z + trunk(concat(z, code(a)))`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardModel<'c> {
    pub cfg: &'c ModelConfig,
}

impl<'c> ForwardModel<'c> {
    pub fn new(cfg: &'c ModelConfig) -> Self {
        Self { cfg }
    }

    pub const TRUNK_LAYERS: [&'static str; 3] = ["fwd.trunk1", "fwd.trunk2", "fwd.trunk3"];

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let c = self.cfg;
        glorot_dense(store, "fwd.act1", 2, c.action_hidden, rng)?;
        glorot_dense(store, "fwd.act2", c.action_hidden, c.action_code, rng)?;
        glorot_dense(store, "fwd.trunk1", c.latent_dim + c.action_code, c.trunk_hidden, rng)?;
        glorot_dense(store, "fwd.trunk2", c.trunk_hidden, c.trunk_hidden, rng)?;
        glorot_dense(store, "fwd.trunk3", c.trunk_hidden, c.latent_dim, rng)
    }

    /// `z` is `[B, d]`, `actions` is `[B, 2]` (already scaled).
    pub fn forward(&self, g: &mut Graph, z: Var, actions: Var) -> Result<Var> {
        let d = g.shape(z).get(1).copied().unwrap_or(0);
        if d != self.cfg.latent_dim {
            return Err(ModelError::Dimension {
                what: "forward model latent",
                expected: self.cfg.latent_dim,
                got: d,
            });
        }
        let a = dense(g, "fwd.act1", actions)?;
        let a = g.tanh(a)?;
        let a = dense(g, "fwd.act2", a)?;
        let code = g.tanh(a)?;
        let mut h = g.concat(&[z, code], 1)?;
        for layer in &Self::TRUNK_LAYERS[..2] {
            h = dense(g, layer, h)?;
            h = g.relu(h)?;
        }
        let delta = dense(g, Self::TRUNK_LAYERS[2], h)?;
        Ok(g.add(z, delta)?)
    }

    /// Predicted next latents for paired `(z, action)` rows.
    pub fn predict(&self, store: &ParamStore, z: &[Vec<f64>], actions: &[ActionPush]) -> Result<Vec<Vec<f64>>> {
        if z.len() != actions.len() {
            return Err(ModelError::Dimension {
                what: "actions",
                expected: z.len(),
                got: actions.len(),
            });
        }
        if z.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(store);
        let zv = g.input(rows_to_tensor(z))?;
        let av = g.input(action_tensor(actions, self.cfg.action_scale))?;
        let out = self.forward(&mut g, zv, av)?;
        Ok(tensor_rows(g.value(out)))
    }
}

/// Single-layer GRU over latents with one linear head per horizon.
#[derive(Clone, Copy, Debug)]
pub struct GruPredictor<'c> {
    pub cfg: &'c ModelConfig,
}

impl<'c> GruPredictor<'c> {
    pub fn new(cfg: &'c ModelConfig) -> Self {
        Self { cfg }
    }

    pub fn head_name(k: usize) -> String {
        format!("gru.head{k}.w")
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let (d, h) = (self.cfg.latent_dim, self.cfg.gru_hidden);
        // gate blocks ordered reset | update | candidate
        store.insert_glorot("gru.wx", &[d, 3 * h], d, h, rng)?;
        store.insert_glorot("gru.wh", &[h, 3 * h], h, h, rng)?;
        store.insert("gru.bx", Tensor::zeros(&[3 * h]))?;
        store.insert("gru.bh", Tensor::zeros(&[3 * h]))?;
        for k in 0..self.cfg.horizons {
            store.insert_glorot(&Self::head_name(k), &[h, d], h, d, rng)?;
        }
        Ok(())
    }

    /// Runs the GRU over `[B, d]` latents in time order and returns the K
    /// per-horizon predictions from the final hidden state.
    pub fn forward(&self, g: &mut Graph, sequence: &[Var]) -> Result<Vec<Var>> {
        if sequence.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let batch = g.shape(sequence[0])[0];
        let hd = self.cfg.gru_hidden;
        let (wx, wh) = (g.param("gru.wx")?, g.param("gru.wh")?);
        let (bx, bh) = (g.param("gru.bx")?, g.param("gru.bh")?);
        let mut h = g.input(Tensor::zeros(&[batch, hd]))?;
        for &x in sequence {
            let d = g.shape(x).get(1).copied().unwrap_or(0);
            if d != self.cfg.latent_dim {
                return Err(ModelError::Dimension {
                    what: "GRU input",
                    expected: self.cfg.latent_dim,
                    got: d,
                });
            }
            let gx = g.matmul(x, wx)?;
            let gx = g.add_bias(gx, bx)?;
            let gh = g.matmul(h, wh)?;
            let gh = g.add_bias(gh, bh)?;
            let xr = g.slice(gx, 1, 0, hd)?;
            let hr = g.slice(gh, 1, 0, hd)?;
            let r = g.add(xr, hr)?;
            let r = g.sigmoid(r)?;
            let xu = g.slice(gx, 1, hd, hd)?;
            let hu = g.slice(gh, 1, hd, hd)?;
            let u = g.add(xu, hu)?;
            let u = g.sigmoid(u)?;
            let xn = g.slice(gx, 1, 2 * hd, hd)?;
            let hn = g.slice(gh, 1, 2 * hd, hd)?;
            let hn = g.mul(r, hn)?;
            let n = g.add(xn, hn)?;
            let n = g.tanh(n)?;
            // h' = n + u ⊙ (h − n)
            let diff = g.sub(h, n)?;
            let gated = g.mul(u, diff)?;
            h = g.add(n, gated)?;
        }
        (0..self.cfg.horizons)
            .map(|k| {
                let w = g.param(&Self::head_name(k))?;
                Ok(g.matmul(h, w)?)
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Identity => v,
            Activation::Tanh => v.tanh(),
        }
    }
}

/// `σ(W_xᵀ φ_x + W_eᵀ φ_e + b)` over precomputed feature vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeparableEncoder {
    pub x_dim: usize,
    pub e_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl SeparableEncoder {
    pub const WX: &'static str = "sep.wx";
    pub const WE: &'static str = "sep.we";
    pub const B: &'static str = "sep.b";

    /// Registers `W_x`, `b`, and (unless `restricted`) `W_e`.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, restricted: bool, rng: &mut R) -> Result<()> {
        store.insert_glorot(Self::WX, &[self.x_dim, self.out_dim], self.x_dim, self.out_dim, rng)?;
        if !restricted {
            store.insert_glorot(Self::WE, &[self.e_dim, self.out_dim], self.e_dim, self.out_dim, rng)?;
        }
        store.insert(Self::B, Tensor::zeros(&[self.out_dim]))?;
        Ok(())
    }

    /// Graph form over `[B, x_dim]` and `[B, e_dim]` features. A store without
    /// `W_e` evaluates the restricted model with the `e` term absent.
    pub fn forward(&self, g: &mut Graph, phi_x: Var, phi_e: Var) -> Result<Var> {
        let wx = g.param(Self::WX)?;
        let mut pre = g.matmul(phi_x, wx)?;
        if g.store().get(Self::WE).is_some() {
            let we = g.param(Self::WE)?;
            let ee = g.matmul(phi_e, we)?;
            pre = g.add(pre, ee)?;
        }
        let b = g.param(Self::B)?;
        let pre = g.add_bias(pre, b)?;
        Ok(match self.activation {
            Activation::Identity => pre,
            Activation::Tanh => g.tanh(pre)?,
        })
    }

    /// Direct evaluation for one feature pair.
    pub fn evaluate(&self, store: &ParamStore, phi_x: &[f64], phi_e: &[f64]) -> Result<Vec<f64>> {
        if phi_x.len() != self.x_dim {
            return Err(ModelError::Dimension {
                what: "phi_x",
                expected: self.x_dim,
                got: phi_x.len(),
            });
        }
        if phi_e.len() != self.e_dim {
            return Err(ModelError::Dimension {
                what: "phi_e",
                expected: self.e_dim,
                got: phi_e.len(),
            });
        }
        let param = |name: &str| {
            store
                .get(name)
                .ok_or_else(|| ModelError::Autodiff(AutodiffError::UnknownParam(name.to_string())))
        };
        let mut out = param(Self::B)?.data().to_vec();
        let wx = param(Self::WX)?.data();
        for (i, &f) in phi_x.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(&wx[i * self.out_dim..(i + 1) * self.out_dim]) {
                *o += f * w;
            }
        }
        if let Some(we) = store.get(Self::WE) {
            for (i, &f) in phi_e.iter().enumerate() {
                for (o, w) in out.iter_mut().zip(&we.data()[i * self.out_dim..(i + 1) * self.out_dim]) {
                    *o += f * w;
                }
            }
        }
        Ok(out.into_iter().map(|v| self.activation.apply(v)).collect())
    }
}
