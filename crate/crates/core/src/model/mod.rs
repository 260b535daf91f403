//! The forecaster: input embedding, a stack of attention pairs, and a pointwise
//! output head mapping an `N × T` window of readings to the next `T` steps.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{glorot_uniform, stack_forward, PairOptions, PairVars, StaPair};
use crate::error::{Error, Result};
use crate::graph::{graph_embedding, RoadGraph, SpectralBasis};
use crate::rope::{RopeConfig, RopePhases, RotateVariant, DEFAULT_THETA};
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_WINDOW: usize = 12;
pub const DEFAULT_EMBED_DIM: usize = 32;
pub const DEFAULT_DEPTH: usize = 5;
pub const EMBED_DIM_GRID: [usize; 5] = [32, 64, 128, 256, 512];
pub const DEPTH_GRID: [usize; 6] = [4, 6, 8, 10, 12, 14];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_nodes: usize,
    /// Input and output window length.
    pub window: usize,
    pub embed_dim: usize,
    /// Number of stacked attention pairs.
    pub depth: usize,
    pub theta_spatial: f64,
    pub theta_temporal: f64,
    pub rotate_variant: RotateVariant,
    pub use_rope: bool,
    pub use_spatial: bool,
    pub use_temporal: bool,
    pub use_graph_embedding: bool,
    pub residual: bool,
    pub huber_delta: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(num_nodes: usize) -> Self {
        ModelConfig {
            num_nodes,
            window: DEFAULT_WINDOW,
            embed_dim: DEFAULT_EMBED_DIM,
            depth: DEFAULT_DEPTH,
            theta_spatial: DEFAULT_THETA,
            theta_temporal: DEFAULT_THETA,
            rotate_variant: RotateVariant::Standard,
            use_rope: true,
            use_spatial: true,
            use_temporal: true,
            use_graph_embedding: true,
            residual: false,
            huber_delta: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_nodes < 2 {
            return Err(Error::Config(format!("need at least 2 nodes, got {}", self.num_nodes)));
        }
        if self.window < 2 {
            return Err(Error::Config(format!("window must be at least 2, got {}", self.window)));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth (number of attention pairs) must be at least 1".into()));
        }
        if !self.use_spatial && !self.use_temporal {
            return Err(Error::Config(
                "disabling both spatial and temporal attention leaves a constant model".into(),
            ));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config(format!("huber delta must be positive, got {}", self.huber_delta)));
        }
        self.rope_config().validate()
    }

    pub fn rope_config(&self) -> RopeConfig {
        RopeConfig {
            theta_spatial: self.theta_spatial,
            theta_temporal: self.theta_temporal,
            embed_dim: self.embed_dim,
            window: self.window,
            num_nodes: self.num_nodes,
            variant: self.rotate_variant,
        }
    }

    pub fn pair_options(&self) -> PairOptions {
        PairOptions {
            use_spatial: self.use_spatial,
            use_temporal: self.use_temporal,
            residual: self.residual,
        }
    }

    /// Trainable scalar count; depends only on `(N, T, 𝔇, K)`.
    pub fn parameter_count(&self) -> usize {
        let (n, t, d, k) = (self.num_nodes, self.window, self.embed_dim, self.depth);
        let lift = 2 * d;
        let graph = n * d;
        let pairs = k * 6 * d * d;
        let head = d + 1 + t * t + t;
        lift + graph + pairs + head
    }
}

/// All trainable tensors, in declaration (and serialisation) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `1 × 𝔇` per-scalar lift.
    pub input_weight: Tensor,
    /// `𝔇`.
    pub input_bias: Tensor,
    /// `N × 𝔇` projection of the Laplacian eigenvectors.
    pub graph_projection: Tensor,
    pub pairs: Vec<StaPair>,
    /// `𝔇 × 1` feature collapse.
    pub head_feature: Tensor,
    /// `1`.
    pub head_feature_bias: Tensor,
    /// `T × T` map along the time axis, shared by all nodes.
    pub head_time: Tensor,
    /// `T`.
    pub head_time_bias: Tensor,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.embed_dim;
        let input_weight = glorot_uniform(1, d, &mut rng);
        let graph_projection = glorot_uniform(cfg.num_nodes, d, &mut rng);
        let pairs = (0..cfg.depth).map(|_| StaPair::init(d, &mut rng)).collect();
        let head_feature = glorot_uniform(d, 1, &mut rng);
        ModelParams {
            input_weight,
            input_bias: Tensor::zeros(&[d]),
            graph_projection,
            pairs,
            head_feature,
            head_feature_bias: Tensor::zeros(&[1]),
            // Zero start: with a random map the loss first learns to silence the
            // single ReLU unit in front of it, and a silenced unit never recovers.
            head_time: Tensor::zeros(&[cfg.window, cfg.window]),
            head_time_bias: Tensor::zeros(&[cfg.window]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.input_weight, &self.input_bias, &self.graph_projection];
        for p in &self.pairs {
            for w in [&p.spatial, &p.temporal] {
                out.extend([&w.query, &w.key, &w.value]);
            }
        }
        out.extend([&self.head_feature, &self.head_feature_bias, &self.head_time, &self.head_time_bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.input_weight, &mut self.input_bias, &mut self.graph_projection];
        for p in &mut self.pairs {
            for w in [&mut p.spatial, &mut p.temporal] {
                out.extend([&mut w.query, &mut w.key, &mut w.value]);
            }
        }
        out.extend([
            &mut self.head_feature,
            &mut self.head_feature_bias,
            &mut self.head_time,
            &mut self.head_time_bias,
        ]);
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["input_weight", "input_bias", "graph_projection"]
            .map(String::from)
            .to_vec();
        for k in 0..self.pairs.len() {
            for branch in ["spatial", "temporal"] {
                for m in ["query", "key", "value"] {
                    out.push(format!("pairs.{k}.{branch}.{m}"));
                }
            }
        }
        out.extend(["head_feature", "head_feature_bias", "head_time", "head_time_bias"].map(String::from));
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn attach(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            input_weight: tape.param(&self.input_weight),
            input_bias: tape.param(&self.input_bias),
            graph_projection: tape.param(&self.graph_projection),
            pairs: self.pairs.iter().map(|p| p.attach(tape)).collect(),
            head_feature: tape.param(&self.head_feature),
            head_feature_bias: tape.param(&self.head_feature_bias),
            head_time: tape.param(&self.head_time),
            head_time_bias: tape.param(&self.head_time_bias),
        }
    }
}

/// [`ModelParams`] placed on a tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub input_weight: Var,
    pub input_bias: Var,
    pub graph_projection: Var,
    pub pairs: Vec<PairVars>,
    pub head_feature: Var,
    pub head_feature_bias: Var,
    pub head_time: Var,
    pub head_time_bias: Var,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.input_weight, self.input_bias, self.graph_projection];
        for p in &self.pairs {
            for w in [p.spatial, p.temporal] {
                out.extend([w.query, w.key, w.value]);
            }
        }
        out.extend([self.head_feature, self.head_feature_bias, self.head_time, self.head_time_bias]);
        out
    }
}

/// Fixed structure of a model: configuration, spectral basis and rotary phases.
/// Trainable state lives separately in [`ModelParams`].
#[derive(Debug, Clone)]
pub struct Forecaster {
    config: ModelConfig,
    basis: SpectralBasis,
    phases: RopePhases,
}

impl Forecaster {
    pub fn new(config: ModelConfig, graph: &RoadGraph) -> Result<Self> {
        config.validate()?;
        if graph.num_nodes() != config.num_nodes {
            return Err(Error::Config(format!(
                "graph has {} nodes but the model expects {}",
                graph.num_nodes(),
                config.num_nodes
            )));
        }
        Self::from_basis(config, SpectralBasis::from_graph(graph)?)
    }

    pub fn from_basis(config: ModelConfig, basis: SpectralBasis) -> Result<Self> {
        config.validate()?;
        if basis.num_nodes() != config.num_nodes {
            return Err(Error::Config(format!(
                "spectral basis covers {} nodes but the model expects {}",
                basis.num_nodes(),
                config.num_nodes
            )));
        }
        let rope_cfg = config.rope_config();
        let phases = if config.use_rope {
            RopePhases::new(&rope_cfg)?
        } else {
            RopePhases::disabled(&rope_cfg)?
        };
        Ok(Forecaster { config, basis, phases })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    pub fn phases(&self) -> &RopePhases {
        &self.phases
    }

    pub fn init_params(&self) -> ModelParams {
        ModelParams::init(&self.config)
    }

    /// Checks that `params` has this model's layout.
    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let expect = ModelParams::init(&ModelConfig {
            seed: 0,
            ..self.config.clone()
        });
        for ((name, have), want) in params.names().iter().zip(params.tensors()).zip(expect.tensors()) {
            if have.shape() != want.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, the model expects {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
        }
        if params.pairs.len() != self.config.depth {
            return Err(Error::Config(format!(
                "parameters hold {} pairs but the model expects {}",
                params.pairs.len(),
                self.config.depth
            )));
        }
        Ok(())
    }

    fn check_window(&self, shape: &[usize]) -> Result<()> {
        let (n, t) = (self.config.num_nodes, self.config.window);
        let ok = matches!(shape.len(), 2 | 3) && shape[shape.len() - 2] == n && shape[shape.len() - 1] == t;
        if ok {
            Ok(())
        } else {
            Err(Error::shape("forecast input", shape, &[n, t]))
        }
    }

    /// Lifts `(…, N, T)` readings to `(…, N, T, 𝔇)` and adds the graph embedding.
    pub fn embed_input(&self, tape: &mut Tape, raw: Var, p: &ParamVars) -> Result<Var> {
        let shape = tape.shape(raw).to_vec();
        self.check_window(&shape)?;
        let mut lifted_shape = shape.clone();
        lifted_shape.push(1);
        let column = tape.reshape(raw, &lifted_shape)?;
        let lifted = tape.matmul(column, p.input_weight)?;
        let lifted = tape.add(lifted, p.input_bias)?;
        if !self.config.use_graph_embedding {
            return Ok(lifted);
        }
        let u = tape.constant(self.basis.eigenvectors.clone());
        let node_embedding = graph_embedding(tape, u, p.graph_projection)?;
        let per_node = tape.reshape(node_embedding, &[self.config.num_nodes, 1, self.config.embed_dim])?;
        tape.add(lifted, per_node)
    }

    /// Collapses features to one value per `(node, step)` through a ReLU, then
    /// maps the `T` input steps to `T` forecast steps.
    pub fn output_head(&self, tape: &mut Tape, v: Var, p: &ParamVars) -> Result<Var> {
        let shape = tape.shape(v).to_vec();
        if shape.len() < 3 || shape[shape.len() - 1] != self.config.embed_dim {
            return Err(Error::shape("output_head", &shape, &[self.config.embed_dim]));
        }
        let collapsed = tape.matmul(v, p.head_feature)?;
        let collapsed = tape.add(collapsed, p.head_feature_bias)?;
        let activated = tape.relu(collapsed);
        let per_step = tape.reshape(activated, &shape[..shape.len() - 1])?;
        let mapped = tape.matmul(per_step, p.head_time)?;
        tape.add(mapped, p.head_time_bias)
    }

    /// Forecast for a normalised `(N, T)` window or a `(B, N, T)` batch.
    pub fn forward(&self, tape: &mut Tape, p: &ParamVars, raw: Var) -> Result<Var> {
        let input = tape.value(raw);
        if let Some(pos) = input.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Data(format!(
                "forecast input of shape {:?} holds a non-finite value at flat index {pos}",
                input.shape()
            )));
        }
        let embedded = self.embed_input(tape, raw, p)?;
        let hidden = stack_forward(tape, embedded, &p.pairs, &self.phases, self.config.pair_options())?;
        self.output_head(tape, hidden, p)
    }

    pub fn predict(&self, params: &ModelParams, raw: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let p = params.attach(&mut tape);
        let x = tape.constant(raw.clone());
        let out = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(out).clone())
    }

    /// Huber loss without gradients.
    pub fn loss(&self, params: &ModelParams, raw: &Tensor, target: &Tensor) -> Result<f64> {
        let mut tape = Tape::inference();
        let p = params.attach(&mut tape);
        let x = tape.constant(raw.clone());
        let y = tape.constant(target.clone());
        let pred = self.forward(&mut tape, &p, x)?;
        let loss = tape.huber_loss(pred, y, self.config.huber_delta)?;
        Ok(tape.value(loss).data()[0])
    }

    /// Huber loss and its gradient for every parameter tensor, in declaration order.
    pub fn loss_and_gradients(&self, params: &ModelParams, raw: &Tensor, target: &Tensor) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let p = params.attach(&mut tape);
        let x = tape.constant(raw.clone());
        let y = tape.constant(target.clone());
        let pred = self.forward(&mut tape, &p, x)?;
        let loss = tape.huber_loss(pred, y, self.config.huber_delta)?;
        let grads = tape.backward(loss)?;
        let per_param = p
            .all()
            .into_iter()
            .map(|v| grads.get(v).cloned().expect("parameters are differentiable leaves"))
            .collect();
        Ok((tape.value(loss).data()[0], per_param))
    }
}

/// Mean Huber loss of two equally shaped tensors.
pub fn huber_loss(pred: &Tensor, target: &Tensor, delta: f64) -> Result<f64> {
    let mut tape = Tape::inference();
    let p = tape.constant(pred.clone());
    let t = tape.constant(target.clone());
    let l = tape.huber_loss(p, t, delta)?;
    Ok(tape.value(l).data()[0])
}
