//! Two-axis rotary position encoding.
//!
//! Every attention input carries a time index and a node index. Both are mapped
//! onto `[-1, 1]`, multiplied by a shared frequency ladder, and summed into one
//! phase per feature pair. The spatial variant lays phases out as `T × N × 𝔇`,
//! the temporal one as `N × T × 𝔇`.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{rotate_half_data, Tape, Tensor, Var};

pub use crate::tensor::RotateVariant;

/// Candidate values for the maximum-frequency hyperparameters.
pub const THETA_GRID: [f64; 4] = [64.0, 128.0, 256.0, 512.0];
pub const DEFAULT_THETA: f64 = 128.0;

/// Which attention module a phase tensor is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionAxis {
    /// Attention across road segments; inputs are laid out `T × N × 𝔇`.
    Spatial,
    /// Attention across time steps; inputs are laid out `N × T × 𝔇`.
    Temporal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    pub theta_spatial: f64,
    pub theta_temporal: f64,
    pub embed_dim: usize,
    pub window: usize,
    pub num_nodes: usize,
    pub variant: RotateVariant,
}

impl RopeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "embedding dimension must be even and at least 2, got {}",
                self.embed_dim
            )));
        }
        for (name, theta) in [("theta_spatial", self.theta_spatial), ("theta_temporal", self.theta_temporal)] {
            if !(theta > 0.0) || !theta.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {theta}")));
            }
        }
        if self.window < 2 || self.num_nodes < 2 {
            return Err(Error::Config(format!(
                "position sequences need at least 2 entries (window {}, nodes {})",
                self.window, self.num_nodes
            )));
        }
        Ok(())
    }

    fn theta(&self, axis: AttentionAxis) -> f64 {
        match axis {
            AttentionAxis::Spatial => self.theta_spatial,
            AttentionAxis::Temporal => self.theta_temporal,
        }
    }
}

/// `F_i = π · (2i − 1)/(𝔇 − 1) · Θ/2` for `i = 1..=𝔇/2`.
pub fn frequency_sequence(embed_dim: usize, theta: f64) -> Result<Vec<f64>> {
    if embed_dim < 2 || embed_dim % 2 != 0 {
        return Err(Error::Config(format!(
            "embedding dimension must be even and at least 2, got {embed_dim}"
        )));
    }
    let denom = (embed_dim - 1) as f64;
    Ok((1..=embed_dim / 2)
        .map(|i| PI * (2 * i - 1) as f64 / denom * theta / 2.0)
        .collect())
}

/// `len` evenly spaced points from −1 to 1 inclusive.
pub fn position_sequence(len: usize) -> Result<Vec<f64>> {
    if len < 2 {
        return Err(Error::InvalidArgument(format!(
            "position sequence needs at least 2 points, got {len}"
        )));
    }
    let step = 2.0 / (len - 1) as f64;
    Ok((0..len)
        .map(|i| if i == len - 1 { 1.0 } else { -1.0 + step * i as f64 })
        .collect())
}

/// Phase tensor for one attention axis: outer products of the time and node
/// positions with the frequency ladder, summed by broadcasting, then the
/// `𝔇/2` half duplicated along the feature axis.
pub fn mixed_phase(cfg: &RopeConfig, axis: AttentionAxis) -> Result<Tensor> {
    cfg.validate()?;
    let freq = frequency_sequence(cfg.embed_dim, cfg.theta(axis))?;
    let pos_t = position_sequence(cfg.window)?;
    let pos_n = position_sequence(cfg.num_nodes)?;
    Ok(phase_from_parts(&freq, &pos_t, &pos_n, axis))
}

fn phase_from_parts(freq: &[f64], pos_t: &[f64], pos_n: &[f64], axis: AttentionAxis) -> Tensor {
    let half = freq.len();
    let shape = match axis {
        AttentionAxis::Spatial => [pos_t.len(), pos_n.len(), 2 * half],
        AttentionAxis::Temporal => [pos_n.len(), pos_t.len(), 2 * half],
    };
    Tensor::from_fn(&shape, |ix| {
        let (t, n) = match axis {
            AttentionAxis::Spatial => (ix[0], ix[1]),
            AttentionAxis::Temporal => (ix[1], ix[0]),
        };
        let f = freq[ix[2] % half];
        pos_t[t] * f + pos_n[n] * f
    })
}

/// Precomputed phases and their cosines/sines for both attention axes.
///
/// Phases are constants: they enter a tape only through [`Tape::constant`].
#[derive(Debug, Clone)]
pub struct RopePhases {
    pub variant: RotateVariant,
    pub freq_spatial: Vec<f64>,
    pub freq_temporal: Vec<f64>,
    pub pos_time: Vec<f64>,
    pub pos_nodes: Vec<f64>,
    pub spatial: Tensor,
    pub temporal: Tensor,
    cos_spatial: Tensor,
    sin_spatial: Tensor,
    cos_temporal: Tensor,
    sin_temporal: Tensor,
}

impl RopePhases {
    pub fn new(cfg: &RopeConfig) -> Result<Self> {
        cfg.validate()?;
        let freq_spatial = frequency_sequence(cfg.embed_dim, cfg.theta_spatial)?;
        let freq_temporal = frequency_sequence(cfg.embed_dim, cfg.theta_temporal)?;
        let pos_time = position_sequence(cfg.window)?;
        let pos_nodes = position_sequence(cfg.num_nodes)?;
        let spatial = phase_from_parts(&freq_spatial, &pos_time, &pos_nodes, AttentionAxis::Spatial);
        let temporal = phase_from_parts(&freq_temporal, &pos_time, &pos_nodes, AttentionAxis::Temporal);
        Ok(Self::assemble(cfg.variant, freq_spatial, freq_temporal, pos_time, pos_nodes, spatial, temporal))
    }

    /// All-zero phases: rotary encoding becomes the identity.
    pub fn disabled(cfg: &RopeConfig) -> Result<Self> {
        cfg.validate()?;
        let half = cfg.embed_dim / 2;
        let spatial = Tensor::zeros(&[cfg.window, cfg.num_nodes, cfg.embed_dim]);
        let temporal = Tensor::zeros(&[cfg.num_nodes, cfg.window, cfg.embed_dim]);
        Ok(Self::assemble(
            cfg.variant,
            vec![0.0; half],
            vec![0.0; half],
            vec![0.0; cfg.window],
            vec![0.0; cfg.num_nodes],
            spatial,
            temporal,
        ))
    }

    fn assemble(
        variant: RotateVariant,
        freq_spatial: Vec<f64>,
        freq_temporal: Vec<f64>,
        pos_time: Vec<f64>,
        pos_nodes: Vec<f64>,
        spatial: Tensor,
        temporal: Tensor,
    ) -> Self {
        RopePhases {
            variant,
            freq_spatial,
            freq_temporal,
            pos_time,
            pos_nodes,
            cos_spatial: spatial.map(f64::cos),
            sin_spatial: spatial.map(f64::sin),
            cos_temporal: temporal.map(f64::cos),
            sin_temporal: temporal.map(f64::sin),
            spatial,
            temporal,
        }
    }

    pub fn phase(&self, axis: AttentionAxis) -> &Tensor {
        match axis {
            AttentionAxis::Spatial => &self.spatial,
            AttentionAxis::Temporal => &self.temporal,
        }
    }

    pub fn cos(&self, axis: AttentionAxis) -> &Tensor {
        match axis {
            AttentionAxis::Spatial => &self.cos_spatial,
            AttentionAxis::Temporal => &self.cos_temporal,
        }
    }

    pub fn sin(&self, axis: AttentionAxis) -> &Tensor {
        match axis {
            AttentionAxis::Spatial => &self.sin_spatial,
            AttentionAxis::Temporal => &self.sin_temporal,
        }
    }

    /// Applies the encoding for `axis` to `v` on the tape.
    pub fn apply(&self, tape: &mut Tape, v: Var, axis: AttentionAxis) -> Result<Var> {
        let cos = tape.constant(self.cos(axis).clone());
        let sin = tape.constant(self.sin(axis).clone());
        apply_rope_with(tape, v, cos, sin, self.variant)
    }
}

/// Plain-tensor rotate-half.
pub fn rotate_half(v: &Tensor, variant: RotateVariant) -> Result<Tensor> {
    let d = v.shape().last().copied().unwrap_or(0);
    if d == 0 || d % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "rotate_half needs an even last axis, got shape {:?}",
            v.shape()
        )));
    }
    Tensor::new(v.shape(), rotate_half_data(v.data(), d, variant))
}

/// `v ⊙ cos(F_M) + rotate_half(v) ⊙ sin(F_M)` for an explicit phase tensor.
pub fn apply_rope(tape: &mut Tape, v: Var, phase: &Tensor, variant: RotateVariant) -> Result<Var> {
    let cos = tape.constant(phase.map(f64::cos));
    let sin = tape.constant(phase.map(f64::sin));
    apply_rope_with(tape, v, cos, sin, variant)
}

fn apply_rope_with(tape: &mut Tape, v: Var, cos: Var, sin: Var, variant: RotateVariant) -> Result<Var> {
    let v_shape = tape.shape(v);
    let p_shape = tape.shape(cos);
    if v_shape.last() != p_shape.last() || p_shape.len() > v_shape.len() {
        return Err(Error::shape("apply_rope", v_shape, p_shape));
    }
    let rotated = tape.rotate_half(v, variant)?;
    let direct = tape.mul(v, cos)?;
    let turned = tape.mul(rotated, sin)?;
    tape.add(direct, turned)
}
