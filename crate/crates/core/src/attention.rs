//! Spatial and temporal self-attention, and their fusion into stacked pairs.
//!
//! Both modules run the same single-head kernel over a `(…, A, L, 𝔇)` tensor,
//! attending along `L`. The temporal module feeds its `(…, N, T, 𝔇)` input
//! straight in; the spatial module swaps the node and time axes first and
//! swaps them back afterwards.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rope::{AttentionAxis, RopePhases};
use crate::tensor::{Tape, Tensor, Var};

/// Query, key and value projections of one attention module, each `𝔇 × 𝔇`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

impl AttentionWeights {
    /// Uniform on `±√(6 / (fan_in + fan_out))`.
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        AttentionWeights {
            query: glorot_uniform(dim, dim, rng),
            key: glorot_uniform(dim, dim, rng),
            value: glorot_uniform(dim, dim, rng),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        AttentionWeights {
            query: Tensor::zeros(&[dim, dim]),
            key: Tensor::zeros(&[dim, dim]),
            value: Tensor::zeros(&[dim, dim]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        AttentionWeights {
            query: Tensor::eye(dim),
            key: Tensor::eye(dim),
            value: Tensor::eye(dim),
        }
    }

    pub fn attach(&self, tape: &mut Tape) -> AttentionVars {
        AttentionVars {
            query: tape.param(&self.query),
            key: tape.param(&self.key),
            value: tape.param(&self.value),
        }
    }
}

pub(crate) fn glorot_uniform(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("positive dims")
}

/// One spatial and one temporal module fed the same input.
#[derive(Debug, Clone, PartialEq)]
pub struct StaPair {
    pub spatial: AttentionWeights,
    pub temporal: AttentionWeights,
}

impl StaPair {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        StaPair {
            spatial: AttentionWeights::init(dim, rng),
            temporal: AttentionWeights::init(dim, rng),
        }
    }

    pub fn attach(&self, tape: &mut Tape) -> PairVars {
        PairVars {
            spatial: self.spatial.attach(tape),
            temporal: self.temporal.attach(tape),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct PairVars {
    pub spatial: AttentionVars,
    pub temporal: AttentionVars,
}

/// Branch switches shared by every pair of a stack.
#[derive(Debug, Clone, Copy)]
pub struct PairOptions {
    pub use_spatial: bool,
    pub use_temporal: bool,
    /// Adds the pair input to the fused output. Off in the reference architecture.
    pub residual: bool,
}

impl Default for PairOptions {
    fn default() -> Self {
        PairOptions {
            use_spatial: true,
            use_temporal: true,
            residual: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Qkv {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

/// Projects `x` to queries, keys and values; only queries and keys are rotated.
///
/// `x` must already be in the layout of `axis` (`…×T×N×𝔇` for spatial).
pub fn qkv_project(tape: &mut Tape, x: Var, w: &AttentionVars, phases: &RopePhases, axis: AttentionAxis) -> Result<Qkv> {
    let q = tape.matmul(x, w.query)?;
    let k = tape.matmul(x, w.key)?;
    let value = tape.matmul(x, w.value)?;
    Ok(Qkv {
        query: phases.apply(tape, q, axis)?,
        key: phases.apply(tape, k, axis)?,
        value,
    })
}

/// `Q · Kᵀ / √𝔇` over the trailing two axes.
pub fn scaled_scores(tape: &mut Tape, query: Var, key: Var) -> Result<Var> {
    let (qs, ks) = (tape.shape(query), tape.shape(key));
    if qs != ks || qs.len() < 2 {
        return Err(Error::shape("scaled_scores", qs, ks));
    }
    let dim = *qs.last().expect("rank checked") as f64;
    let raw = tape.matmul_transposed(query, key)?;
    Ok(tape.scale(raw, 1.0 / dim.sqrt()))
}

/// `softmax(scores) · V`.
pub fn attention_apply(tape: &mut Tape, scores: Var, value: Var) -> Result<Var> {
    let s = tape.shape(scores);
    if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
        return Err(Error::shape("attention_apply", s, tape.shape(value)));
    }
    let weights = tape.softmax_last(scores)?;
    tape.matmul(weights, value)
}

/// The shared kernel: attention along the second-to-last axis of `x`.
pub fn attention_kernel(tape: &mut Tape, x: Var, w: &AttentionVars, phases: &RopePhases, axis: AttentionAxis) -> Result<Var> {
    let qkv = qkv_project(tape, x, w, phases, axis)?;
    let scores = scaled_scores(tape, qkv.query, qkv.key)?;
    attention_apply(tape, scores, qkv.value)
}

fn swap_node_time(tape: &mut Tape, x: Var) -> Result<Var> {
    let rank = tape.shape(x).len();
    if rank < 3 {
        return Err(Error::InvalidArgument(format!(
            "attention input needs node, time and feature axes, got {:?}",
            tape.shape(x)
        )));
    }
    let mut axes: Vec<usize> = (0..rank).collect();
    axes.swap(rank - 3, rank - 2);
    tape.permute(x, &axes)
}

/// One attention module applied to `(…, N, T, 𝔇)` input, returning the same layout.
pub fn attention_branch(tape: &mut Tape, x: Var, w: &AttentionVars, phases: &RopePhases, axis: AttentionAxis) -> Result<Var> {
    match axis {
        AttentionAxis::Temporal => attention_kernel(tape, x, w, phases, axis),
        AttentionAxis::Spatial => {
            let by_time = swap_node_time(tape, x)?;
            let out = attention_kernel(tape, by_time, w, phases, axis)?;
            swap_node_time(tape, out)
        }
    }
}

/// Additive fusion of the two branches run on the same input.
pub fn sta_pair_forward(tape: &mut Tape, x: Var, pair: &PairVars, phases: &RopePhases, opts: PairOptions) -> Result<Var> {
    let spatial = if opts.use_spatial {
        Some(attention_branch(tape, x, &pair.spatial, phases, AttentionAxis::Spatial)?)
    } else {
        None
    };
    let temporal = if opts.use_temporal {
        Some(attention_branch(tape, x, &pair.temporal, phases, AttentionAxis::Temporal)?)
    } else {
        None
    };
    let fused = match (spatial, temporal) {
        (Some(s), Some(t)) => tape.add(s, t)?,
        (Some(s), None) => s,
        (None, Some(t)) => t,
        (None, None) => {
            return Err(Error::Config(
                "a pair needs at least one of the spatial and temporal branches".into(),
            ))
        }
    };
    if opts.residual {
        tape.add(x, fused)
    } else {
        Ok(fused)
    }
}

/// Sequential composition of all pairs.
pub fn stack_forward(tape: &mut Tape, x: Var, pairs: &[PairVars], phases: &RopePhases, opts: PairOptions) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::Config("the attention stack needs at least one pair".into()));
    }
    pairs
        .iter()
        .try_fold(x, |h, pair| sta_pair_forward(tape, h, pair, phases, opts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rope::{RopeConfig, RotateVariant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn phases(window: usize, nodes: usize, dim: usize, on: bool) -> RopePhases {
        let cfg = RopeConfig {
            theta_spatial: 64.0,
            theta_temporal: 128.0,
            embed_dim: dim,
            window,
            num_nodes: nodes,
            variant: RotateVariant::Standard,
        };
        if on {
            RopePhases::new(&cfg).unwrap()
        } else {
            RopePhases::disabled(&cfg).unwrap()
        }
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_projection_with_zero_phase() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[3, 4, 6], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let w = AttentionWeights::identity(6).attach(&mut tape);
        let qkv = qkv_project(&mut tape, xv, &w, &phases(4, 3, 6, false), AttentionAxis::Temporal).unwrap();
        for v in [qkv.query, qkv.key, qkv.value] {
            assert_eq!(tape.value(v).data(), x.data());
        }
    }

    #[test]
    fn zero_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let xv = tape.constant(random(&[3, 4, 6], &mut rng));
        let mut weights = AttentionWeights::init(6, &mut rng);
        weights.value = Tensor::zeros(&[6, 6]);
        let w = weights.attach(&mut tape);
        let qkv = qkv_project(&mut tape, xv, &w, &phases(4, 3, 6, true), AttentionAxis::Temporal).unwrap();
        assert!(tape.value(qkv.value).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn score_of_unit_vectors() {
        let mut tape = Tape::new();
        let e1 = Tensor::new(&[1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let e2 = Tensor::new(&[1, 4], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let q = tape.constant(e1.clone());
        let k = tape.constant(e1);
        let s = scaled_scores(&mut tape, q, k).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5]);
        let k2 = tape.constant(e2);
        let s = scaled_scores(&mut tape, q, k2).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0]);
    }

    #[test]
    fn uniform_scores_average_values() {
        let mut tape = Tape::new();
        let scores = tape.constant(Tensor::full(&[2, 3, 3], 0.7));
        let v = Tensor::from_fn(&[2, 3, 2], |i| (i[0] * 10 + i[1] * 2 + i[2]) as f64);
        let vv = tape.constant(v.clone());
        let out = attention_apply(&mut tape, scores, vv).unwrap();
        for b in 0..2 {
            for c in 0..2 {
                let mean = (0..3).map(|r| v.get(&[b, r, c])).sum::<f64>() / 3.0;
                for r in 0..3 {
                    assert!((tape.value(out).get(&[b, r, c]) - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn saturated_score_selects_one_row() {
        let mut tape = Tape::new();
        let scores = tape.constant(Tensor::new(&[1, 3], vec![0.0, 1e4, 0.5]).unwrap());
        let v = tape.constant(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        // treat as a 1×1 query slice over 3 keys by padding scores to square
        let out = tape.softmax_last(scores).unwrap();
        let out = tape.matmul(out, v).unwrap();
        let got = tape.value(out).data();
        assert!((got[0] - 3.0).abs() < 1e-8 && (got[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = tape.constant(random(&[3, 4, 6], &mut rng));
        let pair = StaPair {
            spatial: AttentionWeights::zeros(6),
            temporal: AttentionWeights::zeros(6),
        }
        .attach(&mut tape);
        let out = sta_pair_forward(&mut tape, x, &pair, &phases(4, 3, 6, true), PairOptions::default()).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn disabling_a_branch_leaves_the_other() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[2, 3, 4, 6], &mut rng));
        let pair = StaPair::init(6, &mut rng).attach(&mut tape);
        let ph = phases(4, 3, 6, true);
        let only_t = sta_pair_forward(
            &mut tape,
            x,
            &pair,
            &ph,
            PairOptions {
                use_spatial: false,
                ..PairOptions::default()
            },
        )
        .unwrap();
        let t = attention_branch(&mut tape, x, &pair.temporal, &ph, AttentionAxis::Temporal).unwrap();
        assert_eq!(tape.value(only_t), tape.value(t));

        let neither = PairOptions {
            use_spatial: false,
            use_temporal: false,
            residual: false,
        };
        assert!(sta_pair_forward(&mut tape, x, &pair, &ph, neither).is_err());
    }

    #[test]
    fn stack_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[3, 4, 6], &mut rng));
        let ph = phases(4, 3, 6, true);
        let p1 = StaPair::init(6, &mut rng).attach(&mut tape);
        let p2 = StaPair::init(6, &mut rng).attach(&mut tape);
        let opts = PairOptions::default();

        let single = stack_forward(&mut tape, x, &[p1], &ph, opts).unwrap();
        let direct = sta_pair_forward(&mut tape, x, &p1, &ph, opts).unwrap();
        assert_eq!(tape.value(single), tape.value(direct));

        let both = stack_forward(&mut tape, x, &[p1, p2], &ph, opts).unwrap();
        let chained = sta_pair_forward(&mut tape, direct, &p2, &ph, opts).unwrap();
        assert_eq!(tape.value(both), tape.value(chained));

        assert!(stack_forward(&mut tape, x, &[], &ph, opts).is_err());
    }

    #[test]
    fn pair_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::inference();
        let x = tape.constant(random(&[10, 12, 8], &mut rng));
        let pair = StaPair::init(8, &mut rng).attach(&mut tape);
        let out = sta_pair_forward(&mut tape, x, &pair, &phases(12, 10, 8, true), PairOptions::default()).unwrap();
        assert_eq!(tape.shape(out), &[10, 12, 8]);
    }
}
