//! Reference implementations used as test oracles: central finite differences
//! and nested-loop attention written straight from the definitions.

#![allow(dead_code)]

use std::f64::consts::PI;

use lstan_core::model::{Forecaster, ModelParams};
use lstan_core::Tensor;
use rand::Rng;

/// `|a − n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences of `loss` with respect to every parameter scalar.
pub fn finite_difference_gradients(
    params: &ModelParams,
    h: f64,
    loss: impl Fn(&ModelParams) -> f64,
) -> Vec<Tensor> {
    let mut work = params.clone();
    let shapes: Vec<Vec<usize>> = params.tensors().iter().map(|t| t.shape().to_vec()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (k, shape) in shapes.iter().enumerate() {
        let numel = shape.iter().product();
        let mut g = vec![0.0; numel];
        for (i, gi) in g.iter_mut().enumerate() {
            let orig = work.tensors()[k].data()[i];
            work.tensors_mut()[k].data_mut()[i] = orig + h;
            let up = loss(&work);
            work.tensors_mut()[k].data_mut()[i] = orig - h;
            let down = loss(&work);
            work.tensors_mut()[k].data_mut()[i] = orig;
            *gi = (up - down) / (2.0 * h);
        }
        out.push(Tensor::new(shape, g).unwrap());
    }
    out
}

/// Replaces every parameter with uniform noise in `[-scale, scale]` so no
/// gradient path starts at an exact zero.
pub fn randomize(params: &mut ModelParams, scale: f64, rng: &mut impl Rng) {
    for t in params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-scale..scale);
        }
    }
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Evenly spaced points from −1 to 1.
pub fn linspace(len: usize) -> Vec<f64> {
    (0..len).map(|i| -1.0 + 2.0 * i as f64 / (len - 1) as f64).collect()
}

pub fn frequencies(dim: usize, theta: f64) -> Vec<f64> {
    (1..=dim / 2)
        .map(|i| PI * (2 * i - 1) as f64 / (dim - 1) as f64 * theta / 2.0)
        .collect()
}

/// Rotates pairs `(j, j + 𝔇/2)` of `v` by `phase_j`.
pub fn rope_loop(v: &[f64], freq: &[f64], angle_scale: f64) -> Vec<f64> {
    let h = freq.len();
    let mut out = vec![0.0; 2 * h];
    for j in 0..h {
        let a = angle_scale * freq[j];
        let (c, s) = (a.cos(), a.sin());
        out[j] = v[j] * c - v[j + h] * s;
        out[j + h] = v[j + h] * c + v[j] * s;
    }
    out
}

fn vec_mat(v: &[f64], w: &Tensor) -> Vec<f64> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    (0..c).map(|j| (0..r).map(|i| v[i] * w.data()[i * c + j]).sum()).collect()
}

pub struct LoopWeights<'a> {
    pub query: &'a Tensor,
    pub key: &'a Tensor,
    pub value: &'a Tensor,
}

/// Attention for one `N × T × 𝔇` sample, written with explicit loops.
///
/// `spatial` attends across nodes at each step; otherwise across steps at
/// each node. The rotation angle at `(node, step)` is
/// `(pos_time[t] + pos_node[n]) · F_j` with `F` built from `theta`; a
/// `theta` of `None` disables the rotation.
pub fn attention_loop(x: &Tensor, w: &LoopWeights, theta: Option<f64>, spatial: bool) -> Tensor {
    let (n, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (pt, pn) = (linspace(t), linspace(n));
    let freq = theta.map(|th| frequencies(d, th));
    let row = |a: usize, b: usize| -> Vec<f64> { (0..d).map(|k| x.get(&[a, b, k])).collect() };
    let mut q = vec![vec![vec![0.0; d]; t]; n];
    let mut k = q.clone();
    let mut v = q.clone();
    for a in 0..n {
        for b in 0..t {
            let xr = row(a, b);
            let (qq, kk) = (vec_mat(&xr, w.query), vec_mat(&xr, w.key));
            match &freq {
                Some(f) => {
                    q[a][b] = rope_loop(&qq, f, pt[b] + pn[a]);
                    k[a][b] = rope_loop(&kk, f, pt[b] + pn[a]);
                }
                None => {
                    q[a][b] = qq;
                    k[a][b] = kk;
                }
            }
            v[a][b] = vec_mat(&xr, w.value);
        }
    }
    let mut out = Tensor::zeros(&[n, t, d]);
    let scale = 1.0 / (d as f64).sqrt();
    for a in 0..n {
        for b in 0..t {
            // positions (node, step) competing for attention
            let others: Vec<(usize, usize)> = if spatial {
                (0..n).map(|m| (m, b)).collect()
            } else {
                (0..t).map(|s| (a, s)).collect()
            };
            let scores: Vec<f64> = others
                .iter()
                .map(|&(m, s)| (0..d).map(|j| q[a][b][j] * k[m][s][j]).sum::<f64>() * scale)
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..d {
                let val: f64 = others.iter().zip(&e).map(|(&(m, s), ei)| ei / z * v[m][s][j]).sum();
                out.set(&[a, b, j], val);
            }
        }
    }
    out
}

/// Loss of the model on a fixed batch, used by gradient checks.
pub fn model_loss(model: &Forecaster, params: &ModelParams, x: &Tensor, y: &Tensor) -> f64 {
    model.loss(params, x, y).unwrap()
}

pub fn random_graph(n: usize, density: f64, rng: &mut impl Rng) -> lstan_core::graph::RoadGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.gen_bool(density) {
                edges.push(lstan_core::graph::Edge {
                    from: i,
                    to: j,
                    weight: rng.gen_range(0.1..3.0),
                });
            }
        }
    }
    lstan_core::graph::RoadGraph::from_edges(n, edges).unwrap()
}

/// Worst deviations seen over a batch of spectral checks.
#[derive(Debug, Default)]
pub struct SpectralReport {
    pub eigenvalue_excursion: f64,
    pub orthonormality: f64,
    pub reconstruction: f64,
}

pub fn spectral_report(graph: &lstan_core::graph::RoadGraph, report: &mut SpectralReport) {
    use lstan_core::graph::{normalized_laplacian, SpectralBasis};
    let l = normalized_laplacian(graph);
    let basis = SpectralBasis::from_graph(graph).unwrap();
    let n = graph.num_nodes();
    for &ev in &basis.eigenvalues {
        let out = (-ev).max(ev - 2.0).max(0.0);
        report.eigenvalue_excursion = report.eigenvalue_excursion.max(out);
    }
    let u = &basis.eigenvectors;
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..n).map(|k| u.get(&[i, k]) * u.get(&[j, k])).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            report.orthonormality = report.orthonormality.max((dot - want).abs());
        }
    }
    // Uᵀ Λ U rebuilt by explicit loops, independent of the library helper
    for i in 0..n {
        for j in 0..n {
            let v: f64 = (0..n).map(|k| u.get(&[k, i]) * basis.eigenvalues[k] * u.get(&[k, j])).sum();
            report.reconstruction = report.reconstruction.max((v - l.get(&[i, j])).abs());
        }
    }
}

/// Worst errors over random rotary draws (standard rotation).
#[derive(Debug, Default)]
pub struct RopeReport {
    pub norm: f64,
    pub shift: f64,
    pub zero_phase: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate(v: &[f64], phase: &[f64]) -> Vec<f64> {
    use lstan_core::rope::apply_rope;
    let d = v.len();
    let mut tape = lstan_core::Tape::inference();
    let x = tape.constant(Tensor::new(&[d], v.to_vec()).unwrap());
    let p = Tensor::new(&[d], phase.to_vec()).unwrap();
    let out = apply_rope(&mut tape, x, &p, lstan_core::RotateVariant::Standard).unwrap();
    tape.value(out).data().to_vec()
}

/// Per-pair angles duplicated across the two halves, as the phase tensors are laid out.
fn duplicated(half: &[f64]) -> Vec<f64> {
    half.iter().chain(half).copied().collect()
}

pub fn rope_draw(rng: &mut impl Rng, report: &mut RopeReport) {
    let half = rng.gen_range(1..=16);
    let d = 2 * half;
    let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let k: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let freq: Vec<f64> = (0..half).map(|_| rng.gen_range(0.0..50.0)).collect();
    let (pq, pk, delta) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-2.0..2.0));
    let phase = |p: f64| duplicated(&freq.iter().map(|f| p * f).collect::<Vec<_>>());

    let rq = rotate(&q, &phase(pq));
    let nq = dot(&q, &q).sqrt();
    report.norm = report.norm.max((dot(&rq, &rq).sqrt() - nq).abs());

    let base = dot(&rq, &rotate(&k, &phase(pk)));
    let shifted = dot(&rotate(&q, &phase(pq + delta)), &rotate(&k, &phase(pk + delta)));
    report.shift = report.shift.max((base - shifted).abs());

    let zero = rotate(&q, &vec![0.0; d]);
    report.zero_phase = report.zero_phase.max(zero.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
}

/// Compares the library's spatial and temporal branches to [`attention_loop`]
/// on one random instance; returns the largest absolute difference.
pub fn attention_instance(rng: &mut impl Rng) -> f64 {
    use lstan_core::attention::{attention_branch, AttentionWeights};
    use lstan_core::rope::{AttentionAxis, RopeConfig, RopePhases};
    let t = rng.gen_range(2..=6);
    let n = rng.gen_range(2..=6);
    let d = 2 * rng.gen_range(1..=4);
    let rope_on = rng.gen_bool(0.8);
    let cfg = RopeConfig {
        theta_spatial: [64.0, 128.0, 256.0, 512.0][rng.gen_range(0..4)],
        theta_temporal: [64.0, 128.0, 256.0, 512.0][rng.gen_range(0..4)],
        embed_dim: d,
        window: t,
        num_nodes: n,
        variant: lstan_core::RotateVariant::Standard,
    };
    let phases = if rope_on { RopePhases::new(&cfg).unwrap() } else { RopePhases::disabled(&cfg).unwrap() };
    let x = random_tensor(&[n, t, d], rng);
    let mut worst: f64 = 0.0;
    for (axis, spatial, theta) in [
        (AttentionAxis::Spatial, true, cfg.theta_spatial),
        (AttentionAxis::Temporal, false, cfg.theta_temporal),
    ] {
        let w = AttentionWeights::init(d, rng);
        let mut tape = lstan_core::Tape::inference();
        let xv = tape.constant(x.clone());
        let wv = w.attach(&mut tape);
        let got = attention_branch(&mut tape, xv, &wv, &phases, axis).unwrap();
        let want = attention_loop(
            &x,
            &LoopWeights { query: &w.query, key: &w.key, value: &w.value },
            rope_on.then_some(theta),
            spatial,
        );
        worst = worst.max(tape.value(got).max_abs_diff(&want).unwrap());
    }
    worst
}
