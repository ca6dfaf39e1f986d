#![allow(dead_code)]

use cerberus::backbone::{Backbone, BackboneConfig};
use cerberus::tensor::{kernels, Graph, Tensor, Var};
use cerberus::TokenId;

/// Greedy continuation recomputed from scratch at every token (no cache reuse).
pub fn greedy_oracle(bb: &Backbone, prompt: &[TokenId], n: usize, stop: Option<TokenId>) -> Vec<TokenId> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::new();
    while out.len() < n && seq.len() < bb.config().max_context {
        let o = bb.forward_fresh(&seq).unwrap();
        let t = kernels::argmax(o.logits.row(seq.len() - 1)) as TokenId;
        out.push(t);
        seq.push(t);
        if Some(t) == stop {
            break;
        }
    }
    out
}

/// A small backbone with weights large enough that attention is far from uniform.
pub fn sharp_backbone(cfg: BackboneConfig, seed: u64, noise: f32) -> Backbone {
    let mut m = Backbone::new(cfg, seed).unwrap();
    let mut rng = cerberus::rng::seeded(seed ^ 0x5eed);
    for t in m.params_mut().tensors_mut() {
        let n = cerberus::rng::normal_vec(&mut rng, t.len(), noise);
        t.data_mut().iter_mut().zip(n).for_each(|(a, b)| *a += b);
    }
    m
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Norm-wise relative error per input.
    pub per_input: Vec<f64>,
    /// Worst relative error of random directional derivatives.
    pub directional: f64,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.per_input.iter().copied().fold(self.directional, f64::max)
    }
}

fn eval_loss(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let l = build(&mut g, &vars);
    g.value(l).data()[0] as f64
}

/// Central difference refined by one Richardson step, which cancels the
/// `O(h²)` truncation term.
fn derivative(inputs: &[Tensor], dir: &[Vec<f32>], h: f64, build: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let at = |s: f64| {
        let moved: Vec<Tensor> = inputs
            .iter()
            .zip(dir)
            .map(|(t, d)| {
                let data = t
                    .data()
                    .iter()
                    .zip(d)
                    .map(|(&x, &u)| (x as f64 + s * u as f64) as f32)
                    .collect();
                Tensor::new(t.shape().to_vec(), data).unwrap()
            })
            .collect();
        eval_loss(&moved, build)
    };
    let d1 = (at(h) - at(-h)) / (2.0 * h);
    let d2 = (at(h / 2.0) - at(-h / 2.0)) / h;
    (4.0 * d2 - d1) / 3.0
}

/// Compares reverse-mode gradients with finite differences.
///
/// `build` must return a scalar loss var built from the input vars.
pub fn grad_check(
    inputs: &[Tensor],
    h: f64,
    directions: usize,
    build: &dyn Fn(&mut Graph, &[Var]) -> Var,
) -> GradCheck {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t)).collect();
    let loss = build(&mut g, &vars);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let zeros: Vec<Vec<f32>> = inputs.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut per_input = Vec::new();
    for i in 0..inputs.len() {
        let mut fd = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let mut dir = zeros.clone();
            dir[i][j] = 1.0;
            fd.push(derivative(inputs, &dir, h, build));
        }
        let diff: f64 = fd
            .iter()
            .zip(&analytic[i])
            .map(|(a, &b)| (a - b as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic[i].iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nf: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = na.max(nf);
        per_input.push(if scale < 1e-9 { diff } else { diff / scale });
    }
    let mut rng = cerberus::rng::seeded(17);
    let mut directional: f64 = 0.0;
    for _ in 0..directions {
        let dir: Vec<Vec<f32>> = inputs
            .iter()
            .map(|t| cerberus::rng::normal_vec(&mut rng, t.len(), 1.0))
            .collect();
        let norm: f64 = dir.iter().flatten().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let dir: Vec<Vec<f32>> = dir
            .iter()
            .map(|d| d.iter().map(|&x| (x as f64 / norm) as f32).collect())
            .collect();
        let fd = derivative(inputs, &dir, h, build);
        let an: f64 = analytic
            .iter()
            .flatten()
            .zip(dir.iter().flatten())
            .map(|(&a, &u)| a as f64 * u as f64)
            .sum();
        let gnorm: f64 = analytic
            .iter()
            .flatten()
            .map(|&x| (x as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        directional = directional.max((fd - an).abs() / gnorm.max(1e-9));
    }
    GradCheck { per_input, directional }
}

pub fn random_weights(len: usize, seed: u64) -> Vec<f32> {
    let mut rng = cerberus::rng::seeded(seed);
    cerberus::rng::normal_vec(&mut rng, len, 1.0)
}

pub mod grads;
