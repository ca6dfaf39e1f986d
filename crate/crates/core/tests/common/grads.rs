//! Finite-difference checks for every trainable op and the full losses on a d=8, V=16 configuration.

use cerberus::backbone::{Backbone, BackboneConfig};
use cerberus::heads::{HeadConfig, HeadStack, Paradigm, ResblockVariant};
use cerberus::tensor::{Graph, Tensor, Var};
use cerberus::trainer::head_loss;

use super::{grad_check, random_weights, sharp_backbone, GradCheck};

const D: usize = 8;
const V: usize = 16;
const H: f64 = 3e-2;

fn randn(shape: &[usize], seed: u64, std: f32) -> Tensor {
    let mut rng = cerberus::rng::seeded(seed);
    Tensor::randn(shape, std, &mut rng)
}

fn weighted(g: &mut Graph, x: Var, seed: u64) -> Var {
    let n = g.value(x).len();
    g.dot_const(x, random_weights(n, seed)).unwrap()
}

fn op_checks() -> Vec<(String, GradCheck)> {
    let mut out = Vec::new();
    let mut push = |name: &str, inputs: Vec<Tensor>, build: &dyn Fn(&mut Graph, &[Var]) -> Var| {
        out.push((name.to_string(), grad_check(&inputs, H, 4, build)));
    };
    push(
        "matmul",
        vec![randn(&[3, D], 1, 1.0), randn(&[D, 5], 2, 1.0)],
        &|g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            weighted(g, y, 10)
        },
    );
    push("add", vec![randn(&[3, D], 3, 1.0), randn(&[3, D], 4, 1.0)], &|g, v| {
        let y = g.add(v[0], v[1]).unwrap();
        weighted(g, y, 11)
    });
    push(
        "add_bias",
        vec![randn(&[3, D], 5, 1.0), randn(&[D], 6, 1.0)],
        &|g, v| {
            let y = g.add_bias(v[0], v[1]).unwrap();
            weighted(g, y, 12)
        },
    );
    push(
        "linear",
        vec![randn(&[3, D], 7, 1.0), randn(&[D, D], 8, 0.5), randn(&[D], 9, 1.0)],
        &|g, v| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            weighted(g, y, 13)
        },
    );
    push("silu", vec![randn(&[3, D], 14, 2.0)], &|g, v| {
        let y = g.silu(v[0]);
        weighted(g, y, 15)
    });
    push("softmax", vec![randn(&[3, D], 16, 2.0)], &|g, v| {
        let y = g.softmax(v[0]);
        weighted(g, y, 17)
    });
    push(
        "layernorm",
        vec![randn(&[3, D], 18, 2.0), randn(&[D], 19, 1.0), randn(&[D], 20, 1.0)],
        &|g, v| {
            let y = g.layernorm(v[0], v[1], v[2]).unwrap();
            weighted(g, y, 21)
        },
    );
    push(
        "concat_cols",
        vec![randn(&[3, D], 22, 1.0), randn(&[3, 4], 23, 1.0)],
        &|g, v| {
            let y = g.concat_cols(v[0], v[1]).unwrap();
            weighted(g, y, 24)
        },
    );
    push("embedding", vec![randn(&[V, D], 25, 1.0)], &|g, v| {
        let y = g.embedding(v[0], &[3, 0, 3, 15]).unwrap();
        weighted(g, y, 26)
    });
    push(
        "causal_attention",
        vec![
            randn(&[6, D], 27, 1.0),
            randn(&[6, D], 28, 1.0),
            randn(&[6, D], 29, 1.0),
        ],
        &|g, v| {
            let y = g.causal_attention(v[0], v[1], v[2], 2, 3).unwrap();
            weighted(g, y, 30)
        },
    );
    push("cross_entropy", vec![randn(&[4, V], 31, 2.0)], &|g, v| {
        g.cross_entropy(v[0], &[0, 5, 15, 5]).unwrap()
    });
    push(
        "weighted_sum",
        vec![randn(&[2, D], 32, 1.0), randn(&[2, D], 33, 1.0)],
        &|g, v| {
            let a = weighted(g, v[0], 34);
            let b = weighted(g, v[1], 35);
            g.weighted_sum(&[(a, 0.7), (b, -1.3)]).unwrap()
        },
    );
    out
}

fn head_checks() -> Vec<(String, GradCheck)> {
    let mut out = Vec::new();
    for paradigm in [Paradigm::Medusa, Paradigm::Cerberus] {
        for variant in [ResblockVariant::Paper, ResblockVariant::Canonical] {
            let cfg = HeadConfig {
                paradigm,
                n_heads: 3,
                resblocks_per_head: 2,
                special_position: 1,
                top_k: 4,
                variant,
            };
            let stack = HeadStack::random(cfg, D, V, 40, 0.4).unwrap();
            let hidden = randn(&[5, D], 41, 1.0);
            let targets: Vec<Vec<usize>> = (0..3).map(|i| (0..5).map(|r| (r * 3 + i * 5) % V).collect()).collect();
            let inputs: Vec<Tensor> = stack.params().tensors().to_vec();
            let build = |g: &mut Graph, v: &[Var]| {
                head_loss(g, &stack, v, hidden.clone(), &targets, &[1.0, 0.8, 0.64])
                    .unwrap()
                    .0
            };
            out.push((
                format!("head_loss/{paradigm}/{variant:?}"),
                grad_check(&inputs, H, 4, &build),
            ));
        }
    }
    out
}

fn backbone_check() -> (String, GradCheck) {
    let cfg = BackboneConfig {
        vocab_size: V,
        d_model: D,
        n_layers: 2,
        n_attn_heads: 2,
        max_context: 8,
        ffn_dim: 16,
    };
    let bb: Backbone = sharp_backbone(cfg, 50, 0.3);
    let windows: Vec<Vec<u32>> = vec![vec![1, 4, 9, 15, 2, 2], vec![0, 7, 7, 3, 12, 5]];
    let inputs: Vec<Tensor> = bb.params().tensors().to_vec();
    let build = |g: &mut Graph, v: &[Var]| {
        let w: Vec<&[u32]> = windows.iter().map(|w| &w[..5]).collect();
        let targets: Vec<usize> = windows
            .iter()
            .flat_map(|w| w[1..].iter().map(|&t| t as usize))
            .collect();
        let (_, logits) = bb.train_forward(g, v, &w).unwrap();
        g.cross_entropy(logits, &targets).unwrap()
    };
    ("backbone_loss".into(), grad_check(&inputs, H, 4, &build))
}

/// Every check with its worst relative error.
pub fn suite() -> Vec<(String, f64)> {
    let mut all = op_checks();
    all.extend(head_checks());
    all.push(backbone_check());
    all.into_iter().map(|(n, c)| (n, c.worst())).collect()
}
