//! Backbone pretraining and frozen-backbone head training.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::heads::HeadStack;
use crate::rng;
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, Graph, ParamStore, Tensor};
use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f32,
    /// Windows per step.
    pub batch_size: usize,
    pub steps: usize,
    /// Tokens per training window.
    pub window: usize,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_fraction: f32,
    pub grad_clip: f32,
    /// `λ_i = lambda_decay^i` unless `loss_weights` is given.
    pub lambda_decay: f32,
    pub loss_weights: Option<Vec<f32>>,
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 4e-4,
            batch_size: 8,
            steps: 1000,
            window: 64,
            warmup_steps: 100,
            min_lr_fraction: 0.1,
            grad_clip: 1.0,
            lambda_decay: 0.8,
            loss_weights: None,
            eval_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("train.lr must be > 0"));
        }
        if self.batch_size == 0 || self.window < 2 {
            return Err(Error::config("train.batch_size must be ≥ 1 and train.window ≥ 2"));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return Err(Error::config("train.min_lr_fraction must be in [0, 1]"));
        }
        if !(self.lambda_decay > 0.0) {
            return Err(Error::config("train.lambda_decay must be > 0"));
        }
        if let Some(w) = &self.loss_weights {
            if w.iter().any(|&x| !(x >= 0.0)) || w.iter().all(|&x| x == 0.0) {
                return Err(Error::config("train.loss_weights must be ≥ 0 and not all zero"));
            }
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::config("train.eval_fraction must be in [0, 1)"));
        }
        Ok(())
    }

    /// Per-head loss weights for `n_heads` heads.
    pub fn head_weights(&self, n_heads: usize) -> Result<Vec<f32>> {
        match &self.loss_weights {
            Some(w) if w.len() != n_heads => Err(Error::config(format!(
                "train.loss_weights has {} entries for {n_heads} heads",
                w.len()
            ))),
            Some(w) => Ok(w.clone()),
            None => Ok((0..n_heads).map(|i| self.lambda_decay.powi(i as i32)).collect()),
        }
    }

    /// Linear warmup, then cosine decay to `min_lr_fraction · lr` at the last step.
    pub fn lr_at(&self, step: usize) -> f32 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f32 / self.warmup_steps as f32;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let p = ((step - self.warmup_steps) as f32 / span as f32).min(1.0);
        let floor = self.lr * self.min_lr_fraction;
        floor + (self.lr - floor) * 0.5 * (1.0 + (std::f32::consts::PI * p).cos())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_eval_loss: f32,
    pub final_eval_loss: f32,
    /// Training loss at every step.
    pub losses: Vec<f32>,
}

fn eval_windows(tokens: &[TokenId], len: usize, max: usize) -> Vec<&[TokenId]> {
    tokens.chunks_exact(len).take(max).collect()
}

fn adam_step(params: &mut ParamStore, adam: &mut Adam, lr: f32, clip: f32) -> Result<()> {
    let mut ts = params.tensors_mut();
    if clip > 0.0 {
        clip_grad_norm(&mut ts, clip);
    }
    adam.step(&mut ts, lr)
}

/// Next-token training on random windows of `train`. Eval loss is measured on
/// up to 32 disjoint windows of `eval` (or of `train` when `eval` is too short).
pub fn train_backbone(
    backbone: &mut Backbone,
    train: &[TokenId],
    eval: &[TokenId],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let w = cfg.window.min(backbone.config().max_context);
    if train.len() < w + 1 {
        return Err(Error::Data(format!(
            "corpus of {} tokens is smaller than one window of {}",
            train.len(),
            w + 1
        )));
    }
    let eval_src = if eval.len() > w { eval } else { train };
    let evals = eval_windows(eval_src, w + 1, 32);
    let initial_eval_loss = backbone.eval_loss(&evals)?;
    let mut r = rng::derive(cfg.seed, "train-backbone");
    let mut adam = Adam::new(
        AdamConfig::default(),
        &backbone.params().tensors().iter().collect::<Vec<_>>(),
    );
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let starts: Vec<usize> = (0..cfg.batch_size)
            .map(|_| r.random_range(0..=train.len() - w - 1))
            .collect();
        let inputs: Vec<&[TokenId]> = starts.iter().map(|&s| &train[s..s + w]).collect();
        let targets: Vec<usize> = starts
            .iter()
            .flat_map(|&s| train[s + 1..s + w + 1].iter().map(|&t| t as usize))
            .collect();
        let mut g = Graph::new();
        let vars = backbone.params().bind(&mut g);
        let (_, logits) = backbone.train_forward(&mut g, &vars, &inputs)?;
        let loss = g.cross_entropy(logits, &targets)?;
        losses.push(g.value(loss).data()[0]);
        g.backward(loss)?;
        backbone.params_mut().collect_grads(&g, &vars);
        adam_step(backbone.params_mut(), &mut adam, cfg.lr_at(step), cfg.grad_clip)?;
        backbone.params_mut().clear_grads();
    }
    let final_eval_loss = backbone.eval_loss(&evals)?;
    Ok(TrainReport {
        initial_eval_loss,
        final_eval_loss,
        losses,
    })
}

/// Frozen-backbone hidden states for every position of a token stream.
///
/// The stream is cut into consecutive chunks of `window` tokens; row `p` is
/// the final hidden state at stream position `p` given its chunk prefix.
#[derive(Debug, Clone)]
pub struct HiddenPool {
    pub hidden: Vec<f32>,
    pub d_model: usize,
    pub tokens: Vec<TokenId>,
}

impl HiddenPool {
    pub fn compute(backbone: &Backbone, tokens: &[TokenId], window: usize) -> Result<Self> {
        let d = backbone.config().d_model;
        let w = window.clamp(1, backbone.config().max_context);
        let mut hidden = Vec::with_capacity(tokens.len() * d);
        for chunk in tokens.chunks(w) {
            hidden.extend_from_slice(backbone.forward_fresh(chunk)?.h_last.data());
        }
        Ok(HiddenPool {
            hidden,
            d_model: d,
            tokens: tokens.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn row(&self, p: usize) -> &[f32] {
        &self.hidden[p * self.d_model..(p + 1) * self.d_model]
    }

    /// Positions whose targets at offsets `2..=n_heads+1` all exist.
    pub fn usable(&self, n_heads: usize) -> usize {
        self.len().saturating_sub(n_heads + 1)
    }

    /// Hidden rows for `positions` and, per head `i`, the tokens at offset `i + 2`.
    pub fn batch(&self, positions: &[usize], n_heads: usize) -> Result<(Tensor, Vec<Vec<usize>>)> {
        let mut data = Vec::with_capacity(positions.len() * self.d_model);
        for &p in positions {
            if p + n_heads + 1 >= self.len() {
                return Err(Error::Index {
                    what: "head target",
                    index: p + n_heads + 1,
                    size: self.len(),
                });
            }
            data.extend_from_slice(self.row(p));
        }
        let targets = (0..n_heads)
            .map(|i| positions.iter().map(|&p| self.tokens[p + i + 2] as usize).collect())
            .collect();
        Ok((Tensor::new(vec![positions.len(), self.d_model], data)?, targets))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTrainReport {
    /// Per-head CE at the start, over the first batch.
    pub initial_head_losses: Vec<f32>,
    pub final_head_losses: Vec<f32>,
    /// Weighted training loss at every step.
    pub losses: Vec<f32>,
    pub backbone_fingerprint: String,
}

/// `Σ_i λ_i · CE(head_i, target at offset i+2)`, built on `g`. Returns `(loss, per-head CE vars)`.
pub fn head_loss(
    g: &mut Graph,
    heads: &HeadStack,
    vars: &[crate::tensor::Var],
    hidden: Tensor,
    targets: &[Vec<usize>],
    weights: &[f32],
) -> Result<(crate::tensor::Var, Vec<crate::tensor::Var>)> {
    let h = g.constant(hidden);
    let logits = heads.train_forward(g, vars, h)?;
    let mut ces = Vec::with_capacity(logits.len());
    for (l, t) in logits.iter().zip(targets) {
        ces.push(g.cross_entropy(*l, t)?);
    }
    let terms: Vec<_> = ces.iter().copied().zip(weights.iter().copied()).collect();
    Ok((g.weighted_sum(&terms)?, ces))
}

/// Trains `heads` on a precomputed pool; the backbone is never touched.
pub fn train_heads_on_pool(heads: &mut HeadStack, pool: &HiddenPool, cfg: &TrainConfig) -> Result<HeadTrainReport> {
    cfg.validate()?;
    let n_heads = heads.config().n_heads;
    let weights = cfg.head_weights(n_heads)?;
    if pool.d_model != heads.d_model() {
        return Err(Error::config(format!(
            "head width {} does not match backbone width {}",
            heads.d_model(),
            pool.d_model
        )));
    }
    let usable = pool.usable(n_heads);
    if usable == 0 {
        return Err(Error::Data("corpus too short for head targets".into()));
    }
    let rows = cfg.batch_size * cfg.window;
    let mut r = rng::derive(cfg.seed, "train-heads");
    let mut adam = Adam::new(
        AdamConfig::default(),
        &heads.params().tensors().iter().collect::<Vec<_>>(),
    );
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut initial_head_losses = Vec::new();
    let mut final_head_losses = Vec::new();
    for step in 0..cfg.steps {
        let positions: Vec<usize> = (0..rows).map(|_| r.random_range(0..usable)).collect();
        let (hidden, targets) = pool.batch(&positions, n_heads)?;
        let mut g = Graph::new();
        let vars = heads.params().bind(&mut g);
        let (loss, ces) = head_loss(&mut g, heads, &vars, hidden, &targets, &weights)?;
        losses.push(g.value(loss).data()[0]);
        final_head_losses = ces.iter().map(|&c| g.value(c).data()[0]).collect();
        if step == 0 {
            initial_head_losses = final_head_losses.clone();
        }
        g.backward(loss)?;
        heads.params_mut().collect_grads(&g, &vars);
        adam_step(heads.params_mut(), &mut adam, cfg.lr_at(step), cfg.grad_clip)?;
        heads.params_mut().clear_grads();
    }
    Ok(HeadTrainReport {
        initial_head_losses,
        final_head_losses,
        losses,
        backbone_fingerprint: String::new(),
    })
}

/// Head training with the frozen-backbone contract checked before and after.
pub fn train_heads(
    backbone: &Backbone,
    heads: &mut HeadStack,
    train: &[TokenId],
    cfg: &TrainConfig,
) -> Result<HeadTrainReport> {
    if backbone.params().tensors().iter().any(|t| t.grad().is_some()) {
        return Err(Error::config("backbone carries gradient buffers; it must be frozen"));
    }
    if heads.d_model() != backbone.config().d_model || heads.vocab_size() != backbone.config().vocab_size {
        return Err(Error::config(
            "head stack does not match the backbone's d_model/vocab_size",
        ));
    }
    let before = backbone.params().fingerprint();
    let pool = HiddenPool::compute(backbone, train, cfg.window)?;
    let mut report = train_heads_on_pool(heads, &pool, cfg)?;
    let after = backbone.params().fingerprint();
    assert_eq!(before, after, "backbone weights changed during head training");
    report.backbone_fingerprint = after;
    Ok(report)
}

/// `acc[i][j]`: fraction of positions where head `i`'s top-`(j+1)` holds the token at offset `i+2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKTable {
    pub accuracy: Vec<Vec<f64>>,
    /// `rank_freq[i][r]`: fraction of positions where the true token had rank `r`.
    pub rank_freq: Vec<Vec<f64>>,
    pub positions: usize,
}

/// Rank of `target` under the top-k ordering (value desc, index asc).
pub fn rank_of(logits: &[f32], target: usize) -> usize {
    let t = logits[target];
    logits
        .iter()
        .enumerate()
        .filter(|&(j, &l)| l > t || (l == t && j < target))
        .count()
}

pub fn eval_head_topk_on_pool(
    heads: &HeadStack,
    pool: &HiddenPool,
    k: usize,
    max_positions: usize,
) -> Result<TopKTable> {
    let n_heads = heads.config().n_heads;
    let usable = pool.usable(n_heads).min(max_positions);
    if usable == 0 {
        return Err(Error::Data("no positions to evaluate".into()));
    }
    let mut hits = vec![vec![0usize; k]; n_heads];
    for chunk in (0..usable).collect::<Vec<_>>().chunks(256) {
        let (hidden, targets) = pool.batch(chunk, n_heads)?;
        let per_head = heads.forward_batch(&hidden)?;
        for (i, logits) in per_head.iter().enumerate() {
            for (row, &t) in targets[i].iter().enumerate() {
                let r = rank_of(logits.row(row), t);
                if r < k {
                    hits[i][r] += 1;
                }
            }
        }
    }
    let n = usable as f64;
    let rank_freq: Vec<Vec<f64>> = hits.iter().map(|h| h.iter().map(|&c| c as f64 / n).collect()).collect();
    let accuracy = hits
        .iter()
        .map(|h| {
            h.iter()
                .scan(0usize, |acc, &c| {
                    *acc += c;
                    Some(*acc as f64 / n)
                })
                .collect()
        })
        .collect();
    Ok(TopKTable {
        accuracy,
        rank_freq,
        positions: usable,
    })
}

pub fn eval_head_topk(
    heads: &HeadStack,
    backbone: &Backbone,
    tokens: &[TokenId],
    k: usize,
    window: usize,
) -> Result<TopKTable> {
    let pool = HiddenPool::compute(backbone, tokens, window)?;
    eval_head_topk_on_pool(heads, &pool, k, usize::MAX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::heads::HeadConfig;

    fn tiny_backbone() -> Backbone {
        Backbone::new(
            BackboneConfig {
                vocab_size: 16,
                d_model: 8,
                n_layers: 1,
                n_attn_heads: 2,
                max_context: 16,
                ffn_dim: 16,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig {
            steps: 200,
            warmup_steps: 100,
            ..Default::default()
        };
        assert!((cfg.lr_at(99) - 4e-4).abs() < 1e-9);
        assert!(cfg.lr_at(0) < cfg.lr_at(50));
        assert!((cfg.lr_at(200) - 4e-5).abs() < 1e-9);
        assert_eq!(cfg.head_weights(3).unwrap(), vec![1.0, 0.8, 0.64000005]);
        assert!(TrainConfig {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn one_step_changes_loss_and_short_corpus_fails() {
        let mut b = tiny_backbone();
        let toks: Vec<TokenId> = (0..200).map(|i| (i % 7) as TokenId).collect();
        let cfg = TrainConfig {
            steps: 1,
            window: 8,
            warmup_steps: 1,
            lr: 1e-2,
            ..Default::default()
        };
        let rep = train_backbone(&mut b, &toks, &[], &cfg).unwrap();
        assert_ne!(rep.initial_eval_loss, rep.final_eval_loss);
        assert!((rep.initial_eval_loss - (16f32).ln()).abs() < 0.05 * (16f32).ln());
        assert!(matches!(
            train_backbone(&mut b, &toks[..5], &[], &cfg),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn rank_matches_top_k() {
        let l = [0.5, 2.0, 2.0, -1.0];
        let order = crate::tensor::kernels::top_k(&l, 4);
        for (r, &j) in order.iter().enumerate() {
            assert_eq!(rank_of(&l, j), r);
        }
    }

    #[test]
    fn topk_table_properties() {
        let b = tiny_backbone();
        let h = HeadStack::new(
            HeadConfig {
                n_heads: 2,
                resblocks_per_head: 1,
                special_position: 0,
                ..Default::default()
            },
            &b,
        )
        .unwrap();
        let toks: Vec<TokenId> = (0..60).map(|i| ((i * 5) % 16) as TokenId).collect();
        let t = eval_head_topk(&h, &b, &toks, 16, 16).unwrap();
        for row in &t.accuracy {
            assert!(row.windows(2).all(|w| w[0] <= w[1]));
            assert!((row[15] - 1.0).abs() < 1e-12);
        }
    }
}
