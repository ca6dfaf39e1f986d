//! Per-step decode loop: gate, then either one auto-regressive token or a
//! head-proposed tree verified in a single backbone forward.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, KvCache};
use crate::gate::{self, GateConfig, Route};
use crate::heads::HeadStack;
use crate::tensor::kernels;
use crate::tree::{build_tree, verify, TemplateSet};
use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_tokens: usize,
    pub stop_token: Option<TokenId>,
    /// Fed to prefill when the prompt is empty.
    pub begin_token: TokenId,
    pub gate: GateConfig,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_tokens: 64,
            stop_token: None,
            begin_token: 0,
            gate: GateConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    /// Entropy under the configured gate source, in bits.
    pub entropy: f64,
    pub entropy_hidden: f64,
    pub entropy_logits: f64,
    pub route: Route,
    /// Tokens committed by this step.
    pub tokens: usize,
    /// Head-proposed tokens accepted (parallel route only).
    pub accepted: usize,
    /// Backbone forwards run by this step.
    pub forwards: usize,
    pub head_block_execs: usize,
    /// Tree nodes verified, excluding the bonus token.
    pub tree_size: usize,
    pub wall_ns: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeOutput {
    pub tokens: Vec<TokenId>,
    pub traces: Vec<StepTrace>,
}

impl DecodeOutput {
    pub fn forwards(&self) -> usize {
        self.traces.iter().map(|t| t.forwards).sum()
    }

    /// Emitted tokens per decode step.
    pub fn tokens_per_forward(&self) -> f64 {
        if self.traces.is_empty() {
            return 0.0;
        }
        self.tokens.len() as f64 / self.traces.len() as f64
    }

    pub fn wall_ns(&self) -> u64 {
        self.traces.iter().map(|t| t.wall_ns).sum()
    }
}

struct Frontier {
    h_last: Vec<f32>,
    logits: Vec<f32>,
}

/// One decode of one prompt. Models are shared read-only across sessions.
pub struct DecodeSession {
    backbone: Arc<Backbone>,
    heads: Option<Arc<HeadStack>>,
    templates: Option<Arc<TemplateSet>>,
    config: DecodeConfig,
    cache: KvCache,
    committed: Vec<TokenId>,
    prompt_len: usize,
    traces: Vec<StepTrace>,
    frontier: Option<Frontier>,
    finished: bool,
}

impl DecodeSession {
    /// With `heads` or `templates` absent every step is auto-regressive (vanilla decoding).
    pub fn new(
        backbone: Arc<Backbone>,
        heads: Option<Arc<HeadStack>>,
        templates: Option<Arc<TemplateSet>>,
        config: DecodeConfig,
    ) -> Result<Self> {
        config.gate.validate()?;
        if let (Some(h), Some(t)) = (&heads, &templates) {
            t.check_heads(h.config().n_heads)?;
            if h.d_model() != backbone.config().d_model || h.vocab_size() != backbone.config().vocab_size {
                return Err(Error::config(
                    "head stack does not match the backbone's d_model/vocab_size",
                ));
            }
        }
        let cache = backbone.new_cache();
        Ok(DecodeSession {
            backbone,
            heads,
            templates,
            config,
            cache,
            committed: Vec::new(),
            prompt_len: 0,
            traces: Vec::new(),
            frontier: None,
            finished: false,
        })
    }

    pub fn vanilla(backbone: Arc<Backbone>, config: DecodeConfig) -> Result<Self> {
        DecodeSession::new(backbone, None, None, config)
    }

    pub fn config(&self) -> &DecodeConfig {
        &self.config
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn committed(&self) -> &[TokenId] {
        &self.committed
    }

    pub fn emitted(&self) -> &[TokenId] {
        &self.committed[self.prompt_len..]
    }

    pub fn traces(&self) -> &[StepTrace] {
        &self.traces
    }

    pub fn cache_len(&self) -> usize {
        self.cache.len()
    }

    /// Clears the session and runs the prompt through the backbone. Emits nothing.
    pub fn prefill(&mut self, prompt: &[TokenId]) -> Result<()> {
        let begin = [self.config.begin_token];
        let prompt = if prompt.is_empty() { &begin[..] } else { prompt };
        let ctx = self.backbone.config().max_context;
        if prompt.len() >= ctx {
            return Err(Error::Capacity {
                requested: prompt.len() + 1,
                capacity: ctx,
            });
        }
        self.cache.rollback(0);
        self.committed = prompt.to_vec();
        self.prompt_len = prompt.len();
        self.traces.clear();
        let out = self.backbone.forward_causal(prompt, &mut self.cache)?;
        let last = prompt.len() - 1;
        self.frontier = Some(Frontier {
            h_last: out.h_last.row(last).to_vec(),
            logits: out.logits.row(last).to_vec(),
        });
        self.finished = self.config.max_tokens == 0;
        Ok(())
    }

    fn parallel_ready(&self) -> bool {
        self.heads.is_some() && self.templates.is_some()
    }

    fn remaining(&self) -> usize {
        self.config.max_tokens - self.emitted().len()
    }

    /// Runs one decode step. Returns `None` once the session has finished,
    /// including when the context cannot hold another forward.
    pub fn step(&mut self) -> Result<Option<StepTrace>> {
        if self.finished {
            return Ok(None);
        }
        let Some(frontier) = self.frontier.take() else {
            return Err(Error::config("decode step before prefill"));
        };
        let start = Instant::now();
        let capacity = self.cache.capacity();
        let base = self.cache.len();
        if base + 1 > capacity {
            self.finished = true;
            return Ok(None);
        }
        let entropy_hidden = gate::entropy(&frontier.h_last);
        let entropy_logits = gate::entropy(&frontier.logits);
        let entropy = match self.config.gate.source {
            gate::EntropySource::Hidden => entropy_hidden,
            gate::EntropySource::Logits => entropy_logits,
        };
        let bonus = kernels::argmax(&frontier.logits) as TokenId;
        let mut route = gate::route_for(&self.config.gate, entropy);
        let tree_nodes = self.templates.as_ref().map_or(0, |t| t.node_count());
        if !self.parallel_ready() || base + 1 + tree_nodes > capacity {
            route = Route::Autoregressive;
        }

        let (mut emitted, accepted, tree_size, head_block_execs, next) = match route {
            Route::Autoregressive => {
                let out = self.backbone.forward_causal(&[bonus], &mut self.cache)?;
                let next = Frontier {
                    h_last: out.h_last.row(0).to_vec(),
                    logits: out.logits.row(0).to_vec(),
                };
                (vec![bonus], 0, 0, 0, next)
            }
            Route::Parallel => {
                let heads = self.heads.as_ref().expect("parallel route requires heads");
                let templates = self.templates.as_ref().expect("parallel route requires templates");
                let per_head = heads.head_stack_forward(&frontier.h_last)?;
                let k = templates.top_k();
                let depth = templates.max_depth();
                let topk: Vec<Vec<TokenId>> = (0..depth)
                    .map(|i| {
                        kernels::top_k(per_head.row(i), k)
                            .into_iter()
                            .map(|t| t as TokenId)
                            .collect()
                    })
                    .collect();
                let tree = build_tree(templates, &topk, bonus, base)?;
                let res = verify(&tree, &self.backbone, &mut self.cache)?;
                let next = Frontier {
                    h_last: res.next_hidden.clone(),
                    logits: res.next_logits.clone(),
                };
                (
                    res.emitted(),
                    res.accepted.len(),
                    tree.len(),
                    heads.block_executions(),
                    next,
                )
            }
        };

        let mut stop = false;
        if let Some(s) = self.config.stop_token {
            if let Some(i) = emitted.iter().position(|&t| t == s) {
                emitted.truncate(i + 1);
                stop = true;
            }
        }
        let remaining = self.remaining();
        if emitted.len() >= remaining {
            emitted.truncate(remaining);
            stop = true;
        }
        self.committed.extend_from_slice(&emitted);
        if self.cache.len() > self.committed.len() {
            self.cache.rollback(self.committed.len());
        }
        self.finished = stop;
        self.frontier = Some(next);
        let trace = StepTrace {
            entropy,
            entropy_hidden,
            entropy_logits,
            route,
            tokens: emitted.len(),
            accepted: accepted.min(emitted.len().saturating_sub(1)),
            forwards: 1,
            head_block_execs,
            tree_size,
            wall_ns: start.elapsed().as_nanos() as u64,
        };
        self.traces.push(trace.clone());
        Ok(Some(trace))
    }

    /// Prefill, then step until the stop condition.
    pub fn decode(&mut self, prompt: &[TokenId]) -> Result<DecodeOutput> {
        self.prefill(prompt)?;
        while self.step()?.is_some() {}
        Ok(DecodeOutput {
            tokens: self.emitted().to_vec(),
            traces: self.traces.clone(),
        })
    }
}
