//! Decoding heads.
//!
//! Each head is `R` residual blocks followed by an FC layer `d → V`; head `i`
//! predicts the token `i + 2` positions ahead of the current one (the LM head
//! covers `+1`).
//!
//! * **Medusa** heads are independent: they share only the input `h_last`.
//! * **Cerberus** heads replace the block at depth `s` of every head `i ≥ 1`
//!   with a *special* block that also consumes head `i−1`'s depth `s−1`
//!   output. Since every tap comes from a strictly shallower depth, all heads
//!   still advance one depth per wavefront step and the whole stack finishes
//!   in `R` steps regardless of `H`.
//!
//! Blocks use row-vector convention: `x[n×d] · W[d×d] + b`.

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::rng;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Medusa,
    Cerberus,
}

impl std::str::FromStr for Paradigm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "medusa" => Ok(Paradigm::Medusa),
            "cerberus" => Ok(Paradigm::Cerberus),
            other => Err(Error::config(format!("unknown head paradigm {other:?}"))),
        }
    }
}

impl std::fmt::Display for Paradigm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Paradigm::Medusa => "medusa",
            Paradigm::Cerberus => "cerberus",
        })
    }
}

/// Where the SiLU sits relative to the residual sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResblockVariant {
    /// `silu((x·W + b) + x)`
    #[default]
    Paper,
    /// `x + silu(x·W + b)`
    Canonical,
}

impl std::str::FromStr for ResblockVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(ResblockVariant::Paper),
            "canonical" => Ok(ResblockVariant::Canonical),
            other => Err(Error::config(format!("unknown resblock variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub paradigm: Paradigm,
    pub n_heads: usize,
    pub resblocks_per_head: usize,
    /// Depth of the special block (Cerberus only). Depth 0 taps the shared input.
    pub special_position: usize,
    pub top_k: usize,
    #[serde(default)]
    pub variant: ResblockVariant,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            paradigm: Paradigm::Cerberus,
            n_heads: 4,
            resblocks_per_head: 4,
            special_position: 1,
            top_k: 10,
            variant: ResblockVariant::Paper,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.resblocks_per_head == 0 || self.top_k == 0 {
            return Err(Error::config(
                "heads.n_heads, heads.resblocks_per_head and tree.top_k must be ≥ 1",
            ));
        }
        if self.paradigm == Paradigm::Cerberus && self.special_position >= self.resblocks_per_head {
            return Err(Error::config(format!(
                "special block position {} must be < resblocks per head {}",
                self.special_position, self.resblocks_per_head
            )));
        }
        Ok(())
    }

    /// Whether block `(head, depth)` is a special (tapping) block.
    pub fn is_special(&self, head: usize, depth: usize) -> bool {
        self.paradigm == Paradigm::Cerberus && head >= 1 && depth == self.special_position
    }
}

#[derive(Debug, Clone)]
enum BlockIds {
    Plain { w: ParamId, b: ParamId },
    Special { w: ParamId, b: ParamId, down: ParamId },
}

#[derive(Debug, Clone)]
struct HeadIds {
    blocks: Vec<BlockIds>,
    fc: ParamId,
}

/// A stack of `H` decoding heads in one paradigm.
#[derive(Debug, Clone)]
pub struct HeadStack {
    config: HeadConfig,
    d_model: usize,
    vocab_size: usize,
    params: ParamStore,
    heads: Vec<HeadIds>,
}

/// Minimal op set the head forward is written against; implemented eagerly
/// for inference and on a [`Graph`] for training.
pub trait HeadOps {
    type Value: Clone;
    fn linear(&mut self, x: &Self::Value, w: ParamId, b: Option<ParamId>) -> Result<Self::Value>;
    fn add(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
    fn silu(&mut self, x: &Self::Value) -> Self::Value;
    fn concat(&mut self, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
}

pub struct Eager<'a>(pub &'a ParamStore);

impl HeadOps for Eager<'_> {
    type Value = Tensor;
    fn linear(&mut self, x: &Tensor, w: ParamId, b: Option<ParamId>) -> Result<Tensor> {
        let y = x.matmul(self.0.get(w))?;
        match b {
            Some(b) => y.add_bias(self.0.get(b)),
            None => Ok(y),
        }
    }
    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.add(b)
    }
    fn silu(&mut self, x: &Tensor) -> Tensor {
        x.silu()
    }
    fn concat(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        a.concat_cols(b)
    }
}

pub struct Taped<'a> {
    pub graph: &'a mut Graph,
    pub vars: &'a [Var],
}

impl HeadOps for Taped<'_> {
    type Value = Var;
    fn linear(&mut self, x: &Var, w: ParamId, b: Option<ParamId>) -> Result<Var> {
        let b = b.map(|b| self.vars[b.0]);
        self.graph.linear(*x, self.vars[w.0], b)
    }
    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.add(*a, *b)
    }
    fn silu(&mut self, x: &Var) -> Var {
        self.graph.silu(*x)
    }
    fn concat(&mut self, a: &Var, b: &Var) -> Result<Var> {
        self.graph.concat_cols(*a, *b)
    }
}

/// Plain Resblock on explicit weights: `W[d×d]`, `b[d]`.
pub fn resblock_forward(w: &Tensor, b: &Tensor, h: &Tensor, variant: ResblockVariant) -> Result<Tensor> {
    let a = h.matmul(w)?.add_bias(b)?;
    match variant {
        ResblockVariant::Paper => Ok(a.add(h)?.silu()),
        ResblockVariant::Canonical => h.add(&a.silu()),
    }
}

/// Special Resblock on explicit weights: `W[2d×2d]`, `b[2d]`, `down[2d×d]`.
pub fn special_resblock_forward(
    w: &Tensor,
    b: &Tensor,
    down: &Tensor,
    h_own: &Tensor,
    h_prev: &Tensor,
    variant: ResblockVariant,
) -> Result<Tensor> {
    if h_own.shape() != h_prev.shape() {
        return Err(Error::dim("special_resblock", "tapped state differs in shape"));
    }
    let h = h_own.concat_cols(h_prev)?;
    let z = resblock_forward(w, b, &h, variant)?;
    z.matmul(down)
}

fn block_forward<O: HeadOps>(
    ops: &mut O,
    block: &BlockIds,
    variant: ResblockVariant,
    x: &O::Value,
    tap: Option<&O::Value>,
) -> Result<O::Value> {
    let residual = |ops: &mut O, h: &O::Value, w, b| -> Result<O::Value> {
        let a = ops.linear(h, w, Some(b))?;
        Ok(match variant {
            ResblockVariant::Paper => {
                let s = ops.add(&a, h)?;
                ops.silu(&s)
            }
            ResblockVariant::Canonical => {
                let s = ops.silu(&a);
                ops.add(h, &s)?
            }
        })
    };
    match (block, tap) {
        (BlockIds::Plain { w, b }, None) => residual(ops, x, *w, *b),
        (BlockIds::Special { w, b, down }, Some(tap)) => {
            let h = ops.concat(x, tap)?;
            let z = residual(ops, &h, *w, *b)?;
            ops.linear(&z, *down, None)
        }
        (BlockIds::Plain { .. }, Some(_)) => Err(Error::config("plain block given a tap")),
        (BlockIds::Special { .. }, None) => Err(Error::config("special block missing its tap")),
    }
}

/// One block execution in a wavefront plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockRef {
    pub head: usize,
    pub depth: usize,
}

/// Depth-synchronous execution plan: `steps[t]` holds every block at depth `t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WavefrontPlan {
    pub steps: Vec<Vec<BlockRef>>,
    /// `(block, dependency)` pairs.
    pub dependencies: Vec<(BlockRef, BlockRef)>,
}

impl WavefrontPlan {
    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn longest_chain(&self) -> usize {
        use std::collections::HashMap;
        let mut memo: HashMap<BlockRef, usize> = HashMap::new();
        let mut order: Vec<BlockRef> = self.steps.iter().flatten().copied().collect();
        order.sort_by_key(|b| (b.depth, b.head));
        for b in &order {
            let best = self
                .dependencies
                .iter()
                .filter(|(x, _)| x == b)
                .map(|(_, dep)| memo.get(dep).copied().unwrap_or(1))
                .max()
                .unwrap_or(0);
            memo.insert(*b, best + 1);
        }
        memo.values().copied().max().unwrap_or(0)
    }

    /// Fails if any dependency is not produced in a strictly earlier step.
    pub fn validate(&self) -> Result<()> {
        let step_of = |b: &BlockRef| self.steps.iter().position(|s| s.contains(b));
        for (block, dep) in &self.dependencies {
            match (step_of(block), step_of(dep)) {
                (Some(sb), Some(sd)) if sd < sb => {}
                _ => {
                    return Err(Error::config(format!(
                        "wavefront dependency {dep:?} -> {block:?} does not point strictly backwards"
                    )))
                }
            }
        }
        Ok(())
    }
}

impl HeadStack {
    /// Warm-start initialisation: zero Resblocks, `[I | 0]` down-projections and
    /// every FC layer copied from the backbone's LM head.
    pub fn new(config: HeadConfig, backbone: &Backbone) -> Result<Self> {
        let d = backbone.config().d_model;
        let v = backbone.config().vocab_size;
        let mut stack = Self::build(config, d, v, |_, shape| Tensor::zeros(shape))?;
        let lm = backbone.lm_head().clone();
        for h in &stack.heads {
            *stack.params.get_mut(h.fc) = lm.clone();
        }
        let mut down = Tensor::zeros(&[2 * d, d]);
        for i in 0..d {
            down.data_mut()[i * d + i] = 1.0;
        }
        for h in &stack.heads {
            for b in &h.blocks {
                if let BlockIds::Special { down: id, .. } = b {
                    *stack.params.get_mut(*id) = down.clone();
                }
            }
        }
        Ok(stack)
    }

    /// Every parameter drawn from `N(0, std²)`.
    pub fn random(config: HeadConfig, d_model: usize, vocab_size: usize, seed: u64, std: f32) -> Result<Self> {
        let mut rng = rng::derive(seed, "heads-random");
        Self::build(config, d_model, vocab_size, |_, shape| {
            Tensor::randn(shape, std, &mut rng)
        })
    }

    fn build(config: HeadConfig, d: usize, v: usize, mut init: impl FnMut(&str, &[usize]) -> Tensor) -> Result<Self> {
        config.validate()?;
        if d == 0 || v == 0 {
            return Err(Error::config("head width and vocabulary must be positive"));
        }
        let mut params = ParamStore::new();
        let mut heads = Vec::with_capacity(config.n_heads);
        for i in 0..config.n_heads {
            let mut blocks = Vec::with_capacity(config.resblocks_per_head);
            for j in 0..config.resblocks_per_head {
                let p = |s: &str| format!("head.{i}.block.{j}.{s}");
                if config.is_special(i, j) {
                    blocks.push(BlockIds::Special {
                        w: params.insert(p("W"), init("W", &[2 * d, 2 * d])),
                        b: params.insert(p("b"), init("b", &[2 * d])),
                        down: params.insert(p("down"), init("down", &[2 * d, d])),
                    });
                } else {
                    blocks.push(BlockIds::Plain {
                        w: params.insert(p("W"), init("W", &[d, d])),
                        b: params.insert(p("b"), init("b", &[d])),
                    });
                }
            }
            let fc = params.insert(format!("head.{i}.fc.W"), init("fc", &[d, v]));
            heads.push(HeadIds { blocks, fc });
        }
        Ok(HeadStack {
            config,
            d_model: d,
            vocab_size: v,
            params,
            heads,
        })
    }

    /// Rebuilds a stack from loaded tensors.
    pub fn from_params(config: HeadConfig, d_model: usize, vocab_size: usize, loaded: ParamStore) -> Result<Self> {
        let mut stack = Self::build(config, d_model, vocab_size, |_, shape| Tensor::zeros(shape))?;
        if loaded.len() != stack.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} head tensors, found {}",
                stack.params.len(),
                loaded.len()
            )));
        }
        for (name, t) in loaded.iter() {
            stack.params.assign(name, t.clone())?;
        }
        Ok(stack)
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Block executions for one full stack evaluation.
    pub fn block_executions(&self) -> usize {
        self.config.n_heads * self.config.resblocks_per_head
    }

    /// Names of the tensors belonging to block `(head, depth)`.
    pub fn block_param_names(&self, head: usize, depth: usize) -> Vec<String> {
        let mut names = vec![
            format!("head.{head}.block.{depth}.W"),
            format!("head.{head}.block.{depth}.b"),
        ];
        if self.config.is_special(head, depth) {
            names.push(format!("head.{head}.block.{depth}.down"));
        }
        names
    }

    fn tap_source(&self, head: usize, depth: usize) -> Option<BlockRef> {
        (self.config.is_special(head, depth) && depth >= 1).then(|| BlockRef {
            head: head - 1,
            depth: depth - 1,
        })
    }

    pub fn wavefront_schedule(&self) -> WavefrontPlan {
        let (h, r) = (self.config.n_heads, self.config.resblocks_per_head);
        let steps: Vec<Vec<BlockRef>> = (0..r)
            .map(|depth| (0..h).map(|head| BlockRef { head, depth }).collect())
            .collect();
        let mut dependencies = Vec::new();
        for head in 0..h {
            for depth in 0..r {
                let b = BlockRef { head, depth };
                if depth > 0 {
                    dependencies.push((b, BlockRef { head, depth: depth - 1 }));
                }
                if let Some(src) = self.tap_source(head, depth) {
                    dependencies.push((b, src));
                }
            }
        }
        WavefrontPlan { steps, dependencies }
    }

    /// Shared forward over any [`HeadOps`]; executes depth by depth.
    pub fn forward_with<O: HeadOps>(&self, ops: &mut O, input: &O::Value) -> Result<Vec<O::Value>> {
        let h = self.config.n_heads;
        let variant = self.config.variant;
        let mut current: Vec<O::Value> = vec![input.clone(); h];
        for depth in 0..self.config.resblocks_per_head {
            // Taps read the previous depth, which `current` still holds.
            let prev = current.clone();
            for (head, cur) in current.iter_mut().enumerate() {
                let tap = self
                    .config
                    .is_special(head, depth)
                    .then(|| if depth == 0 { input } else { &prev[head - 1] });
                *cur = block_forward(ops, &self.heads[head].blocks[depth], variant, &prev[head], tap)?;
            }
        }
        current
            .iter()
            .zip(&self.heads)
            .map(|(x, ids)| ops.linear(x, ids.fc, None))
            .collect()
    }

    /// Per-head logits for a batch of hidden states `[n×d]` (wavefront order, single thread).
    pub fn forward_batch(&self, h_last: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(h_last)?;
        self.forward_with(&mut Eager(&self.params), h_last)
    }

    /// `[H×V]` logits for a single hidden state.
    pub fn head_stack_forward(&self, h_last: &[f32]) -> Result<Tensor> {
        let x = Tensor::new(vec![1, h_last.len()], h_last.to_vec())?;
        let per_head = self.forward_batch(&x)?;
        let data: Vec<f32> = per_head.into_iter().flat_map(Tensor::into_data).collect();
        Tensor::new(vec![self.config.n_heads, self.vocab_size], data)
    }

    /// Reference evaluation: each head runs start to finish before the next begins.
    pub fn forward_sequential(&self, h_last: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(h_last)?;
        let mut ops = Eager(&self.params);
        let variant = self.config.variant;
        let mut outputs: Vec<Vec<Tensor>> = Vec::with_capacity(self.config.n_heads);
        let mut logits = Vec::with_capacity(self.config.n_heads);
        for (head, ids) in self.heads.iter().enumerate() {
            let mut states: Vec<Tensor> = Vec::with_capacity(ids.blocks.len());
            let mut x = h_last.clone();
            for (depth, block) in ids.blocks.iter().enumerate() {
                let tap = self.config.is_special(head, depth).then(|| {
                    if depth == 0 {
                        h_last
                    } else {
                        &outputs[head - 1][depth - 1]
                    }
                });
                x = block_forward(&mut ops, block, variant, &x, tap)?;
                states.push(x.clone());
            }
            logits.push(ops.linear(&x, ids.fc, None)?);
            outputs.push(states);
        }
        Ok(logits)
    }

    /// Executes the wavefront plan with one worker thread per head at each depth.
    pub fn forward_wavefront_parallel(&self, h_last: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(h_last)?;
        let plan = self.wavefront_schedule();
        plan.validate()?;
        let variant = self.config.variant;
        let mut current: Vec<Tensor> = vec![h_last.clone(); self.config.n_heads];
        for step in &plan.steps {
            let prev = &current;
            let next: Vec<Result<Tensor>> = std::thread::scope(|scope| {
                let handles: Vec<_> = step
                    .iter()
                    .map(|b| {
                        scope.spawn(move || {
                            let tap = self.config.is_special(b.head, b.depth).then(|| {
                                if b.depth == 0 {
                                    h_last
                                } else {
                                    &prev[b.head - 1]
                                }
                            });
                            block_forward(
                                &mut Eager(&self.params),
                                &self.heads[b.head].blocks[b.depth],
                                variant,
                                &prev[b.head],
                                tap,
                            )
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("head worker panicked"))
                    .collect()
            });
            current = next.into_iter().collect::<Result<_>>()?;
        }
        let mut ops = Eager(&self.params);
        current
            .iter()
            .zip(&self.heads)
            .map(|(x, ids)| ops.linear(x, ids.fc, None))
            .collect()
    }

    /// Builds the training graph; returns one logits var per head.
    pub fn train_forward(&self, g: &mut Graph, vars: &[Var], h_last: Var) -> Result<Vec<Var>> {
        let mut ops = Taped { graph: g, vars };
        self.forward_with(&mut ops, &h_last)
    }

    fn check_input(&self, h: &Tensor) -> Result<()> {
        if h.cols() != self.d_model {
            return Err(Error::dim(
                "head_stack_forward",
                format!("hidden width {} vs head width {}", h.cols(), self.d_model),
            ));
        }
        Ok(())
    }
}
