//! Decoder-only transformer language model.
//!
//! Pre-norm blocks, learned positional embeddings, a final layer norm and an
//! untied LM head. Inference runs through [`Backbone::forward`], which appends
//! to a [`KvCache`] and honours an arbitrary [`AttentionMask`]; training runs
//! through [`Backbone::train_logits`] on a [`Graph`]. Both paths share the
//! same kernels, so their outputs agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tensor::kernels::{self, KeySet};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_attn_heads: usize,
    pub max_context: usize,
    pub ffn_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            vocab_size: 256,
            d_model: 128,
            n_layers: 4,
            n_attn_heads: 4,
            max_context: 512,
            ffn_dim: 512,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_attn_heads", self.n_attn_heads),
            ("max_context", self.max_context),
            ("ffn_dim", self.ffn_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("backbone.{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_attn_heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by n_attn_heads {}",
                self.d_model, self.n_attn_heads
            )));
        }
        Ok(())
    }
}

/// Per-layer keys and values for the committed positions.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    d_model: usize,
    capacity: usize,
    len: usize,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
}

impl KvCache {
    pub fn new(config: &BackboneConfig) -> Self {
        let per_layer = config.max_context * config.d_model;
        KvCache {
            d_model: config.d_model,
            capacity: config.max_context,
            len: 0,
            keys: (0..config.n_layers).map(|_| Vec::with_capacity(per_layer)).collect(),
            values: (0..config.n_layers).map(|_| Vec::with_capacity(per_layer)).collect(),
        }
    }

    /// Number of positions held (the committed length `L` between steps).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn layer_keys(&self, layer: usize) -> &[f32] {
        &self.keys[layer]
    }

    pub fn layer_values(&self, layer: usize) -> &[f32] {
        &self.values[layer]
    }

    /// Drops every position at or beyond `to_length`.
    pub fn rollback(&mut self, to_length: usize) {
        let to = to_length.min(self.len);
        let d = self.d_model;
        for (k, v) in self.keys.iter_mut().zip(&mut self.values) {
            k.truncate(to * d);
            v.truncate(to * d);
        }
        self.len = to;
    }

    /// Keeps positions `base + keep[i]` (ascending) packed right after `base`, drops the rest.
    pub fn compact(&mut self, base: usize, keep: &[usize]) -> Result<()> {
        let d = self.d_model;
        if keep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("compact positions must be strictly ascending"));
        }
        if let Some(&last) = keep.last() {
            if base + last >= self.len {
                return Err(Error::Index {
                    what: "kv cache",
                    index: base + last,
                    size: self.len,
                });
            }
        }
        for buf in self.keys.iter_mut().chain(self.values.iter_mut()) {
            for (dst, &src) in keep.iter().enumerate() {
                let (s, t) = ((base + src) * d, (base + dst) * d);
                if s != t {
                    buf.copy_within(s..s + d, t);
                }
            }
            buf.truncate((base + keep.len()) * d);
        }
        self.len = base + keep.len();
        Ok(())
    }

    fn append(&mut self, layer: usize, k: &[f32], v: &[f32]) {
        self.keys[layer].extend_from_slice(k);
        self.values[layer].extend_from_slice(v);
    }
}

/// Which keys each new position may attend to.
///
/// Row `t` lists key indices over the full `L + T` span (committed cache
/// followed by the new tokens).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: Vec<KeySet>,
}

impl AttentionMask {
    /// Standard causal mask for `new_tokens` positions appended after `cached`.
    pub fn causal(cached: usize, new_tokens: usize) -> Self {
        AttentionMask {
            rows: (0..new_tokens).map(|t| KeySet::causal(cached + t)).collect(),
        }
    }

    /// Tree mask: each new token sees the whole committed prefix plus its ancestor
    /// chain. `parents[t]` must be `< t` (topological order).
    pub fn tree(cached: usize, parents: &[Option<usize>]) -> Result<Self> {
        let mut rows: Vec<KeySet> = Vec::with_capacity(parents.len());
        for (t, p) in parents.iter().enumerate() {
            let mut extra = match *p {
                Some(p) if p < t => rows[p].extra.clone(),
                Some(p) => {
                    return Err(Error::config(format!(
                        "tree node {t} has parent {p}, which is not earlier in order"
                    )))
                }
                None => Vec::new(),
            };
            extra.push(cached + t);
            rows.push(KeySet { prefix: cached, extra });
        }
        Ok(AttentionMask { rows })
    }

    /// Builds a mask from a dense boolean matrix of shape `T × (L+T)`.
    pub fn from_dense(dense: &[Vec<bool>]) -> Self {
        let rows = dense
            .iter()
            .map(|r| {
                let allowed: Vec<usize> = r.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
                let prefix = allowed.iter().enumerate().take_while(|(i, &k)| *i == k).count();
                KeySet {
                    prefix,
                    extra: allowed[prefix..].to_vec(),
                }
            })
            .collect();
        AttentionMask { rows }
    }

    pub fn to_dense(&self, total_keys: usize) -> Vec<Vec<bool>> {
        self.rows
            .iter()
            .map(|ks| (0..total_keys).map(|k| ks.contains(k)).collect())
            .collect()
    }

    pub fn rows(&self) -> &[KeySet] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    fn validate(&self, cached: usize, new_tokens: usize) -> Result<()> {
        if self.rows.len() != new_tokens {
            return Err(Error::dim(
                "attention mask",
                format!("{} rows for {new_tokens} new tokens", self.rows.len()),
            ));
        }
        let total = cached + new_tokens;
        for (t, ks) in self.rows.iter().enumerate() {
            if ks.extra.windows(2).any(|w| w[0] >= w[1])
                || ks.extra.first().is_some_and(|&k| k < ks.prefix)
                || ks.len() > total
                || ks.extra.last().is_some_and(|&k| k >= total)
                || ks.prefix > total
            {
                return Err(Error::dim("attention mask", format!("row {t} is malformed")));
            }
            if !ks.contains(cached + t) {
                return Err(Error::dim(
                    "attention mask",
                    format!("row {t} does not attend to itself"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final-layer (post layer norm) hidden states, `[T×d]`.
    pub h_last: Tensor,
    /// `LH(h_last)`, `[T×V]`.
    pub logits: Tensor,
}

#[derive(Debug, Clone)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    lm_head: ParamId,
}

impl Backbone {
    /// Randomly initialised model (normal, std 0.02; residual projections scaled by `1/sqrt(2N)`).
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::derive(seed, "backbone-init");
        let (v, d, f) = (config.vocab_size, config.d_model, config.ffn_dim);
        let std = 0.02;
        let proj_std = std / (2.0 * config.n_layers as f32).sqrt();
        let mut params = ParamStore::new();
        let tok_emb = params.insert("tok_emb", Tensor::randn(&[v, d], std, &mut rng));
        let pos_emb = params.insert("pos_emb", Tensor::randn(&[config.max_context, d], std, &mut rng));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layer.{l}.{s}");
            layers.push(LayerIds {
                ln1_g: params.insert(p("ln1.g"), Tensor::full(&[d], 1.0)),
                ln1_b: params.insert(p("ln1.b"), Tensor::zeros(&[d])),
                wq: params.insert(p("attn.wq"), Tensor::randn(&[d, d], std, &mut rng)),
                wk: params.insert(p("attn.wk"), Tensor::randn(&[d, d], std, &mut rng)),
                wv: params.insert(p("attn.wv"), Tensor::randn(&[d, d], std, &mut rng)),
                wo: params.insert(p("attn.wo"), Tensor::randn(&[d, d], proj_std, &mut rng)),
                ln2_g: params.insert(p("ln2.g"), Tensor::full(&[d], 1.0)),
                ln2_b: params.insert(p("ln2.b"), Tensor::zeros(&[d])),
                w1: params.insert(p("mlp.w1"), Tensor::randn(&[d, f], std, &mut rng)),
                b1: params.insert(p("mlp.b1"), Tensor::zeros(&[f])),
                w2: params.insert(p("mlp.w2"), Tensor::randn(&[f, d], proj_std, &mut rng)),
                b2: params.insert(p("mlp.b2"), Tensor::zeros(&[d])),
            });
        }
        let lnf_g = params.insert("ln_f.g", Tensor::full(&[d], 1.0));
        let lnf_b = params.insert("ln_f.b", Tensor::zeros(&[d]));
        let lm_head = params.insert("lm_head.W", Tensor::randn(&[d, v], std, &mut rng));
        Ok(Backbone {
            config,
            params,
            tok_emb,
            pos_emb,
            layers,
            lnf_g,
            lnf_b,
            lm_head,
        })
    }

    /// Rebuilds a model from a config and a full parameter store (e.g. a checkpoint).
    pub fn from_params(config: BackboneConfig, loaded: ParamStore) -> Result<Self> {
        let mut model = Backbone::new(config, 0)?;
        if loaded.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} backbone tensors, found {}",
                model.params.len(),
                loaded.len()
            )));
        }
        for (name, t) in loaded.iter() {
            model.params.assign(name, t.clone())?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// The LM head weight `[d×V]`.
    pub fn lm_head(&self) -> &Tensor {
        self.params.get(self.lm_head)
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(&self.config)
    }

    fn p(&self, id: ParamId) -> &Tensor {
        self.params.get(id)
    }

    /// Applies the LM head to hidden states `[...×d]`.
    pub fn lm_logits(&self, h: &Tensor) -> Result<Tensor> {
        h.matmul(self.lm_head())
    }

    /// Runs `tokens` at `positions` on top of `cache`, appending their keys/values.
    ///
    /// On error the cache is left unchanged.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        positions: &[usize],
        cache: &mut KvCache,
        mask: &AttentionMask,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let (t_new, d) = (tokens.len(), c.d_model);
        let cached = cache.len();
        if t_new == 0 {
            return Err(Error::dim("forward", "no new tokens"));
        }
        if positions.len() != t_new {
            return Err(Error::dim("forward", "one position per token required"));
        }
        if cached + t_new > c.max_context {
            return Err(Error::Capacity {
                requested: cached + t_new,
                capacity: c.max_context,
            });
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= c.max_context) {
            return Err(Error::Index {
                what: "position embedding",
                index: p,
                size: c.max_context,
            });
        }
        mask.validate(cached, t_new)?;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let tok = self.p(self.tok_emb).embedding_lookup(&ids)?;
        let pos = self.p(self.pos_emb).embedding_lookup(positions)?;
        let mut x = tok.add(&pos)?;
        for (l, ids) in self.layers.iter().enumerate() {
            let h = x.layernorm(self.p(ids.ln1_g), self.p(ids.ln1_b))?;
            let q = h.matmul(self.p(ids.wq))?;
            let k = h.matmul(self.p(ids.wk))?;
            let v = h.matmul(self.p(ids.wv))?;
            cache.append(l, k.data(), v.data());
            let (att, _) = kernels::attend(
                q.data(),
                cache.layer_keys(l),
                cache.layer_values(l),
                d,
                c.n_attn_heads,
                mask.rows(),
            );
            let att = Tensor::from_op(vec![t_new, d], att);
            x = x.add(&att.matmul(self.p(ids.wo))?)?;
            let h2 = x.layernorm(self.p(ids.ln2_g), self.p(ids.ln2_b))?;
            let ff = h2.matmul(self.p(ids.w1))?.add_bias(self.p(ids.b1))?.silu();
            let ff = ff.matmul(self.p(ids.w2))?.add_bias(self.p(ids.b2))?;
            x = x.add(&ff)?;
        }
        cache.len += t_new;
        let h_last = x.layernorm(self.p(self.lnf_g), self.p(self.lnf_b))?;
        let logits = self.lm_logits(&h_last)?;
        Ok(ForwardOutput { h_last, logits })
    }

    /// Causal forward of `tokens` at positions `L..L+T`.
    pub fn forward_causal(&self, tokens: &[TokenId], cache: &mut KvCache) -> Result<ForwardOutput> {
        let l = cache.len();
        let positions: Vec<usize> = (l..l + tokens.len()).collect();
        self.forward(tokens, &positions, cache, &AttentionMask::causal(l, tokens.len()))
    }

    /// Full-sequence causal forward without reusing any cache.
    pub fn forward_fresh(&self, tokens: &[TokenId]) -> Result<ForwardOutput> {
        let mut cache = self.new_cache();
        self.forward_causal(tokens, &mut cache)
    }

    /// Truncates `cache` to `to_length` committed positions.
    pub fn rollback(cache: &mut KvCache, to_length: usize) {
        cache.rollback(to_length);
    }

    /// Builds the training graph for a batch of equal-length windows and returns
    /// `(h_last, logits)` vars, each with rows grouped window by window.
    ///
    /// `vars` must come from `self.params().bind(g)`.
    pub fn train_forward(&self, g: &mut Graph, vars: &[Var], windows: &[&[TokenId]]) -> Result<(Var, Var)> {
        let c = &self.config;
        let t = windows.first().map(|w| w.len()).unwrap_or(0);
        if t == 0 || windows.iter().any(|w| w.len() != t) {
            return Err(Error::dim(
                "train_forward",
                "windows must be non-empty and equal length",
            ));
        }
        if t > c.max_context {
            return Err(Error::Capacity {
                requested: t,
                capacity: c.max_context,
            });
        }
        let v = |id: ParamId| vars[id.0];
        let ids: Vec<usize> = windows.iter().flat_map(|w| w.iter().map(|&x| x as usize)).collect();
        let positions: Vec<usize> = (0..windows.len()).flat_map(|_| 0..t).collect();
        let tok = g.embedding(v(self.tok_emb), &ids)?;
        let pos = g.embedding(v(self.pos_emb), &positions)?;
        let mut x = g.add(tok, pos)?;
        for ids in &self.layers {
            let h = g.layernorm(x, v(ids.ln1_g), v(ids.ln1_b))?;
            let q = g.matmul(h, v(ids.wq))?;
            let k = g.matmul(h, v(ids.wk))?;
            let vv = g.matmul(h, v(ids.wv))?;
            let att = g.causal_attention(q, k, vv, c.n_attn_heads, t)?;
            let proj = g.matmul(att, v(ids.wo))?;
            x = g.add(x, proj)?;
            let h2 = g.layernorm(x, v(ids.ln2_g), v(ids.ln2_b))?;
            let ff = g.linear(h2, v(ids.w1), Some(v(ids.b1)))?;
            let ff = g.silu(ff);
            let ff = g.linear(ff, v(ids.w2), Some(v(ids.b2)))?;
            x = g.add(x, ff)?;
        }
        let h_last = g.layernorm(x, v(self.lnf_g), v(self.lnf_b))?;
        let logits = g.matmul(h_last, v(self.lm_head))?;
        Ok((h_last, logits))
    }

    /// Mean next-token cross-entropy over windows of length `T+1` (inference path, no graph).
    pub fn eval_loss(&self, windows: &[&[TokenId]]) -> Result<f32> {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for w in windows {
            if w.len() < 2 {
                continue;
            }
            let out = self.forward_fresh(&w[..w.len() - 1])?;
            let targets: Vec<usize> = w[1..].iter().map(|&x| x as usize).collect();
            total += out.logits.cross_entropy(&targets)? as f64 * targets.len() as f64;
            count += targets.len();
        }
        if count == 0 {
            return Err(Error::Data("no evaluation windows".into()));
        }
        Ok((total / count as f64) as f32)
    }
}
