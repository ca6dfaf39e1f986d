//! Candidate token trees and greedy tree verification.
//!
//! A [`PathTemplate`] `(r_1, …, r_L)` reads "head 0's `r_1`-th best token,
//! then head 1's `r_2`-th best, …". A prefix-closed [`TemplateSet`] defines
//! one tree node per template. The tree hangs below a *bonus* token — the
//! backbone's own greedy prediction from the logits already in hand — so a
//! parallel step always emits at least that token.
//!
//! All of bonus + nodes go through the backbone in one forward with a mask
//! that lets every node see the committed prefix and its own ancestor chain.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionMask, Backbone, KvCache};
use crate::tensor::kernels;
use crate::{Error, Result, TokenId};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PathTemplate(pub Vec<usize>);

impl PathTemplate {
    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn ranks(&self) -> &[usize] {
        &self.0
    }

    pub fn parent(&self) -> Option<PathTemplate> {
        (self.0.len() > 1).then(|| PathTemplate(self.0[..self.0.len() - 1].to_vec()))
    }
}

fn depth_lex(a: &PathTemplate, b: &PathTemplate) -> Ordering {
    a.depth().cmp(&b.depth()).then_with(|| a.0.cmp(&b.0))
}

/// A validated, prefix-closed set of path templates, ordered by depth then lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TemplateSet {
    templates: Vec<PathTemplate>,
    top_k: usize,
}

/// `k + k² + … + k^H`.
pub fn full_space_size(n_heads: usize, top_k: usize) -> usize {
    (1..=n_heads as u32).map(|j| top_k.pow(j)).sum()
}

impl TemplateSet {
    pub fn new(templates: Vec<Vec<usize>>, top_k: usize) -> Result<Self> {
        if top_k == 0 {
            return Err(Error::config("tree.top_k must be ≥ 1"));
        }
        let set: BTreeSet<PathTemplate> = templates.into_iter().map(PathTemplate).collect();
        for t in &set {
            if t.0.is_empty() {
                return Err(Error::config("empty path template"));
            }
            if let Some(&r) = t.0.iter().find(|&&r| r >= top_k) {
                return Err(Error::config(format!(
                    "template {:?} uses rank {r} but top_k is {top_k}",
                    t.0
                )));
            }
            if let Some(p) = t.parent() {
                if !set.contains(&p) {
                    return Err(Error::config(format!(
                        "template set is not prefix-closed: {:?} lacks prefix {:?}",
                        t.0, p.0
                    )));
                }
            }
        }
        if set.is_empty() {
            return Err(Error::config("template set is empty"));
        }
        let mut templates: Vec<PathTemplate> = set.into_iter().collect();
        templates.sort_by(depth_lex);
        Ok(TemplateSet { templates, top_k })
    }

    /// Every rank sequence of length `1..=n_heads` over `top_k` ranks.
    pub fn full(n_heads: usize, top_k: usize) -> Result<Self> {
        let mut all: Vec<Vec<usize>> = Vec::with_capacity(full_space_size(n_heads, top_k));
        let mut level: Vec<Vec<usize>> = vec![Vec::new()];
        for _ in 0..n_heads {
            let mut next = Vec::with_capacity(level.len() * top_k);
            for p in &level {
                for r in 0..top_k {
                    let mut c = p.clone();
                    c.push(r);
                    next.push(c);
                }
            }
            all.extend(next.iter().cloned());
            level = next;
        }
        TemplateSet::new(all, top_k)
    }

    pub fn templates(&self) -> &[PathTemplate] {
        &self.templates
    }

    pub fn top_k(&self) -> usize {
        self.top_k
    }

    /// Number of paths; also the number of tree nodes below the bonus token.
    pub fn path_count(&self) -> usize {
        self.templates.len()
    }

    pub fn node_count(&self) -> usize {
        self.templates.len()
    }

    pub fn max_depth(&self) -> usize {
        self.templates.iter().map(PathTemplate::depth).max().unwrap_or(0)
    }

    pub fn is_prefix_closed(&self) -> bool {
        let set: BTreeSet<&PathTemplate> = self.templates.iter().collect();
        self.templates
            .iter()
            .all(|t| t.parent().is_none_or(|p| set.contains(&p)))
    }

    pub fn check_heads(&self, n_heads: usize) -> Result<()> {
        if self.max_depth() > n_heads {
            return Err(Error::config(format!(
                "templates reach depth {} but only {n_heads} heads exist",
                self.max_depth()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let raw: Vec<&Vec<usize>> = self.templates.iter().map(|t| &t.0).collect();
        serde_json::to_string(&raw).expect("integers always serialise")
    }

    pub fn from_json(s: &str, top_k: usize) -> Result<Self> {
        let raw: Vec<Vec<usize>> = serde_json::from_str(s)?;
        TemplateSet::new(raw, top_k)
    }

    pub fn load(path: &Path, top_k: usize) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::from_io(e, path))?;
        TemplateSet::from_json(&s, top_k)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Scored {
    score: f64,
    path: Vec<usize>,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max-heap on score; ties go to the lexicographically smaller path.
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.path.cmp(&self.path))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Greedily picks `budget` prefix-closed paths maximising the product of
/// per-head rank acceptance frequencies.
///
/// `calibration[i][r]` is how often head `i`'s rank-`r` candidate was correct;
/// its row count fixes the maximum depth and its row length fixes `top_k`.
pub fn select_templates(budget: usize, calibration: &[Vec<f64>]) -> Result<TemplateSet> {
    let n_heads = calibration.len();
    let top_k = calibration.first().map(Vec::len).unwrap_or(0);
    if budget == 0 || n_heads == 0 || top_k == 0 {
        return Err(Error::config(
            "select_templates needs budget ≥ 1 and a non-empty calibration",
        ));
    }
    if calibration.iter().any(|row| row.len() != top_k) {
        return Err(Error::config("calibration rows must share one top_k"));
    }
    let full = full_space_size(n_heads, top_k);
    let budget = if budget > full {
        log::warn!("tree path budget {budget} exceeds the full space {full}; clamping");
        full
    } else {
        budget
    };
    let mut heap = BinaryHeap::new();
    for (r, &f) in calibration[0].iter().enumerate() {
        heap.push(Scored {
            score: f,
            path: vec![r],
        });
    }
    let mut chosen = Vec::with_capacity(budget);
    while chosen.len() < budget {
        let Some(best) = heap.pop() else { break };
        let depth = best.path.len();
        if depth < n_heads {
            for (r, &f) in calibration[depth].iter().enumerate() {
                let mut p = best.path.clone();
                p.push(r);
                heap.push(Scored {
                    score: best.score * f,
                    path: p,
                });
            }
        }
        chosen.push(best.path);
    }
    TemplateSet::new(chosen, top_k)
}

/// Uniform calibration for `n_heads × top_k`.
pub fn uniform_calibration(n_heads: usize, top_k: usize) -> Vec<Vec<f64>> {
    vec![vec![1.0 / top_k as f64; top_k]; n_heads]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TreeNode {
    pub token: TokenId,
    /// Head that proposed the token (`depth − 1`).
    pub head: usize,
    pub rank: usize,
    /// Parent node index; `None` for depth-1 nodes, which hang off the bonus token.
    pub parent: Option<usize>,
    pub depth: usize,
}

/// Tokens to verify in one forward: the bonus token followed by the template nodes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CandidateTree {
    pub bonus: TokenId,
    pub nodes: Vec<TreeNode>,
    /// Committed context length the tree hangs from.
    pub prefix_len: usize,
}

/// Builds the candidate tree. `per_head_topk[i]` is head `i`'s ranked candidate list.
pub fn build_tree(
    templates: &TemplateSet,
    per_head_topk: &[Vec<TokenId>],
    bonus: TokenId,
    prefix_len: usize,
) -> Result<CandidateTree> {
    use std::collections::HashMap;
    templates.check_heads(per_head_topk.len())?;
    let mut index: HashMap<&[usize], usize> = HashMap::with_capacity(templates.node_count());
    let mut nodes = Vec::with_capacity(templates.node_count());
    for t in templates.templates() {
        let ranks = t.ranks();
        let head = ranks.len() - 1;
        let rank = ranks[head];
        let token = *per_head_topk[head].get(rank).ok_or_else(|| {
            Error::config(format!(
                "template {ranks:?} needs rank {rank} but head {head} has {} candidates",
                per_head_topk[head].len()
            ))
        })?;
        let parent = if head == 0 { None } else { Some(index[&ranks[..head]]) };
        index.insert(ranks, nodes.len());
        nodes.push(TreeNode {
            token,
            head,
            rank,
            parent,
            depth: head + 1,
        });
    }
    Ok(CandidateTree {
        bonus,
        nodes,
        prefix_len,
    })
}

impl CandidateTree {
    /// Number of template nodes (excluding the bonus token).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Flattened forward input: bonus first, then nodes in order.
    pub fn tokens(&self) -> Vec<TokenId> {
        std::iter::once(self.bonus)
            .chain(self.nodes.iter().map(|n| n.token))
            .collect()
    }

    /// Sibling nodes share `prefix_len + depth`.
    pub fn positions(&self) -> Vec<usize> {
        std::iter::once(self.prefix_len)
            .chain(self.nodes.iter().map(|n| self.prefix_len + n.depth))
            .collect()
    }

    /// Parent of each flattened row (row 0 is the bonus token).
    pub fn flat_parents(&self) -> Vec<Option<usize>> {
        std::iter::once(None)
            .chain(self.nodes.iter().map(|n| Some(n.parent.map_or(0, |p| p + 1))))
            .collect()
    }

    pub fn mask(&self) -> Result<AttentionMask> {
        AttentionMask::tree(self.prefix_len, &self.flat_parents())
    }

    /// Token path from the bonus token down to flattened row `row`.
    pub fn root_path(&self, row: usize) -> Vec<TokenId> {
        let parents = self.flat_parents();
        let toks = self.tokens();
        let mut path = vec![toks[row]];
        let mut cur = row;
        while let Some(p) = parents[cur] {
            path.push(toks[p]);
            cur = p;
        }
        path.reverse();
        path
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerificationResult {
    /// Always emitted; the greedy token the tree hangs from.
    pub bonus: TokenId,
    /// Head-proposed tokens that matched the backbone's greedy choice, in order.
    pub accepted: Vec<TokenId>,
    /// Node indices of the accepted path.
    pub accepted_nodes: Vec<usize>,
    /// Hidden state and logits at the deepest accepted position.
    pub next_hidden: Vec<f32>,
    pub next_logits: Vec<f32>,
}

impl VerificationResult {
    /// Tokens this verification commits: bonus then accepted.
    pub fn emitted(&self) -> Vec<TokenId> {
        std::iter::once(self.bonus)
            .chain(self.accepted.iter().copied())
            .collect()
    }
}

/// One masked forward over the tree, then greedy acceptance.
///
/// A node is accepted iff its token is the argmax of the logits at its parent
/// row. The cache ends holding the committed prefix plus the bonus token and
/// the accepted path only.
pub fn verify(tree: &CandidateTree, backbone: &Backbone, cache: &mut KvCache) -> Result<VerificationResult> {
    let base = cache.len();
    if base != tree.prefix_len {
        return Err(Error::config(format!(
            "tree built for prefix {} but cache holds {base}",
            tree.prefix_len
        )));
    }
    let out = backbone.forward(&tree.tokens(), &tree.positions(), cache, &tree.mask()?)?;
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); tree.len() + 1];
    for (row, p) in tree.flat_parents().into_iter().enumerate() {
        if let Some(p) = p {
            children[p].push(row);
        }
    }
    let mut row = 0;
    let mut accepted = Vec::new();
    let mut accepted_nodes = Vec::new();
    loop {
        let want = kernels::argmax(out.logits.row(row)) as TokenId;
        match children[row].iter().find(|&&c| tree.nodes[c - 1].token == want) {
            Some(&c) => {
                accepted.push(want);
                accepted_nodes.push(c - 1);
                row = c;
            }
            None => break,
        }
    }
    let keep: Vec<usize> = std::iter::once(0).chain(accepted_nodes.iter().map(|n| n + 1)).collect();
    cache.compact(base, &keep)?;
    Ok(VerificationResult {
        bonus: tree.bonus,
        accepted,
        accepted_nodes,
        next_hidden: out.h_last.row(row).to_vec(),
        next_logits: out.logits.row(row).to_vec(),
    })
}
