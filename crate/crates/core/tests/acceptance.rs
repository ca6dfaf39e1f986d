//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Trains the toy backbone and both head stacks once (a few minutes on one
//! core), then runs every check against them.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;

use cerberus::backbone::{Backbone, BackboneConfig};
use cerberus::bench::{self, Approach, BenchReport, TraceRecord};
use cerberus::data::{default_prompt_suite, encode, synthetic_corpus, Corpus};
use cerberus::engine::{DecodeConfig, StepTrace};
use cerberus::gate::{self, EntropySource, GateConfig, Route};
use cerberus::heads::{HeadConfig, HeadStack, Paradigm};
use cerberus::trainer::{self, HiddenPool, TopKTable, TrainConfig};
use cerberus::tree::{build_tree, full_space_size, select_templates, uniform_calibration, TemplateSet};
use cerberus::TokenId;

type Outcome = Result<String, String>;

const TREE_PATHS: [usize; 3] = [63, 120, 150];
const N_PROMPTS: usize = 100;
const MAX_NEW: usize = 24;

fn backbone_config() -> BackboneConfig {
    BackboneConfig {
        vocab_size: 256,
        d_model: 64,
        n_layers: 2,
        n_attn_heads: 4,
        max_context: 256,
        ffn_dim: 256,
    }
}

fn head_config(paradigm: Paradigm) -> HeadConfig {
    HeadConfig {
        paradigm,
        n_heads: 4,
        resblocks_per_head: 2,
        special_position: 1,
        top_k: 10,
        ..Default::default()
    }
}

struct Trained {
    heads: Arc<HeadStack>,
    /// Top-k table on the eval split.
    topk: TopKTable,
    templates: BTreeMap<usize, Arc<TemplateSet>>,
}

struct Fixture {
    backbone: Arc<Backbone>,
    init_eval_loss: f32,
    final_eval_loss: f32,
    models: Vec<(Paradigm, Trained)>,
    prompts: Vec<(String, Vec<TokenId>)>,
}

fn build_fixture() -> Fixture {
    let text = synthetic_corpus(150_000, 1);
    let corpus = Corpus::from_bytes(text.as_bytes(), 0.1).unwrap();
    let mut bb = Backbone::new(backbone_config(), 1).unwrap();
    let bcfg = TrainConfig {
        lr: 3e-3,
        steps: 1200,
        window: 64,
        batch_size: 8,
        warmup_steps: 100,
        ..Default::default()
    };
    let rep = trainer::train_backbone(&mut bb, corpus.train(), corpus.eval(), &bcfg).unwrap();
    let train_pool = HiddenPool::compute(&bb, corpus.train(), 64).unwrap();
    let eval_pool = HiddenPool::compute(&bb, corpus.eval(), 64).unwrap();
    let hcfg = TrainConfig {
        lr: 1e-3,
        steps: 600,
        window: 64,
        batch_size: 4,
        warmup_steps: 50,
        seed: 2,
        ..Default::default()
    };
    let mut models = Vec::new();
    for paradigm in [Paradigm::Medusa, Paradigm::Cerberus] {
        let mut heads = HeadStack::new(head_config(paradigm), &bb).unwrap();
        trainer::train_heads_on_pool(&mut heads, &train_pool, &hcfg).unwrap();
        // Template selection uses train-split statistics only.
        let calib = trainer::eval_head_topk_on_pool(&heads, &train_pool, 10, 8000).unwrap();
        let topk = trainer::eval_head_topk_on_pool(&heads, &eval_pool, 10, usize::MAX).unwrap();
        let templates = TREE_PATHS
            .iter()
            .map(|&n| (n, Arc::new(select_templates(n, &calib.rank_freq).unwrap())))
            .collect();
        models.push((
            paradigm,
            Trained {
                heads: Arc::new(heads),
                topk,
                templates,
            },
        ));
    }
    let mut r = cerberus::rng::seeded(77);
    let eval = corpus.eval();
    let mut prompts: Vec<(String, Vec<TokenId>)> = (0..N_PROMPTS)
        .map(|_| {
            let len = r.random_range(8..40);
            let start = r.random_range(0..eval.len() - len);
            ("eval".to_string(), eval[start..start + len].to_vec())
        })
        .collect();
    prompts.extend(
        default_prompt_suite()
            .iter()
            .map(|(c, p)| (c.to_string(), encode(p.as_bytes()))),
    );
    Fixture {
        backbone: Arc::new(bb),
        init_eval_loss: rep.initial_eval_loss,
        final_eval_loss: rep.final_eval_loss,
        models,
        prompts,
    }
}

fn decode_config() -> DecodeConfig {
    DecodeConfig {
        max_tokens: MAX_NEW,
        ..Default::default()
    }
}

fn approaches(f: &Fixture, gated: Option<GateConfig>) -> Vec<Approach> {
    let mut out = Vec::new();
    for (p, t) in &f.models {
        for (&n, ts) in &t.templates {
            let (name, gate) = match gated {
                Some(g) => (format!("{p}-{n}-gated"), g),
                None => (format!("{p}-{n}"), GateConfig::disabled()),
            };
            out.push(Approach::parallel(name, t.heads.clone(), ts.clone(), gate));
        }
    }
    out
}

/// Shared decoding results reused by several criteria.
struct Runs {
    records: Vec<TraceRecord>,
    outputs: BTreeMap<(String, usize), Vec<TokenId>>,
    gate_threshold: f64,
    lossless_secs: f64,
}

fn run_all(f: &Fixture) -> Runs {
    let start = Instant::now();
    let dc = decode_config();
    let mut all = vec![Approach::vanilla()];
    all.extend(approaches(f, None));
    let ungated = bench::run_bench(&f.backbone, &all, &f.prompts, &dc).unwrap();
    // Gate at the median logits entropy of the ungated steps so both routes occur.
    let mut ent: Vec<f64> = ungated
        .records
        .iter()
        .filter(|r| r.approach != "vanilla")
        .map(|r| r.trace.entropy_logits)
        .collect();
    ent.sort_by(f64::total_cmp);
    let threshold = ent[ent.len() / 2];
    let gated = bench::run_bench(
        &f.backbone,
        &approaches(f, Some(GateConfig::with_threshold(threshold, EntropySource::Logits))),
        &f.prompts,
        &dc,
    )
    .unwrap();
    let mut records = ungated.records;
    records.extend(gated.records);
    let outputs = ungated
        .outputs
        .into_iter()
        .chain(gated.outputs)
        .map(|o| ((o.approach, o.prompt), o.tokens))
        .collect();
    Runs {
        records,
        outputs,
        gate_threshold: threshold,
        lossless_secs: start.elapsed().as_secs_f64(),
    }
}

fn c1_losslessness(f: &Fixture, runs: &Runs) -> Outcome {
    let start = Instant::now();
    let mut configs: Vec<&String> = runs.outputs.keys().map(|k| &k.0).collect();
    configs.dedup();
    let mut mismatches = Vec::new();
    for (i, (_, prompt)) in f.prompts.iter().enumerate() {
        let oracle = common::greedy_oracle(&f.backbone, prompt, MAX_NEW, None);
        for c in &configs {
            if runs.outputs[&((*c).clone(), i)] != oracle {
                mismatches.push(format!("{c}#{i}"));
            }
        }
    }
    let secs = runs.lossless_secs + start.elapsed().as_secs_f64();
    if !mismatches.is_empty() {
        return Err(format!(
            "{} mismatches, first {:?}",
            mismatches.len(),
            &mismatches[..mismatches.len().min(5)]
        ));
    }
    if secs >= 300.0 {
        return Err(format!("exact, but took {secs:.0}s (limit 300s)"));
    }
    Ok(format!(
        "{} prompts x {} configurations identical to greedy decoding ({secs:.0}s)",
        f.prompts.len(),
        configs.len()
    ))
}

fn tree_oracle_trees(bb: &Backbone, n_trees: usize, seed: u64) -> Result<(usize, f32), String> {
    let mut r = cerberus::rng::seeded(seed);
    let v = bb.config().vocab_size as u32;
    let mut worst = 0.0f32;
    let mut nodes_checked = 0;
    for _ in 0..n_trees {
        let depth = r.random_range(1..=4usize);
        let k = r.random_range(1..=4usize);
        let cal: Vec<Vec<f64>> = (0..depth)
            .map(|_| (0..k).map(|_| r.random_range(0.01..1.0)).collect())
            .collect();
        let budget = r.random_range(1..=15usize);
        let ts = select_templates(budget, &cal).map_err(|e| e.to_string())?;
        let topk: Vec<Vec<TokenId>> = (0..depth)
            .map(|_| {
                let mut toks: Vec<TokenId> = Vec::new();
                while toks.len() < k {
                    let t = r.random_range(0..v);
                    if !toks.contains(&t) {
                        toks.push(t);
                    }
                }
                toks
            })
            .collect();
        let prefix: Vec<TokenId> = (0..r.random_range(1..10)).map(|_| r.random_range(0..v)).collect();
        let bonus = r.random_range(0..v);
        let tree = build_tree(&ts, &topk, bonus, prefix.len()).map_err(|e| e.to_string())?;
        if tree.len() > 15 {
            return Err(format!("tree of {} nodes", tree.len()));
        }
        let mut cache = bb.new_cache();
        bb.forward_causal(&prefix, &mut cache).unwrap();
        let out = bb
            .forward(&tree.tokens(), &tree.positions(), &mut cache, &tree.mask().unwrap())
            .unwrap();
        for row in 0..=tree.len() {
            let mut seq = prefix.clone();
            seq.extend(tree.root_path(row));
            let single = bb.forward_fresh(&seq).unwrap();
            let want = single.logits.row(seq.len() - 1);
            let got = out.logits.row(row);
            let d = want.iter().zip(got).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            worst = worst.max(d);
            nodes_checked += 1;
        }
    }
    Ok((nodes_checked, worst))
}

fn c2_tree_mask(trained: Option<&Backbone>) -> Outcome {
    let random = common::sharp_backbone(
        BackboneConfig {
            vocab_size: 64,
            d_model: 32,
            n_layers: 2,
            n_attn_heads: 4,
            max_context: 32,
            ffn_dim: 64,
        },
        5,
        0.2,
    );
    let (n1, w1) = tree_oracle_trees(&random, 200, 1)?;
    let (n2, w2) = match trained {
        Some(bb) => tree_oracle_trees(bb, 100, 2)?,
        None => (0, 0.0),
    };
    // Dense-mask cross-check: the tree mask is exactly ancestor-or-self.
    let ts = TemplateSet::new(vec![vec![0], vec![1], vec![0, 0], vec![0, 1], vec![1, 0]], 2).unwrap();
    let tree = build_tree(&ts, &[vec![1, 2], vec![3, 4]], 0, 3).unwrap();
    let dense = tree.mask().unwrap().to_dense(3 + 6);
    let parents = tree.flat_parents();
    for (t, row) in dense.iter().enumerate() {
        for (key, &allowed) in row.iter().enumerate() {
            let expect = key < 3 || {
                let mut cur = Some(t);
                let mut hit = false;
                while let Some(c) = cur {
                    hit |= key == 3 + c;
                    cur = parents[c];
                }
                hit
            };
            if allowed != expect {
                return Err(format!("mask row {t} key {key}"));
            }
        }
    }
    let worst = w1.max(w2);
    if worst > 1e-4 {
        return Err(format!("max |dlogit| {worst:.2e} > 1e-4"));
    }
    Ok(format!(
        "{} trees, {} nodes, max |dlogit| {worst:.2e}",
        200 + if n2 > 0 { 100 } else { 0 },
        n1 + n2
    ))
}

fn c3_wavefront() -> Outcome {
    let mut draws = 0;
    for h in 1..=4 {
        for r in 1..=4 {
            for draw in 0..50u64 {
                let cfg = HeadConfig {
                    paradigm: Paradigm::Cerberus,
                    n_heads: h,
                    resblocks_per_head: r,
                    special_position: (draw as usize) % r,
                    top_k: 3,
                    ..Default::default()
                };
                let seed = (h * 1000 + r * 100) as u64 + draw;
                let stack = HeadStack::random(cfg, 16, 24, seed, 0.3).unwrap();
                let mut rng = cerberus::rng::seeded(seed);
                let x = cerberus::tensor::Tensor::randn(&[3, 16], 1.0, &mut rng);
                let seq = stack.forward_sequential(&x).unwrap();
                let wave = stack.forward_wavefront_parallel(&x).unwrap();
                let batch = stack.forward_batch(&x).unwrap();
                for i in 0..h {
                    let bits = |t: &cerberus::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                    if bits(&seq[i]) != bits(&wave[i]) || bits(&seq[i]) != bits(&batch[i]) {
                        return Err(format!("H={h} R={r} draw {draw} head {i} differs"));
                    }
                }
                if stack.wavefront_schedule().n_steps() != r {
                    return Err(format!(
                        "H={h} R={r}: wavefront has {} steps",
                        stack.wavefront_schedule().n_steps()
                    ));
                }
                draws += 1;
            }
        }
    }
    Ok(format!("{draws} weight draws bitwise identical (H, R in 1..4)"))
}

fn c4_gradients() -> Outcome {
    let results = common::grads::suite();
    let worst = results
        .iter()
        .cloned()
        .fold((String::new(), 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let bad: Vec<String> = results
        .iter()
        .filter(|(_, e)| !(*e <= 1e-3))
        .map(|(n, e)| format!("{n} {e:.2e}"))
        .collect();
    if !bad.is_empty() {
        return Err(format!("{bad:?}"));
    }
    Ok(format!(
        "{} checks, worst {} at {:.2e}",
        results.len(),
        worst.0,
        worst.1
    ))
}

fn shape(t: &StepTrace) -> (Route, usize, usize, usize, usize) {
    (t.route, t.tokens, t.accepted, t.tree_size, t.head_block_execs)
}

fn c5_gate_degeneracy(f: &Fixture) -> Outcome {
    let dc = decode_config();
    let prompts = &f.prompts[..30];
    for (p, t) in &f.models {
        let ts = t.templates[&63].clone();
        for source in [EntropySource::Hidden, EntropySource::Logits] {
            let zero = Approach::parallel(
                "t0",
                t.heads.clone(),
                ts.clone(),
                GateConfig::with_threshold(0.0, source),
            );
            let run = bench::run_bench(&f.backbone, &[zero], prompts, &dc).unwrap();
            let tokens: usize = run.records.iter().map(|r| r.trace.tokens).sum();
            let execs: usize = run.records.iter().map(|r| r.trace.head_block_execs).sum();
            if tokens != run.records.len() || execs != 0 {
                return Err(format!(
                    "{p}/{source:?}: T=0 gave {tokens} tokens over {} steps, {execs} head blocks",
                    run.records.len()
                ));
            }
            let rep = BenchReport::from_records(&run.records, "t0").unwrap();
            if rep.approaches[0].tokens_per_forward != 1.0 {
                return Err(format!(
                    "{p}: T=0 tokens-per-forward {}",
                    rep.approaches[0].tokens_per_forward
                ));
            }
        }
        let off = Approach::parallel("off", t.heads.clone(), ts.clone(), GateConfig::disabled());
        let inf = Approach::parallel(
            "inf",
            t.heads.clone(),
            ts.clone(),
            GateConfig::with_threshold(f64::INFINITY, EntropySource::Hidden),
        );
        let top = Approach::parallel(
            "top",
            t.heads.clone(),
            ts.clone(),
            GateConfig::with_threshold((f.backbone.config().d_model as f64).log2(), EntropySource::Hidden),
        );
        let run = bench::run_bench(&f.backbone, &[off, inf, top], prompts, &dc).unwrap();
        let by = |name: &str| {
            run.records
                .iter()
                .filter(|r| r.approach == name)
                .map(|r| shape(&r.trace))
                .collect::<Vec<_>>()
        };
        let off_shape = by("off");
        if off_shape.iter().any(|s| s.0 != Route::Parallel) {
            return Err(format!("{p}: disabled gate produced an AR step"));
        }
        if off_shape != by("inf") || off_shape != by("top") {
            return Err(format!("{p}: disabled gate trace differs from always-parallel"));
        }
    }
    Ok("T=0 gives tokens-per-forward 1.0 with 0 head blocks; disabled gate matches always-parallel".into())
}

fn c6_entropy() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in [2usize, 4, 16, 256] {
        for c in [0.0f32, 3.7, -12.5] {
            let h = gate::entropy(&vec![c; k]);
            worst = worst.max((h - (k as f64).log2()).abs());
        }
    }
    if worst > 1e-6 {
        return Err(format!("uniform error {worst:.2e}"));
    }
    for k in [2usize, 4, 16, 256] {
        let mut v = vec![0.0f32; k];
        v[k / 3] = 1000.0;
        let h = gate::entropy(&v);
        if h > 1e-6 {
            return Err(format!("one-hot over {k} gave {h}"));
        }
    }
    Ok(format!("uniform within {worst:.1e} of log2 K; one-hot <= 1e-6"))
}

fn baseline_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/baselines/acceptance.json")
}

/// Frozen values from the first green run; later runs may not regress below them.
fn check_baseline(measured: &BTreeMap<String, f64>) -> Result<String, String> {
    let path = baseline_path();
    match std::fs::read_to_string(&path) {
        Ok(s) => {
            let frozen: BTreeMap<String, f64> = serde_json::from_str(&s).map_err(|e| e.to_string())?;
            let mut regressions = Vec::new();
            for (k, &base) in &frozen {
                match measured.get(k) {
                    Some(&m) if m + 0.02 >= base => {}
                    Some(&m) => regressions.push(format!("{k}: {m:.4} < baseline {base:.4}")),
                    None => regressions.push(format!("{k}: not measured")),
                }
            }
            if regressions.is_empty() {
                Ok(format!("within baseline {}", path.display()))
            } else {
                Err(regressions.join("; "))
            }
        }
        Err(_) => {
            std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
            std::fs::write(&path, serde_json::to_string_pretty(measured).unwrap()).map_err(|e| e.to_string())?;
            Ok(format!("baseline frozen to {}", path.display()))
        }
    }
}

fn c7_acceleration(f: &Fixture, runs: &Runs) -> Outcome {
    let rep = BenchReport::from_records(&runs.records, "vanilla").map_err(|e| e.to_string())?;
    let mut measured = BTreeMap::new();
    let mut low = Vec::new();
    for a in rep.approaches.iter().filter(|a| a.approach != "vanilla") {
        if !(a.tokens_per_forward > 1.0) {
            low.push(format!("{} {:.3}", a.approach, a.tokens_per_forward));
        }
        measured.insert(format!("tokens_per_forward/{}", a.approach), a.tokens_per_forward);
    }
    measured.insert(
        "backbone/eval_loss_ratio_inverse".into(),
        (f.init_eval_loss / f.final_eval_loss) as f64,
    );
    if !low.is_empty() {
        return Err(format!("tokens-per-forward <= 1: {low:?}"));
    }
    let baseline = check_baseline(&measured)?;
    let ungated: Vec<String> = rep
        .approaches
        .iter()
        .filter(|a| a.approach != "vanilla" && !a.approach.ends_with("gated"))
        .map(|a| format!("{} {:.2}", a.approach, a.tokens_per_forward))
        .collect();
    Ok(format!("tokens-per-forward: {}; {baseline}", ungated.join(", ")))
}

fn c8_entropy_trend(runs: &Runs) -> Outcome {
    let steps: Vec<&StepTrace> = runs
        .records
        .iter()
        .filter(|r| r.approach != "vanilla" && !r.approach.ends_with("gated"))
        .map(|r| &r.trace)
        .collect();
    let hidden = bench::entropy_acceptance_analysis(steps.iter().copied(), true);
    let logits = bench::entropy_acceptance_analysis(steps.iter().copied(), false);
    let n = hidden.parallel_steps;
    let msg = format!(
        "{n} parallel steps, spearman hidden {:.3}, logits {:.3}",
        hidden.spearman, logits.spearman
    );
    if n < 500 {
        return Err(format!("only {msg}"));
    }
    if hidden.spearman < 0.0 || logits.spearman < 0.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c9_head_quality(f: &Fixture) -> Outcome {
    let mut lines = Vec::new();
    for (p, t) in &f.models {
        let acc = &t.topk.accuracy;
        for (i, row) in acc.iter().enumerate() {
            if row.windows(2).any(|w| w[1] < w[0]) {
                return Err(format!("{p} head {i}: accuracy decreases in k'"));
            }
        }
        // Adjacent heads are compared within two binomial standard errors of the difference.
        let n = t.topk.positions as f64;
        let mut within_noise = 0;
        for k in 0..10 {
            for i in 1..acc.len() {
                let (a, b) = (acc[i - 1][k], acc[i][k]);
                if b <= a {
                    continue;
                }
                let pm = (a + b) / 2.0;
                let tol = 2.0 * (2.0 * pm * (1.0 - pm) / n).sqrt();
                if b - a > tol {
                    return Err(format!(
                        "{p}: head {i} top-{} {b:.4} above head {} {a:.4} (tolerance {tol:.4})",
                        k + 1,
                        i - 1
                    ));
                }
                within_noise += 1;
            }
        }
        if within_noise > 0 {
            lines.push(format!(
                "{p}: {within_noise} adjacent-head inversions within sampling noise"
            ));
        }
        lines.push(format!(
            "{p} top1 {:?}",
            acc.iter().map(|r| (r[0] * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ));
    }
    let m = &f.models[0].1.topk.accuracy;
    let c = &f.models[1].1.topk.accuracy;
    let rear: Vec<String> = (1..m.len())
        .map(|i| format!("h{i} {:+.3}", c[i][0] - m[i][0]))
        .collect();
    let dir = std::env::temp_dir().join("cerberus-acceptance");
    std::fs::create_dir_all(&dir).ok();
    std::fs::write(
        dir.join("fig5.csv"),
        bench::fig5_csv(&[("medusa", &f.models[0].1.topk), ("cerberus", &f.models[1].1.topk)]),
    )
    .ok();
    Ok(format!(
        "{}; cerberus-medusa top1 on rear heads: {}",
        lines.join("; "),
        rear.join(" ")
    ))
}

fn c10_count_law() -> Outcome {
    let full = TemplateSet::full(4, 10).map_err(|e| e.to_string())?;
    if full.path_count() != 11110 || full_space_size(4, 10) != 11110 {
        return Err(format!("full space {}", full.path_count()));
    }
    let cal = uniform_calibration(4, 10);
    for n in TREE_PATHS {
        let ts = select_templates(n, &cal).map_err(|e| e.to_string())?;
        if ts.path_count() != n || !ts.is_prefix_closed() || ts.max_depth() > 4 {
            return Err(format!("{n}-path set invalid"));
        }
        let back = TemplateSet::from_json(&ts.to_json(), 10).map_err(|e| e.to_string())?;
        if back != ts {
            return Err(format!("{n}-path set does not round-trip"));
        }
    }
    Ok("full space 11110; 63/120/150-path sets prefix-closed".into())
}

fn c11_accounting(runs: &Runs) -> Outcome {
    let rep = BenchReport::from_records(&runs.records, "vanilla").map_err(|e| e.to_string())?;
    rep.check_identities(&runs.records)?;
    let v = rep.get("vanilla").unwrap();
    if v.speedup != 1.0 || v.tokens_per_forward != 1.0 {
        return Err("vanilla self-comparison is not 1.0".into());
    }
    for a in &rep.approaches {
        if let Some(g) = rep.get(&format!("{}-gated", a.approach)) {
            if g.head_block_execs > a.head_block_execs {
                return Err(format!("{}: gated ran more head blocks", a.approach));
            }
        }
    }
    // Replaying persisted traces gives the identical report.
    let dir = std::env::temp_dir().join(format!("cerberus-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let p = dir.join("traces.jsonl");
    bench::write_traces(&p, &runs.records).map_err(|e| e.to_string())?;
    let back = bench::read_traces(&p).map_err(|e| e.to_string())?;
    let replay = BenchReport::from_records(&back, "vanilla").map_err(|e| e.to_string())?;
    std::fs::remove_dir_all(&dir).ok();
    if replay.to_json() != rep.to_json() {
        return Err("report from persisted traces differs".into());
    }
    Ok(format!(
        "{} approaches, {} steps; gate threshold {:.3} bits",
        rep.approaches.len(),
        runs.records.len(),
        runs.gate_threshold
    ))
}

fn run(id: usize, name: &str, results: &mut Vec<bool>, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail) = match &outcome {
        Ok(m) => ("PASS", m),
        Err(m) => ("FAIL", m),
    };
    println!("criterion {id:>2} {tag} {name}: {detail} [{secs:.1}s]");
    results.push(outcome.is_ok());
}

fn main() {
    let mut results = Vec::new();
    run(6, "entropy correctness", &mut results, c6_entropy);
    run(10, "count law", &mut results, c10_count_law);
    run(3, "wavefront equivalence", &mut results, c3_wavefront);
    run(4, "gradient checks", &mut results, c4_gradients);

    let t = Instant::now();
    let fixture = build_fixture();
    println!(
        "fixture trained in {:.0}s (backbone eval loss {:.3} -> {:.3})",
        t.elapsed().as_secs_f64(),
        fixture.init_eval_loss,
        fixture.final_eval_loss
    );
    run(2, "tree-mask oracle", &mut results, || {
        c2_tree_mask(Some(&fixture.backbone))
    });
    let runs = run_all(&fixture);
    run(1, "losslessness", &mut results, || c1_losslessness(&fixture, &runs));
    run(5, "gate degeneracy", &mut results, || c5_gate_degeneracy(&fixture));
    run(7, "acceleration trend", &mut results, || {
        c7_acceleration(&fixture, &runs)
    });
    run(8, "entropy/acceptance trend", &mut results, || c8_entropy_trend(&runs));
    run(9, "head quality", &mut results, || c9_head_quality(&fixture));
    run(11, "accounting", &mut results, || c11_accounting(&runs));

    let passed = results.iter().filter(|&&ok| ok).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
