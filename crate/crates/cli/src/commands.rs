//! One function per subcommand. Results go to stdout as JSON lines.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use cerberus::backbone::Backbone;
use cerberus::bench::{self, Approach, BenchReport};
use cerberus::checkpoint::{self, Checkpoint};
use cerberus::data::{self, PromptSuite};
use cerberus::engine::DecodeSession;
use cerberus::gate::{EntropySource, GateConfig};
use cerberus::heads::{HeadStack, Paradigm};
use cerberus::trainer::{self, HiddenPool, TopKTable};
use cerberus::tree::{full_space_size, select_templates, uniform_calibration, TemplateSet};
use cerberus::TokenId;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn emit(v: Value) {
    println!("{v}");
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn parent_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => ensure_dir(p),
        _ => Ok(()),
    }
}

fn require_heads(cfg: &RunConfig) -> Result<Paradigm> {
    cfg.paradigm
        .heads()
        .ok_or_else(|| CliError::Config("this subcommand needs --paradigm medusa or cerberus".into()))
}

fn load_backbone(cfg: &RunConfig) -> Result<Arc<Backbone>> {
    let (bb, _) = checkpoint::load_backbone(&cfg.backbone_path())?;
    Ok(Arc::new(bb))
}

fn load_heads(cfg: &RunConfig, p: Paradigm, bb: &Backbone) -> Result<(Arc<HeadStack>, Value)> {
    let path = cfg.heads_path(p);
    let (heads, meta) = checkpoint::load_heads(&path)?;
    if heads.config().paradigm != p {
        return Err(CliError::Config(format!(
            "{} holds {} heads, expected {p}",
            path.display(),
            heads.config().paradigm
        )));
    }
    if heads.d_model() != bb.config().d_model || heads.vocab_size() != bb.config().vocab_size {
        return Err(CliError::Config(format!(
            "{} does not match the backbone",
            path.display()
        )));
    }
    Ok((Arc::new(heads), meta))
}

fn meta_field<T: serde::de::DeserializeOwned>(meta: &Value, key: &str) -> Result<Option<T>> {
    match meta.get(key) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| CliError::Runtime(format!("heads metadata {key:?}: {e}"))),
    }
}

fn templates(cfg: &RunConfig, heads: &HeadStack, meta: &Value, budget: usize) -> Result<Arc<TemplateSet>> {
    let hc = heads.config();
    let ts = match &cfg.tree.templates {
        Some(path) => TemplateSet::load(path, hc.top_k)?,
        None => {
            let cal = meta_field::<Vec<Vec<f64>>>(meta, "rank_freq")?
                .unwrap_or_else(|| uniform_calibration(hc.n_heads, hc.top_k));
            select_templates(budget, &cal)?
        }
    };
    ts.check_heads(hc.n_heads)?;
    Ok(Arc::new(ts))
}

/// The configured gate, else the calibrated one stored with the heads, else one that never routes AR.
fn gate(cfg: &RunConfig, meta: &Value) -> Result<GateConfig> {
    if !cfg.gate.enabled {
        return Ok(GateConfig::disabled());
    }
    if let Some(t) = cfg.gate.threshold {
        return Ok(GateConfig::with_threshold(t, cfg.gate.source));
    }
    match meta_field::<f64>(meta, "gate_threshold")? {
        Some(t) => {
            let source = meta_field::<EntropySource>(meta, "gate_source")?.unwrap_or(cfg.gate.source);
            Ok(GateConfig::with_threshold(t, source))
        }
        None => Ok(GateConfig::with_threshold(f64::INFINITY, cfg.gate.source)),
    }
}

fn prompts(cfg: &RunConfig) -> Result<Vec<(String, Vec<TokenId>)>> {
    let suite = match &cfg.data.prompts {
        Some(p) => data::load_prompt_suite(p)?,
        None => data::default_prompt_suite(),
    };
    Ok(suite_tokens(&suite))
}

fn suite_tokens(suite: &PromptSuite) -> Vec<(String, Vec<TokenId>)> {
    suite
        .iter()
        .map(|(c, p)| (c.to_string(), data::encode(p.as_bytes())))
        .collect()
}

pub fn train_backbone(cfg: &RunConfig) -> Result<()> {
    let corpus = data::load_corpus(&cfg.data.corpus, cfg.data.eval_fraction)?;
    let mut bb = Backbone::new(cfg.backbone, cfg.seed)?;
    let report = trainer::train_backbone(&mut bb, corpus.train(), corpus.eval(), &cfg.train_backbone)?;
    let path = cfg.backbone_path();
    parent_dir(&path)?;
    let meta = json!({
        "corpus_sha256": corpus.sha256(),
        "train": cfg.train_backbone,
        "initial_eval_loss": report.initial_eval_loss,
        "final_eval_loss": report.final_eval_loss,
    });
    checkpoint::save_backbone(&path, &bb, meta)?;
    emit(json!({
        "checkpoint": path,
        "params": bb.params().num_params(),
        "initial_eval_loss": report.initial_eval_loss,
        "final_eval_loss": report.final_eval_loss,
    }));
    Ok(())
}

pub fn train_heads(cfg: &RunConfig) -> Result<()> {
    let p = require_heads(cfg)?;
    let bb = load_backbone(cfg)?;
    let corpus = data::load_corpus(&cfg.data.corpus, cfg.data.eval_fraction)?;
    let mut heads = HeadStack::new(cfg.head_config(p), &bb)?;
    let report = trainer::train_heads(&bb, &mut heads, corpus.train(), &cfg.train_heads)?;

    let k = heads.config().top_k;
    let window = cfg.train_heads.window;
    let train_pool = HiddenPool::compute(&bb, corpus.train(), window)?;
    let calib = trainer::eval_head_topk_on_pool(&heads, &train_pool, k, cfg.bench.topk_positions)?;
    let topk = if corpus.eval().len() > heads.config().n_heads + 2 {
        let pool = HiddenPool::compute(&bb, corpus.eval(), window)?;
        Some(trainer::eval_head_topk_on_pool(
            &heads,
            &pool,
            k,
            cfg.bench.topk_positions,
        )?)
    } else {
        None
    };
    let path = cfg.heads_path(p);
    parent_dir(&path)?;
    let meta = json!({
        "backbone_fingerprint": report.backbone_fingerprint,
        "train": cfg.train_heads,
        "initial_head_losses": report.initial_head_losses,
        "final_head_losses": report.final_head_losses,
        "rank_freq": calib.rank_freq,
        "topk": topk,
    });
    checkpoint::save_heads(&path, &heads, meta)?;
    emit(json!({
        "checkpoint": path,
        "paradigm": p,
        "initial_head_losses": report.initial_head_losses,
        "final_head_losses": report.final_head_losses,
        "top1": topk.as_ref().map(|t| t.accuracy.iter().map(|r| r[0]).collect::<Vec<_>>()),
    }));
    Ok(())
}

pub fn decode(cfg: &RunConfig, prompt: &[u8], trace: Option<&Path>) -> Result<()> {
    let bb = load_backbone(cfg)?;
    let mut session = match cfg.paradigm.heads() {
        None => DecodeSession::vanilla(bb.clone(), cfg.decode_config(GateConfig::disabled()))?,
        Some(p) => {
            let (heads, meta) = load_heads(cfg, p, &bb)?;
            let ts = templates(cfg, &heads, &meta, cfg.tree.paths)?;
            let dc = cfg.decode_config(gate(cfg, &meta)?);
            DecodeSession::new(bb.clone(), Some(heads), Some(ts), dc)?
        }
    };
    let out = session.decode(&data::encode(prompt))?;
    let bytes = data::decode(&out.tokens)?;
    let mut stdout = std::io::stdout().lock();
    stdout.write_all(&bytes)?;
    stdout.flush()?;
    if let Some(path) = trace {
        parent_dir(path)?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &out.traces {
            serde_json::to_writer(&mut w, t).map_err(cerberus::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    let summary = json!({
        "tokens": out.tokens.len(),
        "forwards": out.forwards(),
        "tokens_per_forward": out.tokens_per_forward(),
        "wall_ns": out.wall_ns(),
    });
    eprintln!("{summary}");
    Ok(())
}

fn topk_tables(cfg: &RunConfig, paradigms: &[Paradigm]) -> Result<Vec<(String, TopKTable)>> {
    let mut out = Vec::new();
    for &p in paradigms {
        let path = cfg.heads_path(p);
        if !path.exists() {
            continue;
        }
        let ck = Checkpoint::load(&path)?;
        if let Some(t) = meta_field::<TopKTable>(&ck.metadata, "topk")? {
            out.push((p.to_string(), t));
        }
    }
    Ok(out)
}

fn finish_report(cfg: &RunConfig, records: &[bench::TraceRecord], dir: &Path, paradigms: &[Paradigm]) -> Result<()> {
    let report = BenchReport::from_records(records, "vanilla")?;
    report.check_identities(records).map_err(CliError::Runtime)?;
    let tables = topk_tables(cfg, paradigms)?;
    let refs: Vec<(&str, &TopKTable)> = tables.iter().map(|(n, t)| (n.as_str(), t)).collect();
    bench::write_reports(dir, &report, &refs)?;
    for s in &report.approaches {
        emit(json!({
            "approach": s.approach,
            "tokens_per_forward": s.tokens_per_forward,
            "speedup": s.speedup,
            "forward_speedup": s.forward_speedup,
            "zero_accept_proportion": s.zero_accept_proportion,
        }));
    }
    Ok(())
}

pub fn bench(cfg: &RunConfig) -> Result<()> {
    let bb = load_backbone(cfg)?;
    let prompts = prompts(cfg)?;
    let paradigms: Vec<Paradigm> = cfg.bench.paradigms.iter().filter_map(|p| p.heads()).collect();
    let mut approaches = vec![Approach::vanilla()];
    for &p in &paradigms {
        let (heads, meta) = load_heads(cfg, p, &bb)?;
        let gated = gate(cfg, &meta)?;
        let gated = (cfg.bench.gated && gated.enabled && gated.threshold.is_finite()).then_some(gated);
        for &n in &cfg.bench.tree_paths {
            let ts = templates(cfg, &heads, &meta, n)?;
            approaches.push(Approach::parallel(
                format!("{p}-{n}"),
                heads.clone(),
                ts.clone(),
                GateConfig::disabled(),
            ));
            if let Some(g) = gated {
                approaches.push(Approach::parallel(format!("{p}-{n}-gated"), heads.clone(), ts, g));
            }
        }
    }
    let run = bench::run_bench(&bb, &approaches, &prompts, &cfg.decode_config(GateConfig::disabled()))?;
    let base: Vec<&[TokenId]> = run
        .outputs
        .iter()
        .take(prompts.len())
        .map(|o| o.tokens.as_slice())
        .collect();
    for o in &run.outputs {
        if o.tokens != base[o.prompt] {
            return Err(CliError::Runtime(format!(
                "{} diverged from vanilla on prompt {}",
                o.approach, o.prompt
            )));
        }
    }
    let dir = cfg.out_dir.join("bench");
    ensure_dir(&dir)?;
    bench::write_traces(&dir.join("traces.jsonl"), &run.records)?;
    finish_report(cfg, &run.records, &dir, &paradigms)
}

pub fn analyze(cfg: &RunConfig, traces: &Path) -> Result<()> {
    let records = bench::read_traces(traces)?;
    let dir = cfg.out_dir.join("analysis");
    finish_report(cfg, &records, &dir, &[Paradigm::Medusa, Paradigm::Cerberus])
}

pub fn calibrate_gate(cfg: &RunConfig) -> Result<()> {
    let p = require_heads(cfg)?;
    let bb = load_backbone(cfg)?;
    let (heads, mut meta) = load_heads(cfg, p, &bb)?;
    let ts = templates(cfg, &heads, &meta, cfg.tree.paths)?;
    let prompts = prompts(cfg)?;
    let cal = bench::calibrate_gate(
        &bb,
        &heads,
        &ts,
        &prompts,
        &cfg.decode_config(GateConfig::disabled()),
        cfg.gate.source,
        cfg.gate.parallel_overhead,
    )?;
    if !meta.is_object() {
        meta = json!({});
    }
    meta["gate_threshold"] = json!(cal.threshold);
    meta["gate_source"] = json!(cal.source);
    meta["gate_calibration"] = json!(cal);
    checkpoint::save_heads(&cfg.heads_path(p), &heads, meta)?;
    ensure_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("calibration-{p}.json"));
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&cal).map_err(cerberus::Error::from)?,
    )?;
    emit(json!({"paradigm": p, "threshold": cal.threshold, "source": cal.source, "report": path}));
    Ok(())
}

pub fn gen_templates(cfg: &RunConfig, from_heads: bool, out: Option<PathBuf>) -> Result<()> {
    let (n_heads, k) = (cfg.heads.n_heads, cfg.tree.top_k);
    let cal = if from_heads {
        let p = require_heads(cfg)?;
        let ck = Checkpoint::load(&cfg.heads_path(p))?;
        meta_field::<Vec<Vec<f64>>>(&ck.metadata, "rank_freq")?
            .ok_or_else(|| CliError::Runtime("heads checkpoint carries no rank statistics".into()))?
    } else {
        uniform_calibration(n_heads, k)
    };
    let ts = select_templates(cfg.tree.paths, &cal)?;
    let path = out.unwrap_or_else(|| cfg.out_dir.join(format!("templates-{}.json", cfg.tree.paths)));
    parent_dir(&path)?;
    ts.save(&path)?;
    emit(json!({
        "path": path,
        "paths": ts.path_count(),
        "nodes": ts.node_count(),
        "max_depth": ts.max_depth(),
        "prefix_closed": ts.is_prefix_closed(),
        "full_space": full_space_size(cal.len(), cal[0].len()),
    }));
    Ok(())
}

pub fn inspect_ckpt(path: &Path) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    let tensors: Vec<Value> = ck
        .params
        .iter()
        .map(|(n, t)| json!({"name": n, "shape": t.shape()}))
        .collect();
    let v = json!({
        "kind": ck.kind,
        "version": checkpoint::VERSION,
        "config": ck.config,
        "params": ck.params.num_params(),
        "fingerprint": ck.params.fingerprint(),
        "tensors": tensors,
        "metadata": ck.metadata,
    });
    println!("{}", serde_json::to_string_pretty(&v).map_err(cerberus::Error::from)?);
    Ok(())
}
