//! Decode benchmarks and the analyses computed from their step traces.
//!
//! Every report is a pure function of the persisted [`TraceRecord`]s, so
//! reports can be regenerated from JSON-lines files without decoding again.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::engine::{DecodeConfig, DecodeSession, StepTrace};
use crate::gate::{threshold_grid, EntropySource, GateConfig, Route};
use crate::heads::HeadStack;
use crate::trainer::TopKTable;
use crate::tree::TemplateSet;
use crate::{Error, Result, TokenId};

/// Large-model reference figures carried into reports for context only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFigures {
    pub speedup: f64,
    pub tokens_per_second: f64,
    pub zero_accept_proportion: f64,
    pub entropy_threshold: f64,
}

pub const REFERENCE: ReferenceFigures = ReferenceFigures {
    speedup: 2.12,
    tokens_per_second: 80.35,
    zero_accept_proportion: 0.1838,
    entropy_threshold: 0.59,
};

/// Tree-path settings used by the reference comparison.
pub const REFERENCE_TREE_PATHS: [usize; 3] = [63, 120, 150];
pub const REFERENCE_TOP_K: usize = 10;
pub const REFERENCE_HEADS: usize = 4;

/// Minimum parallel steps for the entropy analysis to count as sufficient.
pub const MIN_PARALLEL_STEPS: usize = 30;

/// One decoding configuration under test.
#[derive(Clone)]
pub struct Approach {
    pub name: String,
    /// `vanilla`, `medusa` or `cerberus`.
    pub paradigm: String,
    pub tree_paths: Option<usize>,
    pub heads: Option<Arc<HeadStack>>,
    pub templates: Option<Arc<TemplateSet>>,
    pub gate: GateConfig,
}

impl Approach {
    pub fn vanilla() -> Self {
        Approach {
            name: "vanilla".into(),
            paradigm: "vanilla".into(),
            tree_paths: None,
            heads: None,
            templates: None,
            gate: GateConfig::disabled(),
        }
    }

    pub fn parallel(
        name: impl Into<String>,
        heads: Arc<HeadStack>,
        templates: Arc<TemplateSet>,
        gate: GateConfig,
    ) -> Self {
        Approach {
            name: name.into(),
            paradigm: heads.config().paradigm.to_string(),
            tree_paths: Some(templates.path_count()),
            heads: Some(heads),
            templates: Some(templates),
            gate,
        }
    }
}

/// One step of one prompt under one approach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub approach: String,
    pub paradigm: String,
    pub tree_paths: Option<usize>,
    pub prompt: usize,
    pub category: String,
    pub step: usize,
    #[serde(flatten)]
    pub trace: StepTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptOutput {
    pub approach: String,
    pub prompt: usize,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRun {
    pub outputs: Vec<PromptOutput>,
    pub records: Vec<TraceRecord>,
}

/// Decodes every prompt under every approach. Token outputs are deterministic; wall times are not.
pub fn run_bench(
    backbone: &Arc<Backbone>,
    approaches: &[Approach],
    prompts: &[(String, Vec<TokenId>)],
    decode: &DecodeConfig,
) -> Result<BenchRun> {
    let mut outputs = Vec::new();
    let mut records = Vec::new();
    for a in approaches {
        let cfg = DecodeConfig {
            gate: a.gate,
            ..*decode
        };
        let mut session = DecodeSession::new(backbone.clone(), a.heads.clone(), a.templates.clone(), cfg)?;
        for (i, (category, prompt)) in prompts.iter().enumerate() {
            let out = session.decode(prompt)?;
            records.extend(out.traces.into_iter().enumerate().map(|(step, trace)| TraceRecord {
                approach: a.name.clone(),
                paradigm: a.paradigm.clone(),
                tree_paths: a.tree_paths,
                prompt: i,
                category: category.clone(),
                step,
                trace,
            }));
            outputs.push(PromptOutput {
                approach: a.name.clone(),
                prompt: i,
                tokens: out.tokens,
            });
        }
    }
    Ok(BenchRun { outputs, records })
}

/// Fraction of parallel steps where no head token was accepted; `None` without parallel steps.
pub fn zero_accept_proportion<'a>(traces: impl IntoIterator<Item = &'a StepTrace>) -> Option<f64> {
    let (mut par, mut zero) = (0usize, 0usize);
    for t in traces {
        if t.route == Route::Parallel {
            par += 1;
            if t.accepted == 0 {
                zero += 1;
            }
        }
    }
    (par > 0).then(|| zero as f64 / par as f64)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman needs paired samples");
    if x.len() < 2 {
        return 0.0;
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyBucket {
    pub accepted: usize,
    pub count: usize,
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyAnalysis {
    pub buckets: Vec<EntropyBucket>,
    /// Correlation between step entropy and accepted count over parallel steps.
    pub spearman: f64,
    pub parallel_steps: usize,
    /// False when fewer than [`MIN_PARALLEL_STEPS`] parallel steps were seen.
    pub sufficient: bool,
}

/// Buckets parallel steps by accepted count. `hidden` picks which entropy to use.
pub fn entropy_acceptance_analysis<'a>(
    traces: impl IntoIterator<Item = &'a StepTrace>,
    hidden: bool,
) -> EntropyAnalysis {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut by: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for t in traces.into_iter().filter(|t| t.route == Route::Parallel) {
        let s = if hidden { t.entropy_hidden } else { t.entropy_logits };
        xs.push(s);
        ys.push(t.accepted as f64);
        let e = by.entry(t.accepted).or_default();
        e.0 += 1;
        e.1 += s;
    }
    let parallel_steps = xs.len();
    if parallel_steps < MIN_PARALLEL_STEPS {
        log::warn!("entropy analysis over only {parallel_steps} parallel steps");
    }
    EntropyAnalysis {
        buckets: by
            .into_iter()
            .map(|(accepted, (count, sum))| EntropyBucket {
                accepted,
                count,
                mean_entropy: sum / count as f64,
            })
            .collect(),
        spearman: spearman(&xs, &ys),
        parallel_steps,
        sufficient: parallel_steps >= MIN_PARALLEL_STEPS,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproachSummary {
    pub approach: String,
    pub paradigm: String,
    pub tree_paths: Option<usize>,
    pub prompts: usize,
    pub steps: usize,
    pub tokens: usize,
    pub forwards: usize,
    pub tokens_per_forward: f64,
    pub tokens_per_second: f64,
    /// Tokens/second relative to the baseline approach.
    pub speedup: f64,
    /// Tokens-per-forward relative to the baseline approach.
    pub forward_speedup: f64,
    pub zero_accept_proportion: Option<f64>,
    pub autoregressive_steps: usize,
    pub parallel_steps: usize,
    pub head_block_execs: usize,
    pub mean_step_latency_ns: f64,
    pub entropy_hidden: EntropyAnalysis,
    pub entropy_logits: EntropyAnalysis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub baseline: String,
    pub approaches: Vec<ApproachSummary>,
    pub reference: ReferenceFigures,
}

impl BenchReport {
    /// Aggregates records per approach in first-seen order. Speedups are relative to `baseline`.
    pub fn from_records(records: &[TraceRecord], baseline: &str) -> Result<Self> {
        let mut order: Vec<&str> = Vec::new();
        let mut groups: BTreeMap<&str, Vec<&TraceRecord>> = BTreeMap::new();
        for r in records {
            if !groups.contains_key(r.approach.as_str()) {
                order.push(&r.approach);
            }
            groups.entry(&r.approach).or_default().push(r);
        }
        let mut approaches: Vec<ApproachSummary> = order.iter().map(|a| summarise(&groups[a])).collect();
        let base = approaches
            .iter()
            .find(|s| s.approach == baseline)
            .map(|s| (s.tokens_per_second, s.tokens_per_forward))
            .ok_or_else(|| Error::config(format!("baseline approach {baseline:?} has no traces")))?;
        for s in &mut approaches {
            s.speedup = ratio(s.tokens_per_second, base.0);
            s.forward_speedup = ratio(s.tokens_per_forward, base.1);
        }
        Ok(BenchReport {
            baseline: baseline.to_string(),
            approaches,
            reference: REFERENCE,
        })
    }

    pub fn get(&self, approach: &str) -> Option<&ApproachSummary> {
        self.approaches.iter().find(|s| s.approach == approach)
    }

    /// Checks the accounting identities; returns a description of the first violation.
    pub fn check_identities(&self, records: &[TraceRecord]) -> std::result::Result<(), String> {
        for s in &self.approaches {
            let recs: Vec<&TraceRecord> = records.iter().filter(|r| r.approach == s.approach).collect();
            let tokens: usize = recs.iter().map(|r| r.trace.tokens).sum();
            if tokens != s.tokens {
                return Err(format!("{}: token sum {tokens} != {}", s.approach, s.tokens));
            }
            if s.autoregressive_steps + s.parallel_steps != s.steps || s.forwards != s.steps {
                return Err(format!("{}: step accounting broken", s.approach));
            }
            for p in [
                s.zero_accept_proportion,
                Some(
                    s.entropy_hidden.buckets.iter().map(|b| b.count).sum::<usize>() as f64
                        / s.parallel_steps.max(1) as f64,
                ),
            ]
            .into_iter()
            .flatten()
            {
                if !(0.0..=1.0).contains(&p) {
                    return Err(format!("{}: proportion {p} outside [0, 1]", s.approach));
                }
            }
            let bucketed: usize = s.entropy_hidden.buckets.iter().map(|b| b.count).sum();
            if bucketed != s.parallel_steps {
                return Err(format!(
                    "{}: buckets hold {bucketed} of {} parallel steps",
                    s.approach, s.parallel_steps
                ));
            }
            if s.steps > 0 && (s.tokens_per_forward - s.tokens as f64 / s.forwards as f64).abs() > 1e-12 {
                return Err(format!("{}: tokens-per-forward mismatch", s.approach));
            }
            if s.tokens_per_forward < 1.0 && s.steps > 0 && recs.iter().all(|r| r.trace.tokens >= 1) {
                return Err(format!("{}: tokens-per-forward below 1", s.approach));
            }
        }
        if let Some(b) = self.get(&self.baseline) {
            if b.speedup != 1.0 || b.forward_speedup != 1.0 {
                return Err("baseline self-speedup is not 1.0".into());
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Zero-accept proportions per approach.
    pub fn table1_csv(&self) -> String {
        let mut s = String::from("approach,paradigm,tree_paths,parallel_steps,zero_accept_proportion\n");
        for a in &self.approaches {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                a.approach,
                a.paradigm,
                opt(a.tree_paths),
                a.parallel_steps,
                a.zero_accept_proportion.map_or(String::new(), |p| format!("{p:.6}"))
            ));
        }
        s
    }

    /// Mean hidden-state entropy per accepted-count bucket.
    pub fn fig3_csv(&self) -> String {
        let mut s = String::from("approach,source,accepted,count,mean_entropy,spearman\n");
        for a in &self.approaches {
            for (src, an) in [("hidden", &a.entropy_hidden), ("logits", &a.entropy_logits)] {
                for b in &an.buckets {
                    s.push_str(&format!(
                        "{},{src},{},{},{:.6},{:.6}\n",
                        a.approach, b.accepted, b.count, b.mean_entropy, an.spearman
                    ));
                }
            }
        }
        s
    }

    /// Speed per approach.
    pub fn table2_csv(&self) -> String {
        let mut s = String::from(
            "approach,paradigm,tree_paths,tokens,steps,tokens_per_forward,tokens_per_second,speedup,forward_speedup,mean_step_latency_ns\n",
        );
        for a in &self.approaches {
            s.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.3},{:.6},{:.6},{:.1}\n",
                a.approach,
                a.paradigm,
                opt(a.tree_paths),
                a.tokens,
                a.steps,
                a.tokens_per_forward,
                a.tokens_per_second,
                a.speedup,
                a.forward_speedup,
                a.mean_step_latency_ns
            ));
        }
        s
    }
}

/// Per-head top-k accuracy side by side for several paradigms.
pub fn fig5_csv(tables: &[(&str, &TopKTable)]) -> String {
    let mut s = String::from("paradigm,head,k,accuracy\n");
    for (name, t) in tables {
        for (i, row) in t.accuracy.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                s.push_str(&format!("{name},{i},{},{a:.6}\n", j + 1));
            }
        }
    }
    s
}

fn opt(v: Option<usize>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn summarise(recs: &[&TraceRecord]) -> ApproachSummary {
    let first = recs[0];
    let traces: Vec<&StepTrace> = recs.iter().map(|r| &r.trace).collect();
    let steps = traces.len();
    let tokens: usize = traces.iter().map(|t| t.tokens).sum();
    let forwards: usize = traces.iter().map(|t| t.forwards).sum();
    let wall: u64 = traces.iter().map(|t| t.wall_ns).sum();
    let parallel_steps = traces.iter().filter(|t| t.route == Route::Parallel).count();
    let mut prompts: Vec<usize> = recs.iter().map(|r| r.prompt).collect();
    prompts.dedup();
    ApproachSummary {
        approach: first.approach.clone(),
        paradigm: first.paradigm.clone(),
        tree_paths: first.tree_paths,
        prompts: prompts.len(),
        steps,
        tokens,
        forwards,
        tokens_per_forward: if forwards == 0 {
            0.0
        } else {
            tokens as f64 / forwards as f64
        },
        tokens_per_second: if wall == 0 {
            0.0
        } else {
            tokens as f64 * 1e9 / wall as f64
        },
        speedup: 1.0,
        forward_speedup: 1.0,
        zero_accept_proportion: zero_accept_proportion(traces.iter().copied()),
        autoregressive_steps: steps - parallel_steps,
        parallel_steps,
        head_block_execs: traces.iter().map(|t| t.head_block_execs).sum(),
        mean_step_latency_ns: if steps == 0 { 0.0 } else { wall as f64 / steps as f64 },
        entropy_hidden: entropy_acceptance_analysis(traces.iter().copied(), true),
        entropy_logits: entropy_acceptance_analysis(traces.iter().copied(), false),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPoint {
    pub threshold: f64,
    pub tokens_per_forward: f64,
    pub parallel_fraction: f64,
    /// Tokens per unit of modelled cost.
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub source: EntropySource,
    pub parallel_overhead: f64,
    pub points: Vec<CalibrationPoint>,
}

/// Sweeps the threshold grid and keeps the threshold maximising
/// `tokens / (steps + parallel_overhead · parallel_steps)`, where the overhead
/// is the cost of head execution plus tree verification in units of one
/// auto-regressive forward. Ties go to the lowest threshold.
pub fn calibrate_gate(
    backbone: &Arc<Backbone>,
    heads: &Arc<HeadStack>,
    templates: &Arc<TemplateSet>,
    prompts: &[(String, Vec<TokenId>)],
    decode: &DecodeConfig,
    source: EntropySource,
    parallel_overhead: f64,
) -> Result<Calibration> {
    if !(parallel_overhead >= 0.0) {
        return Err(Error::config("gate.parallel_overhead must be ≥ 0"));
    }
    let k = match source {
        EntropySource::Hidden => backbone.config().d_model,
        EntropySource::Logits => backbone.config().vocab_size,
    };
    let mut points = Vec::new();
    for t in threshold_grid(k) {
        let gate = GateConfig::with_threshold(t, source);
        let a = Approach::parallel("calibration", heads.clone(), templates.clone(), gate);
        let run = run_bench(backbone, &[a], prompts, decode)?;
        let steps = run.records.len();
        let par = run.records.iter().filter(|r| r.trace.route == Route::Parallel).count();
        let tokens: usize = run.records.iter().map(|r| r.trace.tokens).sum();
        let cost = steps as f64 + parallel_overhead * par as f64;
        points.push(CalibrationPoint {
            threshold: t,
            tokens_per_forward: if steps == 0 { 0.0 } else { tokens as f64 / steps as f64 },
            parallel_fraction: if steps == 0 { 0.0 } else { par as f64 / steps as f64 },
            objective: if cost == 0.0 { 0.0 } else { tokens as f64 / cost },
        });
    }
    let best = points
        .iter()
        .fold(None::<&CalibrationPoint>, |best, p| match best {
            Some(b) if b.objective >= p.objective => Some(b),
            _ => Some(p),
        })
        .expect("grid is non-empty");
    Ok(Calibration {
        threshold: best.threshold,
        source,
        parallel_overhead,
        points,
    })
}

pub fn write_traces(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<Vec<TraceRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::from_io(e, path))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Writes `report.json`, `table1.csv`, `fig3.csv`, `table2.csv` and, when given, `fig5.csv`.
pub fn write_reports(dir: &Path, report: &BenchReport, topk: &[(&str, &TopKTable)]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.json"), report.to_json())?;
    std::fs::write(dir.join("table1.csv"), report.table1_csv())?;
    std::fs::write(dir.join("fig3.csv"), report.fig3_csv())?;
    std::fs::write(dir.join("table2.csv"), report.table2_csv())?;
    std::fs::write(dir.join("fig5.csv"), fig5_csv(topk))?;
    Ok(())
}
