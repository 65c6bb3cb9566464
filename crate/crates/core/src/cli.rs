//! The `mrckg` command line.
//!
//! Exit codes: 0 success, 1 validation failure (invalid benchmark, failed
//! self-check), 2 fault or usage error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backbone::load_checkpoint;
use crate::bench::{
    arrival_order, arrival_rank, build_sequence, ingest_features, load_benchmark, synth_base, synth_features,
    write_benchmark, BaseKG, BuildConfig, Strategy, SynthBaseConfig, SynthFeatureConfig,
};
use crate::eval::{classify_errors, emit_report, evaluate_model, ErrorThresholds, MetricMatrix, ReportFormat};
use crate::graph::{validate_sequence, ModalityStore};
use crate::trainer::{checkpoint_dir, grad_suite, Ablation, Mode, TrainConfig, Trainer};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "mrckg", version, about = "Continual multimodal knowledge-graph reasoning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Benchmark construction.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Train a model over every snapshot of a benchmark.
    Train(TrainArgs),
    /// Re-evaluate checkpoints of a run and classify errors.
    Eval(EvalArgs),
    /// Write report files for a run.
    Report(ReportArgs),
    /// Internal consistency checks.
    #[command(subcommand)]
    Selfcheck(SelfcheckCommand),
}

#[derive(Subcommand, Debug)]
pub enum BenchCommand {
    /// Partition a static graph into an evolving snapshot sequence.
    Build(BuildArgs),
    /// Write a synthetic base graph (`base.tsv`, `communities.tsv`).
    SynthBase(SynthBaseArgs),
}

#[derive(Args, Debug)]
pub struct BuildArgs {
    /// Base triples, `head<TAB>relation<TAB>tail`.
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long, requires = "features_text", conflicts_with = "synth")]
    pub features_visual: Option<PathBuf>,
    #[arg(long, requires = "features_visual", conflicts_with = "synth")]
    pub features_text: Option<PathBuf>,
    #[arg(long)]
    pub features_visual_pooled: Option<PathBuf>,
    #[arg(long)]
    pub features_text_pooled: Option<PathBuf>,
    /// Generate community-correlated features.
    #[arg(long)]
    pub synth: bool,
    /// `entity<TAB>community` file used by --synth; arrival blocks otherwise.
    #[arg(long, requires = "synth")]
    pub communities: Option<PathBuf>,
    #[arg(long, default_value = "entity")]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 5)]
    pub snapshots: usize,
    #[arg(long, default_value_t = 0.15)]
    pub bridge_ratio: f64,
    #[arg(long, default_value = "3:1:1", value_parser = parse_split)]
    pub split: [usize; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub d_v: usize,
    #[arg(long, default_value_t = 16)]
    pub d_w: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthBaseArgs {
    #[arg(long, default_value_t = 300)]
    pub entities: usize,
    #[arg(long, default_value_t = 12)]
    pub relations: usize,
    #[arg(long, default_value_t = 6)]
    pub communities: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub bench: PathBuf,
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Comma-separated or repeated.
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<Ablation>,
    /// JSON training configuration; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Last snapshot to evaluate (defaults to the last checkpoint).
    #[arg(long)]
    pub upto: Option<usize>,
    /// Benchmark directory, if it moved since training.
    #[arg(long)]
    pub bench: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "json")]
    pub format: ReportFormat,
}

#[derive(Subcommand, Debug)]
pub enum SelfcheckCommand {
    /// Finite-difference check of every loss term on a toy model.
    Grad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_split(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(format!("expected a:b:c, got '{s}'"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|_| format!("bad split component '{p}'"))?;
        if *o == 0 {
            return Err("split components must be positive".into());
        }
    }
    Ok(out)
}

/// Recorded next to a run so `eval` can find its benchmark.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub bench: PathBuf,
}

/// Parses `argv` (including the program name) and runs it; returns the exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Validation(_) => 1,
                _ => 2,
            }
        }
    }
}

/// Entry point of the binary.
pub fn main_entry() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    run_cli(std::env::args_os())
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Bench(BenchCommand::Build(a)) => bench_build(&a),
        Command::Bench(BenchCommand::SynthBase(a)) => bench_synth_base(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Report(a) => {
            let r = emit_report(&a.run, a.format)?;
            if let Some(avg) = &r.avg {
                println!("avg_mrr {:.4} avg_hits10 {:.4}", avg.mrr, avg.hits10);
            }
            match r.bwt {
                Some(b) => println!("bwt {b:.4}"),
                None => println!("bwt null"),
            }
            if !r.complete {
                println!("(partial run)");
            }
            Ok(0)
        }
        Command::Selfcheck(SelfcheckCommand::Grad { seed }) => {
            let s = grad_suite(seed)?;
            let tol = 1e-4;
            for t in &s.terms {
                let mark = if t.max_rel_error < tol { "ok" } else { "FAIL" };
                println!(
                    "{:<12} max_rel_error {:.3e} ({} coords) {mark}",
                    t.term, t.max_rel_error, t.coordinates
                );
            }
            let worst = s.terms.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
            println!(
                "max rel error {worst:.3e} over {} entities, d={}, {:.2}s",
                s.entities, s.d, s.seconds
            );
            Ok(if s.passes(tol) { 0 } else { 1 })
        }
    }
}

fn read_communities(path: &Path, base: &BaseKG) -> Result<Vec<usize>> {
    let ids = base.entity_ids();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = vec![0usize; base.entity_count];
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut f = line.split('\t');
        let (Some(label), Some(c)) = (f.next(), f.next()) else {
            return Err(Error::parse(path, n + 1, "expected entity<TAB>community"));
        };
        let c: usize = c
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, n + 1, "community must be an integer"))?;
        match ids.get(label.trim()) {
            Some(&e) => out[e as usize] = c,
            None => log::warn!("{}:{}: entity '{label}' not in base", path.display(), n + 1),
        }
    }
    Ok(out)
}

/// Arrival blocks of 32 entities stand in for communities.
fn block_communities(base: &BaseKG, seed: u64) -> Vec<usize> {
    let rank = arrival_rank(&arrival_order(base, seed));
    rank.iter().map(|r| r / 32).collect()
}

fn bench_build(a: &BuildArgs) -> Result<i32> {
    let base = BaseKG::load_tsv(&a.base)?;
    let mut cfg = BuildConfig {
        snapshots: a.snapshots,
        strategy: a.strategy,
        bridge_ratio: a.bridge_ratio,
        split: a.split,
        seed: a.seed,
        ..BuildConfig::default()
    };
    let base_store = if a.synth {
        let fc = SynthFeatureConfig {
            d_v: a.d_v,
            d_w: a.d_w,
            ..SynthFeatureConfig::default()
        };
        let community = match &a.communities {
            Some(p) => read_communities(p, &base)?,
            None => block_communities(&base, a.seed),
        };
        cfg.features = Some(fc.clone());
        synth_features(&community, &fc, a.seed)?
    } else if let (Some(v), Some(t)) = (&a.features_visual, &a.features_text) {
        ingest_features(
            Some(v),
            Some(t),
            a.features_visual_pooled.as_deref(),
            a.features_text_pooled.as_deref(),
            a.d_v,
            a.d_w,
            base.entity_count,
            Some(&base.entity_ids()),
        )?
    } else {
        log::warn!("no features given: every entity is structure-only");
        ModalityStore::new(a.d_v, a.d_w)
    };
    let built = match build_sequence(&base, &cfg) {
        Ok(b) => b,
        Err(Error::Validation(n)) => {
            eprintln!("built sequence failed validation ({n} violations)");
            return Ok(1);
        }
        Err(e) => return Err(e),
    };
    let store = built.remap_store(&base_store)?;
    write_benchmark(&a.out, &built, &store, &base, &cfg)?;
    for (i, s) in built.sequence.snapshots().iter().enumerate() {
        println!(
            "S{i}: entities {} relations {} new triples {} bridges {} train/valid/test {}/{}/{}",
            s.entity_count,
            s.relation_count,
            s.delta_triples.len(),
            s.bridges.len(),
            s.train.len(),
            s.valid.len(),
            s.test.len()
        );
    }
    Ok(0)
}

fn bench_synth_base(a: &SynthBaseArgs) -> Result<i32> {
    let (base, community) = synth_base(&SynthBaseConfig {
        entities: a.entities,
        relations: a.relations,
        communities: a.communities,
        seed: a.seed,
        ..SynthBaseConfig::default()
    })?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut tsv = String::new();
    for t in &base.triples {
        tsv.push_str(&format!("e{}\tr{}\te{}\n", t.head, t.relation, t.tail));
    }
    let p = a.out.join("base.tsv");
    fs::write(&p, tsv).map_err(|e| Error::io(&p, e))?;
    let mut c = String::new();
    for (e, k) in community.iter().enumerate() {
        c.push_str(&format!("e{e}\t{k}\n"));
    }
    let p = a.out.join("communities.tsv");
    fs::write(&p, c).map_err(|e| Error::io(&p, e))?;
    println!("{} entities, {} triples", base.entity_count, base.triples.len());
    Ok(0)
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> Result<T> {
    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(p, e))
}

fn write_json<T: Serialize>(p: &Path, v: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Error::json(p, e))?;
    fs::write(p, s).map_err(|e| Error::io(p, e))
}

/// Loads a benchmark and adopts its feature dimensions into `cfg`.
fn open_bench(dir: &Path, cfg: &mut TrainConfig) -> Result<(crate::graph::SnapshotSequence, ModalityStore)> {
    let (seq, store) = load_benchmark(dir, (cfg.model.d_v, cfg.model.d_w))?;
    let report = validate_sequence(&seq);
    if !report.is_valid() {
        for v in &report.violations {
            eprintln!("{v}");
        }
        return Err(Error::Validation(report.violations.len()));
    }
    if (store.d_v(), store.d_w()) != (cfg.model.d_v, cfg.model.d_w) {
        log::info!(
            "feature dims ({}, {}) override the model config",
            store.d_v(),
            store.d_w()
        );
        cfg.model.d_v = store.d_v();
        cfg.model.d_w = store.d_w();
    }
    Ok((seq, store))
}

fn train(a: &TrainArgs) -> Result<i32> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = a.mode {
        cfg.mode = m;
    }
    if !a.ablate.is_empty() {
        cfg.ablations = a.ablate.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let (seq, store) = open_bench(&a.bench, &mut cfg)?;
    let trainer = Trainer::new(&seq, &store, cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let bench = fs::canonicalize(&a.bench).map_err(|e| Error::io(&a.bench, e))?;
    write_json(&a.out.join("run.json"), &RunManifest { bench })?;
    let out = trainer.run(Some(&a.out), None)?;
    for (i, s) in out.snapshots.iter().enumerate() {
        let row: Vec<String> = (0..=i)
            .map(|j| format!("{:.4}", out.matrix.get(i, j).map_or(f64::NAN, |c| c.mrr)))
            .collect();
        println!(
            "S{i}: best epoch {} valid MRR {:.4} | test MRR {}",
            s.best_epoch,
            s.best_valid_mrr,
            row.join(" ")
        );
    }
    Ok(0)
}

fn eval(a: &EvalArgs) -> Result<i32> {
    let mut cfg: TrainConfig = read_json(&a.run.join("config.json"))?;
    let bench = match &a.bench {
        Some(b) => b.clone(),
        None => read_json::<RunManifest>(&a.run.join("run.json"))?.bench,
    };
    let (seq, store) = open_bench(&bench, &mut cfg)?;
    let trainer = Trainer::new(&seq, &store, cfg)?;
    let available = (0..seq.len())
        .take_while(|&i| checkpoint_dir(&a.run, i).exists())
        .count();
    if available == 0 {
        return Err(Error::Contract(format!("no checkpoints under {}", a.run.display())));
    }
    let upto = a.upto.unwrap_or(available - 1);
    if upto >= seq.len() {
        return Err(Error::OutOfRange(format!(
            "--upto {upto} but the benchmark has {} snapshots",
            seq.len()
        )));
    }
    let mut models = Vec::with_capacity(upto + 1);
    for i in 0..=upto {
        let dir = checkpoint_dir(&a.run, i);
        models.push(if dir.exists() {
            Some(load_checkpoint(&dir)?.0)
        } else {
            None
        });
    }
    let mut matrix = MetricMatrix::new(seq.len());
    for (i, m) in models.iter().enumerate() {
        let Some(p) = m else {
            return Err(Error::Contract(format!("checkpoint of snapshot {i} is missing")));
        };
        matrix.push_row(evaluate_model(p, &seq, i, trainer.store())?)?;
    }
    write_json(&a.run.join("metrics.json"), &matrix)?;
    let current = models[upto].as_ref().expect("checked above");
    let history: Vec<Option<&_>> = models[..upto].iter().map(Option::as_ref).collect();
    let hist = classify_errors(
        current,
        &history,
        &seq,
        upto,
        trainer.store(),
        &ErrorThresholds::default(),
    )?;
    write_json(&a.run.join("errors.json"), &hist)?;
    for i in 0..=upto {
        let row: Vec<String> = (0..=i)
            .map(|j| format!("{:.4}", matrix.get(i, j).unwrap().mrr))
            .collect();
        println!("S{i}: {}", row.join(" "));
    }
    println!("top-1 errors {} of {} queries", hist.total_errors(), hist.total_queries);
    for (k, v) in &hist.counts {
        println!("  {k:?}: {v}");
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(run_cli(["mrckg", "--no-such-flag"]), 2);
        assert_eq!(run_cli(["mrckg", "train"]), 2);
        assert_eq!(run_cli(["mrckg", "--help"]), 0);
    }

    #[test]
    fn split_parser() {
        assert_eq!(parse_split("3:1:1").unwrap(), [3, 1, 1]);
        assert!(parse_split("3:1").is_err());
        assert!(parse_split("3:0:1").is_err());
    }
}
