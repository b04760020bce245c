//! Command-line harness: workload generation, pipeline runs, threshold
//! sweeps and baseline comparisons, all emitting the CSV schema in
//! [`crate::metrics::CSV_HEADER`].

use std::fmt;
use std::fs::File;
use std::io::{self, Write};
use std::ops::Range;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::anchor::compute_anchor;
use crate::baselines::{select_diff_aware, select_topcdf, select_topk, streaming_mask, Granularity};
use crate::format::{read_workload, write_outputs, write_workload};
use crate::mask::SelectionMask;
use crate::metrics::{output_error, recall, sparsity, CsvRow, EvalReport};
use crate::oracle::{dense_attention, dense_probs, dense_scores, masked_attention, AttentionOutput};
use crate::sparse::{sparse_attention, union_mask};
use crate::stripe::{identify_stripes_with, AnchorMode};
use crate::tensor::{BlockConfig, HeadWorkload, Matrix, QueryPooling};
use crate::workloads::{gen_random, PlantedStripes, SinkLocal};

/// Largest sequence length for which dense oracle maps are materialized.
pub const ORACLE_MAX_N: usize = 8192;

pub const THREADS_ENV: &str = "ANCHOR_ATTN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "anchor-bench", version, about = "Stripe-sparse prefill attention harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic workload file.
    Gen(GenArgs),
    /// Run the sparse pipeline on every head of a workload.
    Run(RunArgs),
    /// Sweep theta and report recall/sparsity per head.
    Sweep(SweepArgs),
    /// Compare selection baselines across granularities.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GenKind {
    Random,
    Sink,
    Planted,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub kind: GenKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub d: usize,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Sink logit bonus (sink and planted kinds).
    #[arg(long)]
    pub sink_strength: Option<f64>,
    /// Local window in tokens (sink and planted kinds).
    #[arg(long, default_value_t = 128)]
    pub window: usize,
    /// Comma-separated planted key columns.
    #[arg(long, value_delimiter = ',')]
    pub stripes: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    pub mass_fraction: f64,
    /// Query rows where planted stripes vanish, as `start..end`.
    #[arg(long, value_parser = parse_range)]
    pub vanish: Option<Range<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PoolingArg {
    Block,
    Group,
}

#[derive(Debug, Clone, Args)]
pub struct BlockArgs {
    #[arg(long, default_value_t = 128)]
    pub b_q: usize,
    #[arg(long, default_value_t = 128)]
    pub b_kv: usize,
    #[arg(long, default_value_t = 16)]
    pub step: usize,
    #[arg(long, value_enum, default_value_t = PoolingArg::Block)]
    pub pooling: PoolingArg,
}

impl BlockArgs {
    fn config(&self, theta: f64) -> anyhow::Result<BlockConfig> {
        let pooling = match self.pooling {
            PoolingArg::Block => QueryPooling::PerBlock,
            PoolingArg::Group => QueryPooling::PerGroup,
        };
        Ok(BlockConfig::new(self.b_q, self.b_kv, self.step, theta)?.with_pooling(pooling))
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub block: BlockArgs,
    #[arg(long, default_value_t = 12.0, allow_negative_numbers = true)]
    pub theta: f64,
    /// Also compute dense attention and fill the error columns.
    #[arg(long)]
    pub oracle: bool,
    /// Compare against a zero anchor instead of the computed one.
    #[arg(long)]
    pub no_anchor: bool,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Write the sparse outputs (AQKO format).
    #[arg(long)]
    pub out_tensor: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[command(flatten)]
    pub block: BlockArgs,
    /// Comma-separated theta values.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub thetas: Vec<f64>,
    /// Inclusive range `start:end:step`.
    #[arg(long, allow_hyphen_values = true)]
    pub theta_range: Option<String>,
    #[arg(long)]
    pub no_anchor: bool,
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Selection scheme: `topk:K`, `topcdf:GAMMA`, `diff:THETA` or
    /// `streaming:INIT,LOCAL`. Repeatable.
    #[arg(long = "scheme", required = true)]
    pub schemes: Vec<Scheme>,
    /// Tile granularity `ROWSxCOLS`. Repeatable; defaults to 128x1 and
    /// 128x128.
    #[arg(long = "granularity", value_parser = parse_granularity)]
    pub granularities: Vec<Granularity>,
    #[arg(long)]
    pub oracle: bool,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheme {
    TopK(usize),
    TopCdf(f64),
    Diff(f64),
    Streaming { init: usize, local: usize },
}

impl FromStr for Scheme {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        let (name, arg) = s
            .split_once(':')
            .ok_or_else(|| anyhow!("scheme `{s}` needs the form name:param"))?;
        Ok(match name {
            "topk" => Scheme::TopK(arg.parse().context("topk expects an integer k")?),
            "topcdf" => Scheme::TopCdf(arg.parse().context("topcdf expects a real gamma")?),
            "diff" => Scheme::Diff(arg.parse().context("diff expects a real theta")?),
            "streaming" => {
                let (i, l) = arg
                    .split_once(',')
                    .ok_or_else(|| anyhow!("streaming expects INIT,LOCAL"))?;
                Scheme::Streaming {
                    init: i.trim().parse()?,
                    local: l.trim().parse()?,
                }
            }
            other => bail!("unknown scheme `{other}`"),
        })
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::TopK(k) => write!(f, "topk:{k}"),
            Scheme::TopCdf(g) => write!(f, "topcdf:{g}"),
            Scheme::Diff(t) => write!(f, "diff:{t}"),
            Scheme::Streaming { init, local } => write!(f, "streaming:{init},{local}"),
        }
    }
}

fn parse_range(s: &str) -> Result<Range<usize>, String> {
    let (a, b) = s.split_once("..").ok_or("expected start..end")?;
    let a = a.parse().map_err(|e| format!("{e}"))?;
    let b = b.parse().map_err(|e| format!("{e}"))?;
    Ok(a..b)
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    let (r, c) = s.split_once('x').ok_or("expected ROWSxCOLS")?;
    let r = r.parse().map_err(|e| format!("{e}"))?;
    let c = c.parse().map_err(|e| format!("{e}"))?;
    Granularity::new(r, c).map_err(|e| e.to_string())
}

/// Parses `start:end:step` into an inclusive list.
pub fn parse_theta_range(s: &str) -> anyhow::Result<Vec<f64>> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad theta range `{s}`"))?;
    let [start, end, step] = parts[..] else {
        bail!("theta range must be start:end:step");
    };
    if step.is_nan() || step <= 0.0 || !start.is_finite() || !end.is_finite() {
        bail!("theta range needs finite bounds and a positive step");
    }
    let count = ((end - start) / step + 1e-9).floor();
    if count < 0.0 {
        bail!("theta range end lies before start");
    }
    Ok((0..=count as usize).map(|i| start + i as f64 * step).collect())
}

/// Applies `ANCHOR_ATTN_THREADS` to the global thread pool, if set.
pub fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let threads: usize = v
            .parse()
            .with_context(|| format!("{THREADS_ENV} must be a positive integer"))?;
        if threads == 0 {
            bail!("{THREADS_ENV} must be a positive integer");
        }
        // Fails only if a pool already exists, in which case it is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    Ok(())
}

pub fn execute(cli: Cli, stdout: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Gen(args) => {
            let summary = cmd_gen(&args)?;
            writeln!(stdout, "{summary}")?;
        }
        Command::Run(args) => {
            let rows = cmd_run(&args)?;
            emit(&rows, args.csv.as_ref(), stdout)?;
        }
        Command::Sweep(args) => {
            let rows = cmd_sweep(&args)?;
            emit(&rows, args.csv.as_ref(), stdout)?;
        }
        Command::Compare(args) => {
            let rows = cmd_compare(&args)?;
            emit(&rows, args.csv.as_ref(), stdout)?;
        }
    }
    Ok(())
}

fn emit(rows: &[CsvRow], path: Option<&PathBuf>, stdout: &mut dyn Write) -> anyhow::Result<()> {
    match path {
        Some(p) => {
            let file = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write_csv(rows, file)
        }
        None => write_csv(rows, stdout),
    }
}

pub fn write_csv<W: Write>(rows: &[CsvRow], out: W) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(crate::metrics::CSV_HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(input: impl io::Read) -> anyhow::Result<Vec<CsvRecord>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Parsed form of [`CsvRow`].
#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
pub struct CsvRecord {
    pub head_id: String,
    pub theta_or_param: String,
    pub sparsity: f64,
    pub recall: Option<f64>,
    pub max_abs_err: Option<f64>,
    pub mean_abs_err: Option<f64>,
    pub computed_positions: u64,
}

pub fn cmd_gen(args: &GenArgs) -> anyhow::Result<String> {
    if args.heads == 0 {
        bail!("--heads must be >= 1");
    }
    let heads: Vec<HeadWorkload> = match args.kind {
        GenKind::Random => gen_random(args.n, args.d, args.heads, args.seed)?,
        GenKind::Sink => (0..args.heads as u64)
            .map(|h| {
                let mut s = SinkLocal::new(
                    args.n,
                    args.d,
                    args.sink_strength.unwrap_or(8.0),
                    args.window,
                    args.seed.wrapping_add(h),
                );
                s.offset_block = 128.min(args.n.max(1));
                s.generate()
            })
            .collect::<Result<_, _>>()?,
        GenKind::Planted => {
            if args.stripes.is_empty() {
                bail!("--kind planted needs --stripes");
            }
            (0..args.heads as u64)
                .map(|h| {
                    let mut p = PlantedStripes::new(
                        args.n,
                        args.d,
                        args.stripes.clone(),
                        args.mass_fraction,
                        args.seed.wrapping_add(h),
                    );
                    p.window = args.window;
                    p.vanish = args.vanish.clone();
                    if let Some(s) = args.sink_strength {
                        p.sink_strength = s;
                    }
                    p.generate()
                })
                .collect::<Result<_, _>>()?
        }
    };
    write_workload(&args.out, &heads)?;
    Ok(format!(
        "wrote {} head(s), n={}, d={} to {}",
        heads.len(),
        args.n,
        args.d,
        args.out.display()
    ))
}

/// Oracle material for one head, computed once and shared across parameter
/// values.
struct HeadOracle {
    probs: Option<Matrix>,
    dense: Option<AttentionOutput>,
}

impl HeadOracle {
    fn new(w: &HeadWorkload, want_dense: bool) -> anyhow::Result<Self> {
        let fits = w.n() <= ORACLE_MAX_N;
        if want_dense && !fits {
            bail!("--oracle is limited to n <= {ORACLE_MAX_N}, workload has n = {}", w.n());
        }
        Ok(Self {
            probs: if fits { Some(dense_probs(&w.q, &w.k)?) } else { None },
            dense: if want_dense { Some(dense_attention(w)?) } else { None },
        })
    }

    fn report(&self, mask: &SelectionMask, computed: u64, out: Option<&AttentionOutput>) -> anyhow::Result<EvalReport> {
        let recall = self.probs.as_ref().map(|p| recall(mask, p)).transpose()?;
        let errs = match (&self.dense, out) {
            (Some(d), Some(o)) => Some(output_error(o, d)?),
            _ => None,
        };
        Ok(EvalReport {
            recall,
            sparsity: 1.0 - computed as f64 / mask.causal_count() as f64,
            max_abs_err: errs.map(|e| e.0),
            mean_abs_err: errs.map(|e| e.1),
            computed_positions: computed,
        })
    }
}

fn anchor_mode(no_anchor: bool) -> AnchorMode {
    if no_anchor {
        AnchorMode::Zero
    } else {
        AnchorMode::Computed
    }
}

/// Runs the pipeline for every theta on one head, reusing the anchor pass.
fn sweep_head(
    w: &HeadWorkload,
    block: &BlockArgs,
    thetas: &[f64],
    mode: AnchorMode,
    oracle: bool,
) -> anyhow::Result<Vec<(EvalReport, AttentionOutput)>> {
    let base = block.config(thetas[0])?;
    let state = compute_anchor(w, &base);
    let reference = HeadOracle::new(w, oracle)?;
    thetas
        .iter()
        .map(|&theta| {
            let cfg = block.config(theta)?;
            let idx = identify_stripes_with(w, &state, &cfg, mode)?;
            let (out, stats) = sparse_attention(w, &state, &idx, &cfg)?;
            let mask = union_mask(&state.coverage, &idx);
            let report = reference.report(&mask, stats.computed_positions, Some(&out))?;
            Ok((report, out))
        })
        .collect()
}

fn format_param(x: f64) -> String {
    format!("{x}")
}

/// Per-head rows ordered by (head, param), followed by one `mean` row per
/// param.
fn tabulate(params: &[String], per_head: &[Vec<EvalReport>]) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    for (h, reports) in per_head.iter().enumerate() {
        for (p, r) in params.iter().zip(reports) {
            rows.push(r.csv_row(h.to_string(), p.clone()));
        }
    }
    for (i, p) in params.iter().enumerate() {
        let column: Vec<EvalReport> = per_head.iter().map(|r| r[i]).collect();
        if let Some(m) = EvalReport::mean(&column) {
            rows.push(m.csv_row("mean", p.clone()));
        }
    }
    rows
}

pub fn cmd_run(args: &RunArgs) -> anyhow::Result<Vec<CsvRow>> {
    if !args.theta.is_finite() {
        bail!("--theta must be finite");
    }
    args.block.config(args.theta)?;
    let heads = read_workload(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let results: Vec<(EvalReport, AttentionOutput)> = heads
        .par_iter()
        .map(|w| {
            sweep_head(w, &args.block, &[args.theta], anchor_mode(args.no_anchor), args.oracle)
                .map(|mut v| v.remove(0))
        })
        .collect::<anyhow::Result<_>>()?;
    if let Some(path) = &args.out_tensor {
        let outs: Vec<Matrix> = results.iter().map(|(_, o)| o.o.clone()).collect();
        write_outputs(path, &outs)?;
    }
    let per_head: Vec<Vec<EvalReport>> = results.into_iter().map(|(r, _)| vec![r]).collect();
    Ok(tabulate(&[format_param(args.theta)], &per_head))
}

pub fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<Vec<CsvRow>> {
    let mut thetas = args.thetas.clone();
    if let Some(r) = &args.theta_range {
        thetas.extend(parse_theta_range(r)?);
    }
    if thetas.is_empty() {
        bail!("give at least one theta via --thetas or --theta-range");
    }
    if let Some(t) = thetas.iter().find(|t| !t.is_finite()) {
        bail!("theta {t} is not finite");
    }
    args.block.config(thetas[0])?;
    let heads = read_workload(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let per_head: Vec<Vec<EvalReport>> = heads
        .par_iter()
        .map(|w| {
            sweep_head(w, &args.block, &thetas, anchor_mode(args.no_anchor), args.oracle)
                .map(|v| v.into_iter().map(|(r, _)| r).collect())
        })
        .collect::<anyhow::Result<_>>()?;
    let params: Vec<String> = thetas.iter().map(|&t| format_param(t)).collect();
    Ok(tabulate(&params, &per_head))
}

/// Builds the selection mask of one baseline on one head.
pub fn baseline_mask(scheme: Scheme, g: Granularity, probs: &Matrix, scores: Option<&Matrix>) -> anyhow::Result<SelectionMask> {
    Ok(match scheme {
        Scheme::TopK(k) => select_topk(probs, k, g)?,
        Scheme::TopCdf(gamma) => select_topcdf(probs, gamma, g)?,
        Scheme::Diff(theta) => {
            let s = scores.ok_or_else(|| anyhow!("diff scheme needs the score map"))?;
            select_diff_aware(s, theta, g)?
        }
        Scheme::Streaming { init, local } => streaming_mask(probs.rows(), init, local)?,
    })
}

pub fn cmd_compare(args: &CompareArgs) -> anyhow::Result<Vec<CsvRow>> {
    let grans = if args.granularities.is_empty() {
        vec![Granularity::stripe(128), Granularity::block(128)]
    } else {
        args.granularities.clone()
    };
    // Streaming is token-level, so it is reported once regardless of
    // granularity.
    let mut params: Vec<(Scheme, Option<Granularity>)> = Vec::new();
    for &s in &args.schemes {
        match s {
            Scheme::Streaming { .. } => params.push((s, None)),
            _ => params.extend(grans.iter().map(|&g| (s, Some(g)))),
        }
    }
    let heads = read_workload(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    if let Some(w) = heads.iter().find(|w| w.n() > ORACLE_MAX_N) {
        bail!("compare needs oracle maps; n = {} exceeds {ORACLE_MAX_N}", w.n());
    }
    let needs_scores = params.iter().any(|(s, _)| matches!(s, Scheme::Diff(_)));
    let per_head: Vec<Vec<EvalReport>> = heads
        .par_iter()
        .map(|w| {
            let reference = HeadOracle::new(w, args.oracle)?;
            let probs = reference.probs.as_ref().expect("n checked above");
            let scores = if needs_scores { Some(dense_scores(&w.q, &w.k)?) } else { None };
            params
                .iter()
                .map(|&(s, g)| {
                    let mask = baseline_mask(s, g.unwrap_or(Granularity::token()), probs, scores.as_ref())?;
                    let out = if args.oracle && mask.first_empty_row().is_none() {
                        Some(masked_attention(w, &mask)?)
                    } else {
                        None
                    };
                    let mut report = reference.report(&mask, mask.count(), out.as_ref())?;
                    report.sparsity = sparsity(&mask);
                    Ok(report)
                })
                .collect::<anyhow::Result<Vec<_>>>()
        })
        .collect::<anyhow::Result<_>>()?;
    let labels: Vec<String> = params
        .iter()
        .map(|(s, g)| match g {
            Some(g) => format!("{s}@{g}"),
            None => s.to_string(),
        })
        .collect();
    Ok(tabulate(&labels, &per_head))
}
