// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end.
//!
//! Exit codes: 0 success, 1 validation failure, 2 runtime error, 64 usage.
//! Commands given `--out` write `results.json`, their own artifacts and an
//! `outputs.json` listing every file produced; the summary goes to stdout.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::align::{self, AlignmentPoint, PermutationTest};
use crate::grok::{self, GrokConfig, HeadType};
use crate::probe::{self, EvalOptions, HeadScore};
use crate::report::{OutputManifest, Results, OUTPUTS_FILE, RESULTS_FILE};
use crate::sae::{self, SaeConfig, SaeModel};
use crate::store::{
    head_file_name, load_bundle, read_json, validate_dir, write_actbin, write_bundle, write_json,
    ActivationBundle, HeadId, MANIFEST_FILE,
};
use crate::synth::{self, SynthConfig};
use crate::unsupervised::{self, head_seed, ProbeTrainConfig, PrototypeMode};
use crate::error::ActKind;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

pub const LOG_ENV: &str = "PROBE_LOG";
pub const MODELS_DIR: &str = "models";

#[derive(Debug, Parser)]
#[command(name = "invprobe", version, about = "Token-direction probes over activation bundles")]
struct Cli {
    /// Worker threads for per-head and per-seed work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a bundle directory; exits 1 on structural problems.
    Validate {
        bundle: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic bundle with known class directions.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score every head with a probe.
    Probe {
        #[command(subcommand)]
        method: ProbeCommand,
    },
    /// Train TopK sparse autoencoders and analyse their latents.
    Sae {
        #[command(subcommand)]
        action: SaeCommand,
    },
    /// Token/instance alignment per head.
    Align(AlignArgs),
    /// Modular-division transformer runs.
    Grok {
        #[command(subcommand)]
        action: GrokCommand,
    },
    /// Print a results directory as CSV or JSON.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct BundleArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Subtract the mean instance before scoring.
    #[arg(long)]
    center_instances: bool,
}

#[derive(Debug, Subcommand)]
enum ProbeCommand {
    /// Class-token directions, no training.
    Zeroshot(BundleArgs),
    /// Contrastive transform trained on class tokens.
    Unsupervised(UnsupervisedArgs),
}

#[derive(Debug, Args)]
struct UnsupervisedArgs {
    #[command(flatten)]
    io: BundleArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `frozen` or `tracking`.
    #[arg(long, value_parser = parse_prototypes)]
    prototypes: Option<PrototypeMode>,
}

#[derive(Debug, Args)]
struct SaeArgs {
    #[command(flatten)]
    io: BundleArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Load models saved by `sae train` (its `models/` directory) instead
    /// of training.
    #[arg(long)]
    models: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum SaeCommand {
    /// Train one SAE per head, score it and save the models.
    Train(SaeArgs),
    /// Score with trained (or loaded) SAEs.
    Classify(SaeArgs),
    /// Top latents shared between each class token and its instances.
    Overlap {
        #[command(flatten)]
        sae: SaeArgs,
        #[arg(long, default_value_t = 10)]
        ktop: usize,
    },
}

#[derive(Debug, Args)]
struct AlignArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Label shuffles per head for the gap test (0 skips it).
    #[arg(long, default_value_t = 200)]
    permutations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GrokArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// `linear_unembed` or `mlp_head`.
    #[arg(long, value_parser = parse_head_type)]
    head: Option<HeadType>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum GrokCommand {
    /// Train one model.
    Run {
        #[command(flatten)]
        args: GrokArgs,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model per seed and correlate probe accuracy with κ.
    Sweep {
        #[command(flatten)]
        args: GrokArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
    },
}

fn parse_prototypes(s: &str) -> Result<PrototypeMode, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown prototype mode {s:?}"))
}

fn parse_head_type(s: &str) -> Result<HeadType, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown head type {s:?}"))
}

/// Parses `argv` (program name first) and runs the command, writing to the
/// process's stdout and stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    dispatch_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn dispatch_with<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn"))
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build() {
        Ok(pool) => pool,
        Err(e) => {
            let _ = writeln!(err, "error: cannot start worker pool: {e}");
            return EXIT_RUNTIME;
        }
    };
    let mut buf = Vec::new();
    let outcome = pool.install(|| run(cli.command, &mut buf));
    let _ = out.write_all(&buf);
    match outcome {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

/// An output directory that remembers what was written into it.
struct OutDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutDir {
    fn create(root: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn subdir(&self, rel: &str) -> anyhow::Result<PathBuf> {
        let p = self.path(rel);
        fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok(p)
    }

    fn record(&mut self, rel: impl Into<String>) {
        self.files.push(rel.into());
    }

    fn text(&mut self, rel: &str, text: &str) -> anyhow::Result<()> {
        let p = self.path(rel);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        self.record(rel);
        Ok(())
    }

    fn json<T: serde::Serialize>(&mut self, rel: &str, value: &T) -> anyhow::Result<()> {
        write_json(value, self.path(rel))?;
        self.record(rel);
        Ok(())
    }

    fn finish(mut self, command: &str, results: &Results) -> anyhow::Result<()> {
        results.write(&self.root)?;
        self.record(RESULTS_FILE);
        let manifest = OutputManifest {
            command: command.to_string(),
            files: self.files,
        };
        write_json(&manifest, self.root.join(OUTPUTS_FILE))?;
        Ok(())
    }
}

/// Writes results (and the collected artifacts) under `out` when given and
/// prints the summary; without `out` the full results go to stdout.
fn emit(
    out_dir: Option<OutDir>,
    command: &str,
    results: &Results,
    stdout: &mut dyn Write,
) -> anyhow::Result<()> {
    match out_dir {
        Some(dir) => {
            dir.finish(command, results)?;
            writeln!(stdout, "{}", serde_json::to_string(&results.summary)?)?;
        }
        None => write!(stdout, "{}", results.to_json())?,
    }
    Ok(())
}

fn open_out(out: &Option<PathBuf>) -> anyhow::Result<Option<OutDir>> {
    out.as_deref().map(OutDir::create).transpose()
}

fn load_config<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> anyhow::Result<T> {
    match path {
        Some(p) => read_json(p).with_context(|| format!("config {}", p.display())),
        None => Ok(T::default()),
    }
}

fn load(path: &Path) -> anyhow::Result<ActivationBundle> {
    load_bundle(path).with_context(|| format!("bundle {}", path.display()))
}

fn stem(id: HeadId) -> String {
    format!("L{}_H{}", id.layer, id.head)
}

fn run(command: Command, stdout: &mut dyn Write) -> anyhow::Result<i32> {
    match command {
        Command::Validate { bundle, out } => validate(&bundle, &out, stdout),
        Command::Synth { config, out, seed } => synth_cmd(&config, &out, seed, stdout),
        Command::Probe { method } => match method {
            ProbeCommand::Zeroshot(io) => zeroshot(&io, stdout),
            ProbeCommand::Unsupervised(args) => unsupervised_cmd(&args, stdout),
        },
        Command::Sae { action } => sae_cmd(action, stdout),
        Command::Align(args) => align_cmd(&args, stdout),
        Command::Grok { action } => grok_cmd(action, stdout),
        Command::Report { input, format } => {
            let results = Results::read(&input)
                .with_context(|| format!("no readable {RESULTS_FILE} in {}", input.display()))?;
            match format {
                Format::Csv => write!(stdout, "{}", results.to_csv())?,
                Format::Json => write!(stdout, "{}", results.to_json())?,
            }
            Ok(EXIT_OK)
        }
    }
}

fn validate(bundle: &Path, out: &Option<PathBuf>, stdout: &mut dyn Write) -> anyhow::Result<i32> {
    let report = validate_dir(bundle);
    let mut results = Results::new(
        "validate",
        &["layer", "head", "kind", "rows", "min_norm", "mean_norm", "max_norm"],
    );
    for s in &report.head_stats {
        results.push(vec![
            json!(s.layer),
            json!(s.head),
            json!(s.kind),
            json!(s.rows),
            json!(s.min_norm),
            json!(s.mean_norm),
            json!(s.max_norm),
        ]);
    }
    let structural = report.has_structural();
    results.summary = json!({
        "valid": !structural,
        "findings": report.findings,
        "nan_count": report.nan_count,
        "class_balance": report.class_balance,
    });
    for f in &report.findings {
        let tag = if f.is_structural() { "error" } else { "warning" };
        writeln!(stdout, "{tag}: {}", serde_json::to_string(f)?)?;
    }
    let mut dir = open_out(out)?;
    if let Some(d) = dir.as_mut() {
        d.json("validation.json", &report)?;
    }
    emit(dir, "validate", &results, stdout)?;
    Ok(if structural { EXIT_INVALID } else { EXIT_OK })
}

fn synth_cmd(
    config: &Path,
    out: &Path,
    seed: Option<u64>,
    stdout: &mut dyn Write,
) -> anyhow::Result<i32> {
    let mut cfg: SynthConfig =
        read_json(config).with_context(|| format!("config {}", config.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.check()?;
    let directions = synth::gen_directions(&cfg)?;
    let bundle = synth::gen_instances(&cfg, &directions)?;
    let mut dir = OutDir::create(out)?;
    write_bundle(&bundle, out)?;
    dir.record(MANIFEST_FILE);
    for id in bundle.head_ids() {
        dir.record(head_file_name(id, ActKind::Class));
        dir.record(head_file_name(id, ActKind::Instance));
    }
    write_actbin(&directions, dir.path("synth_directions.actbin"))?;
    dir.record("synth_directions.actbin");
    dir.json("synth_config.json", &cfg)?;

    let mut results = Results::new("synth", &["layer", "head", "class_rows", "instance_rows", "dim"]);
    for id in bundle.head_ids() {
        results.push(vec![
            json!(id.layer),
            json!(id.head),
            json!(bundle.class_acts(id)?.rows()),
            json!(bundle.instance_acts(id)?.rows()),
            json!(bundle.head_dim()),
        ]);
    }
    results.summary = json!({
        "classes": bundle.n_classes(),
        "instances": bundle.n_instances(),
        "heads": bundle.head_ids().len(),
        "dim": bundle.head_dim(),
        "seed": cfg.seed,
    });
    emit(Some(dir), "synth", &results, stdout)?;
    Ok(EXIT_OK)
}

fn eval_options(io: &BundleArgs) -> EvalOptions {
    EvalOptions {
        center_instances: io.center_instances,
    }
}

/// Per-head scores as a results table; the summary carries the best head.
pub fn score_results(kind: &str, scores: &[HeadScore]) -> Results {
    let k = scores.first().map_or(0, |s| s.per_class_accuracy.len());
    let class_cols: Vec<String> = (0..k).map(|c| format!("class_{c}")).collect();
    let mut cols = vec!["layer", "head", "method", "accuracy", "n_correct", "n_eval"];
    cols.extend(class_cols.iter().map(String::as_str));
    let mut results = Results::new(kind, &cols);
    for s in scores {
        let mut row = vec![
            json!(s.layer),
            json!(s.head),
            json!(s.method),
            json!(s.accuracy),
            json!(s.n_correct),
            json!(s.n_eval),
        ];
        row.extend(s.per_class_accuracy.iter().map(|a| json!(a)));
        results.push(row);
    }
    let mean = scores.iter().map(|s| s.accuracy).sum::<f64>() / scores.len().max(1) as f64;
    results.summary = match scores.first() {
        Some(best) => json!({
            "method": best.method,
            "accuracy": best.accuracy,
            "best_layer": best.layer,
            "best_head": best.head,
            "mean_accuracy": mean,
            "heads": scores.len(),
        }),
        None => json!({ "heads": 0 }),
    };
    results
}

fn zeroshot(io: &BundleArgs, stdout: &mut dyn Write) -> anyhow::Result<i32> {
    let bundle = load(&io.bundle)?;
    let scores = probe::zeroshot_scores(&bundle, eval_options(io))?;
    let results = score_results("probe_zeroshot", &scores);
    let mut dir = open_out(&io.out)?;
    if let Some(d) = dir.as_mut() {
        d.text("scores.csv", &probe::scores_csv(&scores))?;
    }
    emit(dir, "probe zeroshot", &results, stdout)?;
    Ok(EXIT_OK)
}

fn max_off_diagonal(g: &crate::numkit::Matrix) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            if i != j {
                best = best.max(g.get(i, j));
            }
        }
    }
    best
}

fn unsupervised_cmd(args: &UnsupervisedArgs, stdout: &mut dyn Write) -> anyhow::Result<i32> {
    let mut cfg: ProbeTrainConfig = load_config(&args.config)?;
    if let Some(v) = args.tau {
        cfg.temperature = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.prototypes {
        cfg.prototypes = v;
    }
    let bundle = load(&args.io.bundle)?;
    let (scores, models) = unsupervised::unsupervised_scores(&bundle, &cfg, eval_options(&args.io))?;
    let mut results = score_results("probe_unsupervised", &scores);
    let mut gram_max = BTreeMap::new();
    for (&id, model) in &models {
        gram_max.insert(stem(id), max_off_diagonal(&model.token_gram(bundle.class_acts(id)?)?));
    }
    if let Value::Object(map) = &mut results.summary {
        map.insert("config".into(), json!(cfg));
        map.insert("max_token_gram_off_diagonal".into(), json!(gram_max));
    }
    let mut dir = open_out(&args.io.out)?;
    if let Some(d) = dir.as_mut() {
        d.text("scores.csv", &probe::scores_csv(&scores))?;
        let models_dir = d.subdir(MODELS_DIR)?;
        for (&id, model) in &models {
            for f in model.save(&models_dir, &stem(id))? {
                d.record(format!("{MODELS_DIR}/{f}"));
            }
        }
    }
    emit(dir, "probe unsupervised", &results, stdout)?;
    Ok(EXIT_OK)
}

fn sae_config(args: &SaeArgs) -> anyhow::Result<SaeConfig> {
    let mut cfg: SaeConfig = load_config(&args.config)?;
    if args.m.is_some() {
        cfg.m = args.m;
    }
    if let Some(v) = args.k {
        cfg.k = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if args.batch_size.is_some() {
        cfg.batch_size = args.batch_size;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    Ok(cfg)
}

/// Loads saved models or trains one per head with per-head seeds.
fn sae_models(
    bundle: &ActivationBundle,
    args: &SaeArgs,
    cfg: &SaeConfig,
) -> anyhow::Result<BTreeMap<HeadId, SaeModel>> {
    use rayon::prelude::*;
    if let Some(dir) = &args.models {
        return bundle
            .head_ids()
            .into_iter()
            .map(|id| {
                let m = SaeModel::load(dir, &stem(id))
                    .with_context(|| format!("SAE model {} in {}", stem(id), dir.display()))?;
                if m.d() != bundle.head_dim() {
                    bail!("SAE model {} has input dim {}, bundle has {}", stem(id), m.d(), bundle.head_dim());
                }
                Ok((id, m))
            })
            .collect();
    }
    let trained = bundle
        .head_ids()
        .par_iter()
        .map(|&id| {
            let head_cfg = SaeConfig {
                seed: head_seed(cfg.seed, id),
                ..*cfg
            };
            Ok((id, sae::train_sae(bundle.instance_acts(id)?, &head_cfg)?))
        })
        .collect::<crate::Result<Vec<_>>>()?;
    Ok(trained.into_iter().collect())
}

fn save_models(
    dir: &mut OutDir,
    models: &BTreeMap<HeadId, SaeModel>,
) -> anyhow::Result<()> {
    let models_dir = dir.subdir(MODELS_DIR)?;
    for (&id, model) in models {
        for f in model.save(&models_dir, &stem(id))? {
            dir.record(format!("{MODELS_DIR}/{f}"));
        }
    }
    Ok(())
}

fn sae_cmd(action: SaeCommand, stdout: &mut dyn Write) -> anyhow::Result<i32> {
    match action {
        SaeCommand::Train(args) => {
            let cfg = sae_config(&args)?;
            let bundle = load(&args.io.bundle)?;
            let models = sae_models(&bundle, &args, &cfg)?;
            let mut results = Results::new(
                "sae_train",
                &["layer", "head", "m", "k", "final_loss", "dead_latents"],
            );
            for (id, m) in &models {
                results.push(vec![
                    json!(id.layer),
                    json!(id.head),
                    json!(m.m()),
                    json!(m.k),
                    json!(m.train_log.last()),
                    json!(m.dead_latents.len()),
                ]);
            }
            results.summary = json!({ "config": cfg, "heads": models.len() });
            let mut dir = open_out(&args.io.out)?;
            if let Some(d) = dir.as_mut() {
                save_models(d, &models)?;
            }
            emit(dir, "sae train", &results, stdout)?;
        }
        SaeCommand::Classify(args) => {
            let cfg = sae_config(&args)?;
            let bundle = load(&args.io.bundle)?;
            let models = sae_models(&bundle, &args, &cfg)?;
            let scores = probe::per_head_accuracy(
                &bundle,
                probe::Method::Sae,
                eval_options(&args.io),
                |id, c, _| models[&id].fitted_head(id, c),
            )?;
            let mut results = score_results("sae_classify", &scores);
            if let Value::Object(map) = &mut results.summary {
                map.insert("config".into(), json!(cfg));
            }
            let mut dir = open_out(&args.io.out)?;
            if let Some(d) = dir.as_mut() {
                d.text("scores.csv", &probe::scores_csv(&scores))?;
                if args.models.is_none() {
                    save_models(d, &models)?;
                }
            }
            emit(dir, "sae classify", &results, stdout)?;
        }
        SaeCommand::Overlap { sae: args, ktop } => {
            let cfg = sae_config(&args)?;
            let bundle = load(&args.io.bundle)?;
            let models = sae_models(&bundle, &args, &cfg)?;
            let mut results = Results::new(
                "sae_overlap",
                &["layer", "head", "class", "label", "intersection", "k", "token_topk", "instance_topk"],
            );
            let mut total = 0usize;
            let mut count = 0usize;
            let mut chance = 0.0;
            for (&id, model) in &models {
                chance = (ktop * ktop) as f64 / model.m() as f64;
                for r in sae::feature_overlap(model, &bundle, id, ktop)? {
                    total += r.intersection_size;
                    count += 1;
                    results.push(vec![
                        json!(id.layer),
                        json!(id.head),
                        json!(r.class),
                        json!(r.label),
                        json!(r.intersection_size),
                        json!(r.k),
                        json!(join(&r.token_topk)),
                        json!(join(&r.instance_topk)),
                    ]);
                }
            }
            results.summary = json!({
                "ktop": ktop,
                "mean_intersection": total as f64 / count.max(1) as f64,
                "chance_intersection": chance,
                "config": cfg,
            });
            let mut dir = open_out(&args.io.out)?;
            if let Some(d) = dir.as_mut() {
                if args.models.is_none() {
                    save_models(d, &models)?;
                }
            }
            emit(dir, "sae overlap", &results, stdout)?;
        }
    }
    Ok(EXIT_OK)
}

fn join(ix: &[usize]) -> String {
    ix.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

fn align_cmd(args: &AlignArgs, stdout: &mut dyn Write) -> anyhow::Result<i32> {
    use rayon::prelude::*;
    let bundle = load(&args.bundle)?;
    let points = align::alignment_points(&bundle)?;
    let labels = bundle.labels();
    let tests: Vec<Option<PermutationTest>> = if args.permutations > 0 {
        points
            .par_iter()
            .map(|p| {
                let id = HeadId::new(p.layer, p.head);
                align::gap_permutation_test(
                    bundle.class_acts(id)?,
                    bundle.instance_acts(id)?,
                    &labels,
                    args.permutations,
                    head_seed(args.seed, id),
                )
                .map(Some)
            })
            .collect::<crate::Result<_>>()?
    } else {
        vec![None; points.len()]
    };
    let mut results = Results::new(
        "align",
        &["layer", "head", "within", "between", "gap", "z_score", "p_value"],
    );
    for (p, t) in points.iter().zip(&tests) {
        results.push(vec![
            json!(p.layer),
            json!(p.head),
            json!(p.within),
            json!(p.between),
            json!(p.gap()),
            json!(t.as_ref().map(|t| t.z_score)),
            json!(t.as_ref().map(|t| t.p_value)),
        ]);
    }
    results.summary = json!({
        "fraction_above_diagonal": align::heads_above_diagonal(&points)?,
        "heads": points.len(),
        "mean_gap": points.iter().map(AlignmentPoint::gap).sum::<f64>() / points.len() as f64,
        "permutations": args.permutations,
        "aggregation": align::AGGREGATION,
    });
    let mut dir = open_out(&args.out)?;
    if let Some(d) = dir.as_mut() {
        d.text("alignment.csv", &align::points_csv(&points))?;
    }
    emit(dir, "align", &results, stdout)?;
    Ok(EXIT_OK)
}

fn grok_config(args: &GrokArgs) -> anyhow::Result<GrokConfig> {
    let mut cfg: GrokConfig =
        read_json(&args.config).with_context(|| format!("config {}", args.config.display()))?;
    if let Some(h) = args.head {
        cfg.head_type = h;
    }
    if let Some(s) = args.steps {
        cfg.max_steps = s;
    }
    cfg.check()?;
    Ok(cfg)
}

fn grok_cmd(action: GrokCommand, stdout: &mut dyn Write) -> anyhow::Result<i32> {
    match action {
        GrokCommand::Run { args, seed } => {
            let mut cfg = grok_config(&args)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let run = grok::train_run(&cfg)?;
            let m = &run.metrics;
            let mut results = Results::new(
                "grok_run",
                &["step", "train_loss", "train_acc", "val_loss", "val_acc", "probe_val_acc"],
            );
            for e in &m.series {
                results.push(vec![
                    json!(e.step),
                    json!(e.train_loss),
                    json!(e.train_acc),
                    json!(e.val_loss),
                    json!(e.val_acc),
                    json!(e.probe_val_acc),
                ]);
            }
            results.summary = json!({
                "train_acc": m.train_acc,
                "val_acc": m.val_acc,
                "probe_accuracy": m.probe_accuracy,
                "probe_refit_accuracy": m.probe_refit_accuracy,
                "probe_refit_train_accuracy": m.probe_refit_train_accuracy,
                "fourier_kappa": m.fourier_kappa,
                "n_train": m.n_train,
                "n_val": m.n_val,
                "n_params": m.n_params,
                "config": m.config,
            });
            let mut dir = open_out(&args.out)?;
            if let Some(d) = dir.as_mut() {
                for f in run.save(&d.root)? {
                    d.record(f);
                }
            }
            emit(dir, "grok run", &results, stdout)?;
        }
        GrokCommand::Sweep { args, seeds } => {
            let cfg = grok_config(&args)?;
            let (report, runs) = grok::seed_sweep(&cfg, &seeds)?;
            let mut results = Results::new(
                "grok_sweep",
                &["seed", "train_acc", "val_acc", "probe_acc", "kappa"],
            );
            for r in &report.rows {
                results.push(vec![
                    json!(r.seed),
                    json!(r.train_acc),
                    json!(r.val_acc),
                    json!(r.probe_acc),
                    json!(r.kappa),
                ]);
            }
            results.summary = json!({
                "spearman_probe_kappa": report.spearman_probe_kappa,
                "seeds": seeds,
                "config": cfg,
            });
            let mut dir = open_out(&args.out)?;
            if let Some(d) = dir.as_mut() {
                d.text("sweep.csv", &report.csv())?;
                for run in &runs {
                    let sub = format!("seed_{}", run.metrics.config.seed);
                    let path = d.subdir(&sub)?;
                    for f in run.save(&path)? {
                        d.record(format!("{sub}/{f}"));
                    }
                }
            }
            emit(dir, "grok sweep", &results, stdout)?;
        }
    }
    Ok(EXIT_OK)
}
