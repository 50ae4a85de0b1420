//! Command-line pipeline: world, pretrain, probe, build-data, train, eval, ablate.

mod config;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{RunConfig, Stage};

use crate::datagen::{
    build_samples, build_test_samples, check_disjoint, gen_base_corpus, gen_world, known_probes, load_samples,
    probe_world, save_samples, tokenizer_for, FactWorld, ProbeOutcome, Sample,
};
use crate::error::{Error, Result};
use crate::eval::{
    ablate_layers, ablate_samples, emit_report, eval_suite, gate_stats, EvalReport, GateStat, Method, MethodRun,
    ReportFormat,
};
use crate::grft::{load_grft, save_grft, GrftConfig, GrftMode, GrftParams};
use crate::model::{load_model, pretrain_base, save_model, PretrainReport, TinyModel, Tokenizer};
use crate::train::{train_grft, TrainReport};

#[derive(Debug, Parser)]
#[command(name = "grft", version, about = "Gated representation fine-tuning on a synthetic fact world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Layer whose output the edit is applied to.
    #[arg(long, global = true)]
    pub layer: Option<usize>,
    #[arg(long, global = true)]
    pub rank: Option<usize>,
    /// grft, reft_no_gate or grft_no_gate_loss.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the fact world.
    World,
    /// Pretrain the base model on the world's corpus.
    Pretrain,
    /// Partition facts into known and unknown by probing the base model.
    Probe,
    /// Build the training and test samples.
    BuildData,
    /// Train the edit in the configured mode.
    Train,
    /// Evaluate every configured method.
    Eval,
    /// Layer and sample-count sweeps.
    Ablate,
    /// Every stage in order.
    All,
}

/// Configuration file plus command-line overrides.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(l) = cli.layer {
        cfg.layer = l;
    }
    if let Some(r) = cli.rank {
        cfg.rank = r;
    }
    if let Some(m) = &cli.mode {
        cfg.mode = m.parse()?;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// A JSON artifact stamped with the run that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub config: RunConfig,
    pub seed: u64,
    pub data: T,
}

/// Sidecar for artifacts whose format has no room for the configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub config: RunConfig,
    pub seed: u64,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub known: usize,
    pub unknown: usize,
    pub excluded: usize,
    pub outcomes: Vec<ProbeOutcome>,
}

/// File layout of a run directory.
pub struct Paths {
    pub dir: PathBuf,
}

impl Paths {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }
    pub fn world(&self) -> PathBuf {
        self.dir.join("world.json")
    }
    pub fn base(&self) -> PathBuf {
        self.dir.join("base.tiny")
    }
    pub fn pretrain_report(&self) -> PathBuf {
        self.dir.join("pretrain_report.json")
    }
    pub fn probe(&self) -> PathBuf {
        self.dir.join("probe.json")
    }
    pub fn train_samples(&self) -> PathBuf {
        self.dir.join("train.jsonl")
    }
    pub fn test_samples(&self) -> PathBuf {
        self.dir.join("test.jsonl")
    }
    pub fn grft(&self, mode: GrftMode) -> PathBuf {
        self.dir.join(format!("grft_{mode}.bin"))
    }
    pub fn train_report(&self, mode: GrftMode) -> PathBuf {
        self.dir.join(format!("train_report_{mode}.json"))
    }
    pub fn eval_json(&self) -> PathBuf {
        self.dir.join("eval_report.json")
    }
    pub fn eval_csv(&self) -> PathBuf {
        self.dir.join("eval_report.csv")
    }
    pub fn gate_stats(&self) -> PathBuf {
        self.dir.join("gate_stats.json")
    }
    pub fn ablation(&self, axis: &str) -> PathBuf {
        self.dir.join(format!("ablation_{axis}.json"))
    }
    pub fn meta(path: &Path) -> PathBuf {
        let mut name = path.file_name().expect("artifact paths have file names").to_os_string();
        name.push(".meta.json");
        path.with_file_name(name)
    }
}

struct Ctx {
    cfg: RunConfig,
    paths: Paths,
    force: bool,
}

impl Ctx {
    fn require(&self, path: &Path) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::Dependency(path.to_path_buf()))
        }
    }

    /// Refuse to overwrite any of `paths` without `--force`.
    fn claim(&self, paths: &[PathBuf]) -> Result<()> {
        std::fs::create_dir_all(&self.paths.dir)?;
        match paths.iter().find(|p| p.exists()) {
            Some(p) if !self.force => Err(Error::Exists(p.clone())),
            _ => Ok(()),
        }
    }

    fn write_json<T: Serialize>(&self, path: &Path, data: T) -> Result<()> {
        let a = Artifact { config: self.cfg.clone(), seed: self.cfg.seed, data };
        std::fs::write(path, serde_json::to_string_pretty(&a)? + "\n")?;
        Ok(())
    }

    fn read_json<T: DeserializeOwned>(&self, path: &Path) -> Result<T> {
        self.require(path)?;
        let a: Artifact<T> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Ok(a.data)
    }

    fn write_meta(&self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let meta = Meta {
            config: self.cfg.clone(),
            seed: self.cfg.seed,
            file: path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            sha256: format!("{:x}", Sha256::digest(&bytes)),
        };
        std::fs::write(Paths::meta(path), serde_json::to_string_pretty(&meta)? + "\n")?;
        Ok(())
    }

    fn world(&self) -> Result<(FactWorld, Tokenizer)> {
        let world: FactWorld = self.read_json(&self.paths.world())?;
        world.validate()?;
        let tok = tokenizer_for(&world);
        Ok((world, tok))
    }

    fn base(&self) -> Result<TinyModel> {
        self.require(&self.paths.base())?;
        load_model(&self.paths.base())
    }

    fn samples(&self, path: &Path) -> Result<Vec<Sample>> {
        self.require(path)?;
        load_samples(path)
    }

    fn edit(&self, mode: GrftMode) -> Result<(GrftParams, GrftConfig)> {
        let path = self.paths.grft(mode);
        self.require(&path)?;
        load_grft(&path)
    }
}

fn stage_world(ctx: &Ctx) -> Result<()> {
    let path = ctx.paths.world();
    ctx.claim(std::slice::from_ref(&path))?;
    let world = gen_world(&ctx.cfg.world())?;
    info!("world: {} facts, {} known-designated", world.facts.len(), world.known_designated.len());
    ctx.write_json(&path, &world)
}

fn stage_pretrain(ctx: &Ctx) -> Result<()> {
    let (world, tok) = ctx.world()?;
    let outputs = [ctx.paths.base(), ctx.paths.pretrain_report()];
    ctx.claim(&outputs)?;
    let corpus = gen_base_corpus(&world, &tok, &ctx.cfg.corpus())?;
    let probes = known_probes(&world, &tok)?;
    info!("pretraining on {} documents", corpus.len());
    let (model, report) = pretrain_base(ctx.cfg.model(tok.vocab_size()), &corpus, &probes, &ctx.cfg.pretrain())?;
    save_model(&model, &outputs[0])?;
    ctx.write_meta(&outputs[0])?;
    ctx.write_json::<&PretrainReport>(&outputs[1], &report)
}

fn stage_probe(ctx: &Ctx) -> Result<()> {
    let (world, tok) = ctx.world()?;
    let model = ctx.base()?;
    let path = ctx.paths.probe();
    ctx.claim(std::slice::from_ref(&path))?;
    let outcomes = probe_world(&model, &tok, &world, &ctx.cfg.probe())?;
    let count = |o| outcomes.iter().filter(|&&x| x == o).count();
    let summary = ProbeSummary {
        known: count(ProbeOutcome::Known),
        unknown: count(ProbeOutcome::Unknown),
        excluded: count(ProbeOutcome::Excluded),
        outcomes,
    };
    info!("probe: {} known, {} unknown, {} excluded", summary.known, summary.unknown, summary.excluded);
    ctx.write_json(&path, &summary)
}

fn stage_build_data(ctx: &Ctx) -> Result<()> {
    let (world, _) = ctx.world()?;
    let probe: ProbeSummary = ctx.read_json(&ctx.paths.probe())?;
    let outputs = [ctx.paths.train_samples(), ctx.paths.test_samples()];
    ctx.claim(&outputs)?;
    let c = &ctx.cfg;
    let train = build_samples(&world, &probe.outcomes, c.n_known, c.n_unknown, c.stage_seed(Stage::TrainData))?;
    let test = build_test_samples(&world, &probe.outcomes, &train, c.stage_seed(Stage::TestData))?;
    check_disjoint(&train, &test)?;
    info!("samples: {} train, {} test", train.len(), test.len());
    for (path, set) in outputs.iter().zip([&train, &test]) {
        save_samples(set, path)?;
        ctx.write_meta(path)?;
    }
    Ok(())
}

fn train_mode(ctx: &Ctx, mode: GrftMode) -> Result<()> {
    let (_, tok) = ctx.world()?;
    let model = ctx.base()?;
    let train = ctx.samples(&ctx.paths.train_samples())?;
    let outputs = [ctx.paths.grft(mode), ctx.paths.train_report(mode)];
    ctx.claim(&outputs)?;
    let tc = ctx.cfg.train(mode);
    info!("training {mode} at layer {} on {} samples", tc.layer_index, train.len());
    let report = train_grft(&model, &tok, &train, &tc)?;
    save_grft(&report.params, &tc.grft_config(model.config.d_model), &outputs[0])?;
    ctx.write_meta(&outputs[0])?;
    ctx.write_json::<&TrainReport>(&outputs[1], &report)
}

/// Modes whose edits the configured methods need.
fn needed_modes(methods: &[Method]) -> Vec<GrftMode> {
    let set: BTreeSet<usize> =
        methods.iter().filter_map(|m| m.mode()).map(|m| GrftMode::ALL.iter().position(|&x| x == m).unwrap()).collect();
    set.into_iter().map(|i| GrftMode::ALL[i]).collect()
}

fn stage_eval(ctx: &Ctx) -> Result<()> {
    let (_, tok) = ctx.world()?;
    let model = ctx.base()?;
    let train = ctx.samples(&ctx.paths.train_samples())?;
    let test = ctx.samples(&ctx.paths.test_samples())?;
    check_disjoint(&train, &test)?;
    let edits: Vec<(GrftMode, (GrftParams, GrftConfig))> =
        needed_modes(&ctx.cfg.methods).into_iter().map(|m| Ok((m, ctx.edit(m)?))).collect::<Result<_>>()?;
    let outputs = [ctx.paths.eval_json(), ctx.paths.eval_csv(), ctx.paths.gate_stats()];
    ctx.claim(&outputs)?;
    let runs: Vec<MethodRun<'_>> = ctx
        .cfg
        .methods
        .iter()
        .map(|&m| match m.mode() {
            None => MethodRun::base(),
            Some(mode) => {
                let (_, (p, c)) = edits.iter().find(|(x, _)| *x == mode).expect("edits cover every needed mode");
                MethodRun::with_edit(m, p, c)
            }
        })
        .collect();
    let report: EvalReport = eval_suite(&model, &tok, &test, &runs, serde_json::to_value(&ctx.cfg)?, ctx.cfg.seed)?;
    report.rows.iter().for_each(|r| {
        info!("{:<18} {:<21} {:<10} n={:<3} acc={:.3}", r.method, r.category, r.variant, r.n, r.accuracy)
    });
    emit_report(&report, &outputs[0], ReportFormat::Json)?;
    emit_report(&report, &outputs[1], ReportFormat::Csv)?;
    ctx.write_meta(&outputs[1])?;
    let stats: Vec<GateStat> = match edits.iter().find(|(m, _)| m.has_gate()) {
        Some((_, (p, c))) => gate_stats(&model, &tok, p, c, &test)?,
        None => Vec::new(),
    };
    ctx.write_json(&outputs[2], &stats)
}

fn stage_ablate(ctx: &Ctx) -> Result<()> {
    let (world, tok) = ctx.world()?;
    let model = ctx.base()?;
    let probe: ProbeSummary = ctx.read_json(&ctx.paths.probe())?;
    let train = ctx.samples(&ctx.paths.train_samples())?;
    let test = ctx.samples(&ctx.paths.test_samples())?;
    let outputs = [ctx.paths.ablation("layer"), ctx.paths.ablation("n_samples")];
    ctx.claim(&outputs)?;
    let c = &ctx.cfg;
    let tc = c.train(c.mode);
    let mut layers = ablate_layers(&model, &tok, &train, &test, &tc, &c.ablate_layers)?;
    layers.config = serde_json::to_value(c)?;
    std::fs::write(&outputs[0], serde_json::to_string_pretty(&layers)? + "\n")?;
    let mut samples = ablate_samples(
        &model,
        &tok,
        &world,
        &probe.outcomes,
        &c.ablate_samples,
        &tc,
        c.stage_seed(Stage::TrainData),
        c.stage_seed(Stage::TestData),
    )?;
    samples.config = serde_json::to_value(c)?;
    std::fs::write(&outputs[1], serde_json::to_string_pretty(&samples)? + "\n")?;
    Ok(())
}

/// Run one command with a resolved configuration.
pub fn run_with(command: Command, cfg: RunConfig, force: bool) -> Result<()> {
    cfg.validate()?;
    let ctx = Ctx { paths: Paths::new(&cfg.out), cfg, force };
    match command {
        Command::World => stage_world(&ctx),
        Command::Pretrain => stage_pretrain(&ctx),
        Command::Probe => stage_probe(&ctx),
        Command::BuildData => stage_build_data(&ctx),
        Command::Train => train_mode(&ctx, ctx.cfg.mode),
        Command::Eval => stage_eval(&ctx),
        Command::Ablate => stage_ablate(&ctx),
        Command::All => {
            stage_world(&ctx)?;
            stage_pretrain(&ctx)?;
            stage_probe(&ctx)?;
            stage_build_data(&ctx)?;
            let mut modes = needed_modes(&ctx.cfg.methods);
            if !modes.contains(&ctx.cfg.mode) {
                modes.push(ctx.cfg.mode);
            }
            for m in modes {
                train_mode(&ctx, m)?;
            }
            stage_eval(&ctx)?;
            if ctx.cfg.ablate_in_all {
                stage_ablate(&ctx)?;
            }
            Ok(())
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    run_with(cli.command, resolve(cli)?, cli.force)
}

/// Entry point: parse arguments, run, and map errors to exit codes with a
/// single `error[category]: message` line on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}
