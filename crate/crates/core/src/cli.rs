//! The `litestage` command line: importance, profile, search, run, eval, sweep, report.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use crate::desk::{self, DeskConfig, DeskModel, DeskState};
use crate::early_exit::ConfidenceMode;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, EvalSettings};
use crate::importance::{estimate_importance, estimate_importance_per_stage, Ranking};
use crate::io::{self, DatasetRecord, ModelSource, RunConfig, WeightManifest};
use crate::latency::LatencySource;
use crate::model::{
    KvCache, LanguageModel, ModelConfig, ModelDims, Prefill, SkipSet, TraceMode, Transformer,
};
use crate::pipeline::{self, PipelineOptions, SamplingPolicy, SkipConfig, StagePlan};
use crate::search::{self, greedy_search, PipelineEvaluator, SearchSettings, StageProfile};

pub const THREADS_ENV: &str = "LITESTAGE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "litestage", version, about = "Stage-wise layer skipping for multi-stage reasoning")]
pub struct Cli {
    /// Raise log verbosity (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate sub-layer importance on a validation set.
    Importance(ImportanceArgs),
    /// Sweep the budget of one stage with the others held fixed.
    Profile(ProfileArgs),
    /// Greedy per-stage budget search under an accuracy threshold.
    Search(SearchArgs),
    /// Run the pipeline on one question and dump the transcript.
    Run(RunArgs),
    /// Evaluate accuracy and latency of a skip configuration.
    Eval(EvalArgs),
    /// Uniform (or single-stage) budget sweep.
    Sweep(SweepArgs),
    /// Merge evaluation reports into a table and an optional scatter plot.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Desk,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Probability,
    MaxLogit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Model,
    Wallclock,
}

impl From<SourceArg> for LatencySource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Model => LatencySource::Model,
            SourceArg::Wallclock => LatencySource::Wallclock,
        }
    }
}

/// Flags shared by every subcommand that runs a model. They override `--config`.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    /// Weight container; selects the transformer backend.
    #[arg(long, conflicts_with = "model")]
    pub weights: Option<PathBuf>,
    /// Model seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_blocks: Option<usize>,
    /// Stage plan (TOML).
    #[arg(long)]
    pub stage_plan: Option<PathBuf>,
    /// Dataset (JSONL). Defaults to the bundled desk benchmark split.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Skip configuration written by `search`.
    #[arg(long, conflicts_with = "budgets")]
    pub skip_config: Option<PathBuf>,
    /// Per-stage budgets, e.g. `4,6,2`; needs `--importance`.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<usize>>,
    /// Importance table(s) written by `importance`.
    #[arg(long)]
    pub importance: Option<PathBuf>,
    #[arg(long)]
    pub ee_window: Option<usize>,
    #[arg(long)]
    pub ee_threshold: Option<f64>,
    #[arg(long)]
    pub no_early_exit: bool,
    #[arg(long, value_enum)]
    pub confidence_mode: Option<ModeArg>,
    /// Sample with this temperature instead of greedy decoding.
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub sample_seed: Option<u64>,
    #[arg(long)]
    pub self_consistency: Option<usize>,
    #[arg(long, value_enum)]
    pub latency_source: Option<SourceArg>,
}

#[derive(Debug, Args)]
pub struct ImportanceArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Write one table per stage instead of one shared table.
    #[arg(long)]
    pub per_stage: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[arg(long, default_value_t = 2)]
    pub grid_step: usize,
    #[arg(long)]
    pub max_budget: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    /// 1-based stage to sweep.
    #[arg(long)]
    pub stage: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Allowed accuracy loss in percentage points.
    #[arg(long, default_value_t = 1.0)]
    pub epsilon: f64,
    #[arg(long)]
    pub rerank_stages: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub skip_config_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Dataset record id; defaults to the first record.
    #[arg(long, conflicts_with = "question")]
    pub id: Option<String>,
    /// Free-form question with `--option` entries instead of a dataset record.
    #[arg(long)]
    pub question: Option<String>,
    #[arg(long = "option", requires = "question")]
    pub options: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Full-depth report used for speedup.
    #[arg(long, conflicts_with = "with_reference")]
    pub reference: Option<PathBuf>,
    /// Also run the full-depth, early-exit-off reference.
    #[arg(long)]
    pub with_reference: bool,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub reference_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    /// Sweep only this 1-based stage; the others stay at full depth.
    #[arg(long)]
    pub stage: Option<usize>,
    /// Per-row reports as a JSON array.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// EvalReport files.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Accuracy-vs-speedup scatter.
    #[arg(long)]
    pub svg: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit status: 0 ok, 1 user error, 2 internal error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose, cli.quiet);
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 1;
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        // The reader went away, e.g. `| head`.
        Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                1
            } else {
                2
            }
        }
    }
}

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer")))?;
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Importance(a) => cmd_importance(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Search(a) => cmd_search(a),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    }
}

/// Either backend behind one type so commands stay monomorphic.
pub enum AnyModel {
    Desk(DeskModel),
    Transformer(Box<Transformer>),
}

pub enum AnyState {
    Desk(Box<DeskState>),
    Transformer(KvCache),
}

impl LanguageModel for AnyModel {
    type State = AnyState;

    fn dims(&self) -> ModelDims {
        match self {
            AnyModel::Desk(m) => m.dims(),
            AnyModel::Transformer(m) => m.dims(),
        }
    }

    fn prefill(&self, tokens: &[u32], trace: TraceMode) -> Result<Prefill<AnyState>> {
        match self {
            AnyModel::Desk(m) => {
                let p = m.prefill(tokens, trace)?;
                Ok(Prefill { state: AnyState::Desk(Box::new(p.state)), logits: p.logits, trace: p.trace })
            }
            AnyModel::Transformer(m) => {
                let p = m.prefill(tokens, trace)?;
                Ok(Prefill { state: AnyState::Transformer(p.state), logits: p.logits, trace: p.trace })
            }
        }
    }

    fn decode_step(&self, state: &mut AnyState, token: u32, skip: &SkipSet) -> Result<Vec<f64>> {
        match (self, state) {
            (AnyModel::Desk(m), AnyState::Desk(s)) => m.decode_step(s, token, skip),
            (AnyModel::Transformer(m), AnyState::Transformer(s)) => m.decode_step(s, token, skip),
            _ => Err(Error::InvalidArgument("state belongs to a different model".into())),
        }
    }
}

impl AnyModel {
    pub fn load(source: &ModelSource) -> Result<Self> {
        Ok(match source {
            ModelSource::Desk(c) => AnyModel::Desk(DeskModel::new(*c)?),
            ModelSource::Synthetic(c) => AnyModel::Transformer(Box::new(Transformer::synthesize(c.clone())?)),
            ModelSource::Weights { path } => {
                let manifest = WeightManifest::read(path)?;
                AnyModel::Transformer(Box::new(io::load_weights(path, &manifest.config)?))
            }
        })
    }

    pub fn n_blocks(&self) -> usize {
        self.dims().n_blocks
    }
}

/// Which bundled split a command falls back to without `--dataset`.
#[derive(Debug, Clone, Copy)]
enum Split {
    Validation,
    Test,
}

/// A fully resolved run: configuration, model, plan and data.
struct Session {
    config: RunConfig,
    model: AnyModel,
    plan: StagePlan,
    dataset: Vec<DatasetRecord>,
    importance: Option<Ranking>,
}

#[derive(Serialize)]
struct Effective<'a> {
    command: &'a str,
    #[serde(flatten)]
    config: &'a RunConfig,
    importance: Option<&'a Path>,
    dataset_len: usize,
    stages: Vec<&'a str>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c: RunConfig = match &self.config {
            Some(path) => io::load_toml(path)?,
            None => RunConfig::default(),
        };
        if let Some(path) = &self.weights {
            c.model = ModelSource::Weights { path: path.clone() };
        }
        match self.model {
            Some(ModelKind::Desk) if !matches!(c.model, ModelSource::Desk(_)) => {
                c.model = ModelSource::Desk(DeskConfig::default())
            }
            Some(ModelKind::Synthetic) if !matches!(c.model, ModelSource::Synthetic(_)) => {
                c.model = ModelSource::Synthetic(ModelConfig::toy(4, 0))
            }
            _ => {}
        }
        match &mut c.model {
            ModelSource::Desk(d) => {
                d.seed = self.seed.unwrap_or(d.seed);
                d.n_blocks = self.n_blocks.unwrap_or(d.n_blocks);
            }
            ModelSource::Synthetic(m) => {
                m.rng_seed = self.seed.unwrap_or(m.rng_seed);
                m.n_blocks = self.n_blocks.unwrap_or(m.n_blocks);
            }
            ModelSource::Weights { .. } => {
                if self.seed.is_some() || self.n_blocks.is_some() {
                    return Err(Error::InvalidArgument(
                        "--seed and --n-blocks do not apply to a weight file".into(),
                    ));
                }
            }
        }
        if self.stage_plan.is_some() {
            c.stage_plan = self.stage_plan.clone();
        }
        if self.dataset.is_some() {
            c.dataset = self.dataset.clone();
        }
        if self.skip_config.is_some() {
            c.skip_config = self.skip_config.clone();
            c.budgets = None;
        }
        if self.budgets.is_some() {
            c.budgets = self.budgets.clone();
            c.skip_config = None;
        }
        let ee = &mut c.early_exit;
        ee.window = self.ee_window.unwrap_or(ee.window);
        ee.threshold = self.ee_threshold.unwrap_or(ee.threshold);
        if let Some(mode) = self.confidence_mode {
            ee.mode = match mode {
                ModeArg::Probability => ConfidenceMode::Probability,
                ModeArg::MaxLogit => ConfidenceMode::MaxLogit,
            };
        }
        if self.no_early_exit {
            ee.enabled = false;
        }
        if let Some(t) = self.temperature {
            c.sampling = SamplingPolicy::temperature(t, c.sampling.seed);
        }
        c.sampling.seed = self.sample_seed.unwrap_or(c.sampling.seed);
        c.self_consistency = self.self_consistency.unwrap_or(c.self_consistency);
        if let Some(s) = self.latency_source {
            c.latency_source = s.into();
        }
        c.validate(None)?;
        Ok(c)
    }

    fn session(&self, command: &str, split: Split) -> Result<Session> {
        let config = self.resolve()?;
        let model = AnyModel::load(&config.model)?;
        config.validate(Some(2 * model.n_blocks()))?;
        let plan = match &config.stage_plan {
            Some(path) => {
                let plan: StagePlan = io::load_toml(path)?;
                plan.validate()?;
                plan
            }
            None => StagePlan::recall_analysis_summary(),
        };
        let dataset = match &config.dataset {
            Some(path) => io::load_dataset(path)?,
            None => match split {
                Split::Validation => desk::validation_set(),
                Split::Test => desk::test_set(),
            },
        };
        let importance = match &self.importance {
            Some(path) => {
                let ranking: Ranking = io::load_json(path)?;
                ranking.validate(plan.len(), model.n_blocks())?;
                Some(ranking)
            }
            None => None,
        };
        let effective = Effective {
            command,
            config: &config,
            importance: self.importance.as_deref(),
            dataset_len: dataset.len(),
            stages: plan.stages.iter().map(|s| s.name.as_str()).collect(),
        };
        info!("effective configuration: {}", serde_json::to_string(&effective)?);
        Ok(Session { config, model, plan, dataset, importance })
    }
}

impl Session {
    fn pipeline_options(&self) -> PipelineOptions {
        PipelineOptions {
            early_exit: self.config.early_exit.config(),
            sampling: self.config.sampling,
            latency_model: self.config.latency_model,
        }
    }

    fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            pipeline: self.pipeline_options(),
            self_consistency: self.config.self_consistency,
            latency_source: self.config.latency_source,
        }
    }

    fn require_importance(&self) -> Result<&Ranking> {
        self.importance
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("this command needs --importance <table.json>".into()))
    }

    fn skip_config(&self) -> Result<SkipConfig> {
        let config = if let Some(path) = &self.config.skip_config {
            io::load_json(path)?
        } else if let Some(budgets) = &self.config.budgets {
            SkipConfig::from_ranking(self.require_importance()?, budgets)?
        } else {
            SkipConfig::empty(self.plan.len())
        };
        config.validate(self.plan.len(), self.model.n_blocks())?;
        Ok(config)
    }

    fn search_settings(&self, grid: &GridArgs, epsilon: f64, rerank: bool) -> SearchSettings {
        SearchSettings {
            epsilon,
            grid_step: grid.grid_step,
            max_budget: grid.max_budget,
            profile_with_early_exit: self.config.early_exit.enabled,
            rerank_stages: rerank,
            latency_source: self.config.latency_source,
        }
    }
}

/// Writes one line to stdout, reporting failures instead of panicking.
fn stdout_line(line: &str) -> Result<()> {
    writeln!(std::io::stdout().lock(), "{line}")?;
    Ok(())
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(path) => {
            io::save_json(path, value)?;
            info!("wrote {}", path.display());
        }
        None => stdout_line(&serde_json::to_string_pretty(value)?)?,
    }
    Ok(())
}

fn stage_index(stage: usize, plan: &StagePlan) -> Result<usize> {
    if stage == 0 || stage > plan.len() {
        return Err(Error::InvalidArgument(format!("--stage must be between 1 and {}", plan.len())));
    }
    Ok(stage - 1)
}

fn cmd_importance(a: ImportanceArgs) -> Result<()> {
    let s = a.common.session("importance", Split::Validation)?;
    let options = s.pipeline_options();
    let ranking = if a.per_stage {
        Ranking::PerStage(estimate_importance_per_stage(&s.model, &s.dataset, &s.plan, &options)?)
    } else {
        Ranking::Shared(estimate_importance(&s.model, &s.dataset, &s.plan, &options)?)
    };
    for (table, stage) in ranking.tables().iter().zip(&s.plan.stages) {
        if a.per_stage {
            info!("{}:", stage.name);
        }
        for (rank, layer) in table.ranking().iter().take(8).enumerate() {
            info!("#{:<2} {:>5} {:<4} {:.6}", rank + 1, layer.block, layer.kind, table.score(*layer));
        }
    }
    emit_json(a.out.as_deref(), &ranking)
}

fn cmd_profile(a: ProfileArgs) -> Result<()> {
    let s = a.common.session("profile", Split::Validation)?;
    let stage = stage_index(a.stage, &s.plan)?;
    let ranking = s.require_importance()?;
    let settings = s.search_settings(&a.grid, 0.0, false);
    let evaluator =
        PipelineEvaluator::new(&s.model, &s.plan, &s.dataset, ranking, &s.eval_settings(), &settings);
    let grid = settings.grid(ranking.n_sublayers())?;
    let fixed = s.config.budgets.clone().unwrap_or_else(|| vec![0; s.plan.len()]);
    let profile: StageProfile = search::profile_stage(&evaluator, stage, &grid, &fixed)?;
    stdout_line("budget,accuracy,mean_latency,stage_decode_tokens")?;
    for r in &profile.rows {
        stdout_line(&format!(
            "{},{:.4},{:.4},{:.2}",
            r.budget, r.accuracy, r.mean_latency, r.mean_decode_tokens
        ))?;
    }
    match &a.out {
        Some(path) => emit_json(Some(path), &profile),
        None => Ok(()),
    }
}

fn cmd_search(a: SearchArgs) -> Result<()> {
    let s = a.common.session("search", Split::Validation)?;
    let ranking = s.require_importance()?;
    let settings = s.search_settings(&a.grid, a.epsilon, a.rerank_stages);
    let evaluator =
        PipelineEvaluator::new(&s.model, &s.plan, &s.dataset, ranking, &s.eval_settings(), &settings);
    let result = greedy_search(&evaluator, &settings)?;
    info!(
        "budgets {:?} (mean {:.2}); accuracy {:.4} vs target {:.4}; latency {:.2} vs baseline {:.2} {}",
        result.budgets,
        result.mean_budget(),
        result.final_accuracy,
        result.target_accuracy,
        result.final_latency,
        result.baseline_latency,
        settings.latency_source.unit()
    );
    if let Some(path) = &a.skip_config_out {
        io::save_json(path, &result.skip_config)?;
        info!("wrote {}", path.display());
    }
    emit_json(a.out.as_deref(), &result)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let s = a.common.session("run", Split::Test)?;
    let record = match (&a.question, &a.id) {
        (Some(q), _) => free_form_record(q, &a.options)?,
        (None, Some(id)) => s
            .dataset
            .iter()
            .find(|r| &r.id == id)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("no record with id `{id}`")))?,
        (None, None) => s.dataset.first().cloned().ok_or(Error::EmptyDataset)?,
    };
    let transcript =
        pipeline::run_pipeline(&s.model, &s.plan, &record, &s.skip_config()?, &s.pipeline_options())?;
    for stage in &transcript.stages {
        info!(
            "{}: {} tokens ({:?}), skipped {}",
            stage.name, stage.decode_len, stage.exit_reason, stage.skipped
        );
    }
    let labels: Vec<char> = record.options.iter().map(|o| o.label).collect();
    let answer = eval::extract_answer(transcript.final_text(), &labels);
    info!("answer {:?}, gold {}", answer, record.gold);
    emit_json(a.out.as_deref(), &transcript)
}

fn free_form_record(question: &str, options: &[String]) -> Result<DatasetRecord> {
    const LABELS: [char; 5] = ['A', 'B', 'C', 'D', 'E'];
    if options.len() < 2 || options.len() > LABELS.len() {
        return Err(Error::InvalidArgument("give between 2 and 5 --option values".into()));
    }
    let record = DatasetRecord {
        id: "cli".into(),
        question: question.into(),
        options: options
            .iter()
            .zip(LABELS)
            .map(|(text, label)| io::AnswerOption { label, text: text.clone() })
            .collect(),
        gold: 'A',
    };
    record.validate()?;
    Ok(record)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let s = a.common.session("eval", Split::Test)?;
    let skip = s.skip_config()?;
    let settings = s.eval_settings();
    let self_reference = skip.is_full_depth() && settings.pipeline.early_exit.is_none();
    let mut report = if a.with_reference || self_reference {
        let (report, reference) =
            eval::evaluate_with_reference(&s.model, &s.dataset, &s.plan, &skip, &settings)?;
        if let Some(path) = &a.reference_out {
            io::save_json(path, &reference)?;
        }
        report
    } else if let Some(path) = &a.reference {
        let reference: EvalReport = io::load_json(path)?;
        eval::evaluate(&s.model, &s.dataset, &s.plan, &skip, &settings, Some(&reference))?
    } else {
        warn!("no reference run; speedup omitted (use --reference or --with-reference)");
        eval::evaluate(&s.model, &s.dataset, &s.plan, &skip, &settings, None)?
    };
    report.label = a.label.unwrap_or_else(|| default_label(&report));
    info!("{}", EvalReport::CSV_HEADER);
    info!("{}", report.csv_row());
    emit_json(a.out.as_deref(), &report)
}

fn default_label(report: &EvalReport) -> String {
    let budgets = report.budgets.iter().map(usize::to_string).collect::<Vec<_>>().join("/");
    format!("skip {budgets}{}", if report.early_exit { " +ee" } else { "" })
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let s = a.common.session("sweep", Split::Test)?;
    let ranking = s.require_importance()?;
    let stage = a.stage.map(|st| stage_index(st, &s.plan)).transpose()?;
    let settings = s.eval_settings();
    let grid = s.search_settings(&a.grid, 0.0, false).grid(ranking.n_sublayers())?;
    let reference_settings =
        EvalSettings { pipeline: settings.pipeline.without_early_exit(), ..settings.clone() };
    let reference = eval::evaluate(
        &s.model,
        &s.dataset,
        &s.plan,
        &SkipConfig::empty(s.plan.len()),
        &reference_settings,
        None,
    )?;
    stdout_line(EvalReport::CSV_HEADER)?;
    let mut reports = Vec::with_capacity(grid.len());
    for &k in &grid {
        let budgets: Vec<usize> = (0..s.plan.len())
            .map(|i| match stage {
                Some(st) if st != i => 0,
                _ => k,
            })
            .collect();
        let config = SkipConfig::from_ranking(ranking, &budgets)?;
        let mut report = eval::evaluate(&s.model, &s.dataset, &s.plan, &config, &settings, Some(&reference))?;
        report.label = default_label(&report);
        stdout_line(&report.csv_row())?;
        reports.push(report);
    }
    match &a.out {
        Some(path) => emit_json(Some(path), &reports),
        None => Ok(()),
    }
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut reports = Vec::with_capacity(a.reports.len());
    for path in &a.reports {
        let mut r: EvalReport = io::load_json(path)?;
        if r.label.is_empty() {
            r.label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        }
        reports.push(r);
    }
    let csv = report_csv(&reports);
    match &a.csv {
        Some(path) => io::write_atomic(path, csv.as_bytes())?,
        None => stdout_line(csv.trim_end())?,
    }
    if let Some(path) = &a.svg {
        io::write_atomic(path, scatter_svg(&reports).as_bytes())?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

pub fn report_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(EvalReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Accuracy against speedup, one labelled point per report that has a speedup.
pub fn scatter_svg(reports: &[EvalReport]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const PAD: f64 = 60.0;
    let points: Vec<(f64, f64, &str)> =
        reports.iter().filter_map(|r| r.speedup.map(|s| (s, 100.0 * r.accuracy, r.label.as_str()))).collect();
    let (mut x0, mut x1) = (1.0f64, 1.0f64);
    let (mut y0, mut y1) = (100.0f64, 0.0f64);
    for &(x, y, _) in &points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if y0 > y1 {
        (y0, y1) = (0.0, 100.0);
    }
    let (x0, x1) = (x0 - 0.05, x1 + 0.05);
    let (y0, y1) = ((y0 - 2.0).max(0.0), (y1 + 2.0).min(100.0));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0).max(1e-9) * (H - 2.0 * PAD);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{xl}\" text-anchor=\"middle\">speedup (x)</text>\n\
         <text x=\"16\" y=\"{cy}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {cy})\">accuracy (%)</text>\n",
        b = H - PAD,
        r = W - PAD,
        cx = W / 2.0,
        xl = H - 20.0,
        cy = H / 2.0,
    );
    for (v, anchor) in [(x0 + 0.05, "start"), (x1 - 0.05, "end")] {
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"{anchor}\">{v:.2}</text>\n",
            sx(v),
            H - PAD + 16.0
        );
    }
    for v in [y0, y1] {
        svg += &format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{v:.1}</text>\n",
            PAD - 6.0,
            sy(v) + 4.0
        );
    }
    for (x, y, label) in points {
        svg += &format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"4\" fill=\"steelblue\"/>\n<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            sx(x),
            sy(y),
            sx(x) + 6.0,
            sy(y) - 6.0,
            xml_escape(label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
