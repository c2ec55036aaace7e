use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scf_core::casebank::{self, CaseRecord};
use scf_core::evalkit;
use scf_core::experiment::{self, Checkpoint, ComparisonConfig, ComparisonReport};
use scf_core::forest::{Forest, ForestConfig};
use scf_core::policy::PolicyParams;
use scf_core::sim::{GameSpec, SimEnv};
use scf_core::trainer::{self, ExportRecord, TrainConfig, TrainMode};
use scf_gateway::client::{ChatClient, HttpTransport, RetryPolicy};
use scf_gateway::{generate_forest, CompletionBackend, GatewayConfig, RecordingBackend, ReplayBackend, RoleBackends};

use crate::manifest::{self, BankInfo, BankSource, RunManifest};
use crate::ConfigError;

#[derive(Debug, Parser)]
#[command(name = "scf", version, about = "Branched conversation-forest training on a simulated diagnostic interview")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a simulated case bank as JSON lines.
    MakeBank(MakeBankArgs),
    /// Train a policy and write its reward curve, checkpoint and manifest.
    Train(TrainArgs),
    /// Score a policy on a held-out bank.
    Eval(EvalArgs),
    /// Train both modes over several seeds and run the paired tests.
    Compare(CompareArgs),
    /// Most frequent n-grams in question text.
    Ngrams(NgramArgs),
    /// Paired t-test on two columns of numbers.
    Ttest(TtestArgs),
    /// Build, grade and export forests for external fine-tuning.
    ExportTraining(ExportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Branched,
    Linear,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Branched => TrainMode::Branched,
            ModeArg::Linear => TrainMode::Linear,
        }
    }
}

#[derive(Debug, Args)]
struct SpecArg {
    /// Game spec JSON; the built-in default game when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
}

impl SpecArg {
    fn load(&self) -> Result<GameSpec> {
        match &self.spec {
            None => Ok(GameSpec::default()),
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()))?;
                GameSpec::from_json(&text).map_err(|e| ConfigError(format!("{}: {e}", p.display())).into())
            }
        }
    }
}

#[derive(Debug, Args)]
struct MakeBankArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    cases: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    spec: SpecArg,
}

#[derive(Debug, Args)]
struct ForestArgs {
    #[arg(long, value_enum, default_value = "branched")]
    mode: ModeArg,
    /// Doctor continuations per patient turn [default: 4 branched, 1 linear].
    #[arg(long)]
    branching: Option<u32>,
    /// Trees per case [default: 4 branched, 10 linear].
    #[arg(long)]
    trees: Option<u32>,
    /// Doctor turns per conversation [default: 2].
    #[arg(long)]
    depth: Option<u32>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    forest: ForestArgs,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    clip_eps: Option<f64>,
    #[arg(long)]
    kl_coef: Option<f64>,
    #[arg(long)]
    epochs: Option<u32>,
    /// Training bank; a bank is generated from --seed when omitted.
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Cases to generate when no bank is given.
    #[arg(long, default_value_t = 200)]
    cases: usize,
    #[command(flatten)]
    spec: SpecArg,
    /// Run directory for the curve, checkpoint and manifest.
    #[arg(long)]
    out: PathBuf,
    /// Continue the run recorded in --out.
    #[arg(long)]
    resume: bool,
    /// Stop after this many new steps; the run can be resumed later.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// A training run directory; omit to score the untrained policy.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Held-out bank; generated from --seed when omitted.
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 400)]
    cases: usize,
    /// Interview depth for the untrained policy.
    #[arg(long, default_value_t = 2)]
    depth: u32,
    #[command(flatten)]
    spec: SpecArg,
    /// Write the full report (grades, questions) as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write every question asked, one per line, for `ngrams`.
    #[arg(long)]
    questions: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 200)]
    train_cases: usize,
    #[arg(long, default_value_t = 400)]
    eval_cases: usize,
    #[arg(long)]
    lr: Option<f64>,
    #[command(flatten)]
    spec: SpecArg,
    /// Directory for report.json and the per-seed reward curves.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct NgramArgs {
    /// Text files with one question per line; two files print side by side.
    #[arg(required = true, num_args = 1..=2)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
}

#[derive(Debug, Args)]
struct TtestArgs {
    /// Numbers separated by whitespace, commas or newlines.
    a: PathBuf,
    b: PathBuf,
    #[arg(long, default_value_t = evalkit::DEFAULT_ALPHA)]
    alpha: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Sim,
    Gateway,
}

#[derive(Debug, Args)]
struct ExportArgs {
    #[arg(long)]
    bank: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "sim")]
    backend: BackendArg,
    #[command(flatten)]
    forest: ForestArgs,
    /// Sampling seed for the simulated backend.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Policy from a training run directory (simulated backend).
    #[arg(long)]
    run: Option<PathBuf>,
    #[command(flatten)]
    spec: SpecArg,
    /// Gateway TOML config (gateway backend).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Append every live exchange to this store.
    #[arg(long, conflicts_with = "replay")]
    record: Option<PathBuf>,
    /// Answer from a recorded store instead of the network.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Also write the graded forests as JSON lines.
    #[arg(long)]
    forests: Option<PathBuf>,
    /// Only the first N cases of the bank.
    #[arg(long)]
    limit: Option<usize>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeBank(a) => make_bank(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
        Command::Ngrams(a) => ngrams(a),
        Command::Ttest(a) => ttest(a),
        Command::ExportTraining(a) => export_training(a),
    }
}

fn config_err(e: impl std::fmt::Display) -> anyhow::Error {
    ConfigError(e.to_string()).into()
}

fn make_bank(a: MakeBankArgs) -> Result<()> {
    if a.cases == 0 {
        return Err(config_err("--cases must be at least 1"));
    }
    let spec = a.spec.load()?;
    let bank = spec.generate_case_bank(a.seed, a.cases)?;
    write_bank_file(&a.out, &bank)?;
    println!("wrote {} cases to {} ({})", bank.len(), a.out.display(), casebank::bank_hash(&bank));
    Ok(())
}

fn write_bank_file(path: &Path, bank: &[CaseRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    casebank::write_bank(&mut out, bank)?;
    out.flush()?;
    Ok(())
}

fn forest_config(f: &ForestArgs) -> ForestConfig {
    let mut cfg = match f.mode {
        ModeArg::Branched => ForestConfig::branched(),
        ModeArg::Linear => ForestConfig::linear(),
    };
    if let Some(b) = f.branching {
        cfg.branching = b;
    }
    if let Some(t) = f.trees {
        cfg.trees_per_case = t;
    }
    if let Some(d) = f.depth {
        cfg.depth = d;
    }
    cfg
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::for_mode(a.forest.mode.into());
    cfg.forest = forest_config(&a.forest);
    cfg.seed = a.seed;
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    if let Some(c) = a.clip_eps {
        cfg.clip_eps = c;
    }
    if let Some(k) = a.kl_coef {
        cfg.kl_coef = k;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn load_bank(path: &Path) -> Result<Vec<CaseRecord>> {
    casebank::load_bank(path).with_context(|| format!("loading case bank {}", path.display()))
}

fn bank_for(source: &BankSource, spec: &GameSpec) -> Result<Vec<CaseRecord>> {
    match source {
        BankSource::File { path } => load_bank(path),
        BankSource::Generated { seed, cases } => Ok(spec.generate_case_bank(*seed, *cases)?),
    }
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(manifest::CHECKPOINT_FILE);
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (mut manifest, bank, start) = if a.resume {
        let m = RunManifest::load(&a.out)?;
        let bank = bank_for(&m.bank.source, &m.spec)?;
        if casebank::bank_hash(&bank) != m.bank.hash {
            bail!("case bank content changed since the run started ({})", m.bank.hash);
        }
        let ck = load_checkpoint(&a.out)?;
        if ck.steps_completed != m.steps_completed {
            bail!("checkpoint and manifest disagree on completed steps");
        }
        (m, bank, ck)
    } else {
        let config = train_config(&a)?;
        let spec = a.spec.load()?;
        let source = match &a.bank {
            Some(path) => BankSource::File { path: path.clone() },
            None => BankSource::Generated { seed: experiment::train_bank_seed(a.seed), cases: a.cases },
        };
        let bank = bank_for(&source, &spec)?;
        let env = SimEnv::new(spec.clone(), config.forest.depth).map_err(config_err)?;
        let start = Checkpoint::fresh(&env, &config);
        let m = RunManifest {
            seed: a.seed,
            completions_per_case: config.forest.doctor_completions(),
            config,
            spec,
            bank: BankInfo { source, hash: casebank::bank_hash(&bank), cases: bank.len() },
            steps_completed: 0,
            skipped_cases: 0,
            finished: false,
            started_at: manifest::now(),
            ended_at: None,
            outputs: manifest::outputs_for(&a.out),
        };
        (m, bank, start)
    };

    let env = SimEnv::new(manifest.spec.clone(), manifest.config.forest.depth).map_err(config_err)?;
    let run = experiment::train_on_bank(&env, &bank, &manifest.config, start, a.stop_after)?;
    let ck = run.checkpoint;
    manifest.steps_completed = ck.steps_completed;
    manifest.skipped_cases += run.stats.iter().filter(|s| s.skipped).count();
    manifest.finished = ck.steps_completed as usize == bank.len();
    manifest.ended_at = Some(manifest::now());

    fs::write(&manifest.outputs.curve_csv, evalkit::reward_curve_export(&ck.curve)?)?;
    let mut out = BufWriter::new(File::create(&manifest.outputs.checkpoint)?);
    serde_json::to_writer(&mut out, &ck)?;
    out.flush()?;
    manifest.save(&a.out)?;

    let tail = evalkit::tail_mean(&ck.curve, 0.1).unwrap_or(f64::NAN);
    println!(
        "{:?}: {} of {} steps, {} completions per case, {} skipped, final-10% mean reward {:.3}",
        manifest.config.mode,
        ck.steps_completed,
        bank.len(),
        manifest.completions_per_case,
        manifest.skipped_cases,
        tail
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (spec, depth, policy) = match &a.run {
        Some(dir) => {
            let m = RunManifest::load(dir)?;
            let ck = load_checkpoint(dir)?;
            (m.spec, m.config.forest.depth, ck.params)
        }
        None => {
            let spec = a.spec.load()?;
            let env = SimEnv::new(spec.clone(), a.depth).map_err(config_err)?;
            let p = env.new_policy();
            (spec, a.depth, p)
        }
    };
    let bank = match &a.bank {
        Some(p) => load_bank(p)?,
        None => spec.generate_case_bank(experiment::eval_bank_seed(a.seed), a.cases)?,
    };
    let env = SimEnv::new(spec, depth).map_err(config_err)?;
    let report = experiment::evaluate(&env, &policy, &bank, a.seed)?;
    println!("cases: {}", bank.len());
    println!("accuracy: {}", evalkit::format_percentage(report.percentage));
    println!("mean broadness: {:.2}", report.mean_broadness);
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&report)? + "\n")?;
    }
    if let Some(path) = &a.questions {
        let mut text = report.questions.join("\n");
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    if a.seeds < 2 {
        return Err(config_err("--seeds must be at least 2 for a paired test"));
    }
    let mut cfg = ComparisonConfig::new(a.seeds);
    cfg.train_cases = a.train_cases;
    cfg.eval_cases = a.eval_cases;
    cfg.spec = a.spec.load()?;
    if let Some(lr) = a.lr {
        cfg.branched.lr = lr;
        cfg.linear.lr = lr;
    }
    cfg.branched.validate().map_err(config_err)?;
    cfg.linear.validate().map_err(config_err)?;
    let report = experiment::run_comparison(&cfg)?;
    print_comparison(&report);
    if let Some(dir) = &a.out {
        write_comparison(dir, &cfg, &report)?;
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn print_comparison(r: &ComparisonReport) {
    println!("seed   base  linear  branched  broad(lin)  broad(br)  tail(lin)  tail(br)");
    for s in &r.per_seed {
        println!(
            "{:>4}  {:>5.1}  {:>6.1}  {:>8.1}  {:>10.2}  {:>9.2}  {:>9.3}  {:>8.3}",
            s.seed,
            s.base.percentage,
            s.linear.eval.percentage,
            s.branched.eval.percentage,
            s.linear.eval.mean_broadness,
            s.branched.eval.mean_broadness,
            s.linear.curve_tail_mean,
            s.branched.curve_tail_mean,
        );
    }
    let line = |name: &str, t: &evalkit::TTestResult| {
        let p = t.p.map(|p| format!("{p:.4}")).unwrap_or_else(|| "undefined".into());
        println!(
            "{name}: mean diff {:+.3}, t = {:.3}, df = {}, p = {p}, significant = {}",
            t.mean_difference, t.t, t.df, t.significant
        );
    };
    line("accuracy (branched - linear)", &r.accuracy_test);
    line("broadness (linear - branched)", &r.broadness_test);
    line("accuracy (branched - untrained)", &r.base_test);
    println!("branched curve tail higher in {:.0}% of seeds", 100.0 * r.curve_win_rate);
    println!("winner: {}", r.winner);
}

fn write_comparison(dir: &Path, cfg: &ComparisonConfig, r: &ComparisonReport) -> Result<()> {
    let curves = dir.join("curves");
    fs::create_dir_all(&curves).with_context(|| format!("creating {}", curves.display()))?;
    for s in &r.per_seed {
        for (name, curve) in [("branched", &s.branched.curve), ("linear", &s.linear.curve)] {
            fs::write(curves.join(format!("seed{}_{name}.csv", s.seed)), evalkit::reward_curve_export(curve)?)?;
        }
    }
    let summary = serde_json::json!({
        "config": cfg,
        "per_seed": r.per_seed.iter().map(|s| serde_json::json!({
            "seed": s.seed,
            "base_percentage": s.base.percentage,
            "linear_percentage": s.linear.eval.percentage,
            "branched_percentage": s.branched.eval.percentage,
            "linear_broadness": s.linear.eval.mean_broadness,
            "branched_broadness": s.branched.eval.mean_broadness,
            "linear_final_reward": s.linear.curve_tail_mean,
            "branched_final_reward": s.branched.curve_tail_mean,
        })).collect::<Vec<_>>(),
        "accuracy_test": r.accuracy_test,
        "broadness_test": r.broadness_test,
        "base_test": r.base_test,
        "curve_win_rate": r.curve_win_rate,
        "winner": r.winner,
    });
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_owned).collect())
}

fn ngrams(a: NgramArgs) -> Result<()> {
    if a.n == 0 || a.k == 0 {
        return Err(config_err("--n and --k must be at least 1"));
    }
    let tables = a
        .inputs
        .iter()
        .map(|p| Ok((p.display().to_string(), evalkit::top_ngrams(&read_lines(p)?, a.n, a.k))))
        .collect::<Result<Vec<_>>>()?;
    match tables.as_slice() {
        [(_, rows)] => print!("{}", evalkit::format_ngram_table(rows)),
        [(lt, l), (rt, r)] => print!("{}", evalkit::format_ngram_columns(lt, l, rt, r)),
        _ => unreachable!("clap bounds the input count"),
    }
    Ok(())
}

fn read_numbers(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().with_context(|| format!("{}: `{s}` is not a number", path.display())))
        .collect()
}

fn ttest(a: TtestArgs) -> Result<()> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(config_err("--alpha must be in (0, 1)"));
    }
    let r = evalkit::paired_t_test(&read_numbers(&a.a)?, &read_numbers(&a.b)?, a.alpha)?;
    println!("n-1 = {}", r.df);
    println!("mean difference = {:.6}", r.mean_difference);
    println!("t = {:.6}", r.t);
    match r.p {
        Some(p) => println!("p = {p:.6}"),
        None => println!("p = undefined (zero-variance differences)"),
    }
    println!("significant at {} = {}", a.alpha, r.significant);
    Ok(())
}

fn finish_forest(forest: &mut Forest, mode: TrainMode) -> Result<Option<Vec<ExportRecord>>> {
    if forest.should_skip()? {
        return Ok(None);
    }
    match mode {
        TrainMode::Branched => forest.compute_advantages()?,
        TrainMode::Linear => forest.compute_linear_advantages()?,
    };
    Ok(Some(trainer::training_export(forest)?))
}

fn export_training(a: ExportArgs) -> Result<()> {
    let mode: TrainMode = a.forest.mode.into();
    let fcfg = forest_config(&a.forest);
    TrainConfig { forest: fcfg, ..TrainConfig::for_mode(mode) }.validate().map_err(config_err)?;
    let mut bank = load_bank(&a.bank)?;
    if let Some(n) = a.limit {
        bank.truncate(n);
    }

    let mut forests = Vec::with_capacity(bank.len());
    match a.backend {
        BackendArg::Sim => {
            let (spec, policy): (GameSpec, Option<PolicyParams>) = match &a.run {
                Some(dir) => {
                    let m = RunManifest::load(dir)?;
                    if m.config.forest.depth != fcfg.depth {
                        return Err(config_err(format!(
                            "run was trained at depth {}, export requested depth {}",
                            m.config.forest.depth, fcfg.depth
                        )));
                    }
                    (m.spec, Some(load_checkpoint(dir)?.params))
                }
                None => (a.spec.load()?, None),
            };
            let env = SimEnv::new(spec, fcfg.depth).map_err(config_err)?;
            let policy = policy.unwrap_or_else(|| env.new_policy());
            for (i, case) in bank.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(experiment::step_seed(a.seed, i as u64 + 1));
                forests.push(trainer::sample_forest(&policy, case, &env, fcfg, &mut rng)?.forest);
            }
        }
        BackendArg::Gateway => {
            let path = a.config.as_ref().ok_or_else(|| config_err("--backend gateway needs --config"))?;
            let gcfg = GatewayConfig::load(path).with_context(|| format!("gateway config {}", path.display()))?;
            let generate_all = |backend: &dyn CompletionBackend, forests: &mut Vec<Forest>| -> Result<()> {
                for case in &bank {
                    let g = generate_forest(RoleBackends::single(backend), &gcfg, case, fcfg)
                        .with_context(|| format!("case {}", case.case_id))?;
                    forests.push(g.forest);
                }
                Ok(())
            };
            if let Some(store) = &a.replay {
                let file = File::open(store).with_context(|| format!("opening {}", store.display()))?;
                let replay = ReplayBackend::load(BufReader::new(file))?;
                generate_all(&replay, &mut forests)?;
            } else {
                let client = ChatClient::new(
                    HttpTransport::new(Duration::from_secs(120))?,
                    RetryPolicy::new(gcfg.max_retries, Duration::from_millis(gcfg.backoff_ms)),
                );
                match &a.record {
                    Some(store) => {
                        let file = fs::OpenOptions::new()
                            .create(true)
                            .append(true)
                            .open(store)
                            .with_context(|| format!("opening {}", store.display()))?;
                        let rec = RecordingBackend::new(client, BufWriter::new(file));
                        generate_all(&rec, &mut forests)?;
                        rec.into_sink().flush()?;
                    }
                    None => generate_all(&client, &mut forests)?,
                }
            }
        }
    }

    let mut records = Vec::new();
    let mut skipped = 0;
    for forest in &mut forests {
        match finish_forest(forest, mode)? {
            Some(r) => records.extend(r),
            None => skipped += 1,
        }
    }
    let mut out = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    trainer::write_export(&mut out, &records)?;
    out.flush()?;
    if let Some(path) = &a.forests {
        let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        for f in &forests {
            f.write_jsonl(&mut out)?;
        }
        out.flush()?;
    }
    println!(
        "exported {} completions from {} cases ({} skipped for uniform rewards) to {}",
        records.len(),
        forests.len() - skipped,
        skipped,
        a.out.display()
    );
    Ok(())
}
