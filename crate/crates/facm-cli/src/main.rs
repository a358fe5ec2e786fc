//! `facm-lab`: command-line front end for the flow-anchored consistency
//! laboratory.
//!
//! One binary, seven verbs. The three training verbs (`pretrain`,
//! `distill`, `scratch`) read a `key = value` config file, apply `--set`
//! overrides, and leave a resolved-config snapshot, the seed, a loss
//! trace, and a checkpoint in the output directory, so every run is
//! diffable and exactly repeatable. `sample` and `eval` work from a
//! checkpoint; `verify` and `equivalence` are hermetic numeric checks.
//!
//! Exit codes: 0 success, 1 runtime failure (aborted training, failed
//! checks, unreadable checkpoints), 2 usage or config errors.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use facm_core::checkpoint::Checkpoint;
use facm_core::config::{Paradigm, TrainConfig};
use facm_core::error::Error;
use facm_core::eval::{evaluate, ode_reference_metrics, report_csv, sample_labels, samples_csv};
use facm_core::sampler::{few_step_sample_labeled, OdeMethod, SampleSchedule};
use facm_core::tensor::Tensor;
use facm_core::trainer::{distill, pretrain_teacher, train_scratch, trace_csv, TrainOutcome};
use facm_core::verify;

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "facm-lab",
    version,
    about = "Desk-scale laboratory for flow-anchored consistency training on 2D distributions",
    propagate_version = true
)]
struct Cli {
    /// Output directory (default: $FACM_LAB_OUT/<verb>, or runs/<verb>)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Master seed. Training verbs: replaces the config seed. Other verbs:
    /// seeds the run directly (default 0).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Cap on worker threads; `--threads 1` guarantees bit-reproducible
    /// traces (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a velocity-anchor teacher from data
    Pretrain(TrainArgs),
    /// Distill a pretrained teacher into a few-step model
    Distill(TrainArgs),
    /// Train the joint anchored objective from scratch (no teacher)
    Scratch(TrainArgs),
    /// Generate samples from a checkpoint
    Sample(SampleArgs),
    /// Score a checkpoint against fresh data at several step budgets
    Eval(EvalArgs),
    /// Run the hermetic invariant suite and print a pass/fail table
    Verify,
    /// Print the max gap between the two baseline shortcut targets
    Equivalence(EquivalenceArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file of `key = value` lines; omitted or empty means defaults
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set lr=3e-4 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Teacher checkpoint (distill only; may also come from the config)
    #[arg(long)]
    teacher: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint to sample from
    #[arg(long)]
    checkpoint: PathBuf,

    /// Number of model evaluations per sample
    #[arg(long, default_value_t = 1)]
    nfe: usize,

    #[arg(long, default_value_t = 2000)]
    n_samples: usize,

    /// Fix one class label for every sample (default: uniform over classes)
    #[arg(long)]
    label: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    checkpoint: PathBuf,

    /// Step budgets to score, e.g. --nfe-list 1,2,4
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    nfe_list: Vec<usize>,

    #[arg(long, default_value_t = 2000)]
    n_samples: usize,

    /// Teacher checkpoint for a multi-step ODE reference row
    #[arg(long)]
    ode_reference: Option<PathBuf>,

    /// Steps for the ODE reference row
    #[arg(long, default_value_t = 200)]
    ode_steps: usize,

    /// ODE integrator: euler or heun
    #[arg(long, default_value = "heun")]
    ode_method: String,
}

#[derive(Args)]
struct EquivalenceArgs {
    /// Number of random networks to sweep
    #[arg(long, default_value_t = 20)]
    nets: usize,
}

/// A terminating failure: what to print and which exit code to use.
struct Failure {
    code: u8,
    msg: String,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, msg: msg.into() }
}

fn runtime(msg: impl Into<String>) -> Failure {
    Failure { code: EXIT_RUNTIME, msg: msg.into() }
}

fn from_core(e: Error) -> Failure {
    match e {
        Error::ConfigParse { .. }
        | Error::UnknownConfigKey { .. }
        | Error::InvalidConfigValue { .. }
        | Error::UnknownDataset { .. } => usage(e.to_string()),
        other => runtime(other.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| runtime(format!("thread pool: {e}")))?;
    }
    let verb = match &cli.cmd {
        Cmd::Pretrain(_) => "pretrain",
        Cmd::Distill(_) => "distill",
        Cmd::Scratch(_) => "scratch",
        Cmd::Sample(_) => "sample",
        Cmd::Eval(_) => "eval",
        Cmd::Verify => "verify",
        Cmd::Equivalence(_) => "equivalence",
    };
    let out_dir = resolve_out(&cli.out, verb);
    match &cli.cmd {
        Cmd::Pretrain(a) => train_cmd(Paradigm::Pretrain, a, &cli, &out_dir),
        Cmd::Distill(a) => train_cmd(Paradigm::Distill, a, &cli, &out_dir),
        Cmd::Scratch(a) => train_cmd(Paradigm::Scratch, a, &cli, &out_dir),
        Cmd::Sample(a) => sample_cmd(a, &cli, &out_dir),
        Cmd::Eval(a) => eval_cmd(a, &cli, &out_dir),
        Cmd::Verify => verify_cmd(&cli, &out_dir),
        Cmd::Equivalence(a) => equivalence_cmd(a, &cli, &out_dir),
    }
}

fn resolve_out(flag: &Option<PathBuf>, verb: &str) -> PathBuf {
    if let Some(o) = flag {
        return o.clone();
    }
    let root = std::env::var_os("FACM_LAB_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(verb)
}

fn parse_sets(sets: &[String]) -> Result<Vec<(String, String)>, Failure> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {s:?}")))
        })
        .collect()
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, Failure> {
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| runtime(format!("cannot create output dir {}: {e}", dir.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path)
        .map_err(|e| runtime(format!("cannot load checkpoint {}: {e}", path.display())))
}

fn train_cmd(paradigm: Paradigm, args: &TrainArgs, cli: &Cli, out_dir: &Path) -> Result<(), Failure> {
    let text = match &args.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| usage(format!("cannot read config file {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = parse_sets(&args.set)?;
    if let Some(teacher) = &args.teacher {
        overrides.push(("teacher".to_string(), teacher.display().to_string()));
    }
    if let Some(seed) = cli.seed {
        overrides.push(("seed".to_string(), seed.to_string()));
    }
    let cfg = TrainConfig::parse(paradigm, &text, &overrides).map_err(from_core)?;

    prepare_out(out_dir)?;
    write_file(out_dir, "config.resolved", &cfg.to_text())?;
    write_file(out_dir, "seed.txt", &format!("{}\n", cfg.seed))?;

    let outcome: TrainOutcome = match paradigm {
        Paradigm::Pretrain => pretrain_teacher(&cfg).map_err(from_core)?,
        Paradigm::Scratch => train_scratch(&cfg).map_err(from_core)?,
        Paradigm::Distill => {
            let tpath = cfg.teacher.clone().ok_or_else(|| {
                usage("distillation needs a teacher checkpoint: --teacher PATH or `teacher = PATH` in the config")
            })?;
            let teacher = load_checkpoint(Path::new(&tpath))?;
            distill(&teacher, &cfg).map_err(from_core)?
        }
    };

    write_file(out_dir, "trace.csv", &trace_csv(&outcome.trace))?;
    let ckpt_path = out_dir.join("checkpoint.facm");
    outcome
        .checkpoint
        .save(&ckpt_path)
        .map_err(|e| runtime(format!("cannot save checkpoint: {e}")))?;

    if let Some(last) = outcome.trace.last() {
        println!(
            "{} finished: {} steps, final loss {:.6} (anchor {:.6}, shortcut {:.6}), {} non-finite steps",
            paradigm.name(),
            outcome.trace.len(),
            last.total,
            last.fm,
            last.cm,
            outcome.non_finite_steps
        );
    }
    println!("wrote {}", out_dir.display());
    if outcome.aborted_early {
        return Err(runtime(format!(
            "training aborted after a non-finite streak; partial artifacts are in {}",
            out_dir.display()
        )));
    }
    Ok(())
}

fn sample_cmd(args: &SampleArgs, cli: &Cli, out_dir: &Path) -> Result<(), Failure> {
    if args.nfe == 0 {
        return Err(usage("--nfe must be at least 1"));
    }
    if args.n_samples == 0 {
        return Err(usage("--n-samples must be at least 1"));
    }
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let net = ckpt.eval_network().map_err(from_core)?;
    let seed = cli.seed.unwrap_or(0);
    let dataset = ckpt.config.dataset;
    let labels = match args.label {
        Some(l) => {
            let classes = dataset.num_classes();
            if classes == 0 {
                return Err(usage(format!(
                    "dataset {} has no class labels; drop --label",
                    dataset.name()
                )));
            }
            if l >= classes {
                return Err(usage(format!(
                    "label {l} out of range for {} ({} classes)",
                    dataset.name(),
                    classes
                )));
            }
            vec![Some(l); args.n_samples]
        }
        None => sample_labels(dataset, args.n_samples, seed),
    };
    let schedule = SampleSchedule::uniform(args.nfe);
    let pts = few_step_sample_labeled(&net, &schedule, &labels, seed);

    prepare_out(out_dir)?;
    write_file(out_dir, "config.resolved", &ckpt.config.to_text())?;
    write_file(out_dir, "seed.txt", &format!("{seed}\n"))?;
    let path = write_file(out_dir, "samples.csv", &samples_csv(&pts, &labels, args.nfe, seed))?;
    println!("wrote {} samples to {}", args.n_samples, path.display());
    Ok(())
}

fn eval_cmd(args: &EvalArgs, cli: &Cli, out_dir: &Path) -> Result<(), Failure> {
    if args.nfe_list.is_empty() || args.nfe_list.contains(&0) {
        return Err(usage("--nfe-list needs positive step counts"));
    }
    if args.n_samples == 0 {
        return Err(usage("--n-samples must be at least 1"));
    }
    let method = OdeMethod::parse(&args.ode_method)
        .ok_or_else(|| usage(format!("unknown --ode-method {:?} (euler|heun)", args.ode_method)))?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let seed = cli.seed.unwrap_or(0);
    let dataset = ckpt.config.dataset;
    let out = evaluate(&ckpt, dataset, &args.nfe_list, args.n_samples, seed).map_err(from_core)?;

    prepare_out(out_dir)?;
    write_file(out_dir, "config.resolved", &ckpt.config.to_text())?;
    write_file(out_dir, "seed.txt", &format!("{seed}\n"))?;
    for (nfe, pts, labels) in &out.samples {
        write_file(out_dir, &format!("samples_nfe{nfe}.csv"), &samples_csv(pts, labels, *nfe, seed))?;
    }
    write_file(out_dir, "reference.csv", &reference_csv(&out.reference.0, &out.reference.1))?;

    let mut rows = out.rows;
    if let Some(teacher_path) = &args.ode_reference {
        if args.ode_steps == 0 {
            return Err(usage("--ode-steps must be at least 1"));
        }
        let teacher = load_checkpoint(teacher_path)?;
        let tnet = teacher.eval_network().map_err(from_core)?;
        let (row, pts, labels) = ode_reference_metrics(
            &tnet,
            &ckpt.config.guidance(),
            dataset,
            args.ode_steps,
            method,
            args.n_samples,
            seed,
        );
        write_file(out_dir, "ode_reference_samples.csv", &samples_csv(&pts, &labels, row.nfe, seed))?;
        rows.push(row);
    }
    let report = report_csv(&rows);
    write_file(out_dir, "report.csv", &report)?;
    print!("{report}");
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn reference_csv(points: &Tensor, labels: &[Option<usize>]) -> String {
    let (n, _) = points.dims2();
    let mut s = String::from("x,y,label\n");
    for i in 0..n {
        let row = points.row(i);
        let label = labels[i].map(|l| l.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{label}\n", row[0], row[1]));
    }
    s
}

fn verify_cmd(cli: &Cli, out_dir: &Path) -> Result<(), Failure> {
    let seed = cli.seed.unwrap_or(0);
    let results = verify::run_all(seed);
    let table = verify::render_table(&results);
    print!("{table}");
    prepare_out(out_dir)?;
    write_file(out_dir, "seed.txt", &format!("{seed}\n"))?;
    write_file(out_dir, "verify.txt", &table)?;
    if verify::all_pass(&results) {
        Ok(())
    } else {
        let failed = results.iter().filter(|r| !r.pass).count();
        Err(runtime(format!("{failed} verification check(s) failed")))
    }
}

fn equivalence_cmd(args: &EquivalenceArgs, cli: &Cli, out_dir: &Path) -> Result<(), Failure> {
    if args.nets == 0 {
        return Err(usage("--nets must be at least 1"));
    }
    let seed = cli.seed.unwrap_or(0);
    let max = verify::equivalence_max(seed, args.nets);
    let line = format!(
        "max |T_avg(r=1) - T_tan(w=1/(1-t))| over {} nets x 9 t values: {max:.3e}\n",
        args.nets
    );
    print!("{line}");
    prepare_out(out_dir)?;
    write_file(out_dir, "seed.txt", &format!("{seed}\n"))?;
    write_file(out_dir, "equivalence.txt", &line)?;
    if max <= 1e-12 {
        Ok(())
    } else {
        Err(runtime(format!("equivalence gap {max:.3e} exceeds 1e-12")))
    }
}
