use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use physpred::harness::ablate::{ablation_key_values, ablation_table, run_ablation};
use physpred::harness::config::{Generator, RunConfig};
use physpred::harness::dataset::{build_dataset, generate_to_dir};
use physpred::harness::eval::{evaluate_model, evaluate_persistence, key_value_lines, table};
use physpred::harness::checkpoint;
use physpred::harness::train::{run_training, CHECKPOINT_FILE, CONFIG_FILE};
use physpred::network::Model;
use physpred::harness::verify::{checks, run_all, suite_passed, Check};
use physpred::Result;

#[derive(Parser)]
#[command(name = "physpred", version, about = "Spatio-temporal forecasting with physics-constrained latent dynamics")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test splits into a directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes metrics.log, checkpoint.stck and config.txt to out_dir.
    Train {
        /// Print every n-th log line.
        #[arg(long, default_value_t = 10)]
        log_every: usize,
    },
    /// Evaluate a trained run on the evaluation split.
    Eval {
        /// Run directory; defaults to the configured out_dir.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Report the persistence baseline next to the model.
        #[arg(long)]
        persistence: bool,
    },
    /// Central-difference checks of every differentiable component.
    GradCheck,
    /// Run the full oracle and invariant suite.
    Verify,
    /// Patch-size × upsampler × H1 sweep.
    Ablate,
}

fn load_config(cli: &Cli, base: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, base) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(p)) => RunConfig::load(p)?,
        (None, None) => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.set)?;
    cfg.validate()?;
    Ok(cfg)
}

fn print_check(c: &Check) {
    let status = match (c.passed, c.gating) {
        (true, _) => "PASS",
        (false, true) => "FAIL",
        (false, false) => "INFO",
    };
    println!("{status} {}: {}", c.name, c.detail);
}

fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::GenData { out } => {
            let cfg = load_config(cli, None)?;
            std::fs::create_dir_all(out)?;
            let meta = generate_to_dir(&cfg, out)?;
            println!("wrote {} to {}", meta.generator, out.display());
            print!("{}", meta.to_text());
            Ok(true)
        }
        Command::Train { log_every } => {
            let cfg = load_config(cli, None)?;
            let every = (*log_every).max(1);
            let steps = cfg.train.steps;
            let out = run_training(&cfg, &mut |line| {
                let step: usize = line
                    .split_whitespace()
                    .next()
                    .and_then(|f| f.strip_prefix("step="))
                    .and_then(|s| s.parse().ok())
                    .unwrap_or(0);
                if step.is_multiple_of(every) || step + 1 == steps {
                    println!("{line}");
                }
            })?;
            println!("wrote {}", out.out_dir.display());
            Ok(true)
        }
        Command::Eval { run, persistence } => {
            let dir = match run {
                Some(d) => d.clone(),
                None => load_config(cli, None)?.out_dir,
            };
            let saved = dir.join(CONFIG_FILE);
            let cfg = load_config(cli, Some(&saved))?;
            let data = build_dataset(&cfg)?;
            let mut model = Model::new(cfg.model_config(data.frame), cfg.seed)?;
            checkpoint::load_into(&dir.join(CHECKPOINT_FILE), &mut model.store)?;
            let with_nmse = cfg.data.generator == Generator::NavierStokes;
            let report = evaluate_model(&model, &data.eval, &cfg.eval, with_nmse)?;
            let baseline = if *persistence {
                Some(evaluate_persistence(&data.eval, &cfg.eval, with_nmse)?)
            } else {
                None
            };
            let kv = key_value_lines(&report, baseline.as_ref());
            print!("{}", table(&report, baseline.as_ref()));
            println!();
            print!("{kv}");
            std::fs::write(dir.join("eval.txt"), kv)?;
            Ok(true)
        }
        Command::GradCheck => {
            let mut ok = true;
            for (name, _, f) in checks().into_iter().filter(|(n, _, _)| n.starts_with("grad_")) {
                let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
                print_check(&Check {
                    name,
                    passed,
                    gating: true,
                    detail,
                });
                ok &= passed;
            }
            Ok(ok)
        }
        Command::Verify => {
            let results = run_all(&mut print_check);
            let ok = suite_passed(&results);
            let passed = results.iter().filter(|c| c.passed).count();
            println!("{passed}/{} checks passed; suite {}", results.len(), if ok { "PASS" } else { "FAIL" });
            Ok(ok)
        }
        Command::Ablate => {
            let cfg = load_config(cli, None)?;
            let (rows, baseline) = run_ablation(&cfg, &mut |line| println!("{line}"))?;
            let text = ablation_table(&rows, &baseline);
            print!("{text}");
            std::fs::create_dir_all(&cfg.out_dir)?;
            std::fs::write(cfg.out_dir.join("ablation.txt"), format!("{text}\n{}", ablation_key_values(&rows)))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
