use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use guided_rl::env::{make_test_set, Dynamics, GoalEnvSpec, GuideController};
use guided_rl::guidance::{pretrain_guide_q, PretrainConfig, QTargetKind};
use guided_rl::harness::{
    aggregate_runs, emit_plots, evaluate, evaluate_guide, load_actor, read_curve, run_experiment, save_guide_q,
    write_curve, ExperimentConfig, CURVE_FILE,
};

#[derive(Parser)]
#[command(name = "guided-rl", version, about = "Guide-accelerated TD3 + HER experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the guide's Q-function from noisy guide rollouts.
    PretrainGuide {
        #[arg(long)]
        env: Dynamics,
        /// Environment steps of guide experience to collect.
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        grad_steps: usize,
        #[arg(long, value_delimiter = ',', default_value = "64,64")]
        hidden: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Regression target: `sarsa` or `monte_carlo`.
        #[arg(long, default_value = "sarsa")]
        target: QTargetKind,
    },
    /// Train one seed of an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Success rate of a saved actor on the test set.
    Evaluate {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        env: Dynamics,
        #[arg(long, default_value_t = 100)]
        test_set_size: usize,
        #[arg(long, default_value_t = 2024)]
        test_set_seed: u64,
    },
    /// Aggregate all runs under a directory into per-variant curves.
    Aggregate {
        #[arg(long)]
        runs: PathBuf,
    },
    /// Render curves found under a directory as SVG panels.
    Plot {
        #[arg(long)]
        curves: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> guided_rl::Result<()> {
    match command {
        Command::PretrainGuide {
            env,
            steps,
            out,
            grad_steps,
            hidden,
            seed,
            target,
        } => {
            let spec = GoalEnvSpec::new(env);
            let guide = GuideController::for_spec(&spec);
            let cfg = PretrainConfig {
                target,
                hidden,
                grad_steps,
                ..PretrainConfig::default()
            };
            let (guide_q, report) = pretrain_guide_q(&spec, &guide, steps, &cfg, seed)?;
            save_guide_q(&out, &guide_q)?;
            println!(
                "collected {} steps in {} episodes, guide success {:.3}",
                report.env_steps, report.episodes, report.guide_success_rate
            );
            for (step, residual) in &report.residual_curve {
                println!("grad step {step:>7}  held-out error {residual:.4}");
            }
            println!("wrote {}", out.display());
        }
        Command::Train { config, seed } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = run_experiment(&cfg, seed)?;
            if let Some(last) = outcome.rows.last() {
                println!(
                    "{} {} seed {seed}: final success {:.3} after {} steps",
                    cfg.env, cfg.variant, last.success_rate, last.env_steps
                );
            }
            println!("wrote {}", outcome.metrics_path.display());
        }
        Command::Evaluate {
            snapshot,
            env,
            test_set_size,
            test_set_seed,
        } => {
            let spec = GoalEnvSpec::new(env);
            let tests = make_test_set(test_set_size, test_set_seed);
            let actor = load_actor(&snapshot)?;
            let rate = evaluate(&actor, &spec, &tests)?;
            let guide = evaluate_guide(&spec, &GuideController::for_spec(&spec), &tests)?;
            println!("policy success {rate:.3}  (guide {guide:.3})");
        }
        Command::Aggregate { runs } => {
            for curve in aggregate_runs(&runs)? {
                let path = runs.join(&curve.env).join(&curve.variant).join(CURVE_FILE);
                write_curve(&path, &curve)?;
                if let Some(last) = curve.points.last() {
                    println!(
                        "{}/{}: {} seeds, final success {:.3} ± {:.3}",
                        curve.env,
                        curve.variant,
                        curve.seeds.len(),
                        last.success_rate.mean,
                        last.success_rate.std
                    );
                }
                println!("wrote {}", path.display());
            }
        }
        Command::Plot { curves, out } => {
            let loaded = find_curves(&curves)?
                .iter()
                .map(|p| read_curve(p))
                .collect::<guided_rl::Result<Vec<_>>>()?;
            for path in emit_plots(&loaded, &out)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn find_curves(root: &Path) -> guided_rl::Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_owned()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == CURVE_FILE) {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}
