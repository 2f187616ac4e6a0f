//! Command-line front end: scenario generation, training, open/closed-loop
//! evaluation, ablation sweeps, and report merging.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use bridgead_core::config::RunConfig;
use bridgead_core::error::{Error, Result};
use bridgead_core::eval::{run_closed_loop_suite, run_open_loop};
use bridgead_core::model::BridgeModel;
use bridgead_core::par::Strategy;
use bridgead_core::report::{line_plot_svg, merge, save_plot, Report, Series};
use bridgead_core::scene::{generate_scenario, Scenario, ScenarioTemplate};
use bridgead_core::training::train;

#[derive(Parser)]
#[command(name = "bridgead", about = "History-bridged end-to-end driving at desk scale", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scenario JSON files.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// open_loop_random, frontal_adversary, side_adversary,
        /// stationary_blockage, or "all".
        #[arg(long, default_value = "open_loop_random")]
        template: String,
    },
    /// Train a model on a scenario directory and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional SVG loss-curve path.
        #[arg(long)]
        loss_curve: Option<PathBuf>,
        /// Optional JSON training report path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Open-loop evaluation of a checkpoint.
    EvalOpen {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Report displacement at each horizon instead of the mean up to it.
        #[arg(long)]
        at_step: bool,
        #[arg(long)]
        sequential: bool,
    },
    /// Closed-loop evaluation of a checkpoint.
    EvalClosed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        sequential: bool,
    },
    /// Train/evaluate over a grid of history-fusion switches.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated flags to sweep (subset of: mot2det, his_mot,
        /// his_plan, mot2plan).
        #[arg(long, default_value = "his_plan,mot2plan")]
        flags: String,
        #[arg(long)]
        sequential: bool,
    },
    /// Merge metric reports into one CSV (and optional plot).
    Report {
        #[arg(long, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Allow mixing reports with different config hashes.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        plot: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            // env overrides still apply without a file
            let text = serde_json::to_string(&RunConfig::default())?;
            RunConfig::from_json(&text)
        }
    }
}

fn templates_for(name: &str) -> Result<Vec<ScenarioTemplate>> {
    if name == "all" {
        return Ok(vec![
            ScenarioTemplate::OpenLoopRandom,
            ScenarioTemplate::FrontalAdversary,
            ScenarioTemplate::SideAdversary,
            ScenarioTemplate::StationaryBlockage,
        ]);
    }
    Ok(vec![name.parse()?])
}

fn template_index(t: ScenarioTemplate) -> usize {
    match t {
        ScenarioTemplate::OpenLoopRandom => 0,
        ScenarioTemplate::FrontalAdversary => 1,
        ScenarioTemplate::SideAdversary => 2,
        ScenarioTemplate::StationaryBlockage => 3,
    }
}

fn load_scenarios(dir: &Path) -> Result<Vec<Scenario>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().is_some_and(|x| x == "json")
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("scenario_"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no scenario_*.json files in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| Scenario::load(p)).collect()
}

fn scenario_id(s: &Scenario) -> String {
    format!("scenario_{:04}_{:03}", s.seed, template_index(s.template))
}

fn cmd_gen(config: &Option<PathBuf>, out: &Path, count: usize, template: &str) -> Result<()> {
    let cfg = load_config(config)?;
    std::fs::create_dir_all(out)?;
    for t in templates_for(template)? {
        for i in 0..count {
            let seed = cfg.scenario_seed + i as u64;
            let s = generate_scenario(seed, t);
            let name = format!("scenario_{:04}_{:03}.json", seed, template_index(t));
            s.save(&out.join(name))?;
        }
    }
    Ok(())
}

fn cmd_train(
    config: &Option<PathBuf>,
    scenarios: &Path,
    out: &Path,
    loss_curve: &Option<PathBuf>,
    report: &Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let scenarios = load_scenarios(scenarios)?;
    let mut model = BridgeModel::new(cfg.clone());
    let epochs = train(&mut model, &scenarios)?;
    model.save_checkpoint(out)?;
    if let Some(path) = loss_curve {
        let series = [
            Series {
                name: "total",
                points: epochs.iter().enumerate().map(|(i, e)| (i as f64, e.total)).collect(),
            },
            Series {
                name: "plan_reg",
                points: epochs.iter().enumerate().map(|(i, e)| (i as f64, e.plan_reg)).collect(),
            },
            Series {
                name: "det_reg",
                points: epochs.iter().enumerate().map(|(i, e)| (i as f64, e.det_reg)).collect(),
            },
        ];
        save_plot(path, &line_plot_svg("training loss", "epoch", "loss", &series))?;
    }
    if let Some(path) = report {
        let mut r = Report::new(&cfg.hash());
        for (i, e) in epochs.iter().enumerate() {
            let h = i as f64;
            r.push("train", "loss_total", h, e.total);
            r.push("train", "loss_det_reg", h, e.det_reg);
            r.push("train", "loss_det_cls", h, e.det_cls);
            r.push("train", "loss_map_reg", h, e.map_reg);
            r.push("train", "loss_map_cls", h, e.map_cls);
            r.push("train", "loss_mot_reg", h, e.mot_reg);
            r.push("train", "loss_mot_cls", h, e.mot_cls);
            r.push("train", "loss_plan_reg", h, e.plan_reg);
            r.push("train", "loss_plan_cls", h, e.plan_cls);
        }
        r.save_json(path)?;
    }
    Ok(())
}

fn strategy(sequential: bool) -> Strategy {
    if sequential {
        Strategy::Sequential
    } else {
        Strategy::Parallel
    }
}

fn cmd_eval_open(
    checkpoint: &Path,
    scenarios: &Path,
    out: &Path,
    csv: &Option<PathBuf>,
    at_step: bool,
    sequential: bool,
) -> Result<()> {
    let model = BridgeModel::load_checkpoint(checkpoint)?;
    let scenarios = load_scenarios(scenarios)?;
    let open = run_open_loop(&model, &scenarios, at_step, strategy(sequential))?;
    let mut r = Report::new(&open.config_hash);
    for &(h, v) in &open.l2_by_horizon {
        r.push("all", "l2", h, v);
    }
    for &(h, v) in &open.collision_by_horizon {
        r.push("all", "collision_rate", h, v);
    }
    r.push("all", "l2_avg", 0.0, open.l2_avg);
    r.push("all", "min_ade", 0.0, open.min_ade);
    r.push("all", "min_fde", 0.0, open.min_fde);
    r.push("all", "miss_rate", 0.0, open.miss_rate);
    r.save_json(out)?;
    if let Some(path) = csv {
        r.save_csv(path)?;
    }
    Ok(())
}

fn cmd_eval_closed(
    checkpoint: &Path,
    scenarios: &Path,
    out: &Path,
    csv: &Option<PathBuf>,
    sequential: bool,
) -> Result<()> {
    let model = BridgeModel::load_checkpoint(checkpoint)?;
    let scenario_list = load_scenarios(scenarios)?;
    let closed = run_closed_loop_suite(&model, &scenario_list, strategy(sequential))?;
    let mut r = Report::new(&closed.config_hash);
    // per_scenario preserves input order
    for (i, &(_, score)) in closed.per_scenario.iter().enumerate() {
        let sid = scenario_list
            .get(i)
            .map(scenario_id)
            .unwrap_or_else(|| format!("scenario_{i}"));
        r.push(&sid, "safety_score", 0.0, score);
    }
    r.push("all", "safety_score_mean", 0.0, closed.mean_score);
    r.push("all", "collision_fraction", 0.0, closed.collision_fraction);
    r.save_json(out)?;
    if let Some(path) = csv {
        r.save_csv(path)?;
    }
    Ok(())
}

fn cmd_ablate(
    config: &Option<PathBuf>,
    scenarios: &Path,
    out: &Path,
    flags: &str,
    sequential: bool,
) -> Result<()> {
    let base = load_config(config)?;
    let scenario_list = load_scenarios(scenarios)?;
    std::fs::create_dir_all(out)?;
    let names: Vec<&str> = flags.split(',').map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
    for n in &names {
        if !matches!(*n, "mot2det" | "his_mot" | "his_plan" | "mot2plan") {
            return Err(Error::Config(format!("unknown ablation flag {n}")));
        }
    }
    if names.is_empty() || names.len() > 4 {
        return Err(Error::Config("need 1..=4 ablation flags".to_string()));
    }
    let mut rows = Report::new(&base.hash());
    for combo in 0..(1usize << names.len()) {
        let mut cfg = base.clone();
        let mut label_parts = Vec::new();
        for (bit, n) in names.iter().enumerate() {
            let on = combo & (1 << bit) != 0;
            match *n {
                "mot2det" => cfg.ablation.mot2det = on,
                "his_mot" => cfg.ablation.his_mot = on,
                "his_plan" => cfg.ablation.his_plan = on,
                "mot2plan" => cfg.ablation.mot2plan = on,
                _ => unreachable!(),
            }
            label_parts.push(format!("{n}={}", u8::from(on)));
        }
        // ';' so the label stays one CSV field
        let label = label_parts.join(";");
        let mut model = BridgeModel::new(cfg);
        train(&mut model, &scenario_list)?;
        let open = run_open_loop(&model, &scenario_list, false, strategy(sequential))?;
        rows.push(&label, "l2_avg", 0.0, open.l2_avg);
        rows.push(&label, "collision_rate", 0.0, open.collision_rate);
        rows.push(&label, "min_ade", 0.0, open.min_ade);
    }
    rows.save_json(&out.join("ablation.json"))?;
    rows.save_csv(&out.join("ablation.csv"))?;
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], out: &Path, force: bool, plot: &Option<PathBuf>) -> Result<()> {
    let reports: Result<Vec<Report>> = inputs
        .iter()
        .map(|p| {
            if p.extension().is_some_and(|x| x == "csv") {
                Report::load_csv(p)
            } else {
                Report::load_json(p)
            }
        })
        .collect();
    let merged = merge(&reports?, force)?;
    merged.save_csv(out)?;
    if let Some(path) = plot {
        // one series per metric, over horizon
        let mut metrics: Vec<&str> = merged.rows.iter().map(|r| r.metric.as_str()).collect();
        metrics.sort();
        metrics.dedup();
        let series: Vec<Series> = metrics
            .iter()
            .map(|m| Series {
                name: m,
                points: merged
                    .rows
                    .iter()
                    .filter(|r| r.metric == *m)
                    .map(|r| (r.horizon, r.value))
                    .collect(),
            })
            .collect();
        save_plot(path, &line_plot_svg("metrics", "horizon [s]", "value", &series))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen { config, out, count, template } => cmd_gen(config, out, *count, template),
        Command::Train { config, scenarios, out, loss_curve, report } => {
            cmd_train(config, scenarios, out, loss_curve, report)
        }
        Command::EvalOpen { checkpoint, scenarios, out, csv, at_step, sequential } => {
            cmd_eval_open(checkpoint, scenarios, out, csv, *at_step, *sequential)
        }
        Command::EvalClosed { checkpoint, scenarios, out, csv, sequential } => {
            cmd_eval_closed(checkpoint, scenarios, out, csv, *sequential)
        }
        Command::Ablate { config, scenarios, out, flags, sequential } => {
            cmd_ablate(config, scenarios, out, flags, *sequential)
        }
        Command::Report { inputs, out, force, plot } => cmd_report(inputs, out, *force, plot),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
