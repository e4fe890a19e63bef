//! `ucv`: command-line front end for campaigns on the analytic potentials.

use anyhow::{bail, Context};
use clap::{Arg, ArgAction, ArgMatches, Command};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use ucv_core::driver::{evaluate_test_set, load_reports, Campaign, GenerationReport, Method, RunConfig, RunDir};
use ucv_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_DEGENERATE: u8 = 3;

/// Errors the user can fix by editing the configuration.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn cli() -> Command {
    let mut common = vec![
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("config file (key = value, with schema_version)"),
        Arg::new("run-dir")
            .long("run-dir")
            .value_name("DIR")
            .help("run directory; an existing config.lock there is reopened"),
    ];
    for key in RunConfig::KEYS.iter().filter(|k| **k != "output_dir") {
        common.push(
            Arg::new(*key)
                .long(flag(key))
                .value_name("VALUE")
                .help(RunConfig::describe(key).unwrap_or_default()),
        );
    }
    let sub = |name: &'static str, about: &'static str| Command::new(name).about(about).args(common.clone());
    Command::new("ucv")
        .about("Uncertainty-biased enhanced sampling and active learning on analytic potentials")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(sub("train", "fit the next generation's exploration and production models"))
        .subcommand(sub("sample", "fit the next generation's models and run its two exploration trajectories"))
        .subcommand(sub("acquire", "run the next generation: sample, acquire, label and append"))
        .subcommand(sub("al-run", "run the remaining generations of the campaign"))
        .subcommand(sub("baseline", "run the campaign with a baseline method (default bias_energy)"))
        .subcommand(sub("pmf", "umbrella/MBAR PMF of a production model fitted on the current dataset"))
        .subcommand(
            Command::new("report")
                .about("print the generation reports of a run directory")
                .arg(Arg::new("run-dir").long("run-dir").value_name("DIR").required(true))
                .arg(Arg::new("json").long("json").action(ArgAction::SetTrue).help("print JSON instead of a table")),
        )
}

fn overrides(m: &ArgMatches) -> Vec<(&'static str, String)> {
    RunConfig::KEYS
        .iter()
        .filter(|k| **k != "output_dir")
        .filter_map(|k| m.get_one::<String>(k).map(|v| (*k, v.clone())))
        .collect()
}

fn config_err(e: Error) -> anyhow::Error {
    match e {
        Error::Config(_) | Error::Parse { .. } => ConfigError(e.to_string()).into(),
        other => other.into(),
    }
}

/// Opens the campaign named by the flags: a fresh one from `--config` and
/// the key flags, or the one already in `--run-dir`.
fn open(m: &ArgMatches, force_baseline: bool) -> anyhow::Result<Campaign> {
    let run_dir = m.get_one::<String>("run-dir").map(PathBuf::from);
    let keys = overrides(m);
    let lock = run_dir.as_ref().map(|d| RunDir { root: d.clone() }.config_lock());
    if let (Some(dir), Some(lock)) = (&run_dir, &lock) {
        if lock.exists() {
            if m.get_one::<String>("config").is_some() {
                return Err(ConfigError(format!("{} already holds a config.lock; drop --config", dir.display())).into());
            }
            let mut campaign = Campaign::resume(dir).map_err(config_err)?;
            for (k, v) in &keys {
                let mut probe = campaign.config.clone();
                probe.set(k, v).map_err(config_err)?;
                if *k == "generations" {
                    probe.validate().map_err(config_err)?;
                    campaign.config = probe;
                } else if probe != campaign.config {
                    return Err(ConfigError(format!("{k} differs from config.lock; only generations may change")).into());
                }
            }
            check_baseline(&campaign.config, force_baseline)?;
            return Ok(campaign);
        }
    }
    let mut config = match m.get_one::<String>("config") {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {p}"))?;
            RunConfig::parse(&text).map_err(config_err)?
        }
        None => RunConfig::default(),
    };
    for (k, v) in &keys {
        config.set(k, v).map_err(config_err)?;
    }
    if force_baseline && !keys.iter().any(|(k, _)| *k == "method") {
        config.method = Method::BiasEnergy;
    }
    check_baseline(&config, force_baseline)?;
    if let Some(d) = &run_dir {
        config.output_dir = d.to_string_lossy().into_owned();
    }
    config.validate().map_err(config_err)?;
    Campaign::new(config).map_err(config_err)
}

fn check_baseline(config: &RunConfig, force_baseline: bool) -> anyhow::Result<()> {
    if force_baseline && config.method == Method::GmmCv {
        return Err(ConfigError("baseline needs method ensemble_cv, bias_energy or unbiased".into()).into());
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn summary_line(r: &GenerationReport) -> String {
    format!(
        "gen {:>2}  n {:>5}  coverage {:.4}  force MAE {:.4}  production force MAE {:.4}  acquired {:>3}{}{}",
        r.generation,
        r.dataset_size,
        r.coverage,
        r.test_force_mae,
        r.production_force_mae,
        r.acquired,
        r.pmf.as_ref().map(|p| format!("  PMF MAE {:.3}", p.pmf_mae)).unwrap_or_default(),
        if r.degenerate { "  DEGENERATE" } else { "" },
    )
}

fn train(m: &ArgMatches) -> anyhow::Result<u8> {
    let campaign = open(m, false)?;
    let g = campaign.next_generation();
    let c = &campaign.config;
    let (explorer, calibration_size) = campaign.fit_explorer(g)?;
    let production = campaign.fit_surrogate(&campaign.dataset, c.features_production, g)?;
    let (e, f) = evaluate_test_set(explorer.pes(), &campaign.test_set)?;
    let (pe, pf) = evaluate_test_set(&production, &campaign.test_set)?;
    if let Some(dir) = &campaign.run_dir {
        campaign.save_explorer(dir, g, &explorer)?;
        production.save(&dir.models().join(format!("gen{g:02}_production.json")))?;
    }
    print_json(&serde_json::json!({
        "generation": g,
        "dataset_size": campaign.dataset.len(),
        "calibration_size": calibration_size,
        "test_energy_mae": e,
        "test_force_mae": f,
        "production_energy_mae": pe,
        "production_force_mae": pf,
    }))?;
    Ok(0)
}

fn sample(m: &ArgMatches) -> anyhow::Result<u8> {
    let campaign = open(m, false)?;
    let samples = campaign.sample_generation()?;
    if let Some(dir) = &campaign.run_dir {
        campaign.write_trajectories(dir, &samples)?;
    }
    print_json(&serde_json::json!({
        "generation": samples.generation,
        "schedule": samples.schedule,
        "gamma": samples.gamma,
        "runs": samples.runs,
    }))?;
    let degenerate = samples.runs.iter().all(|r| r.steps_completed == 0);
    Ok(if degenerate { EXIT_DEGENERATE } else { 0 })
}

fn acquire(m: &ArgMatches) -> anyhow::Result<u8> {
    let mut campaign = open(m, false)?;
    if campaign.next_generation() > campaign.config.generations {
        bail!(ConfigError(format!(
            "all {} generations are done; raise --generations",
            campaign.config.generations
        )));
    }
    let r = campaign.run_generation()?;
    print_json(&r)?;
    Ok(if r.degenerate { EXIT_DEGENERATE } else { 0 })
}

fn al_run(m: &ArgMatches, baseline: bool) -> anyhow::Result<u8> {
    let mut campaign = open(m, baseline)?;
    // a reopened run may have raised `generations`
    if let Some(dir) = &campaign.run_dir {
        std::fs::write(dir.config_lock(), campaign.config.to_text())?;
    }
    let mut degenerate = false;
    while campaign.next_generation() <= campaign.config.generations {
        let r = campaign.run_generation()?;
        println!("{}", summary_line(&r));
        degenerate |= r.degenerate;
    }
    Ok(if degenerate { EXIT_DEGENERATE } else { 0 })
}

fn pmf(m: &ArgMatches) -> anyhow::Result<u8> {
    let campaign = open(m, false)?;
    let g = campaign.reports.len() as u32;
    let production = campaign.fit_surrogate(&campaign.dataset, campaign.config.features_production, g.max(1))?;
    let report = campaign.pmf_checkpoint(&production, g)?;
    print_json(&report)?;
    Ok(0)
}

fn report(m: &ArgMatches) -> anyhow::Result<u8> {
    let dir = Path::new(m.get_one::<String>("run-dir").expect("required"));
    if !dir.is_dir() {
        bail!(ConfigError(format!("{} is not a directory", dir.display())));
    }
    let reports = load_reports(dir)?;
    if m.get_flag("json") {
        print_json(&reports)?;
    } else {
        for r in &reports {
            println!("{}", summary_line(r));
        }
    }
    Ok(if reports.iter().any(|r| r.degenerate) { EXIT_DEGENERATE } else { 0 })
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("train", m)) => train(m),
        Some(("sample", m)) => sample(m),
        Some(("acquire", m)) => acquire(m),
        Some(("al-run", m)) => al_run(m, false),
        Some(("baseline", m)) => al_run(m, true),
        Some(("pmf", m)) => pmf(m),
        Some(("report", m)) => report(m),
        _ => unreachable!("subcommand required"),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(EXIT_CONFIG)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
