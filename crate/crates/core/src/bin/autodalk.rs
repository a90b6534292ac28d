use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use autodalk::controller::ArmMode;
use autodalk::dataset::{self, DatasetConfig};
use autodalk::harness::{self, TrackingKind, TrialConfig};
use autodalk::robot::NoiseModel;
use autodalk::segnet::{self, io as net_io};
use autodalk::serve::{self, ServeOptions};

#[derive(Parser)]
#[command(name = "autodalk", version, about = "OCT-guided needle insertion simulator")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// TOML trial configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the verb.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Verb-specific mode.
    #[arg(long, global = true)]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Verb {
    /// One insertion; mode autonomous|teleop.
    RunTrial,
    /// A simulated cohort; mode autonomous|teleop|both.
    RunCohort,
    /// ISO 9283 style positioning benchmark; mode calibrated|zero.
    IsoBench,
    /// Train the segmentation network; mode full|cv.
    TrainNet,
    /// DM tracking error of trained weights, or mode cv.
    EvalTracker,
    /// Live session over TCP and WebSocket; mode autonomous|teleop.
    Serve {
        /// Stop after this many frames.
        #[arg(long)]
        max_ticks: Option<u64>,
        /// Free-run instead of pacing at the controller period.
        #[arg(long)]
        fast: bool,
        /// Seconds to wait for clients before the trial starts.
        #[arg(long, default_value_t = 0.0)]
        wait: f64,
    },
}

fn load_config(cli: &Cli) -> Result<TrialConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrialConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => TrialConfig::new(0),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.dataset.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn arm_mode(mode: Option<&str>, default: ArmMode) -> Result<ArmMode> {
    Ok(match mode {
        None => default,
        Some("autonomous" | "ar") => ArmMode::Autonomous,
        Some("teleop" | "tr") => ArmMode::Teleop,
        Some(m) => bail!("unknown mode {m:?}; expected autonomous or teleop"),
    })
}

fn write_out(out: Option<&Path>, name: &str, text: &str) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(name), text)?;
    }
    Ok(())
}

fn run_trial(cli: &Cli, mut cfg: TrialConfig) -> Result<()> {
    cfg.controller.mode = arm_mode(cli.mode.as_deref(), cfg.controller.mode)?;
    let outcome = harness::run_trial(&cfg)?;
    if let Some(path) = &cli.out {
        harness::write_log(path, &outcome.log)?;
    }
    println!("{}", serde_json::to_string_pretty(&outcome.result)?);
    Ok(())
}

fn run_cohort(cli: &Cli, cfg: TrialConfig) -> Result<()> {
    let modes = match cli.mode.as_deref() {
        None | Some("both") => vec![ArmMode::Autonomous, ArmMode::Teleop],
        Some(m) => vec![arm_mode(Some(m), ArmMode::Autonomous)?],
    };
    let mut summary = String::from(harness::TABLE_HEADER);
    summary.push('\n');
    for mode in modes {
        let mut c = cfg.clone();
        c.controller.mode = mode;
        let label = if mode == ArmMode::Autonomous { "ar" } else { "tr" };
        let dir = cli.out.as_ref().map(|o| o.join(label));
        let report = harness::run_cohort(&c, dir.as_deref())?;
        write_out(dir.as_deref(), "trials.tsv", &report.trials_table())?;
        summary.push_str(&report.stats.table_row(report.label()));
        summary.push('\n');
    }
    write_out(cli.out.as_deref(), "summary.tsv", &summary)?;
    print!("{summary}");
    Ok(())
}

fn iso_bench(cli: &Cli, mut cfg: TrialConfig) -> Result<()> {
    match cli.mode.as_deref() {
        None | Some("calibrated") => {}
        Some("zero") => cfg.iso.noise = NoiseModel::NONE,
        Some(m) => bail!("unknown mode {m:?}; expected calibrated or zero"),
    }
    let report = harness::run_iso_bench(&cfg.kin, &cfg.iso, cfg.seed)?;
    let mut table = String::from("target_um\tmean_dev_um\tsigma_fwd_um\tsigma_bwd_um\n");
    for ((t, m), s) in report.targets.iter().zip(&report.position_mean_deviation).zip(&report.position_sigma) {
        table.push_str(&format!("{t:.3}\t{m:.4}\t{:.4}\t{:.4}\n", s[0], s[1]));
    }
    table.push_str(&format!(
        "average_deviation\t{:.4}\nmean_deviation\t{:.4}\nrepeatability\t{:.4}\naccuracy\t{:.4}\n",
        report.average_deviation, report.mean_deviation, report.repeatability, report.accuracy
    ));
    if let Some(out) = &cli.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("iso.tsv"), &table)?;
        fs::write(out.join("iso.json"), serde_json::to_string_pretty(&report)?)?;
    }
    print!("{table}");
    Ok(())
}

fn frames(cfg: &DatasetConfig) -> Result<Vec<dataset::LabeledFrame>> {
    eprintln!("rendering {} phantoms x {} frames", cfg.phantoms, cfg.frames_per_phantom);
    Ok(dataset::generate(cfg)?)
}

fn cross_validate(cli: &Cli, cfg: &TrialConfig) -> Result<()> {
    let data = frames(&cfg.dataset)?;
    let cv = dataset::cross_validate_tracking(&data, &cfg.train, &cfg.tracking.tracker)?;
    let table = cv.table();
    if let Some(out) = &cli.out {
        fs::create_dir_all(out)?;
        fs::write(out.join("cv.tsv"), &table)?;
        fs::write(out.join("cv.json"), serde_json::to_string_pretty(&cv)?)?;
    }
    print!("{table}");
    Ok(())
}

fn train_net(cli: &Cli, cfg: TrialConfig) -> Result<()> {
    match cli.mode.as_deref() {
        Some("cv") => cross_validate(cli, &cfg),
        None | Some("full") => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("segnet.bin"));
            let samples: Vec<_> = frames(&cfg.dataset)?.iter().map(|f| f.sample()).collect();
            let (net, losses) = segnet::train(&samples, &cfg.train)?;
            net_io::save(&out, &net)?;
            for (epoch, l) in losses.iter().enumerate() {
                println!("epoch\t{epoch}\tloss\t{l:.5}");
            }
            println!("weights\t{}", out.display());
            Ok(())
        }
        Some(m) => bail!("unknown mode {m:?}; expected full or cv"),
    }
}

fn eval_tracker(cli: &Cli, cfg: TrialConfig) -> Result<()> {
    if cli.mode.as_deref() == Some("cv") {
        return cross_validate(cli, &cfg);
    }
    let Some(weights) = &cfg.tracking.weights else {
        bail!("eval-tracker needs tracking.weights in the config, or --mode cv");
    };
    let net = net_io::load(weights)?;
    let eval = dataset::eval_tracking(&frames(&cfg.dataset)?, &net, &cfg.tracking.tracker)?;
    let line = format!(
        "frames\t{}\tmissing\t{}\tdm_err_um\t{:.3}\tsd_um\t{:.3}\n",
        eval.errors_um.len(),
        eval.missing,
        eval.mean_um,
        eval.std_um
    );
    write_out(cli.out.as_deref(), "eval.tsv", &line)?;
    print!("{line}");
    Ok(())
}

fn run_serve(cli: &Cli, mut cfg: TrialConfig, max_ticks: Option<u64>, fast: bool, wait: f64) -> Result<()> {
    cfg.controller.mode = arm_mode(cli.mode.as_deref(), cfg.controller.mode)?;
    let net = match cfg.tracking.kind {
        TrackingKind::Neural => Some(net_io::load(cfg.tracking.weights.as_ref().expect("validated"))?),
        TrackingKind::OracleMask => None,
    };
    let tcp = TcpListener::bind(cfg.wire.addr()?).with_context(|| format!("binding {:?}", cfg.wire))?;
    let ws = TcpListener::bind(cfg.gateway.addr()?).with_context(|| format!("binding {:?}", cfg.gateway))?;
    eprintln!("tcp {}  ws ws://{}", tcp.local_addr()?, ws.local_addr()?);
    let opts = ServeOptions {
        realtime: !fast,
        max_ticks,
        wait_for_client: (wait > 0.0).then(|| Duration::from_secs_f64(wait)),
        linger: Duration::ZERO,
    };
    let summary = serve::serve(cfg, net, Some(tcp), Some(ws), &opts)?;
    eprintln!("{} ticks, {} frames sent, {} commands", summary.ticks, summary.frames_sent, summary.commands_received);
    if let Some(r) = &summary.result {
        let json = serde_json::to_string_pretty(r)?;
        if let Some(out) = &cli.out {
            fs::write(out, &json)?;
        }
        println!("{json}");
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = load_config(&cli)?;
    cfg.wire = cfg.wire.clone().with_env()?;
    match &cli.verb {
        Verb::RunTrial => run_trial(&cli, cfg),
        Verb::RunCohort => run_cohort(&cli, cfg),
        Verb::IsoBench => iso_bench(&cli, cfg),
        Verb::TrainNet => train_net(&cli, cfg),
        Verb::EvalTracker => eval_tracker(&cli, cfg),
        Verb::Serve { max_ticks, fast, wait } => run_serve(&cli, cfg, *max_ticks, *fast, *wait),
    }
}
