//! Command line front end: run scenarios, score detection logs, summarize
//! traces.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use crossway_core::perception::{evaluate_ap, replay_log, GroundTruthFrame, TruthVehicle};
use crossway_core::dynamics::VehicleState;
use crossway_core::sim::{emit_reports, run_scenario, summarize_trace_file, Scenario};

#[derive(Parser)]
#[command(name = "crossway", version, about = "Cooperative intersection simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and report the outcome.
    Run {
        scenario: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for the report files.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the full trace file (implies a default --out directory).
        #[arg(long)]
        trace: bool,
        /// Exit nonzero if any collision occurs.
        #[arg(long)]
        fail_on_collision: bool,
    },
    /// Score a detection log against a ground-truth log.
    EvalAp {
        detections_log: PathBuf,
        truth_log: PathBuf,
        /// Comma-separated IoU thresholds.
        #[arg(long, default_value = "0.3,0.5,0.7", value_delimiter = ',')]
        iou: Vec<f64>,
    },
    /// Summarize a previously written trace file.
    Replay {
        trace: PathBuf,
        #[arg(long, default_value_t = true)]
        summarize: bool,
    },
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    };
    std::process::exit(code);
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Run {
            scenario,
            seed,
            out,
            trace,
            fail_on_collision,
        } => cmd_run(scenario, seed, out, trace, fail_on_collision),
        Command::EvalAp {
            detections_log,
            truth_log,
            iou,
        } => cmd_eval_ap(detections_log, truth_log, iou),
        Command::Replay { trace, summarize } => cmd_replay(trace, summarize),
    }
}

fn cmd_run(
    path: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
    trace_flag: bool,
    fail_on_collision: bool,
) -> Result<i32> {
    let mut scenario =
        Scenario::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = seed {
        scenario.reseed(seed);
    }
    let (trace, metrics) = run_scenario(&scenario).context("running scenario")?;

    println!(
        "scenario {} seed {} duration {:.1} s",
        path.display(),
        scenario.seed,
        scenario.duration
    );
    println!(
        "vehicles {}  finished {}  collisions {}  yields {}  floors {}",
        scenario.vehicles.len(),
        metrics.travel_times.len(),
        metrics.collision_events.len(),
        metrics.yield_events.len(),
        metrics.floor_events.len()
    );
    for (id, tt) in &metrics.travel_times {
        println!("  vehicle {id}: {tt:.2} s spawn-to-goal");
    }
    for e in &metrics.collision_events {
        println!("  collision at t {:.2}: vehicles {} and {}", e.t, e.a, e.b);
    }
    println!("\ncomputation time per management tick (ms):");
    print!("{}", metrics.timing_table());

    if out.is_some() || trace_flag {
        let dir = out.unwrap_or_else(|| {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into());
            PathBuf::from("runs").join(format!("{stem}_seed{}", scenario.seed))
        });
        let files = emit_reports(&trace, &metrics, &dir)?;
        println!("\nreports:");
        for f in files {
            println!("  {}", f.display());
        }
    }

    if fail_on_collision && !metrics.collision_events.is_empty() {
        return Ok(2);
    }
    Ok(0)
}

fn cmd_eval_ap(det_path: PathBuf, truth_path: PathBuf, iou: Vec<f64>) -> Result<i32> {
    if iou.is_empty() {
        bail!("--iou needs at least one threshold");
    }
    let detections = replay_log(&det_path)
        .with_context(|| format!("reading {}", det_path.display()))?;
    let truth_frames = replay_log(&truth_path)
        .with_context(|| format!("reading {}", truth_path.display()))?;

    // the truth log reuses the detection format; scores are ignored
    let truth: Vec<GroundTruthFrame> = truth_frames
        .iter()
        .map(|f| GroundTruthFrame {
            t: f.t,
            vehicles: f
                .detections
                .iter()
                .enumerate()
                .map(|(i, d)| TruthVehicle {
                    id: i as u32,
                    state: VehicleState::new(d.detection.x, d.detection.y, d.detection.psi, 0.0),
                    length: d.detection.length,
                    width: d.detection.width,
                    is_cav: false,
                })
                .collect(),
        })
        .collect();
    let per_frame: Vec<_> = detections.iter().map(|f| f.detections.clone()).collect();
    let aps = evaluate_ap(&per_frame, &truth, &iou)?;
    for (tau, ap) in iou.iter().zip(&aps) {
        println!("AP@{tau} = {ap:.4}");
    }
    Ok(0)
}

fn cmd_replay(path: PathBuf, summarize: bool) -> Result<i32> {
    let summary = summarize_trace_file(&path)?;
    if summarize {
        println!("trace {}", path.display());
        println!("seed {}  duration {:.1} s  ticks {}", summary.seed, summary.duration, summary.ticks);
        println!("agents: {:?}", summary.agents);
        if !summary.hv_tracks.is_empty() {
            println!("hv tracks: {:?}", summary.hv_tracks);
        }
        println!(
            "commands {}  yields {}  floors {}  detections {}",
            summary.command_count, summary.yield_count, summary.floor_count, summary.detections
        );
    }
    Ok(0)
}
