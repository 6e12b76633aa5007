use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector2;

use pushplan::control::{track, TrackConfig};
use pushplan::harness::{
    emit_plots, generate_scene, load_scene, save_scene, write_bench_csv, write_plan_csv, write_track_csv, BenchConfig, PlotSource,
    Scene,
};
use pushplan::planner::{plan, PlanParams, PlanResult};
use pushplan::simulator::{run_episode, Action, Disturbance, DisturbanceSchedule, Script, WorldState};
use pushplan::Error;

const EXIT_PLAN_FAILED: u8 = 2;
const EXIT_INPUT: u8 = 3;

#[derive(Parser)]
#[command(name = "pushplan", version, about = "Contact-aware planar push planning and tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Ablation {
    /// Treat movable obstacles as fixed.
    NoContact,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "n-max", default_value_t = 1000)]
    n_max: usize,
    /// Reachable-set step (s).
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    #[arg(long, value_enum)]
    ablation: Option<Ablation>,
    /// Output CSV; standard output if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl PlanArgs {
    fn params(&self) -> PlanParams {
        PlanParams {
            seed: self.seed,
            n_max: self.n_max,
            tau: self.tau,
            contact: self.ablation.is_none(),
            ..PlanParams::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Plan a path and write it as CSV.
    Plan(PlanArgs),
    /// Plan, then track the plan in closed loop on the simulator.
    Track {
        #[command(flatten)]
        plan: PlanArgs,
        /// Disable the disturbance observer.
        #[arg(long)]
        no_observer: bool,
        /// Constant force on the slider: `fx,fy,t_start,t_end` (N, s).
        #[arg(long, value_parser = parse_force, allow_hyphen_values = true)]
        force: Vec<[f64; 4]>,
    },
    /// Plan, then replay the plan's controls open loop on the simulator.
    Simulate {
        #[command(flatten)]
        plan: PlanArgs,
    },
    /// Run the planner over scene families and seeds.
    Bench {
        /// Comma-separated scene families.
        #[arg(long, value_delimiter = ',', default_values_t = [0u8, 1, 2, 3, 4])]
        families: Vec<u8>,
        /// Number of seeds, starting at `--seed`.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "n-max", default_value_t = 1000)]
        n_max: usize,
        #[arg(long, default_value_t = 0.05)]
        tau: f64,
        /// Also run the arm with movables treated as fixed.
        #[arg(long, value_enum)]
        ablation: Option<Ablation>,
        /// Directory for trials.csv and summary.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a scene of one family.
    SceneGen {
        #[arg(long)]
        family: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSON; standard output if omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a scene file.
    Validate {
        #[arg(long)]
        scene: PathBuf,
    },
}

fn parse_force(s: &str) -> Result<[f64; 4], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected fx,fy,t_start,t_end".to_string())
}

enum Failure {
    Input(String),
    Plan(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Input(e.to_string())
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Input(e.to_string())
    }
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn planned(args: &PlanArgs) -> Result<(Scene, PlanResult), Failure> {
    let scene = load_scene(&args.scene)?;
    let task = scene.plan_task(args.params())?;
    let result = plan(&task)?;
    let s = &result.stats;
    eprintln!(
        "success={} nodes={} iterations={} path_length={:.4} wall_time={:.2}",
        result.success, s.nodes_in_tree, s.iterations, s.path_length_m, s.wall_time
    );
    if !result.success {
        return Err(Failure::Plan("no path found within the budget".into()));
    }
    Ok((scene, result))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Plan(args) => {
            let (_, result) = planned(&args)?;
            let dt = args.params().tau_lqr;
            write_plan_csv(&result, dt, output(&args.out)?)?;
        }
        Command::Track { plan: args, no_observer, force } => {
            let (scene, result) = planned(&args)?;
            let world = scene.world()?;
            let cfg = TrackConfig {
                observer: !no_observer,
                plan_dt: args.params().tau_lqr,
                ..TrackConfig::default()
            };
            let entries = force
                .iter()
                .map(|f| Disturbance::from_force(&world.model, result.states[0].pose.theta, Vector2::new(f[0], f[1]), f[2], f[3]))
                .collect();
            let schedule = DisturbanceSchedule::new(entries)?;
            let log = track(&world, WorldState::initial(&world, result.states[0]), &result, &cfg, &schedule)?;
            eprintln!(
                "max_error={:.5} integrated_error={:.5} diverged_steps={} fault={:?}",
                log.max_error(),
                log.integrated_error(),
                log.diverged_steps(),
                log.fault
            );
            write_track_csv(&log, output(&args.out)?)?;
        }
        Command::Simulate { plan: args } => {
            let (scene, result) = planned(&args)?;
            let world = scene.world()?;
            let dt = args.params().tau_lqr;
            let actions = result
                .controls
                .iter()
                .enumerate()
                .map(|(k, u)| Action {
                    input: *u,
                    psi_reset: result.reseats.iter().find(|(j, _)| *j == k).map(|(_, p)| *p),
                })
                .collect();
            let mut script = Script::new(actions);
            let initial = WorldState::initial(&world, result.states[0]);
            let log = run_episode(&world, initial, &mut script, result.controls.len() as f64 * dt, dt, &DisturbanceSchedule::default())?;
            eprintln!("fault={:?}", log.fault);
            let mut w = csv::Writer::from_writer(output(&args.out)?);
            w.write_record(["t", "x", "y", "theta", "psi_c", "movable_poses"]).map_err(Error::from)?;
            for r in &log.records {
                let s = &r.state;
                let movables: Vec<String> = s.movables.iter().map(|p| format!("{} {} {}", p.x, p.y, p.theta)).collect();
                w.write_record(
                    [s.time, s.slider.pose.x, s.slider.pose.y, s.slider.pose.theta, s.slider.psi_c]
                        .iter()
                        .map(|v| format!("{v}"))
                        .chain(std::iter::once(movables.join(";"))),
                )
                .map_err(Error::from)?;
            }
            w.flush()?;
            if log.fault.is_some() {
                return Err(Failure::Plan("simulated replay faulted".into()));
            }
        }
        Command::Bench { families, seeds, seed, n_max, tau, ablation, out } => {
            let cfg = BenchConfig {
                families,
                seeds: (seed..seed + seeds).collect(),
                params: PlanParams {
                    n_max,
                    tau,
                    ..PlanParams::default()
                },
                ablation: ablation.is_some(),
                threads: None,
            };
            let report = pushplan::harness::bench(&cfg);
            eprint!("{}", report.summary_table());
            match out {
                Some(dir) => emit_plots(PlotSource::Bench(&report), &dir)?,
                None => write_bench_csv(&report, io::stdout().lock())?,
            }
        }
        Command::SceneGen { family, seed, out } => {
            let scene = generate_scene(family, seed)?;
            match out {
                Some(p) => save_scene(&scene, &p)?,
                None => println!("{}", serde_json::to_string_pretty(&scene).map_err(|e| Failure::Input(e.to_string()))?),
            }
        }
        Command::Validate { scene } => {
            load_scene(Path::new(&scene))?;
            println!("ok");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(Failure::Plan(m)) => {
            eprintln!("{m}");
            ExitCode::from(EXIT_PLAN_FAILED)
        }
    }
}
