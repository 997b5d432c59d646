use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bimanual_core::eval::{
    codegen_requests, eval_codegen, eval_vision, geom_check, sim_exec, EvalReport, SceneManifest, SimExecError,
    EXIT_GEOMETRY, EXIT_USAGE,
};
use bimanual_core::geometry::load_calibration_file;
use bimanual_core::kitchen::StateSummary;
use bimanual_core::orchestrator::{BackendKind, Outcome};
use bimanual_core::{Pipeline, PipelineConfig, Scene};
use clap::{Parser, Subcommand};

/// Exit status: 0 completed, 1 geometry residual too large, 2 usage or
/// configuration error, 3 refused, 4 plan parse, 5 code parse or validation,
/// 6 execution, 7 goal not met, 8 model backend failure.
#[derive(Parser)]
#[command(name = "bimanual", version, about = "Language-grounded bimanual kitchen pipeline")]
struct Cli {
    /// Pipeline config (TOML). Defaults to the built-in mock setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Where traces and reports are written.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Overrides the config backend.
    #[arg(long, global = true, value_parser = ["mock", "remote"])]
    backend: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Handle one request against a scene.
    Run {
        #[arg(long)]
        request: String,
        #[arg(long)]
        scene: PathBuf,
    },
    /// Code-generation campaign over generated or supplied requests.
    EvalCodegen {
        #[arg(long, default_value_t = 99)]
        n: usize,
        /// One request per line, as `Recipe Name<TAB>request text`.
        #[arg(long)]
        requests: Option<PathBuf>,
        /// Stop after validation instead of executing.
        #[arg(long)]
        no_execute: bool,
    },
    /// Vision campaign over a scene manifest.
    EvalVision {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Scenes to generate when no manifest is given.
        #[arg(long, default_value_t = 100)]
        scenes: usize,
        #[arg(long)]
        miss_rate: Option<f64>,
        #[arg(long)]
        mislabel_rate: Option<f64>,
    },
    /// Parse, validate and execute a program file on a scene.
    SimExec {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        scene: PathBuf,
    },
    /// Round-trip check of a calibration file.
    GeomCheck {
        #[arg(long)]
        calibration: PathBuf,
    },
}

struct Fail(i32, String);

impl<E: std::fmt::Display> From<E> for Fail {
    fn from(e: E) -> Self {
        Fail(EXIT_USAGE, e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(Fail(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code as u8)
        }
    }
}

fn config(cli: &Cli) -> Result<PipelineConfig, Fail> {
    let mut c = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(b) = &cli.backend {
        c.backend = b.parse::<BackendKind>()?;
    }
    Ok(c)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf, Fail> {
    fs::create_dir_all(dir).map_err(|e| Fail(EXIT_USAGE, format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| Fail(EXIT_USAGE, format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn run(cli: Cli) -> Result<i32, Fail> {
    match &cli.command {
        Command::Run { request, scene } => {
            let pipeline = Pipeline::new(config(&cli)?)?;
            let scene = Scene::load(scene)?;
            let trace = pipeline.handle_request(request, &scene);
            let path = write(&cli.out_dir, "trace.jsonl", &trace.to_jsonl())?;
            let outcome = trace.outcome();
            if let Some(hit) = trace.retrieved() {
                println!("recipe: {} (score {:.4})", hit.recipe.name, hit.score);
            }
            println!("outcome: {outcome}");
            if matches!(outcome, Outcome::Completed) {
                print_summary(&trace.final_state().summary());
            }
            println!("trace: {}", path.display());
            Ok(outcome.exit_code())
        }
        Command::EvalCodegen { n, requests, no_execute } => {
            let mut c = config(&cli)?;
            if *no_execute {
                c.pipeline.execute = false;
            }
            let pipeline = Pipeline::new(c)?;
            let cases = match requests {
                Some(p) => read_requests(p)?,
                None => {
                    let recipes: Vec<_> = pipeline.store().recipes().cloned().collect();
                    codegen_requests(&recipes, *n, pipeline.config().seed)
                }
            };
            let report = eval_codegen(&pipeline, &cases);
            emit_report(&cli.out_dir, "eval-codegen", &report)?;
            Ok(0)
        }
        Command::EvalVision { manifest, scenes, miss_rate, mislabel_rate } => {
            let mut c = config(&cli)?;
            if let Some(r) = miss_rate {
                c.vision.miss_rate = *r;
            }
            if let Some(r) = mislabel_rate {
                c.vision.mislabel_rate = *r;
            }
            c.injection()?;
            let pipeline = Pipeline::new(c)?;
            let (m, base) = match manifest {
                Some(p) => (
                    SceneManifest::from_toml(
                        &fs::read_to_string(p).map_err(|e| Fail(EXIT_USAGE, format!("{}: {e}", p.display())))?,
                    )?,
                    p.parent(),
                ),
                None => {
                    let recipes: Vec<_> = pipeline.store().recipes().cloned().collect();
                    let m = SceneManifest::generate(&recipes, *scenes, pipeline.config().seed);
                    write(&cli.out_dir, "manifest.toml", &m.to_toml())?;
                    (m, None)
                }
            };
            let resolved = m.resolve(|name| pipeline.store().get(name), base)?;
            let report = eval_vision(&pipeline, &resolved);
            emit_report(&cli.out_dir, "eval-vision", &report)?;
            Ok(0)
        }
        Command::SimExec { program, scene } => {
            let source =
                fs::read_to_string(program).map_err(|e| Fail(EXIT_USAGE, format!("{}: {e}", program.display())))?;
            let scene = Scene::load(scene)?;
            match sim_exec(&source, &scene) {
                Err(SimExecError::Parse(e)) => {
                    eprintln!(
                        "{}:{}:{}: {:?}: {}",
                        program.display(),
                        e.location.line,
                        e.location.column,
                        e.code,
                        e.message
                    );
                    Ok(5)
                }
                Err(SimExecError::Validation(report)) => {
                    for e in &report.violations {
                        eprintln!(
                            "{}:{}:{}: {:?}: {}",
                            program.display(),
                            e.location.line,
                            e.location.column,
                            e.code,
                            e.message
                        );
                    }
                    Ok(5)
                }
                Ok(run) => {
                    let lines: Vec<String> =
                        run.trace.iter().map(|e| serde_json::to_string(e).expect("event serializes")).collect();
                    let path = write(&cli.out_dir, "sim-trace.jsonl", &(lines.join("\n") + "\n"))?;
                    print_summary(&run.state.summary());
                    println!("trace: {}", path.display());
                    match run.failure {
                        None => Ok(0),
                        Some(f) => {
                            eprintln!("call {} failed: {}", f.call_index, f.error);
                            Ok(6)
                        }
                    }
                }
            }
        }
        Command::GeomCheck { calibration } => {
            let model = load_calibration_file(calibration)?;
            let check = geom_check(&model)?;
            println!("grid points: {}", check.grid_points);
            println!("max residual: {:.3e} m", check.max_residual);
            if check.passed {
                println!("ok");
                Ok(0)
            } else {
                println!("FAIL: residual exceeds 1e-6 m");
                Ok(EXIT_GEOMETRY)
            }
        }
    }
}

fn read_requests(path: &Path) -> Result<Vec<(String, String)>, Fail> {
    let text = fs::read_to_string(path).map_err(|e| Fail(EXIT_USAGE, format!("{}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(r, q)| (r.trim().to_string(), q.trim().to_string()))
                .ok_or_else(|| Fail(EXIT_USAGE, format!("{}:{}: expected `recipe<TAB>request`", path.display(), i + 1)))
        })
        .collect()
}

fn emit_report(dir: &Path, name: &str, report: &EvalReport) -> Result<(), Fail> {
    write(dir, &format!("{name}.json"), &report.to_json())?;
    write(dir, &format!("{name}-rows.jsonl"), &report.rows_jsonl())?;
    let text = report.to_text();
    write(dir, &format!("{name}.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn print_summary(s: &StateSummary) {
    println!("bowl: {}", if s.bowl_objects.is_empty() { "-".to_string() } else { s.bowl_objects.join(", ") });
    if !s.bowl_contents.is_empty() {
        println!("poured: {}", s.bowl_contents.join(", "));
    }
    println!("mixed: {}", s.bowl_mixed);
    println!("board: {}", s.board.as_deref().unwrap_or("-"));
    println!("gripper holds: {}", s.gripper.held.as_deref().unwrap_or("-"));
}
