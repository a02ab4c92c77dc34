use std::error::Error as StdError;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use active_look::arbitration::{arbitrate, select_budgeted, ExpertId};
use active_look::eval::{self, AccPlusMode, ConflictObservation, EvalRecord, PredictionLine, Task};
use active_look::experts::{ExpertAdapter, FixtureExpert, HttpExpert};
use active_look::fixture::{self, Scene};
use active_look::http::check_health;
use active_look::par::Execution;
use active_look::pipeline::{
    run, run_scenes, scene_proposals, write_outputs, write_trace, Adapters, PipelineConfig, Policy, RunInput,
};
use active_look::reasoner::{HttpReasoner, MockReasoner, Reasoner};
use active_look::rendering::render_views;
use active_look::synth::{self, SynthConfig};
use active_look::Error;
use clap::{Parser, Subcommand, ValueEnum};

type CliResult<T = ()> = Result<T, Box<dyn StdError>>;

#[derive(Parser)]
#[command(name = "active-look", version, about = "Dual-expert visual verification pipeline")]
struct Cli {
    /// Run on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Answer one question about one image.
    Run {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        query: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scene fixtures supplying expert detections and ground truth.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        #[arg(long)]
        mock_reasoner: bool,
        /// Shift every proposal to a placement below this IoU.
        #[arg(long, value_name = "MAX_IOU")]
        noise: Option<f64>,
        #[arg(long)]
        policy: Option<String>,
        /// Directory for the trace and rendered views.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every fixture scene with the mock reasoner and write predictions.
    Batch {
        #[arg(long)]
        fixtures: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        policy: Option<String>,
        #[arg(long, value_name = "MAX_IOU")]
        noise: Option<f64>,
        /// Prediction JSONL for `eval`.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Directory receiving one trace per scene.
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Also report baseline error split by conflict level.
        #[arg(long)]
        trigger_report: bool,
    },
    /// Emit arbitration partitions as JSONL.
    Arbitrate {
        #[arg(long)]
        fixtures: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render highlight and zoom views for every scene.
    Render {
        #[arg(long)]
        fixtures: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum)]
        task: TaskArg,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        synonyms: Option<PathBuf>,
        #[arg(long)]
        by_scale: bool,
        /// Count an image for accuracy+ only when both replies are a bare yes or no.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        json: bool,
    },
    /// Accuracy across values of one parameter.
    Sweep {
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        fixtures: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a synthetic scene fixture.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        scenes: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Query a model bridge's health endpoint.
    Health {
        #[arg(long)]
        url: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Pope,
    Mme,
    Chair,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Pope => Task::Pope,
            TaskArg::Mme => Task::Mme,
            TaskArg::Chair => Task::Chair,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    ZoomScale,
    TauBase,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match dispatch(cli.command, exec) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command, exec: Execution) -> CliResult<ExitCode> {
    match command {
        Command::Run { image, query, config, fixtures, mock_reasoner, noise, policy, out } => {
            let cfg = load_config(config.as_deref(), policy.as_deref(), noise)?;
            cmd_run(&image, &query, &cfg, fixtures.as_deref(), mock_reasoner, out.as_deref(), exec)
        }
        Command::Batch { fixtures, config, policy, noise, pred, traces, trigger_report } => {
            let cfg = load_config(config.as_deref(), policy.as_deref(), noise)?;
            cmd_batch(&fixtures, &cfg, pred.as_deref(), traces.as_deref(), trigger_report, exec)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Arbitrate { fixtures, config } => {
            cmd_arbitrate(&fixtures, &load_config(config.as_deref(), None, None)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Render { fixtures, out, config } => {
            cmd_render(&fixtures, &out, &load_config(config.as_deref(), None, None)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { pred, task, gt, synonyms, by_scale, strict, json } => {
            let mode = if strict { AccPlusMode::Strict } else { AccPlusMode::PerImage };
            let report = eval::evaluate(task.into(), &pred, &gt, synonyms.as_deref(), by_scale, mode)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{report}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { param, values, fixtures, config } => {
            cmd_sweep(param, &values, &fixtures, &load_config(config.as_deref(), None, None)?, exec)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { out, scenes, seed } => {
            let generated = synth::generate(&SynthConfig { scenes, seed, ..Default::default() })?;
            fixture::write_scenes(&out, &generated)?;
            println!("wrote {} scenes to {}", generated.len(), out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Health { url } => {
            let h = check_health(&url, Duration::from_secs(10)).map_err(|e| e.to_string())?;
            println!("{}", serde_json::to_string(&h)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_config(path: Option<&Path>, policy: Option<&str>, noise: Option<f64>) -> CliResult<PipelineConfig> {
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(p) = policy {
        cfg.policy = p.parse()?;
    }
    if let Some(max_iou) = noise {
        cfg.noise.enabled = true;
        cfg.noise.max_iou = max_iou;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_fixtures(path: &Path) -> CliResult<(Vec<Scene>, PathBuf)> {
    Ok((fixture::load_scenes(path)?, fixture::base_dir_of(path)))
}

/// The scene whose image file or id matches `image`.
fn find_scene<'a>(scenes: &'a [Scene], base: &Path, image: &Path) -> Option<&'a Scene> {
    let wanted = fs::canonicalize(image).ok();
    let stem = image.file_stem().and_then(|s| s.to_str());
    scenes
        .iter()
        .find(|s| {
            s.image_path
                .as_ref()
                .and_then(|p| fs::canonicalize(base.join(p)).ok())
                .is_some_and(|p| Some(p) == wanted)
        })
        .or_else(|| scenes.iter().find(|s| Some(s.image_id.as_str()) == stem))
}

fn cmd_run(
    image_path: &Path,
    query: &str,
    cfg: &PipelineConfig,
    fixtures: Option<&Path>,
    mock_reasoner: bool,
    out: Option<&Path>,
    exec: Execution,
) -> CliResult<ExitCode> {
    let image = image::open(image_path)
        .map_err(|e| Error::ImageUnreadable { path: image_path.to_path_buf(), reason: e.to_string() })?
        .to_rgb8();
    let (scenes, base) = match fixtures {
        Some(p) => load_fixtures(p)?,
        None => (Vec::new(), PathBuf::from(".")),
    };
    let scene = find_scene(&scenes, &base, image_path);
    let image_id = match scene {
        Some(s) => s.image_id.clone(),
        None => image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string(),
    };
    let vocabulary = fixture::vocabulary(&scenes);

    let expert = |slot: ExpertId, endpoint: &Option<String>| -> CliResult<Box<dyn ExpertAdapter>> {
        match endpoint {
            Some(url) => Ok(Box::new(HttpExpert::new(slot, url, cfg.experts.timeout())?)),
            None if fixtures.is_some() => Ok(Box::new(FixtureExpert::from_scenes(slot, &scenes))),
            None => Err(format!("expert {slot}: set experts.endpoint_{} or pass --fixtures", slot.to_string().to_lowercase()).into()),
        }
    };
    let expert_a = expert(ExpertId::A, &cfg.experts.endpoint_a)?;
    let expert_b = expert(ExpertId::B, &cfg.experts.endpoint_b)?;
    let reasoner: Box<dyn Reasoner> = if mock_reasoner {
        let s = scene.ok_or("--mock-reasoner needs a fixture scene for this image")?;
        Box::new(MockReasoner::for_scene(s, cfg.reasoner.mock))
    } else if let Some(url) = &cfg.reasoner.endpoint {
        Box::new(HttpReasoner::new(url, cfg.reasoner.timeout())?)
    } else {
        return Err("no reasoner: pass --mock-reasoner or set reasoner.endpoint".into());
    };

    let input = RunInput {
        image_id: &image_id,
        item_id: scene.map(Scene::item_id),
        image: &image,
        query,
        vocabulary: &vocabulary,
    };
    let adapters = Adapters { expert_a: expert_a.as_ref(), expert_b: expert_b.as_ref(), reasoner: reasoner.as_ref() };
    match run(&input, &adapters, cfg, exec) {
        Ok(mut output) => {
            if let Some(dir) = out {
                write_outputs(dir, &mut output.trace, &output.views)?;
            }
            let mut stdout = io::stdout().lock();
            writeln!(stdout, "trace {}", output.trace.trace_id)?;
            writeln!(stdout, "answer {}", serde_json::to_value(output.verdict.answer)?.as_str().unwrap_or("?"))?;
            writeln!(stdout, "reply {}", output.verdict.raw_text)?;
            Ok(ExitCode::SUCCESS)
        }
        Err(failure) => {
            if let Some(dir) = out {
                fs::create_dir_all(dir)?;
                write_trace(&dir.join(format!("{}.json", failure.trace.trace_id)), &failure.trace)?;
            }
            eprintln!("error: {failure}");
            Ok(ExitCode::FAILURE)
        }
    }
}

fn cmd_batch(fixtures: &Path, cfg: &PipelineConfig, pred: Option<&Path>, traces: Option<&Path>, trigger: bool, exec: Execution) -> CliResult {
    let (scenes, base) = load_fixtures(fixtures)?;
    let outcomes = run_scenes(&scenes, &base, cfg, exec);
    let failed = outcomes.iter().filter(|o| o.error.is_some()).count();
    let records: Vec<EvalRecord> = outcomes.iter().filter(|o| o.truth.is_some()).map(EvalRecord::from).collect();

    if let Some(path) = pred {
        let mut text = String::new();
        for o in &outcomes {
            text.push_str(&serde_json::to_string(&PredictionLine::from(o))?);
            text.push('\n');
        }
        fs::write(path, text)?;
    }
    if let Some(dir) = traces {
        fs::create_dir_all(dir)?;
        for scene in &scenes {
            let trace = match active_look::pipeline::run_scene(scene, &base, cfg, Execution::Sequential) {
                Ok(o) => o.trace,
                Err(f) => f.trace,
            };
            write_trace(&dir.join(format!("{}.json", scene.item_id())), &trace)?;
        }
    }

    println!("policy {}  scenes {}  failed {failed}", cfg.policy, outcomes.len());
    if !records.is_empty() {
        let m = eval::pope_metrics(&records)?;
        println!("accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}", m.accuracy, m.precision, m.recall, m.f1);
    }
    if trigger {
        if cfg.policy != Policy::ActiveLook {
            return Err("--trigger-report needs the active_look policy".into());
        }
        let baseline_cfg = PipelineConfig { policy: Policy::NoProposals, ..cfg.clone() };
        let baseline: Vec<EvalRecord> = run_scenes(&scenes, &base, &baseline_cfg, exec)
            .iter()
            .filter(|o| o.truth.is_some())
            .map(EvalRecord::from)
            .collect();
        let obs: Vec<ConflictObservation> = outcomes
            .iter()
            .filter(|o| o.truth.is_some())
            .filter_map(ConflictObservation::from_outcome)
            .collect();
        println!("{}", eval::trigger_report(&obs, &baseline, eval::DEFAULT_TRIGGER)?);
    }
    Ok(())
}

fn cmd_arbitrate(fixtures: &Path, cfg: &PipelineConfig) -> CliResult {
    let (scenes, _) = load_fixtures(fixtures)?;
    let mut stdout = io::stdout().lock();
    for scene in &scenes {
        let (a, b) = scene_proposals(scene, cfg)?;
        let partition = arbitrate(&a, &b, &cfg.arbitration);
        let selection = select_budgeted(&partition, &cfg.arbitration);
        let line = serde_json::json!({
            "image_id": scene.image_id,
            "partition": partition,
            "selection": selection,
        });
        writeln!(stdout, "{line}")?;
    }
    Ok(())
}

fn cmd_render(fixtures: &Path, out: &Path, cfg: &PipelineConfig) -> CliResult {
    let (scenes, base) = load_fixtures(fixtures)?;
    fs::create_dir_all(out)?;
    for scene in &scenes {
        let image = scene.load_image(&base)?;
        let (a, b) = scene_proposals(scene, cfg)?;
        let partition = arbitrate(&a, &b, &cfg.arbitration);
        let selection = select_budgeted(&partition, &cfg.arbitration);
        let views = render_views(&image, &partition, &selection, cfg.arbitration.per_view_cost, &cfg.render_config());
        views.global_view.save(out.join(format!("{}_global.png", scene.image_id)))?;
        for (k, z) in views.zoom_views.iter().enumerate() {
            z.image.save(out.join(format!("{}_zoom_{k}.png", scene.image_id)))?;
        }
        for f in &views.zoom_failures {
            eprintln!("{}: zoom skipped: {}", scene.image_id, f.reason);
        }
    }
    println!("rendered {} scenes into {}", scenes.len(), out.display());
    Ok(())
}

fn cmd_sweep(param: SweepParam, values: &[f64], fixtures: &Path, cfg: &PipelineConfig, exec: Execution) -> CliResult {
    let (scenes, base) = load_fixtures(fixtures)?;
    let name = match param {
        SweepParam::ZoomScale => "zoom_scale",
        SweepParam::TauBase => "tau_base",
    };
    println!("{name:>10} {:>8} {:>8} {:>12}", "accuracy", "f1", "mean zooms");
    for &v in values {
        let mut c = cfg.clone();
        match param {
            SweepParam::ZoomScale => c.zoom_scale = v,
            SweepParam::TauBase => c.arbitration.tau_base = v,
        }
        c.validate()?;
        let outcomes = run_scenes(&scenes, &base, &c, exec);
        let records: Vec<EvalRecord> = outcomes.iter().filter(|o| o.truth.is_some()).map(EvalRecord::from).collect();
        let m = eval::pope_metrics(&records)?;
        let zooms = outcomes.iter().map(|o| o.zooms).sum::<usize>() as f64 / outcomes.len().max(1) as f64;
        println!("{v:>10} {:>8.4} {:>8.4} {zooms:>12.3}", m.accuracy, m.f1);
    }
    Ok(())
}
