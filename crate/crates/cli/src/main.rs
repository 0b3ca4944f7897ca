use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use vrft_core::data_io::{
    build_prompt, few_shot_sample, load_annotations, read_response_log, template_for, write_annotations,
    AnnotationSet, DataError, TaskKind,
};
use vrft_core::eval::{evaluate, results_from_log, APResult, EvalConfig, EvalError, SizeBuckets};
use vrft_core::grpo::{GrpoError, TrainerConfig};
use vrft_core::reward::{detection_reward, GroundTruthInstance, RewardBreakdown, RewardConfig, RewardError, RewardWeights};
use vrft_core::toy::{
    default_classification_scene, default_detection_scene, generate_scenes, scenes_from_annotations, train,
    LatticeSpec, Scene, SceneKind, ToyError,
};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error("{0}")]
    Usage(String),
    #[error("cannot write {path}: {source}")]
    Write { path: PathBuf, source: std::io::Error },
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Internal(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Parser)]
#[command(name = "vrft", version, about = "Verifiable-reward scoring, detection evaluation, and toy GRPO training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score a detection response log against annotations.
    Reward(RewardArgs),
    /// COCO-style AP table for a detection response log.
    Eval(EvalArgs),
    /// Train tabular policies with GRPO on toy scenes.
    TrainSim(TrainArgs),
    /// Draw a few-shot subset of an annotation file.
    Sample(SampleArgs),
    /// Print a prompt template.
    Prompts(PromptArgs),
}

#[derive(Args)]
struct InputArgs {
    /// COCO-style annotation JSON.
    #[arg(long)]
    annotations: PathBuf,
    /// Line-delimited response records.
    #[arg(long)]
    responses: PathBuf,
}

#[derive(Args)]
struct RewardArgs {
    #[command(flatten)]
    input: InputArgs,
    /// JSON report with per-record breakdowns and means.
    #[arg(long)]
    out: Option<PathBuf>,
    /// IoU threshold for a prediction to count as matched.
    #[arg(long, default_value_t = vrft_core::reward::DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = 1.0)]
    w_iou: f64,
    #[arg(long, default_value_t = 1.0)]
    w_conf: f64,
    #[arg(long, default_value_t = 1.0)]
    w_format: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Gate predictions by the records' existence judgments.
    #[arg(long)]
    judge: bool,
    /// JSON result record.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Detections kept per image and category.
    #[arg(long, default_value_t = 100)]
    max_detections: usize,
    /// Skip the small/medium/large breakdown.
    #[arg(long)]
    no_size_buckets: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    Classification,
    Detection,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum, default_value_t = Scenario::Classification)]
    scenario: Scenario,
    /// Generate this many procedural scenes instead of the default one.
    #[arg(long, default_value_t = 0)]
    scenes: usize,
    /// Candidate labels per generated classification scene.
    #[arg(long, default_value_t = 4)]
    labels: usize,
    /// Build detection scenes from an annotation file instead.
    #[arg(long, conflicts_with = "scenes")]
    annotations: Option<PathBuf>,
    /// Training curve, one JSON record per step.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    group_size: usize,
    #[arg(long, default_value_t = 0.1)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.04)]
    beta: f64,
    #[arg(long, default_value_t = 1e-8)]
    std_floor: f64,
    #[arg(long, default_value_t = vrft_core::reward::DEFAULT_TAU)]
    tau: f64,
    /// Corner spacing of the anchor lattice.
    #[arg(long, default_value_t = 125)]
    grid_step: i32,
    /// Rows in the printed summary table.
    #[arg(long, default_value_t = 10)]
    summary_rows: usize,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// Images per category.
    #[arg(long)]
    shots: usize,
    /// Comma-separated category names.
    #[arg(long, value_delimiter = ',', required = true)]
    categories: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Detection,
    Classification,
    Existence,
}

#[derive(Args)]
struct PromptArgs {
    #[arg(long, value_enum)]
    task: Task,
    #[arg(long)]
    category: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Reward(a) => cmd_reward(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::TrainSim(a) => cmd_train_sim(&a),
        Command::Sample(a) => cmd_sample(&a),
        Command::Prompts(a) => cmd_prompts(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value)
        .map(|mut s| {
            s.push('\n');
            s
        })
        .map_err(|e| CliError::Internal(e.to_string()))
}

fn load_inputs(input: &InputArgs) -> Result<(AnnotationSet, vrft_core::data_io::ResponseLog), CliError> {
    let ann = load_annotations(&input.annotations)?;
    let log = read_response_log(&input.responses, &ann)?;
    Ok((ann, log))
}

#[derive(Serialize)]
struct RewardRecord<'a> {
    image_id: u64,
    category: &'a str,
    #[serde(flatten)]
    reward: RewardBreakdown,
}

#[derive(Serialize, Default)]
struct RewardMeans {
    count: usize,
    r_iou: f64,
    r_conf: f64,
    r_format: f64,
    total: f64,
}

#[derive(Serialize)]
struct RewardReport<'a> {
    records: Vec<RewardRecord<'a>>,
    mean: RewardMeans,
}

fn cmd_reward(a: &RewardArgs) -> Result<(), CliError> {
    let (ann, log) = load_inputs(&a.input)?;
    let weights = RewardWeights {
        iou: a.w_iou,
        conf: a.w_conf,
        format: a.w_format,
        ..RewardWeights::default()
    };
    let cfg = RewardConfig::new(a.tau, weights)?;
    let records: Vec<RewardRecord<'_>> = log
        .records
        .iter()
        .map(|r| {
            let gts: Vec<GroundTruthInstance> = ann
                .instances_of(r.image_id, &r.category)
                .map(|i| GroundTruthInstance::new(i.category.clone(), i.bbox))
                .collect();
            RewardRecord {
                image_id: r.image_id,
                category: &r.category,
                reward: detection_reward(&r.response, &gts, &cfg),
            }
        })
        .collect();

    let mut mean = RewardMeans {
        count: records.len(),
        ..RewardMeans::default()
    };
    if !records.is_empty() {
        let n = records.len() as f64;
        for r in &records {
            mean.r_iou += r.reward.r_iou.unwrap_or(0.0) / n;
            mean.r_conf += r.reward.r_conf.unwrap_or(0.0) / n;
            mean.r_format += r.reward.r_format / n;
            mean.total += r.reward.total / n;
        }
    }
    println!(
        "{} records: mean r_iou {:.4}, r_conf {:.4}, r_format {:.4}, total {:.4}",
        mean.count, mean.r_iou, mean.r_conf, mean.r_format, mean.total
    );
    if let Some(out) = &a.out {
        write_text(out, &to_json(&RewardReport { records, mean })?)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalRecord {
    mode: &'static str,
    images: usize,
    #[serde(flatten)]
    result: APResult,
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let (ann, log) = load_inputs(&a.input)?;
    let cfg = EvalConfig {
        judge_mode: a.judge,
        max_detections: a.max_detections,
        size_buckets: (!a.no_size_buckets).then(SizeBuckets::default),
        ..EvalConfig::default()
    };
    let logged = results_from_log(&ann, &log);
    let judgments = a.judge.then_some(logged.judgments.as_slice());
    let result = evaluate(&logged.images, &cfg, judgments)?;
    let mode = if a.judge { "judge" } else { "direct" };
    print!("{}", APResult::table(&[(mode, &result)]));
    if let Some(out) = &a.out {
        let record = EvalRecord {
            mode,
            images: logged.images.len(),
            result,
        };
        write_text(out, &to_json(&record)?)?;
    }
    Ok(())
}

fn train_scenes(a: &TrainArgs, lattice: &LatticeSpec) -> Result<Vec<Scene>, CliError> {
    if let Some(path) = &a.annotations {
        return Ok(scenes_from_annotations(&load_annotations(path)?)?);
    }
    let kind = match a.scenario {
        Scenario::Classification => SceneKind::Classification,
        Scenario::Detection => SceneKind::Detection,
    };
    if a.scenes > 0 {
        return Ok(generate_scenes(kind, a.scenes, a.labels, lattice, a.seed)?);
    }
    Ok(vec![match kind {
        SceneKind::Classification => default_classification_scene(),
        SceneKind::Detection => default_detection_scene(),
    }])
}

fn cmd_train_sim(a: &TrainArgs) -> Result<(), CliError> {
    let lattice = LatticeSpec {
        grid_step: a.grid_step,
        ..LatticeSpec::default()
    };
    let cfg = TrainerConfig {
        group_size: a.group_size,
        learning_rate: a.learning_rate,
        beta: a.beta,
        steps: a.steps,
        seed: a.seed,
        std_floor: a.std_floor,
    };
    let reward_cfg = RewardConfig::with_tau(a.tau)?;
    let scenes = train_scenes(a, &lattice)?;
    let outcome = train(&scenes, &cfg, &reward_cfg, &lattice)?;
    if let Some(out) = &a.out {
        write_text(out, &outcome.curve.to_jsonl())?;
    }
    print!("{}", outcome.curve.summary_table(a.summary_rows));
    let probs = outcome.final_best_action_probs();
    let mean_p = probs.iter().sum::<f64>() / probs.len() as f64;
    println!(
        "{} scene(s), {} steps: expected reward {:.4} -> {:.4}, best-action probability {:.4}",
        scenes.len(),
        cfg.steps,
        outcome.initial_expected_reward(),
        outcome.final_expected_reward(),
        mean_p
    );
    Ok(())
}

fn cmd_sample(a: &SampleArgs) -> Result<(), CliError> {
    let ann = load_annotations(&a.annotations)?;
    let subset = few_shot_sample(&ann, a.shots, &a.categories, a.seed)?;
    write_annotations(&subset, &a.out)?;
    println!(
        "{} images, {} instances written to {}",
        subset.images.len(),
        subset.instances.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_prompts(a: &PromptArgs) -> Result<(), CliError> {
    let kind = match a.task {
        Task::Detection => TaskKind::Detection,
        Task::Classification => TaskKind::Classification,
        Task::Existence => TaskKind::Existence,
    };
    let text = build_prompt(&template_for(kind), a.category.as_deref()).map_err(|e| match e {
        DataError::MissingCategory => CliError::Usage("this task needs --category".into()),
        other => other.into(),
    })?;
    println!("{text}");
    Ok(())
}
