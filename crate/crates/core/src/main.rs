use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use planseg::data::{
    assign_folds, generate_synthetic_dataset, read_dataset, write_dataset, CasesPerPatient, SyntheticSpec,
};
use planseg::experiment::{run_scaling_experiment, ExperimentGrid, SCALING_CSV, SCALING_PLOT};
use planseg::inference::{predict_dataset, read_segmentations, InferenceSettings, Model};
use planseg::metrics::{aggregate, evaluate_case};
use planseg::plans::{diff_configurations, parse_plans, resolve_configuration, serialize_plans, PlanFile, PlansError};
use planseg::topology::{compute_receptive_field, parameter_count};
use planseg::train::{train_fold, TrainOptions, DEFAULT_FOLDS, FINAL_CHECKPOINT};

type BoxError = Box<dyn std::error::Error>;

#[derive(Parser)]
#[command(
    name = "planseg",
    version,
    about = "Plans-driven 3D segmentation: plan, train, predict, evaluate"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Plans file (JSON).
    #[arg(long, global = true)]
    plans: Option<PathBuf>,
    /// Configuration name inside the plans file.
    #[arg(long, global = true)]
    config: Option<String>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory; every command writes only below it.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true, env = "PLANSEG_NUM_WORKERS", default_value_t = 1)]
    workers: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Resolve, validate and print a configuration.
    Plan(PlanArgs),
    /// Write a synthetic PET/CT-like dataset.
    Generate(GenerateArgs),
    /// Train one fold or all folds.
    Train(TrainArgs),
    /// Sliding-window prediction with one or more checkpoints.
    Predict(PredictArgs),
    /// Same as `predict`; averages every listed checkpoint.
    Ensemble(PredictArgs),
    /// Score predictions against ground truth.
    Evaluate(EvaluateArgs),
    #[command(subcommand)]
    Experiment(ExperimentCommand),
}

#[derive(Args)]
struct PlanArgs {
    /// Override a field: `key=json`, e.g. `batch_size=8` or `patch_size=[64,64,64]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Store planner-derived topology fields explicitly.
    #[arg(long)]
    derive: bool,
    /// Print the fields that differ from another configuration.
    #[arg(long, value_name = "OTHER")]
    diff: Option<String>,
    /// Write the modified plans file to `<out>/<plans file name>`.
    #[arg(long)]
    write: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 8)]
    patients: usize,
    /// Total cases (defaults to one per patient).
    #[arg(long)]
    cases: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64,64,64")]
    shape: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,2,2")]
    spacing: Vec<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "all_folds", required_unless_present = "all_folds")]
    fold: Option<usize>,
    #[arg(long)]
    all_folds: bool,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    num_folds: usize,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    checkpoints: Vec<PathBuf>,
    /// Defaults to the value stored in the first checkpoint.
    #[arg(long)]
    step_fraction: Option<f64>,
    /// Comma-separated axes; `none` disables mirroring.
    #[arg(long)]
    mirror_axes: Option<String>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    gt_dir: PathBuf,
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Cross-validate every configuration for every seed.
    Scaling(ScalingArgs),
}

#[derive(Args)]
struct ScalingArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    configs: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = DEFAULT_FOLDS)]
    num_folds: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.downcast_ref::<PlansError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, BoxError> {
    let g = &cli.global;
    rayon::ThreadPoolBuilder::new()
        .num_threads(g.workers.max(1))
        .build_global()?;
    match &cli.command {
        Command::Plan(a) => cmd_plan(g, a),
        Command::Generate(a) => cmd_generate(g, a),
        Command::Train(a) => cmd_train(g, a),
        Command::Predict(a) | Command::Ensemble(a) => cmd_predict(g, a),
        Command::Evaluate(a) => cmd_evaluate(g, a),
        Command::Experiment(ExperimentCommand::Scaling(a)) => cmd_scaling(g, a),
    }
}

fn load_plans(g: &Global) -> Result<(PathBuf, PlanFile), BoxError> {
    let path = g.plans.clone().ok_or("--plans is required for this command")?;
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok((path, parse_plans(&text)?))
}

fn config_name(g: &Global) -> Result<&str, BoxError> {
    Ok(g.config.as_deref().ok_or("--config is required for this command")?)
}

fn cmd_plan(g: &Global, a: &PlanArgs) -> Result<ExitCode, BoxError> {
    let (path, mut plan) = load_plans(g)?;
    let name = config_name(g)?;
    {
        let raw = plan
            .configurations
            .get_mut(name)
            .ok_or_else(|| PlansError::UnknownConfiguration(name.to_string()))?;
        for kv in &a.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| PlansError::Schema(format!("`{kv}` is not KEY=VALUE")))?;
            // bare words such as `residual` are taken as strings
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            raw.set(k, value)?;
        }
    }
    let resolved = resolve_configuration(&plan, name)?;
    if a.derive {
        let full = resolved.to_raw().overrides;
        let raw = plan.configurations.get_mut(name).expect("checked above");
        for key in [
            "strides_per_stage",
            "kernel_sizes",
            "blocks_per_stage_encoder",
            "convs_per_stage_decoder",
        ] {
            raw.overrides.insert(key.to_string(), full[key].clone());
        }
    }
    if let Some(other) = &a.diff {
        let b = resolve_configuration(&plan, other)?;
        for d in diff_configurations(&resolved, &b) {
            println!("{}: {} -> {}", d.field, d.a, d.b);
        }
    } else {
        println!("{}", serde_json::to_string_pretty(&resolved)?);
        let t = resolved.topology();
        eprintln!(
            "{} stages, receptive field {:?}, {} parameters",
            t.num_stages,
            compute_receptive_field(&t),
            parameter_count(&t)
        );
    }
    if a.write {
        fs::create_dir_all(&g.out)?;
        let file = path.file_name().ok_or("plans path has no file name")?;
        let dest = g.out.join(file);
        fs::write(&dest, serialize_plans(&plan))?;
        eprintln!("wrote {}", dest.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn three<T: Copy>(v: &[T], what: &str) -> Result<[T; 3], BoxError> {
    v.try_into()
        .map_err(|_| format!("--{what} needs 3 values, got {}", v.len()).into())
}

fn cmd_generate(g: &Global, a: &GenerateArgs) -> Result<ExitCode, BoxError> {
    let spec = SyntheticSpec {
        num_patients: a.patients,
        cases_per_patient: CasesPerPatient::Total(a.cases.unwrap_or(a.patients)),
        shape: three(&a.shape, "shape")?,
        spacing: three(&a.spacing, "spacing")?,
        lesion_count: (1, 3),
        seed: g.seed,
    };
    let volumes = generate_synthetic_dataset(&spec)?;
    let index = write_dataset(&g.out, &volumes)?;
    println!(
        "wrote {} cases from {} patients to {}",
        index.num_cases,
        index.patients.len(),
        g.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(g: &Global, a: &TrainArgs) -> Result<ExitCode, BoxError> {
    let (_, plan) = load_plans(g)?;
    let config = resolve_configuration(&plan, config_name(g)?)?;
    let dataset = read_dataset(&a.data)?;
    let folds = assign_folds(&dataset, a.num_folds, g.seed)?;
    let to_run: Vec<usize> = match a.fold {
        Some(k) if k >= a.num_folds => return Err(format!("--fold {k} outside 0..{}", a.num_folds).into()),
        Some(k) => vec![k],
        None => (0..a.num_folds).collect(),
    };
    for fold in to_run {
        let dir = g.out.join(format!("fold_{fold}"));
        fs::create_dir_all(&dir)?;
        let opts = TrainOptions {
            out_dir: Some(dir.clone()),
            workers: g.workers,
        };
        let state = train_fold(&config, &dataset, &folds, fold, g.seed, &opts)?;
        let last = state.history.last();
        println!(
            "fold {fold}: {} epochs, final val pseudo-Dice {:.4}, best {:.4}, checkpoint {}",
            state.epoch,
            last.map_or(0.0, |r| r.val_dice),
            state.best_validation_dice,
            dir.join(FINAL_CHECKPOINT).display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_axes(s: &str) -> Result<Vec<usize>, BoxError> {
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| format!("mirror axis `{t}`: {e}").into())
        })
        .collect()
}

fn cmd_predict(g: &Global, a: &PredictArgs) -> Result<ExitCode, BoxError> {
    let models = a
        .checkpoints
        .iter()
        .map(|p| Model::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    let trained = models[0]
        .configuration
        .clone()
        .ok_or("first checkpoint records no training configuration")?;
    let mirror_axes = match &a.mirror_axes {
        Some(s) => parse_axes(s)?,
        None => trained.mirror_axes.clone(),
    };
    let settings = InferenceSettings {
        patch_size: trained.patch_size,
        step_fraction: a.step_fraction.unwrap_or(trained.inference_step_fraction),
        mirror_axes: &mirror_axes,
    };
    let volumes = read_dataset(&a.data)?;
    fs::create_dir_all(&g.out)?;
    let label = g.config.clone().unwrap_or_else(|| "checkpoint".into());
    let record = predict_dataset(&models, &volumes, settings, &label, &g.out)?;
    for c in &record.cases {
        println!("{}: {:.2} s", c.case_id, c.seconds);
    }
    println!(
        "{} cases, {} checkpoints, step {}, mirror {:?} -> {}",
        record.cases.len(),
        record.checkpoints.len(),
        record.step_fraction,
        record.mirror_axes,
        g.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(g: &Global, a: &EvaluateArgs) -> Result<ExitCode, BoxError> {
    let preds = read_segmentations(&a.pred_dir)?;
    let gts = read_dataset(&a.gt_dir)?;
    let mut cases = Vec::with_capacity(preds.len());
    for (id, (info, seg)) in &preds {
        let v = gts
            .iter()
            .find(|v| &v.case_id == id)
            .ok_or_else(|| format!("case {id} missing from {}", a.gt_dir.display()))?;
        let gt = v
            .segmentation
            .as_ref()
            .ok_or_else(|| format!("case {id} has no ground truth"))?;
        cases.push(evaluate_case(id, seg, gt, info.shape, v.spacing)?);
    }
    let report = aggregate(&cases)?;
    fs::create_dir_all(&g.out)?;
    report.write_json(&g.out.join("evaluation.json"))?;
    report.write_csv(&g.out.join("evaluation.csv"))?;
    let nn = report
        .mean_dice_nnunet
        .map_or("undefined".into(), |d| format!("{d:.4}"));
    println!(
        "{} cases: Dice challenge {:.4}, nnU-Net {nn}; FP {:.4} ml, FN {:.4} ml",
        report.cases.len(),
        report.mean_dice_challenge,
        report.mean_fp_volume,
        report.mean_fn_volume
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_scaling(g: &Global, a: &ScalingArgs) -> Result<ExitCode, BoxError> {
    let (_, plan) = load_plans(g)?;
    let dataset = read_dataset(&a.data)?;
    let grid = ExperimentGrid {
        configurations: a.configs.clone(),
        seeds: a.seeds.clone(),
        out_dir: g.out.clone(),
    };
    let report = run_scaling_experiment(&plan, &grid, &dataset, a.num_folds, g.workers)?;
    for r in &report.rows {
        match &r.error {
            None => println!(
                "{} seed {}: Dice nnU-Net {:?}, challenge {:?} ({:.0} s)",
                r.configuration, r.seed, r.dice_nnunet, r.dice_challenge, r.seconds
            ),
            Some(e) => println!("{} seed {}: failed: {e}", r.configuration, r.seed),
        }
    }
    println!(
        "wrote {} and {}",
        out_file(&g.out, SCALING_CSV),
        out_file(&g.out, SCALING_PLOT)
    );
    Ok(if report.failed() > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    })
}

fn out_file(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}
