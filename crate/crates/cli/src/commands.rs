use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use vegn::autodiff::ParamStore;
use vegn::losses::mse;
use vegn::model::Model;
use vegn::nbody::{build_dataset, format, Dataset, Split};
use vegn::trainer::{dist_train, evaluate, rollout, train, EpochMetrics, EvalConfig};

use crate::error::{io_at, CliError, CliResult};
use crate::settings::{Settings, Source};

pub const CONFIG_FILE: &str = "config.resolved";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const REPORT_FILE: &str = "report.json";

fn write_json(path: &Path, value: &Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(io_at(path))
}

pub fn generate(settings: &Settings, out: &Path, force: bool) -> CliResult<Value> {
    if out.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} already exists; pass --force to overwrite",
            out.display()
        )));
    }
    let cfg = settings.dataset_config()?;
    let ds = build_dataset(&cfg)?;
    format::save(&ds, out)?;
    Ok(json!({
        "file": out.display().to_string(),
        "bytes": format::encoded_len(&ds),
        "config": cfg,
    }))
}

fn load_dataset(settings: &Settings) -> CliResult<Dataset> {
    let path = settings.raw("data")?;
    if path == "none" {
        return Err(CliError::Usage("no dataset given; pass --data".into()));
    }
    format::load(Path::new(path)).map_err(|e| CliError::Usage(format!("{path}: {e}")))
}

fn split_of(name: &str) -> CliResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!("unknown split `{other}`"))),
    }
}

pub fn train_run(settings: &Settings, run_dir: &Path, force: bool) -> CliResult<Value> {
    let model_cfg = settings.model_config()?;
    let train_cfg = settings.train_config()?;
    let dist_cfg = settings.dist_config()?;
    let eval_cfg = settings.eval_config()?;
    let ds = load_dataset(settings)?;

    let checkpoint = run_dir.join(CHECKPOINT_FILE);
    if checkpoint.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} already holds a run; pass --force to overwrite",
            run_dir.display()
        )));
    }
    std::fs::create_dir_all(run_dir).map_err(io_at(run_dir))?;
    let config_path = run_dir.join(CONFIG_FILE);
    std::fs::write(&config_path, settings.render()).map_err(io_at(&config_path))?;

    let metrics_path = run_dir.join(METRICS_FILE);
    let mut metrics = BufWriter::new(File::create(&metrics_path).map_err(io_at(&metrics_path))?);
    let mut sink = |m: &EpochMetrics| -> vegn::Result<()> {
        let line = serde_json::to_string(m).map_err(|e| vegn::Error::InvalidArgument(e.to_string()))?;
        writeln!(metrics, "{line}")?;
        metrics.flush()?;
        Ok(())
    };

    let distributed = settings.distributed()?;
    let (output, counters) = if distributed {
        let out = dist_train(&ds.train, &ds.val, &model_cfg, &train_cfg, &dist_cfg, &mut sink)?;
        (out.output, Some(out.counters))
    } else {
        (train(&ds.train, &ds.val, &model_cfg, &train_cfg, &mut sink)?, None)
    };
    output.params.save(&checkpoint)?;

    let model = Model::new(model_cfg.clone())?;
    let test = evaluate(&model, &output.params, &ds.test, &eval_cfg)?;
    let report = json!({
        "label": model_cfg.label(),
        "mode": if distributed { "distributed" } else { "single" },
        "devices": if distributed { dist_cfg.devices } else { 1 },
        "epochs_run": output.history.len(),
        "best_epoch": output.best_epoch,
        "best_val_mse": output.best_val_mse,
        "stopped_early": output.stopped_early,
        "test": test,
        "transport": counters,
    });
    write_json(&run_dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Model, parameters and resolved settings of a finished run.
pub struct LoadedRun {
    pub settings: Settings,
    pub model: Model,
    pub params: ParamStore,
}

pub fn load_run(settings: Settings, checkpoint: &Path) -> CliResult<LoadedRun> {
    let model = Model::new(settings.model_config()?)?;
    let params = ParamStore::load(checkpoint).map_err(|e| CliError::Usage(format!("{}: {e}", checkpoint.display())))?;
    model.check_params(&params).map_err(|e| {
        CliError::Usage(format!(
            "checkpoint {} does not fit the configured model: {e}",
            checkpoint.display()
        ))
    })?;
    Ok(LoadedRun {
        settings,
        model,
        params,
    })
}

pub fn settings_of_run(run_dir: &Path) -> CliResult<Settings> {
    let mut s = Settings::default();
    s.apply_file(&run_dir.join(CONFIG_FILE))?;
    Ok(s)
}

pub struct EvalRequest {
    pub split: String,
    pub baseline: Option<PathBuf>,
    pub rollout: Option<usize>,
    pub rollout_sample: usize,
    pub rollout_out: Option<PathBuf>,
}

pub fn eval_run(run: &LoadedRun, req: &EvalRequest) -> CliResult<Value> {
    let ds = load_dataset(&run.settings)?;
    let pairs = ds.split(split_of(&req.split)?);
    let eval_cfg: EvalConfig = run.settings.eval_config()?;
    let report = evaluate(&run.model, &run.params, pairs, &eval_cfg)?;

    let relative_time = match &req.baseline {
        Some(dir) => {
            let mut s = settings_of_run(dir)?;
            s.set("data", run.settings.raw("data")?, Source::Flag)?;
            let base = load_run(s, &dir.join(CHECKPOINT_FILE))?;
            let base_report = evaluate(&base.model, &base.params, pairs, &eval_cfg)?;
            Some(report.seconds / base_report.seconds)
        }
        None => None,
    };

    let rollout_info = match req.rollout {
        Some(0) => return Err(CliError::Usage("--rollout needs at least one step".into())),
        Some(steps) => {
            let pair = pairs.get(req.rollout_sample).ok_or_else(|| {
                CliError::Usage(format!("split has no sample {}", req.rollout_sample))
            })?;
            let c = &ds.config;
            let interval = c.delta_t as f64 * c.substeps as f64 * c.dt;
            let frames = rollout(&run.model, &run.params, pair, steps, interval)?;
            let path = req
                .rollout_out
                .clone()
                .unwrap_or_else(|| PathBuf::from("rollout.json"));
            let coords: Vec<Vec<&[f64]>> = frames
                .iter()
                .map(|f| (0..f.rows()).map(|i| f.row(i)).collect())
                .collect();
            write_json(
                &path,
                &json!({ "steps": steps, "nodes": pair.input.num_nodes(), "coordinates": coords }),
            )?;
            Some(json!({
                "steps": steps,
                "sample": req.rollout_sample,
                "file": path.display().to_string(),
                "first_step_mse": mse(&frames[0], &pair.target)?,
            }))
        }
        None => None,
    };

    Ok(json!({
        "label": run.model.config().label(),
        "split": req.split,
        "mse": report.mse,
        "seconds": report.seconds,
        "relative_time": relative_time,
        "forwards": report.forwards,
        "samples": report.samples,
        "rollout": rollout_info,
    }))
}

pub fn save_report(path: &Path, value: &Value) -> CliResult<()> {
    write_json(path, value)
}
