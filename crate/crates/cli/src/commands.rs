use std::path::Path;

use drrpose::exec::Exec;
use drrpose::experiments::config::eta_label;
use drrpose::experiments::report::{read_csv_column, POSITION};
use drrpose::experiments::sweeps::subset_order;
use drrpose::experiments::{
    annotate, evaluate, generate_dataset, load_data, run_noise_sweep, run_size_sweep, train_condition, write_results,
    ConditionResult, Dataset, ExperimentConfig, ExperimentResult, TEST,
};
use drrpose::phantom::generate_anatomy_with;
use drrpose::regressor::ModelCheckpoint;
use drrpose::renderer::{encode_png8, render_with, short_hash, window_to_8bit};
use drrpose::stats::qq_normal;
use drrpose::{ProjectionGeometry, Vec3, WorldPose};
use drrpose_annotate::ServiceConfig;

use crate::{Cli, CliError, Command, GlobalOpts};

type CliResult<T> = Result<T, CliError>;

fn usage(flag: &str, e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("{flag}: {e}"))
}

/// Configuration file, then `--set` overrides in order, then `--seed`.
pub fn load_config(opts: &GlobalOpts) -> CliResult<ExperimentConfig> {
    let mut cfg = match &opts.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for s in &opts.set {
        cfg.apply_override(s).map_err(|e| usage("--set", e))?;
    }
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| usage("--config/--set", e))?;
    Ok(cfg)
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("output serializes"));
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| drrpose::Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| drrpose::Error::io(path, e).into())
}

pub fn run(cli: Cli) -> CliResult<()> {
    let cfg = load_config(&cli.global)?;
    let exec = Exec::available();
    match cli.command {
        Command::Phantom { anatomy_seed, out } => {
            let seed = anatomy_seed.unwrap_or(cfg.dataset.anatomy_seeds[0]);
            let vol = generate_anatomy_with(&cfg.anatomy.with_seed(seed), exec)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| drrpose::Error::io(dir, e))?;
            }
            vol.save(&out)?;
            print_json(&serde_json::json!({ "seed": seed, "dims": vol.dims, "spacing": vol.spacing, "stem": out }));
        }
        Command::Render {
            anatomy_seed,
            origin,
            axis,
            roll,
            view_angle,
            out,
        } => {
            let seed = anatomy_seed.unwrap_or(cfg.dataset.anatomy_seeds[0]);
            let vol = generate_anatomy_with(&cfg.anatomy.with_seed(seed), exec)?;
            let g = ProjectionGeometry::c_arm(cfg.carm.at_angle(view_angle));
            let wp = WorldPose::new(Vec3::from(origin), Vec3::from(axis), roll).map_err(|e| usage("--axis", e))?;
            let img = render_with(&vol, &cfg.screw, &wp, &g, cfg.step(), exec)?;
            let (lo, hi) = img
                .pixels
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &p| (a.min(p as f64), b.max(p as f64)));
            let png = encode_png8(img.width, img.height, &window_to_8bit(&img, lo, hi.max(lo + 1e-9)))?;
            write_file(&out, &png)?;
            print_json(&img.meta);
        }
        Command::Dataset => print_json(&generate_dataset(&cfg, exec)?),
        Command::Annotate { eta, k } => {
            let ds = Dataset::open(&cfg.dataset_dir())?;
            let set = annotate(&cfg, &ds, eta, k, exec)?;
            print_json(&serde_json::json!({
                "path": cfg.annotations_path(eta, k),
                "images": set.len(),
            }));
        }
        Command::Train {
            eta,
            k,
            size,
            epochs,
            label,
        } => {
            let data = load_data(&cfg, exec)?;
            let n = data.train.len();
            let indices: Vec<usize> = match size {
                Some(s) if s == 0 || s > n => {
                    return Err(usage("--size", drrpose::Error::SizeExceedsDataset { size: s, available: n }))
                }
                Some(s) => {
                    let mut idx = subset_order(cfg.seed, n)[..s].to_vec();
                    idx.sort_unstable();
                    idx
                }
                None => (0..n).collect(),
            };
            let ann = annotate(&cfg, &data.dataset, eta, k, exec)?;
            let epochs = epochs.unwrap_or(cfg.training.network.epochs);
            let label = label.unwrap_or_else(|| {
                let mut l = format!("eta_{}_k{k}", eta_label(eta));
                if let Some(s) = size {
                    l.push_str(&format!("_n{s}"));
                }
                l
            });
            let (outcome, info) = train_condition(&cfg, &data.train, &data.val, &indices, &ann, k, epochs, exec)?;
            let path = cfg.model_path(&label);
            outcome.best.save(&path)?;
            print_json(&serde_json::json!({ "model": path, "training": info }));
        }
        Command::Eval { model, label } => {
            let ckpt = ModelCheckpoint::load(&model)?;
            let test = Dataset::open(&cfg.dataset_dir())?.load_split(TEST, exec)?;
            let rows = evaluate(&cfg, &ckpt, &test, exec)?;
            let label = label.unwrap_or_else(|| {
                let stem = model.file_stem().map(|s| s.to_string_lossy().into_owned());
                format!("eval_{}", stem.unwrap_or_else(|| "model".into()))
            });
            let cond = ConditionResult {
                label: label.clone(),
                x: None,
                training: None,
                model_file: model.display().to_string(),
                model_hash: short_hash(&ckpt.to_bytes()),
                rows,
            };
            let summary = cond.summary(POSITION)?;
            let result = ExperimentResult {
                name: label.clone(),
                x_name: "none".into(),
                conditions: vec![cond],
            };
            let dir = cfg.results_dir(&label);
            write_results(&dir, &result, &cfg)?;
            print_json(&serde_json::json!({ "results": dir, "position_error_mm": summary }));
        }
        Command::SweepNoise => report_sweep(&cfg, &run_noise_sweep(&cfg, exec)?)?,
        Command::SweepSize => report_sweep(&cfg, &run_size_sweep(&cfg, exec)?)?,
        Command::Qq {
            csv,
            column,
            filter,
            out,
        } => {
            let filter = filter
                .as_deref()
                .map(|f| f.split_once('=').ok_or_else(|| usage("--filter", "expected COLUMN=VALUE")))
                .transpose()?;
            let values = read_csv_column(&csv, &column, filter)?;
            let qq = qq_normal(&values)?;
            if let Some(out) = out {
                let mut text = String::from("theoretical,empirical\n");
                for p in &qq.points {
                    text.push_str(&format!("{},{}\n", p.theoretical, p.empirical));
                }
                write_file(&out, text.as_bytes())?;
            }
            print_json(&serde_json::json!({
                "n": values.len(),
                "slope": qq.slope,
                "intercept": qq.intercept,
                "r2": qq.r2,
                "within_1sd": qq.within_1sd,
                "within_1_5sd": qq.within_1_5sd,
            }));
        }
        Command::Serve { port, host, mode, store } => {
            let svc = ServiceConfig {
                dataset_dir: cfg.dataset_dir(),
                store_path: store.unwrap_or_else(|| cfg.workdir.join("annotations").join("study.jsonl")),
                mode,
            };
            let rt = tokio::runtime::Runtime::new().map_err(|e| drrpose::Error::Format(format!("runtime: {e}")))?;
            rt.block_on(drrpose_annotate::serve(&svc, std::net::SocketAddr::new(host, port)))?;
        }
    }
    Ok(())
}

fn report_sweep(cfg: &ExperimentConfig, res: &ExperimentResult) -> CliResult<()> {
    let medians: Vec<serde_json::Value> = res
        .conditions
        .iter()
        .map(|c| {
            let s = c.summary(POSITION)?;
            Ok(serde_json::json!({ "condition": c.label, "x": c.x, "median_position_error_mm": s.median, "n": s.n }))
        })
        .collect::<drrpose::Result<_>>()?;
    print_json(&serde_json::json!({ "results": cfg.results_dir(&res.name), "conditions": medians }));
    Ok(())
}
