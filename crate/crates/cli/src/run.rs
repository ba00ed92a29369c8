//! Subcommand execution and artifact bookkeeping.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use attnembed_core::data::{chronological_split, gen_synthetic, load_csv, write_csv, SeriesDataset, SeriesKind};
use attnembed_core::diagnostics::{rank_report, write_rank_csv, ModelSource};
use attnembed_core::embed::EmbedMode;
use attnembed_core::model::{gradient_check, load_checkpoint, save_checkpoint, ModelConfig};
use attnembed_core::rng::child_seed;
use attnembed_core::theory::{separation_report, write_trials_csv};
use attnembed_core::train::{
    evaluate_model, run_ablation, train_and_evaluate, write_history_csv, RunResult, SplitSamples,
};
use attnembed_core::Execution;
use clap::ValueEnum;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Synth,
    Train,
    Eval,
    Compare,
    Ablate,
    Scan,
    Theory,
    Rank,
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Compare => "compare",
            Command::Ablate => "ablate",
            Command::Scan => "scan",
            Command::Theory => "theory",
            Command::Rank => "rank",
            Command::Gradcheck => "gradcheck",
        }
    }
}

/// Files written into one output directory.
struct Artifacts {
    dir: PathBuf,
    written: Vec<String>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    /// Path for a new artifact, recorded for hashing.
    fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.dir.join(name)
    }

    fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let path = self.path(name);
        let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
        text.push('\n');
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }

    fn hashes(&self) -> Result<BTreeMap<String, String>> {
        self.written
            .iter()
            .map(|name| {
                let path = self.dir.join(name);
                let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
                Ok((name.clone(), hex::encode(Sha256::digest(&bytes))))
            })
            .collect()
    }
}

/// What a run reports back to the caller.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub metrics: Value,
    /// Lines printed on success.
    pub summary: Vec<String>,
}

fn load_series(cfg: &RunConfig) -> Result<SeriesDataset> {
    match &cfg.dataset {
        Some(path) => Ok(load_csv(path)?),
        None => Ok(gen_synthetic(cfg.series, &cfg.synthetic)?),
    }
}

fn split_samples(cfg: &RunConfig, model: &ModelConfig, ds: &SeriesDataset) -> Result<SplitSamples> {
    let segments = chronological_split(ds, &cfg.split, model.lookback)?;
    Ok(SplitSamples::new(&segments, model.lookback, model.horizon, cfg.train.pair_stride)?)
}

fn run_row(r: &RunResult) -> Value {
    json!({
        "seed": r.seed,
        "mode": r.mode,
        "acat_width": r.acat_width,
        "parameters": r.parameters,
        "epochs": r.report.history.len(),
        "best_epoch": r.report.best_epoch,
        "best_val_mse": r.report.best_val_mse,
        "test_mse": r.test.raw.mse,
        "test_mae": r.test.raw.mae,
        "test_normalized_mse": r.test.normalized.mse,
    })
}

fn write_rows(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Execute `command`, writing the config echo, metrics, subcommand
/// artifacts and a hash manifest into `out`.
pub fn run(command: Command, cfg: &RunConfig, out: &Path, exec: Execution) -> Result<Outcome> {
    let mut art = Artifacts::new(out)?;
    art.json("config.json", cfg)?;
    let result = dispatch(command, cfg, &mut art, exec);
    let (metrics, summary, failure) = match result {
        Ok(o) => (o.metrics, o.summary, None),
        // a failed gradient check still leaves its report behind
        Err(CliError::GradCheck { error, tolerance }) => (
            json!({ "max_relative_error": error, "tolerance": tolerance, "passed": false }),
            Vec::new(),
            Some(CliError::GradCheck { error, tolerance }),
        ),
        Err(e) => return Err(e),
    };
    art.json("metrics.json", &metrics)?;
    let manifest = json!({
        "experiment": cfg.experiment,
        "command": command.name(),
        "seed": cfg.seed,
        "artifacts": art.hashes()?,
    });
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    match failure {
        Some(e) => Err(e),
        None => Ok(Outcome { metrics, summary }),
    }
}

fn dispatch(command: Command, cfg: &RunConfig, art: &mut Artifacts, exec: Execution) -> Result<Outcome> {
    match command {
        Command::Synth => synth(cfg, art),
        Command::Train => train(cfg, art, exec),
        Command::Eval => eval(cfg, art, exec),
        Command::Compare => compare(cfg, art, exec),
        Command::Ablate => ablate(cfg, art, exec),
        Command::Scan => scan(cfg, art, exec),
        Command::Theory => theory(cfg, art, exec),
        Command::Rank => rank(cfg, art, exec),
        Command::Gradcheck => gradcheck(cfg),
    }
}

fn synth(cfg: &RunConfig, art: &mut Artifacts) -> Result<Outcome> {
    let mut metrics = serde_json::Map::new();
    let mut summary = Vec::new();
    for (kind, name) in [(SeriesKind::F1, "f1"), (SeriesKind::F2, "f2")] {
        let ds = gen_synthetic(kind, &cfg.synthetic)?;
        let file = format!("{name}.csv");
        write_csv(&ds, art.path(&file))?;
        metrics.insert(name.into(), json!({ "rows": ds.rows(), "file": file }));
        summary.push(format!("{name}: {} rows", ds.rows()));
    }
    metrics.insert("components".into(), serde_json::to_value(cfg.synthetic.draw_components()).unwrap());
    Ok(Outcome {
        metrics: Value::Object(metrics),
        summary,
    })
}

fn train(cfg: &RunConfig, art: &mut Artifacts, exec: Execution) -> Result<Outcome> {
    let ds = load_series(cfg)?;
    let data = split_samples(cfg, &cfg.model, &ds)?;
    let (model, result) = train_and_evaluate(&cfg.model, &cfg.train, &data, cfg.seed, exec)?;
    save_checkpoint(&art.path("model.ckpt"), &model)?;
    write_history_csv(&art.path("history.csv"), &result.report.history)?;
    let summary = vec![format!(
        "test mse {:.6} mae {:.6} after {} epochs",
        result.test.raw.mse,
        result.test.raw.mae,
        result.report.history.len()
    )];
    Ok(Outcome {
        metrics: serde_json::to_value(&result).unwrap(),
        summary,
    })
}

fn eval(cfg: &RunConfig, art: &mut Artifacts, exec: Execution) -> Result<Outcome> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Config("invalid field `checkpoint`: eval needs a model file".into()))?;
    let model = load_checkpoint(path)?;
    let ds = load_series(cfg)?;
    let data = split_samples(cfg, model.config(), &ds)?;
    let evaluation = evaluate_model(&model, &data.test, cfg.train.chunk_size, exec)?;
    let per_horizon = evaluation.raw.per_horizon_mse.iter().enumerate().map(|(h, v)| format!("{},{v:?}", h + 1));
    write_rows(&art.path("per_horizon.csv"), "step,mse", &per_horizon.collect::<Vec<_>>())?;
    let summary = vec![format!("test mse {:.6} mae {:.6}", evaluation.raw.mse, evaluation.raw.mae)];
    Ok(Outcome {
        metrics: serde_json::to_value(&evaluation).unwrap(),
        summary,
    })
}

fn compare(cfg: &RunConfig, art: &mut Artifacts, exec: Execution) -> Result<Outcome> {
    if cfg.model.embed.mode == EmbedMode::Patch {
        return Err(CliError::Config("invalid field `model.embed.mode`: compare needs an attention mode".into()));
    }
    let ds = load_series(cfg)?;
    let data = split_samples(cfg, &cfg.model, &ds)?;
    let baseline = cfg.model.with_mode(EmbedMode::Patch);
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    let mut ratios = Vec::new();
    for seed in cfg.seeds() {
        let (_, attn) = train_and_evaluate(&cfg.model, &cfg.train, &data, seed, exec)?;
        let (_, patch) = train_and_evaluate(&baseline, &cfg.train, &data, seed, exec)?;
        log::info!("seed {seed}: attention {:.6} patch {:.6}", attn.test.raw.mse, patch.test.raw.mse);
        ratios.push(attn.test.raw.mse / patch.test.raw.mse);
        for r in [&attn, &patch] {
            rows.push(format!(
                "{},{},{},{:?},{:?},{:?}",
                r.seed,
                r.mode.name(),
                r.report.history.len(),
                r.test.raw.mse,
                r.test.raw.mae,
                r.test.normalized.mse
            ));
            runs.push(run_row(r));
        }
    }
    write_rows(&art.path("compare.csv"), "seed,mode,epochs,test_mse,test_mae,test_normalized_mse", &rows)?;
    let median_ratio = median(ratios.clone());
    let worst_ratio = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let summary = vec![format!("mse ratio attention/patch: median {median_ratio:.4} worst {worst_ratio:.4}")];
    Ok(Outcome {
        metrics: json!({
            "mode": cfg.model.embed.mode,
            "runs": runs,
            "mse_ratios": ratios,
            "median_ratio": median_ratio,
            "worst_ratio": worst_ratio,
        }),
        summary,
    })
}

fn ablate(cfg: &RunConfig, art: &mut Artifacts, exec: Execution) -> Result<Outcome> {
    let ds = load_series(cfg)?;
    let data = split_samples(cfg, &cfg.model, &ds)?;
    let report = run_ablation(&cfg.model, &cfg.train, &data, &cfg.seeds(), exec)?;
    let rows: Vec<String> = report
        .entries
        .iter()
        .map(|e| format!("{},{},{:?},{:?},{:?}", e.variant, e.acat_width, e.mean_mse, e.mean_mae, e.mean_normalized_mse))
        .collect();
    write_rows(&art.path("ablation.csv"), "variant,acat_width,mean_mse,mean_mae,mean_normalized_mse", &rows)?;
    let summary = report
        .entries
        .iter()
        .map(|e| format!("{}: width {} mse {:.6}", e.variant, e.acat_width, e.mean_mse))
        .collect();
    let entries: Vec<Value> = report
        .entries
        .iter()
        .map(|e| {
            json!({
                "variant": e.variant,
                "acat_width": e.acat_width,
                "mean_mse": e.mean_mse,
                "mean_mae": e.mean_mae,
                "mean_normalized_mse": e.mean_normalized_mse,
                "runs": e.runs.iter().map(run_row).collect::<Vec<_>>(),
            })
        })
        .collect();
    Ok(Outcome {
        metrics: json!({ "entries": entries }),
        summary,
    })
}

/// Grid points as `(window_size, ema_alpha, landmark_stride, embed_layers)`.
fn scan_grid(cfg: &RunConfig) -> Vec<(usize, f64, usize, usize)> {
    let e = &cfg.model.embed;
    let or = |v: &[usize], d: usize| if v.is_empty() { vec![d] } else { v.to_vec() };
    let alphas = if cfg.scan.ema_alpha.is_empty() { vec![e.ema_alpha] } else { cfg.scan.ema_alpha.clone() };
    let mut grid = Vec::new();
    for w in or(&cfg.scan.window_size, e.window_size) {
        for &a in &alphas {
            for s in or(&cfg.scan.landmark_stride, e.landmark_stride) {
                for l in or(&cfg.scan.embed_layers, e.embed_layers) {
                    grid.push((w, a, s, l));
                }
            }
        }
    }
    grid
}

fn scan(cfg: &RunConfig, art: &mut Artifacts, exec: Execution) -> Result<Outcome> {
    let ds = load_series(cfg)?;
    let data = split_samples(cfg, &cfg.model, &ds)?;
    let grid = scan_grid(cfg);
    let results = exec.try_map(grid.len(), |i| -> Result<(u64, RunResult)> {
        let (w, a, s, l) = grid[i];
        let mut model = cfg.model.clone();
        model.embed.window_size = w;
        model.embed.ema_alpha = a;
        model.embed.landmark_kernel = s;
        model.embed.landmark_stride = s;
        model.embed.embed_layers = l;
        model.validate().map_err(|e| CliError::Config(format!("scan point {i}: {e}")))?;
        let seed = child_seed(cfg.seed, i as u64);
        let (_, r) = train_and_evaluate(&model, &cfg.train, &data, seed, Execution::Sequential)?;
        Ok((seed, r))
    })?;
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for (i, ((w, a, s, l), (seed, r))) in grid.iter().zip(&results).enumerate() {
        rows.push(format!(
            "{i},{seed},{w},{a:?},{s},{l},{},{:?},{:?},{:?}",
            r.acat_width, r.test.raw.mse, r.test.raw.mae, r.test.normalized.mse
        ));
        points.push(json!({
            "point": i,
            "window_size": w,
            "ema_alpha": a,
            "landmark_stride": s,
            "embed_layers": l,
            "run": run_row(r),
        }));
    }
    write_rows(
        &art.path("scan.csv"),
        "point,seed,window_size,ema_alpha,landmark_stride,embed_layers,acat_width,test_mse,test_mae,test_normalized_mse",
        &rows,
    )?;
    let summary = vec![format!("{} grid points", rows.len())];
    Ok(Outcome {
        metrics: json!({ "points": points }),
        summary,
    })
}

fn theory(cfg: &RunConfig, art: &mut Artifacts, exec: Execution) -> Result<Outcome> {
    let t = &cfg.theory;
    let (report, trials) = separation_report(&cfg.cluster, t.lambda, t.trials, t.anchors, exec)?;
    write_trials_csv(&art.path("trials.csv"), &trials)?;
    let summary = vec![
        format!(
            "raw within {:.3} ± {:.3}, between {:.3} ± {:.3}",
            report.raw_within_mean, report.raw_within_se, report.raw_between_mean, report.raw_between_se
        ),
        format!(
            "relative gap {:.4} (95% lower bound {:.4}); misorder raw {:.4} repr {:.4}",
            report.relative_gap, report.relative_gap_lower95, report.raw_misorder_rate, report.repr_misorder_rate
        ),
    ];
    Ok(Outcome {
        metrics: serde_json::to_value(&report).unwrap(),
        summary,
    })
}

fn rank(cfg: &RunConfig, art: &mut Artifacts, exec: Execution) -> Result<Outcome> {
    let ds = load_series(cfg)?;
    let data = split_samples(cfg, &cfg.model, &ds)?;
    let test = &data.test;
    let l = cfg.model.lookback;
    let count = cfg.rank.batch.min(test.len());
    let batch: Vec<Vec<f64>> = (0..count)
        .map(|b| {
            let i = b * test.len() / count;
            let s = &test.stats[i];
            test.inputs[i * l..(i + 1) * l].iter().map(|z| z * s.std + s.mean).collect()
        })
        .collect();
    let source = if cfg.rank.trained {
        ModelSource::Trained {
            data: &data,
            train: &cfg.train,
        }
    } else {
        ModelSource::Untrained
    };
    let profiles = rank_report(&cfg.model, &batch, &cfg.rank.depths, source, exec)?;
    write_rank_csv(&art.path("rank.csv"), &profiles)?;
    let summary = profiles
        .iter()
        .map(|p| {
            let values: Vec<String> = p.values.iter().map(|v| format!("{v:.4}")).collect();
            format!("{} depth {}: {}", p.mode.name(), p.depth, values.join(" "))
        })
        .collect();
    Ok(Outcome {
        metrics: json!({ "trained": cfg.rank.trained, "batch": count, "profiles": profiles }),
        summary,
    })
}

fn gradcheck(cfg: &RunConfig) -> Result<Outcome> {
    let g = &cfg.gradcheck;
    let mut per_mode = serde_json::Map::new();
    let mut summary = Vec::new();
    let mut worst: f64 = 0.0;
    for &mode in &g.modes {
        let report = gradient_check(&g.model.with_mode(mode), g.samples, cfg.seed, g.step)?;
        summary.push(format!(
            "{}: max relative error {:e} ({} entries)",
            mode.name(),
            report.max_relative_error,
            report.checked_entries
        ));
        worst = worst.max(report.max_relative_error);
        per_mode.insert(mode.name().into(), serde_json::to_value(&report).unwrap());
    }
    for line in &summary {
        println!("{line}");
    }
    println!("max_relative_error={worst:e}");
    if worst > g.tolerance {
        return Err(CliError::GradCheck {
            error: worst,
            tolerance: g.tolerance,
        });
    }
    Ok(Outcome {
        metrics: json!({
            "max_relative_error": worst,
            "tolerance": g.tolerance,
            "passed": true,
            "modes": per_mode,
        }),
        summary: Vec::new(),
    })
}
