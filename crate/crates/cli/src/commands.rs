use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use phototune::data::{write_dataset, Manifest, ScenePair, Split, MANIFEST_FILE};
use phototune::image::{read_image, resize_bilinear, Image};
use phototune::pipeline::{apply_pipeline, CountingPipeline, PhotoPipeline, SliderPipeline};
use phototune::rl::{train, Agent, ReplayBuffer, TrainOptions};
use phototune::stats::{psnr, ssim};
use phototune::tuners::TuneResult;
use phototune::util::write_atomic;
use phototune::Error;

use crate::config::RunConfig;
use crate::runspec::RunSpec;
use crate::tuning::{trajectory_strip, write_png, TuneContext};
use crate::UsageError;

fn required(p: &Option<PathBuf>, what: &str) -> anyhow::Result<PathBuf> {
    p.clone().ok_or_else(|| UsageError(format!("missing {what}")).into())
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))
}

// ---------------------------------------------------------------------------
// generate-data
// ---------------------------------------------------------------------------

pub fn generate_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let spec = cfg.dataset_spec();
    let manifest = write_dataset(&spec, out)?;
    let train = manifest.pairs.iter().filter(|e| e.split == Split::Train).count();
    println!(
        "{}",
        serde_json::json!({
            "manifest": out.join(MANIFEST_FILE),
            "pairs": manifest.pairs.len(),
            "train": train,
            "eval": manifest.pairs.len() - train,
        })
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn load_manifest(dir: &Path) -> anyhow::Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    Manifest::read(&path).with_context(|| format!("reading dataset manifest {}", path.display()))
}

pub fn train_cmd(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = required(&cfg.train.data, "training data directory (--data)")?;
    let ckpt = required(&cfg.train.checkpoint, "checkpoint path (--checkpoint)")?;
    let log_path = cfg
        .train
        .log
        .clone()
        .unwrap_or_else(|| ckpt.with_extension("log.jsonl"));
    let manifest = load_manifest(&data)?;
    let train_pairs = manifest.load_split(&data, Split::Train)?;
    let mut eval_pairs = manifest.load_split(&data, Split::Eval)?;
    eval_pairs.truncate(cfg.train.eval_limit);
    if train_pairs.is_empty() {
        return Err(UsageError(format!("{} has no training pairs", data.display())).into());
    }

    let mut agent = if cfg.train.resume && ckpt.exists() {
        let a = Agent::load(&ckpt).with_context(|| format!("resuming from {}", ckpt.display()))?;
        if a.cfg != cfg.td3 {
            log::warn!("resuming with the TD3 settings stored in the checkpoint");
        }
        log::info!(
            "resumed at episode {} ({} updates)",
            a.counters.episodes,
            a.counters.updates
        );
        a
    } else {
        Agent::new(cfg.td3.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?
    };
    let mut buffer = ReplayBuffer::new(agent.cfg.buffer_capacity);
    let opts = TrainOptions {
        episodes: cfg.train.episodes,
        eval_every: cfg.train.eval_every,
        stop_at_eval_psnr: cfg.train.stop_at_eval_psnr,
        seed: cfg.seed,
    };
    let mut log = OpenOptions::new()
        .create(true)
        .append(cfg.train.resume)
        .write(true)
        .truncate(!cfg.train.resume)
        .open(&log_path)
        .with_context(|| format!("opening log {}", log_path.display()))?;
    let pipeline = cfg.pipeline();
    let task = cfg.build_task();
    let result = train(
        &mut agent,
        &mut buffer,
        &train_pairs,
        &eval_pairs,
        &pipeline,
        &task,
        &opts,
        &mut |r| {
            let line = serde_json::to_string(r)?;
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            if let Some(v) = r.eval_psnr_db {
                println!("episode {} eval PSNR {v:.2} dB", r.episode);
            }
            Ok(())
        },
    );
    match result {
        Ok(report) => {
            agent.save(&ckpt)?;
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": ckpt,
                    "episodes": agent.counters.episodes,
                    "updates": agent.counters.updates,
                    "last_eval_psnr_db": report.last_eval_psnr_db,
                    "stopped_early": report.stopped_early,
                })
            );
            Ok(())
        }
        Err(Error::TrainingHalted { update, reason, dump }) => {
            let dump_path = ckpt.with_extension("halt.json");
            write_json(&dump_path, &dump)?;
            Err(anyhow::anyhow!(
                "training halted at update {update}: {reason}; batch written to {}",
                dump_path.display()
            ))
        }
        Err(e) => Err(e.into()),
    }
}

// ---------------------------------------------------------------------------
// tune
// ---------------------------------------------------------------------------

pub struct TuneArgs {
    pub input: PathBuf,
    pub goal: PathBuf,
    pub out: Option<PathBuf>,
    pub strip: Option<PathBuf>,
    pub frames: Option<PathBuf>,
}

pub fn tune_cmd(cfg: &RunConfig, args: &TuneArgs) -> anyhow::Result<()> {
    let spec = cfg.tune.run;
    let ctx = TuneContext::new(cfg, &[spec], cfg.tune.checkpoint.as_deref())?;
    let input = read_image(&args.input)?;
    let goal = read_image(&args.goal)?;
    let pipeline = cfg.pipeline();
    let counted = CountingPipeline::new(pipeline.clone());
    let result = ctx.run(&spec, &input, &goal, None, &counted, 0)?;
    debug_assert_eq!(counted.calls(), result.query_count);
    let json = serde_json::to_string_pretty(&result)?;
    if let Some(out) = &args.out {
        write_atomic(out, format!("{json}\n").as_bytes())?;
    }
    if let Some(path) = &args.strip {
        write_png(path, &trajectory_strip(&input, &goal, &result, &pipeline)?)?;
    }
    if let Some(dir) = &args.frames {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (i, q) in result.trajectory.iter().enumerate() {
            write_png(
                &dir.join(format!("step_{i:03}.png")),
                &pipeline.render(&input, &q.params)?,
            )?;
        }
    }
    println!("{json}");
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub id: String,
    pub run: String,
    pub status: String,
    pub psnr_db: Option<f64>,
    pub ssim: Option<f64>,
    /// PSNR or style score of the best query, as reported by the tuner.
    pub objective_value: Option<f64>,
    pub queries: Option<u64>,
    pub pipeline_calls: Option<u64>,
    pub wall_time: Option<f64>,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub run: String,
    pub pairs_ok: usize,
    pub pairs_failed: usize,
    pub mean_psnr_db: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_queries: Option<f64>,
    pub mean_wall_time: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn summarize(rows: &[EvalRow], runs: &[RunSpec]) -> Vec<EvalSummary> {
    runs.iter()
        .map(|spec| {
            let label = spec.label();
            let ok: Vec<&EvalRow> = rows.iter().filter(|r| r.run == label && r.status == "ok").collect();
            EvalSummary {
                pairs_ok: ok.len(),
                pairs_failed: rows.iter().filter(|r| r.run == label && r.status != "ok").count(),
                mean_psnr_db: mean(ok.iter().filter_map(|r| r.psnr_db)),
                mean_ssim: mean(ok.iter().filter_map(|r| r.ssim)),
                mean_queries: mean(ok.iter().filter_map(|r| r.queries.map(|q| q as f64))),
                mean_wall_time: mean(ok.iter().filter_map(|r| r.wall_time)),
                run: label,
            }
        })
        .collect()
}

fn failure(id: &str, run: &RunSpec, err: impl std::fmt::Display) -> EvalRow {
    EvalRow {
        id: id.to_string(),
        run: run.label(),
        status: "failed".into(),
        psnr_db: None,
        ssim: None,
        objective_value: None,
        queries: None,
        pipeline_calls: None,
        wall_time: None,
        error: err.to_string(),
    }
}

/// Scores one tune: the best parameters are re-rendered outside the counted
/// pipeline and compared with the goal.
pub fn eval_row(
    pair: &ScenePair,
    run: &RunSpec,
    tune: &mut dyn FnMut(&ScenePair, &CountingPipeline<SliderPipeline>) -> anyhow::Result<TuneResult>,
    pipeline: &SliderPipeline,
) -> EvalRow {
    let counted = CountingPipeline::new(pipeline.clone());
    let scored = tune(pair, &counted).and_then(|r| {
        let best = pipeline.render(&pair.input, &r.best_params)?;
        Ok((psnr(&best, &pair.goal)?, ssim(&best, &pair.goal)?, r))
    });
    match scored {
        Ok((p, s, r)) => EvalRow {
            id: pair.id.clone(),
            run: run.label(),
            status: "ok".into(),
            psnr_db: Some(p),
            ssim: Some(s),
            objective_value: Some(r.best_value),
            queries: Some(r.query_count),
            pipeline_calls: Some(counted.calls()),
            wall_time: Some(r.wall_time),
            error: String::new(),
        },
        Err(e) => failure(&pair.id, run, format!("{e:#}")),
    }
}

fn print_summary(summary: &[EvalSummary]) {
    println!(
        "{:<14} {:>6} {:>7} {:>10} {:>8} {:>9} {:>10}",
        "run", "ok", "failed", "psnr_db", "ssim", "queries", "seconds"
    );
    let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
    for s in summary {
        println!(
            "{:<14} {:>6} {:>7} {:>10} {:>8} {:>9} {:>10}",
            s.run,
            s.pairs_ok,
            s.pairs_failed,
            f(s.mean_psnr_db, 2),
            f(s.mean_ssim, 4),
            f(s.mean_queries, 1),
            f(s.mean_wall_time, 3)
        );
    }
}

pub fn eval_cmd(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = required(&cfg.eval.data, "dataset directory (--data)")?;
    let out_dir = cfg.eval.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let runs = &cfg.eval.runs;
    if runs.is_empty() {
        return Err(UsageError("no runs given (--run)".into()).into());
    }
    let ctx = TuneContext::new(cfg, runs, cfg.eval.checkpoint.as_deref())?;
    let manifest = load_manifest(&data)?;
    let wanted: Option<Split> = match cfg.eval.split.as_str() {
        "eval" => Some(Split::Eval),
        "train" => Some(Split::Train),
        "all" => None,
        other => return Err(UsageError(format!("unknown split '{other}' (eval, train or all)")).into()),
    };
    let mut indices: Vec<usize> = (0..manifest.pairs.len())
        .filter(|&i| wanted.is_none_or(|s| manifest.pairs[i].split == s))
        .collect();
    if let Some(limit) = cfg.eval.limit {
        indices.truncate(limit);
    }
    let pipeline = cfg.pipeline();
    let mut rows = Vec::new();
    for (k, &i) in indices.iter().enumerate() {
        let id = manifest.pairs[i].id.clone();
        let pair = match manifest.load_pair(&data, i) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("pair {id}: {e}");
                rows.extend(runs.iter().map(|r| failure(&id, r, &e)));
                continue;
            }
        };
        for run in runs {
            let mut tune = |p: &ScenePair, pipe: &CountingPipeline<SliderPipeline>| {
                ctx.run(run, &p.input, &p.goal, p.goal_params, pipe, i as u64)
            };
            rows.push(eval_row(&pair, run, &mut tune, &pipeline));
        }
        log::info!("evaluated {}/{} pairs", k + 1, indices.len());
    }
    let summary = summarize(&rows, runs);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    write_atomic(&out_dir.join("eval.csv"), &csv_bytes(&rows)?)?;
    write_atomic(&out_dir.join("eval_summary.csv"), &csv_bytes(&summary)?)?;
    write_json(
        &out_dir.join("eval.json"),
        &serde_json::json!({ "config": cfg, "rows": rows, "summary": summary }),
    )?;
    print_summary(&summary);
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

/// `720p`, `1k`, `2k`, `4k` or an explicit `WxH`; returns (height, width).
pub fn parse_resolution(s: &str) -> anyhow::Result<(usize, usize)> {
    let named = match s.to_ascii_lowercase().as_str() {
        "720p" => Some((720, 1280)),
        "1k" | "1080p" => Some((1080, 1920)),
        "2k" | "1440p" => Some((1440, 2560)),
        "4k" | "2160p" => Some((2160, 3840)),
        _ => None,
    };
    if let Some(r) = named {
        return Ok(r);
    }
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| UsageError(format!("unknown resolution '{s}'")))?;
    let parse = |v: &str| {
        v.parse::<usize>()
            .ok()
            .filter(|&n| n >= 16)
            .ok_or_else(|| UsageError(format!("invalid resolution '{s}'")))
    };
    Ok((parse(h)?, parse(w)?))
}

/// Full-resolution float buffers alive at once during one tune: input, goal,
/// the render and the pipeline's intermediate stages.
const BUFFERS_PER_TUNE: f64 = 10.0;

pub fn estimated_peak_mb(h: usize, w: usize) -> f64 {
    BUFFERS_PER_TUNE * (h * w * 3 * std::mem::size_of::<f64>()) as f64 / (1024.0 * 1024.0)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One scene at the requested size with a goal rendered from random sliders.
pub fn bench_pair(cfg: &RunConfig, h: usize, w: usize) -> anyhow::Result<(Image, Image)> {
    let spec = cfg.dataset_spec();
    let base = spec.pair(0)?;
    let input = resize_bilinear(&base.input, h, w)?;
    let goal = apply_pipeline(&input, &base.goal_params.expect("synthetic pair"))?;
    Ok((input, goal))
}

pub fn bench_cmd(cfg: &RunConfig) -> anyhow::Result<()> {
    let b = &cfg.bench;
    if b.repeats == 0 {
        return Err(UsageError("bench.repeats must be positive".into()).into());
    }
    let resolutions: Vec<(String, (usize, usize))> = b
        .resolutions
        .iter()
        .map(|r| Ok((r.clone(), parse_resolution(r)?)))
        .collect::<anyhow::Result<_>>()?;
    let needs_agent = b.runs.iter().any(|r| r.method == crate::runspec::MethodName::Rl);
    let mut ctx = TuneContext::new(cfg, &[], None)?;
    if needs_agent {
        ctx.agent = Some(match &b.checkpoint {
            Some(p) => Agent::load(p).with_context(|| format!("loading checkpoint {}", p.display()))?,
            None => {
                log::warn!("no checkpoint given; rl timings use an untrained network");
                Agent::new(cfg.td3.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?
            }
        });
    }
    let pipeline = cfg.pipeline();
    let mut table: Vec<serde_json::Map<String, serde_json::Value>> = Vec::new();
    for run in &b.runs {
        let mut row = serde_json::Map::new();
        row.insert("run".into(), run.label().into());
        table.push(row);
    }
    for (label, (h, w)) in &resolutions {
        let est = estimated_peak_mb(*h, *w);
        let pair = if est > b.memory_limit_mb {
            None
        } else {
            Some(bench_pair(cfg, *h, *w)?)
        };
        for (run, row) in b.runs.iter().zip(table.iter_mut()) {
            let cell = match &pair {
                None => {
                    log::warn!(
                        "{label}: estimated {est:.0} MB exceeds the {:.0} MB limit",
                        b.memory_limit_mb
                    );
                    serde_json::Value::from("OOM")
                }
                Some((input, goal)) => {
                    let mut times = Vec::with_capacity(b.repeats);
                    for _ in 0..b.repeats {
                        let r = ctx.run(run, input, goal, None, &pipeline, 0)?;
                        times.push(r.wall_time);
                    }
                    let t = median(times);
                    log::info!("{} at {label}: {t:.3} s", run.label());
                    serde_json::Value::from(t)
                }
            };
            row.insert(label.clone(), cell);
        }
    }
    let out_dir = b.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut csv = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["run".to_string()];
    header.extend(resolutions.iter().map(|(l, _)| l.clone()));
    csv.write_record(&header)?;
    for row in &table {
        let rec: Vec<String> = header
            .iter()
            .map(|k| match &row[k] {
                serde_json::Value::String(s) => s.clone(),
                v => v.to_string(),
            })
            .collect();
        csv.write_record(&rec)?;
    }
    write_atomic(
        &out_dir.join("bench.csv"),
        &csv.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?,
    )?;
    write_json(
        &out_dir.join("bench.json"),
        &serde_json::json!({ "seconds": table, "repeats": b.repeats }),
    )?;
    println!("{}", header.join("\t"));
    for row in &table {
        let cells: Vec<String> = header
            .iter()
            .map(|k| match &row[k] {
                serde_json::Value::Number(n) => format!("{:.3}", n.as_f64().unwrap_or(f64::NAN)),
                serde_json::Value::String(s) => s.clone(),
                v => v.to_string(),
            })
            .collect();
        println!("{}", cells.join("\t"));
    }
    Ok(())
}
