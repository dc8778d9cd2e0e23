//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use dytx_core::checkpoint;
use dytx_core::config::{parse_policy, FileConfig};
use dytx_core::data::generate::{generate_sequence, GenConfig};
use dytx_core::data::io::{read_dataset, read_sequence, write_sequence};
use dytx_core::data::types::Sequence;
use dytx_core::evaluation::{
    difficulty_report, exit_depth_report, pareto_front, precision_at, success_auc,
    success_auc_sampled, TradeoffPoint,
};
use dytx_core::inference::{calibrate, track_sequence, ExitPolicy, TrackResult};
use dytx_core::model::Model;
use dytx_core::objectives::{train, write_log_csv};
use dytx_core::rng::RandomState;

use crate::manifest::ManifestBuilder;

/// Deterministic child stream `i` of a master seed, independent of the
/// order in which streams are requested (so thread count never matters).
fn stream(seed: u64, i: u64) -> RandomState {
    let mut master = RandomState::new(seed);
    master.fork(i)
}

pub fn load_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        Some(p) => Ok(FileConfig::load(p)?),
        None => Ok(FileConfig::default()),
    }
}

/// Apply a named ablation preset on top of the loaded config.
pub fn apply_ablation(cfg: &mut FileConfig, preset: &str) -> Result<()> {
    match preset {
        "reuse:none" | "reuse:residual" | "reuse:input_sum" | "reuse:concat"
        | "reuse:gated_sum" => {
            cfg.exits.reuse = preset.split(':').nth(1).unwrap().to_string();
        }
        "distill:off" | "distill:plain" | "distill:on" => {
            cfg.train.distill = preset.split(':').nth(1).unwrap().to_string();
        }
        "strategy:fixed-backbone" | "strategy:one-by-one" | "strategy:joint" => {
            cfg.train.strategy = preset.split(':').nth(1).unwrap().to_string();
        }
        other => bail!(
            "unknown ablation preset '{other}' (expected reuse:*, distill:*, strategy:*)"
        ),
    }
    Ok(())
}

fn ensure_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)?.next().is_some();
        if non_empty && !force {
            bail!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            );
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn build_model(cfg: &FileConfig, seed: u64) -> Result<Model<f32>> {
    let mut rng = RandomState::new(seed);
    Ok(Model::init(
        &cfg.backbone_config()?,
        &cfg.exits_config()?,
        &mut rng,
    )?)
}

fn load_trained(cfg: &FileConfig, ckpt: &Path, seed: u64) -> Result<Model<f32>> {
    if !ckpt.exists() {
        bail!("checkpoint not found: {}", ckpt.display());
    }
    let mut model = build_model(cfg, seed)?;
    checkpoint::load_model(ckpt, &mut model)?;
    Ok(model)
}

fn read_split(data: &Path, split: &str) -> Result<Vec<Sequence>> {
    let dir = data.join(split);
    if !dir.exists() {
        bail!("dataset split not found: {}", dir.display());
    }
    Ok(read_dataset(&dir)?)
}

pub fn cmd_gen_data(cfg: &FileConfig, out: &Path, seed: u64, force: bool) -> Result<()> {
    ensure_out(out, force)?;
    let d = &cfg.data;
    if d.levels == 0 || d.levels > 5 {
        bail!("data.levels must be between 1 and 5, got {}", d.levels);
    }
    if d.train_frac + d.val_frac >= 1.0 {
        bail!("train_frac + val_frac must leave room for a test split");
    }
    let mut manifest = ManifestBuilder::new("gen-data", seed, cfg);
    for level in 0..d.levels {
        let gen = GenConfig {
            length: d.length,
            frame_size: d.frame_size,
            ..GenConfig::for_difficulty(level as u8)
        };
        let n = d.sequences_per_level;
        let n_train = (n as f64 * d.train_frac).round() as usize;
        let n_val = (n as f64 * d.val_frac).round() as usize;
        for i in 0..n {
            let mut rng = stream(seed, (level * 10_000 + i) as u64 + 1);
            let mut seq = generate_sequence(&gen, &mut rng)?;
            seq.name = format!("d{level}_s{i:03}");
            let split = if i < n_train {
                "train"
            } else if i < n_train + n_val {
                "val"
            } else {
                "test"
            };
            let dir = out.join(split).join(&seq.name);
            write_sequence(&seq, &dir)?;
        }
    }
    manifest.add_output(out);
    manifest.write(out)?;
    println!(
        "wrote {} levels x {} sequences to {}",
        d.levels,
        d.sequences_per_level,
        out.display()
    );
    Ok(())
}

pub fn cmd_train(
    cfg: &FileConfig,
    data: &Path,
    out: &Path,
    seed: u64,
    force: bool,
) -> Result<()> {
    ensure_out(out, force)?;
    let train_seqs = read_split(data, "train")?;
    let val_seqs = read_split(data, "val").unwrap_or_default();
    let mut model = build_model(cfg, seed)?;
    let sched = cfg.schedule()?;
    let weights = cfg.loss_weights()?;
    let mut rng = RandomState::new(seed ^ 0x7261_696e);
    let logs = train(&mut model, &train_seqs, &val_seqs, &sched, &weights, &mut rng)?;

    let ckpt = out.join("checkpoint.dytx");
    checkpoint::save_model(&ckpt, &model)?;
    let log_path = out.join("train_log.csv");
    let file = std::fs::File::create(&log_path)?;
    write_log_csv(&logs, model.num_exits(), file)?;

    let mut manifest = ManifestBuilder::new("train", seed, cfg);
    manifest.add_output(&ckpt);
    manifest.add_output(&log_path);
    manifest.write(out)?;
    if let Some(last) = logs.last() {
        println!(
            "trained {} epochs, final loss {:.4}, val IoU {:?}",
            logs.len(),
            last.loss_total,
            last.val_iou
        );
    }
    Ok(())
}

pub fn cmd_calibrate(
    cfg: &FileConfig,
    ckpt: &Path,
    data: &Path,
    out: &Path,
    seed: u64,
    force: bool,
) -> Result<()> {
    ensure_out(out, force)?;
    let model = load_trained(cfg, ckpt, seed)?;
    let val = read_split(data, "val")?;
    let mut rng = RandomState::new(seed ^ 0x6361_6c69);
    let rows = calibrate(&model, &val, &mut rng)?;

    let slots = model.num_exits() - 1;
    let mut text = String::new();
    for i in 0..slots {
        write!(text, "tau_{},", i + 1)?;
    }
    text.push_str("mean_iou,mean_flops,mean_latency_ms\n");
    for row in &rows {
        for t in &row.tau {
            write!(text, "{t:.3},")?;
        }
        writeln!(
            text,
            "{:.6},{:.0},{:.4}",
            row.mean_iou, row.mean_flops, row.mean_latency_ms
        )?;
    }
    let path = out.join("calibration.csv");
    std::fs::write(&path, text)?;

    let best = rows
        .iter()
        .max_by(|a, b| a.mean_iou.partial_cmp(&b.mean_iou).unwrap())
        .unwrap();
    println!(
        "best tau {:?}: IoU {:.4} at {:.0} MACs/frame",
        best.tau, best.mean_iou, best.mean_flops
    );

    let mut manifest = ManifestBuilder::new("calibrate", seed, cfg);
    manifest.add_output(&path);
    manifest.write(out)?;
    Ok(())
}

fn frames_csv(result: &TrackResult) -> String {
    let mut text = String::from("frame,x,y,w,h,exit,score,ms\n");
    for r in &result.records {
        let (x, y, w, h) = r.bbox.to_xywh();
        let _ = writeln!(
            text,
            "{},{:.3},{:.3},{:.3},{:.3},{},{:.6},{:.4}",
            r.frame,
            x,
            y,
            w,
            h,
            r.exit_index + 1,
            r.score,
            r.latency_ms
        );
    }
    text
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_track(
    cfg: &FileConfig,
    ckpt: &Path,
    seq_dir: &Path,
    out: &Path,
    policy_spec: &str,
    tau: &[f64],
    seed: u64,
    force: bool,
) -> Result<()> {
    ensure_out(out, force)?;
    let model = load_trained(cfg, ckpt, seed)?;
    let seq = read_sequence(seq_dir)
        .with_context(|| format!("reading sequence {}", seq_dir.display()))?;
    let policy = parse_policy(policy_spec, tau)?;
    let mut rng = RandomState::new(seed ^ 0x7472_6163);
    let result = track_sequence(&model, &seq, &policy, &mut rng)?;

    let path = out.join("frames.csv");
    std::fs::write(&path, frames_csv(&result))?;
    println!(
        "{}: mean IoU {:.4}, median latency {:.2} ms",
        result.seq_name,
        result.mean_iou(),
        result.median_latency_ms()
    );
    let mut manifest = ManifestBuilder::new("track", seed, cfg);
    manifest.add_output(&path);
    manifest.write(out)?;
    Ok(())
}

/// Track every sequence, optionally across threads. Per-sequence RNG streams
/// are forked from the seed by index, so results do not depend on `jobs`.
pub fn track_all(
    model: &Model<f32>,
    seqs: &[Sequence],
    policy: &ExitPolicy,
    seed: u64,
    jobs: usize,
) -> Result<Vec<TrackResult>> {
    let jobs = jobs.max(1);
    if jobs == 1 {
        return seqs
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = stream(seed, i as u64);
                Ok(track_sequence(model, s, policy, &mut rng)?)
            })
            .collect();
    }
    let mut results: Vec<Option<TrackResult>> = vec![None; seqs.len()];
    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for (chunk_idx, chunk) in seqs.chunks(seqs.len().div_ceil(jobs)).enumerate() {
            let model = model.clone();
            let policy = policy.clone();
            let base = chunk_idx * seqs.len().div_ceil(jobs);
            handles.push(scope.spawn(move || -> Result<Vec<(usize, TrackResult)>> {
                let mut out = Vec::new();
                for (j, s) in chunk.iter().enumerate() {
                    let i = base + j;
                    let mut rng = stream(seed, i as u64);
                    out.push((i, track_sequence(&model, s, &policy, &mut rng)?));
                }
                Ok(out)
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("tracker thread panicked")? {
                results[i] = Some(r);
            }
        }
        Ok(())
    })?;
    Ok(results.into_iter().map(|r| r.unwrap()).collect())
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    cfg: &FileConfig,
    ckpt: &Path,
    data: &Path,
    out: &Path,
    policy_spec: &str,
    tau: &[f64],
    seed: u64,
    jobs: usize,
    force: bool,
) -> Result<()> {
    ensure_out(out, force)?;
    let model = load_trained(cfg, ckpt, seed)?;
    let test = read_split(data, "test")?;
    let policy = parse_policy(policy_spec, tau)?;
    policy.validate(model.num_exits())?;
    let results = track_all(&model, &test, &policy, seed ^ 0x6576_616c, jobs)?;

    let mut ious = Vec::new();
    let mut errors = Vec::new();
    let mut exit_counts = vec![0usize; model.num_exits()];
    let mut flops_sum = 0.0;
    let mut latencies = Vec::new();
    let mut frames = 0usize;
    for r in &results {
        for (rec, gt) in r.records.iter().zip(&r.gt) {
            ious.push(rec.bbox.iou(gt));
            errors.push(rec.bbox.center_distance(gt));
            exit_counts[rec.exit_index] += 1;
            flops_sum += rec.flops as f64;
            frames += 1;
        }
        latencies.push(r.median_latency_ms());
    }
    if frames == 0 {
        bail!("no frames evaluated");
    }
    let frame_size = test[0].frames[0].width as f64;
    let auc = success_auc(&ious)?;
    let auc21 = success_auc_sampled(&ious)?;
    let prec = precision_at(&errors, frame_size)?;
    let med_latency = {
        let mut l = latencies.clone();
        l.sort_by(|a, b| a.partial_cmp(b).unwrap());
        l[l.len() / 2]
    };
    let fps = 1000.0 / med_latency;

    let mut metrics = String::from("policy,frames,mean_iou,auc,auc_sampled,precision,mean_flops");
    for i in 0..model.num_exits() {
        let _ = write!(metrics, ",exit_frac_{}", i + 1);
    }
    metrics.push_str(",median_latency_ms,fps\n");
    let _ = write!(
        metrics,
        "{policy_spec},{frames},{:.6},{:.4},{:.4},{:.4},{:.0}",
        auc / 100.0,
        auc,
        auc21,
        prec,
        flops_sum / frames as f64
    );
    for c in &exit_counts {
        let _ = write!(metrics, ",{:.4}", *c as f64 / frames as f64);
    }
    let _ = writeln!(metrics, ",{med_latency:.4},{fps:.2}");
    let metrics_path = out.join("metrics.csv");
    std::fs::write(&metrics_path, metrics)?;

    let attrs: Vec<(String, Vec<dytx_core::data::types::Attribute>)> = test
        .iter()
        .map(|s| (s.name.clone(), s.attributes.clone()))
        .collect();
    let depth = exit_depth_report(&results, &attrs);
    let mut depth_csv = String::from("exit,frames,mean_iou\n");
    for row in &depth.rows {
        let _ = writeln!(
            depth_csv,
            "{},{},{:.6}",
            row.exit_index + 1,
            row.frames,
            row.mean_iou
        );
    }
    depth_csv.push_str("attribute,mean_exit\n");
    for (a, d) in &depth.attribute_depth {
        let _ = writeln!(depth_csv, "{},{:.4}", a.as_str(), d + 1.0);
    }
    let depth_path = out.join("exit_depth.csv");
    std::fs::write(&depth_path, depth_csv)?;

    let diff = difficulty_report(std::slice::from_ref(&results))?;
    let mut diff_csv = String::from("level,frames,mean_iou\n");
    for row in &diff {
        let _ = writeln!(
            diff_csv,
            "{},{},{:.6}",
            row.level, row.frames, row.mean_iou_per_exit[0]
        );
    }
    let diff_path = out.join("difficulty.csv");
    std::fs::write(&diff_path, diff_csv)?;

    println!(
        "{policy_spec}: mean IoU {:.4} ({frames} frames), AUC {auc:.2}, precision {prec:.2}, {fps:.1} fps",
        auc / 100.0
    );
    let mut manifest = ManifestBuilder::new("eval", seed, cfg);
    manifest.add_output(&metrics_path);
    manifest.add_output(&depth_path);
    manifest.add_output(&diff_path);
    manifest.write(out)?;
    Ok(())
}

pub fn cmd_pareto(cfg: &FileConfig, input: &Path, out: &Path, seed: u64, force: bool) -> Result<()> {
    ensure_out(out, force)?;
    let text = std::fs::read_to_string(input)
        .with_context(|| format!("reading points from {}", input.display()))?;
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("label")) {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            bail!("line {}: expected label,speed,precision", i + 1);
        }
        points.push(TradeoffPoint::new(
            parts[1].trim().parse::<f64>().with_context(|| format!("line {}", i + 1))?,
            parts[2].trim().parse::<f64>().with_context(|| format!("line {}", i + 1))?,
            parts[0].trim(),
        ));
    }
    if points.is_empty() {
        bail!("no points in {}", input.display());
    }
    let front = pareto_front(&points);
    let mut csv = String::from("label,speed,precision\n");
    for p in &front {
        let _ = writeln!(csv, "{},{:.4},{:.4}", p.label, p.speed, p.precision);
    }
    let path = out.join("front.csv");
    std::fs::write(&path, csv)?;
    println!("front: {} of {} points", front.len(), points.len());
    let mut manifest = ManifestBuilder::new("pareto", seed, cfg);
    manifest.add_output(&path);
    manifest.write(out)?;
    Ok(())
}
