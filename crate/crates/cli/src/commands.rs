//! The subcommands. Each writes its artifacts under `out` and stamps them
//! with the seed and config hash; wallclock goes to separate files so the
//! metrics themselves are reproducible byte for byte.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rmflow_core::certify::{self, Faults};
use rmflow_core::evalsuite::{mmd, noise_floor, to_array, HelixDataset};
use rmflow_core::experiments::{best_median, guidance_grid, DIVERGENCE_STREAK};
use rmflow_core::inference::{from_csv, sample as draw, to_csv, Guidance, LinearReward};
use rmflow_core::model::{load_checkpoint, save_checkpoint, CheckpointHeader, FlowNet};
use rmflow_core::training::Trainer;
use serde::Serialize;
use serde_json::json;

use crate::config::{manifold_name, RunConfig};
use crate::data::Dataset;
use crate::plot;
use crate::Exit;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_wallclock(cfg: &RunConfig, name: &str, seconds: f64) -> Result<()> {
    write_json(
        &cfg.out_path(name),
        &json!({ "seed": cfg.seed, "config_hash": cfg.hash(), "seconds": seconds }),
    )
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let a = from_csv(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(a.rows().into_iter().map(|r| r.to_vec()).collect())
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<(FlowNet, CheckpointHeader)> {
    let (header, params) = load_checkpoint(path)?;
    let expected = Dataset::manifold_of(&cfg.data)?;
    if header.manifold != expected {
        bail!(
            "checkpoint {} is on {} but the config's data lives on {}",
            path.display(),
            manifold_name(&header.manifold),
            manifold_name(&expected)
        );
    }
    let net = FlowNet::new(header.manifold.clone(), header.shape, header.parameterization, params)?;
    Ok((net, header))
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let t0 = Instant::now();
    let data = Dataset::build(&cfg.data)?;
    let shape = cfg.model.shape(data.manifold.ambient_dim());
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let net = FlowNet::init(data.manifold.clone(), shape, cfg.objective.parameterization, &mut init_rng)?;
    let mut tr = Trainer::new(net, cfg.objective.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    fs::write(cfg.out_path("config.toml"), cfg.echo())?;
    if let Some(h) = &data.helix {
        write_json(&cfg.out_path("embedding.json"), h)?;
    }
    let log_path = cfg.out_path("train.log");
    let mut log = BufWriter::new(fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    writeln!(log, "{}", json!({ "seed": cfg.seed, "config_hash": cfg.hash() }))?;
    let mut last = None;
    let mut aborted = 0u64;
    for _ in 0..cfg.objective.steps {
        let st = tr.step_on_data(&data.train, &mut rng)?;
        writeln!(log, "{}", serde_json::to_string(&st)?)?;
        aborted += st.aborted as u64;
        if tr.nonfinite_streak >= DIVERGENCE_STREAK {
            log.flush()?;
            return Err(Exit::new(
                3,
                format!("training diverged: non-finite loss for {} consecutive steps after {} optimizer steps", tr.nonfinite_streak, tr.step),
            )
            .into());
        }
        last = Some(st);
    }
    log.flush()?;

    let header = |kind: &str| CheckpointHeader {
        manifold: data.manifold.clone(),
        shape,
        parameterization: cfg.objective.parameterization,
        seed: cfg.seed,
        kind: kind.into(),
        extra: json!({ "config_hash": cfg.hash(), "data": cfg.data }),
    };
    save_checkpoint(&cfg.out_path("model.rmfckpt"), &header("params"), &tr.net.params)?;
    save_checkpoint(&cfg.out_path("model_ema.rmfckpt"), &header("ema"), &tr.ema_net().params)?;
    let steps = tr.step.max(1) as f64;
    let batch = cfg.objective.batch_size as f64;
    write_json(
        &cfg.out_path("train_metrics.json"),
        &json!({
            "seed": cfg.seed,
            "config_hash": cfg.hash(),
            "steps": tr.step,
            "final_loss": last.as_ref().map(|s| s.loss),
            "aborted_steps": aborted,
            "skipped_samples": tr.skipped_total,
            "skip_rate": tr.skipped_total as f64 / (steps * batch),
        }),
    )?;
    write_wallclock(cfg, "train_wallclock.json", t0.elapsed().as_secs_f64())?;
    println!(
        "trained {} steps, final loss {:.6}, checkpoints in {}",
        tr.step,
        last.map_or(f64::NAN, |s| s.loss),
        cfg.out.display()
    );
    Ok(())
}

pub fn sample(cfg: &RunConfig) -> Result<()> {
    let t0 = Instant::now();
    let ckpt = cfg.or_out(&cfg.sample.checkpoint, "model_ema.rmfckpt");
    let (net, header) = load_model(cfg, &ckpt)?;
    let reward = LinearReward {
        p: cfg.sample.reward_pole.clone(),
    };
    let guided = cfg.sampler.guidance != Guidance::None && cfg.sampler.lambda != 0.0;
    if guided && reward.p.len() != header.manifold.ambient_dim() {
        bail!(
            "sample.reward_pole has {} coordinates but the manifold's ambient dimension is {}",
            reward.p.len(),
            header.manifold.ambient_dim()
        );
    }
    let out = draw(&net, &cfg.sampler, cfg.sample.count, guided.then_some(&reward))?;
    fs::write(cfg.out_path("samples.csv"), to_csv(out.points.view()))?;
    write_json(
        &cfg.out_path("samples.json"),
        &json!({
            "seed": cfg.seed,
            "config_hash": cfg.hash(),
            "checkpoint": ckpt,
            "manifold": manifold_name(&header.manifold),
            "nfe": out.nfe,
            "sampler": cfg.sampler,
            "requested": cfg.sample.count,
            "emitted": out.points.nrows(),
            "failures": out.failures,
        }),
    )?;
    write_wallclock(cfg, "sample_wallclock.json", t0.elapsed().as_secs_f64())?;
    for f in &out.failures {
        eprintln!("trajectory {} failed at step {}: {}", f.index, f.step, f.error);
    }
    println!("wrote {} samples ({} failed) with nfe {}", out.points.nrows(), out.failures.len(), out.nfe);
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let data = Dataset::build(&cfg.data)?;
    let m = data.eval_manifold();
    let d = data.manifold.ambient_dim();
    let check = |rows: &[Vec<f64>], what: &str| -> Result<()> {
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            bail!("{what} has {} columns but the data manifold needs {d}", r.len());
        }
        Ok(())
    };
    let reference = if cfg.eval.reference.is_empty() {
        data.reference.clone()
    } else {
        let r = read_rows(Path::new(&cfg.eval.reference))?;
        check(&r, &cfg.eval.reference)?;
        r
    };
    let reference = data.project(&reference)?;
    let ref_arr = to_array(&reference);
    let paths: Vec<String> = if cfg.eval.samples.is_empty() {
        vec![cfg.out_path("samples.csv").display().to_string()]
    } else {
        cfg.eval.samples.clone()
    };
    let mut results = Vec::new();
    for p in &paths {
        let rows = read_rows(Path::new(p))?;
        check(&rows, p)?;
        let projected = to_array(&data.project(&rows)?);
        let v = mmd(&m, projected.view(), ref_arr.view(), cfg.eval.kappa)?;
        println!("{p}: mmd {:.6} (mmd² {:.3e}, n = {})", v.mmd, v.mmd2, rows.len());
        results.push(json!({ "samples": p, "n": rows.len(), "mmd": v.mmd, "mmd2": v.mmd2 }));
    }
    let half = cfg.eval.floor_half.min(reference.len() / 2);
    let floor = noise_floor(&m, &reference, half, cfg.eval.floor_splits, cfg.eval.kappa, cfg.seed)?;
    println!("noise floor (halves of {half}): mean {:.6}, median {:.6}", floor.mean, floor.median);
    write_json(
        &cfg.out_path("eval.json"),
        &json!({
            "seed": cfg.seed,
            "config_hash": cfg.hash(),
            "metric": "mmd",
            "kappa": cfg.eval.kappa,
            "manifold": manifold_name(&m),
            "reference_size": reference.len(),
            "results": results,
            "noise_floor": floor,
        }),
    )
}

pub fn verify(cfg: &RunConfig, faults: Faults) -> Result<()> {
    let t0 = Instant::now();
    let checks = certify::full_suite(cfg.seed, faults)?;
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for c in &checks {
        let op = match c.bound {
            certify::Bound::Below => "<",
            certify::Bound::Above => ">",
        };
        println!(
            "{} {:<20} {:<width$} {:>10.3e} {op} {:.0e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.stage,
            c.name,
            c.measured,
            c.tolerance
        );
    }
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed).collect();
    write_json(
        &cfg.out_path("verify.json"),
        &json!({
            "seed": cfg.seed,
            "config_hash": cfg.hash(),
            "passed": failed.is_empty(),
            "first_failed_stage": failed.first().map(|c| c.stage.clone()),
            "checks": checks,
        }),
    )?;
    write_wallclock(cfg, "verify_wallclock.json", t0.elapsed().as_secs_f64())?;
    if let Some(first) = failed.first() {
        return Err(Exit::new(1, format!("{} checks failed, first at stage {}", failed.len(), first.stage)).into());
    }
    println!("all {} checks passed", checks.len());
    Ok(())
}

pub fn guide(cfg: &RunConfig) -> Result<()> {
    let t0 = Instant::now();
    let ckpt = cfg.or_out(&cfg.guide.checkpoint, "model_ema.rmfckpt");
    let (net, _) = load_model(cfg, &ckpt)?;
    let g = &cfg.guide;
    let cells = guidance_grid(&net, &g.reward_pole, &g.nfe, &g.lambdas, g.seeds, g.count, &cfg.sampler)?;
    let mut best = Vec::new();
    for &nfe in &g.nfe {
        let row: Vec<(Guidance, f64)> = [Guidance::None, Guidance::NaiveState, Guidance::X1Lookahead]
            .into_iter()
            .map(|k| (k, best_median(&cells, nfe, k)))
            .collect();
        println!(
            "nfe {nfe:>3}: none {:.4}  naive {:.4}  look-ahead {:.4}",
            row[0].1, row[1].1, row[2].1
        );
        best.push(json!({ "nfe": nfe, "none": row[0].1, "naive_state": row[1].1, "x1_lookahead": row[2].1 }));
    }
    write_json(
        &cfg.out_path("guide.json"),
        &json!({
            "seed": cfg.seed,
            "config_hash": cfg.hash(),
            "checkpoint": ckpt,
            "reward_pole": g.reward_pole,
            "best_median_by_nfe": best,
            "cells": cells,
        }),
    )?;
    write_wallclock(cfg, "guide_wallclock.json", t0.elapsed().as_secs_f64())
}

pub fn plot(cfg: &RunConfig) -> Result<()> {
    let samples = cfg.or_out(&cfg.plot.samples, "samples.csv");
    let rows = read_rows(&samples)?;
    let dim = rows.first().map_or(3, Vec::len);
    let on_s2: Vec<Vec<f64>> = if dim == 3 {
        rows
    } else {
        let embed: HelixDataset = if cfg.plot.embed.is_empty() {
            match Dataset::build(&cfg.data)?.helix {
                Some(h) => h,
                None => bail!("{}-dimensional samples need a helix embedding to project to S²", dim),
            }
        } else {
            let text = fs::read_to_string(&cfg.plot.embed).with_context(|| format!("reading {}", cfg.plot.embed))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", cfg.plot.embed))?
        };
        rows.iter().map(|y| embed.project_back(y)).collect::<rmflow_core::Result<_>>()?
    };
    let mut points = Vec::with_capacity(on_s2.len());
    for (i, p) in on_s2.iter().enumerate() {
        let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        if p.len() != 3 || (n - 1.0).abs() > 1e-6 {
            bail!("row {i} is not a point on S² (norm {n})");
        }
        points.push([p[0], p[1], p[2]]);
    }
    let out = cfg.or_out(&cfg.plot.output, "samples.svg");
    fs::write(&out, plot::render(&points, cfg.plot.size)).with_context(|| format!("writing {}", out.display()))?;
    println!("plotted {} points to {}", points.len(), out.display());
    Ok(())
}
