use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use cooptraj_core::assoc::correct_scene;
use cooptraj_core::config::{ConfigError, PipelineConfig};
use cooptraj_core::encoder::MapFeatureCache;
use cooptraj_core::eval::{
    cases_for, evaluate, read_predictions, write_predictions, EfficiencyReport, EvalError, MissRateMode,
    PredictionRecord,
};
use cooptraj_core::io::{load_scenario, save_scenario, IoError};
use cooptraj_core::model::Model;
use cooptraj_core::prepare::{EdgeTag, MapRegistry, PreparedScene};
use cooptraj_core::scene::{Scene, View};
use cooptraj_core::signal::compute_trends;
use cooptraj_core::synth::{apply_perturbations, generate_synthetic, GeneratorConfig, Layout, PerturbationSpec};
use cooptraj_core::train::{ingest, Ingested, Trainer};
use cooptraj_tensor::Tape;
use serde_json::json;

use crate::support::{load_config, load_scenes, par_map, write_json, write_manifest};
use crate::{plot, BucketsArg, Cli, Command, LayoutArg, MissRateArg};

pub fn run(cli: &Cli) -> Result<()> {
    let jobs = cli.jobs.max(1);
    match &cli.command {
        Command::Gen {
            agents,
            layout,
            perturb,
            seed,
            count,
            targets,
            out,
        } => gen(*agents, *layout, perturb.as_deref(), *seed, *count, *targets, out),
        Command::Validate { file } => validate(file),
        Command::Correct {
            input,
            config,
            out,
            report,
        } => correct(input, config.as_deref(), out, report.as_deref()),
        Command::Train {
            data,
            config,
            val_fraction,
            epochs,
            out,
        } => train(data, config.as_deref(), *val_fraction, *epochs, out, jobs),
        Command::Predict {
            scene,
            config,
            weights,
            out,
        } => predict(scene, config.as_deref(), weights, out, jobs),
        Command::Eval {
            pred,
            truth,
            buckets: BucketsArg::Table5,
            miss_rate,
            out,
        } => eval(pred, truth, *miss_rate, out, jobs),
        Command::BenchCache {
            scene,
            config,
            weights,
            out,
        } => bench_cache(scene, config.as_deref(), weights.as_deref(), out.as_deref(), jobs),
        Command::Encode {
            scene,
            config,
            weights,
            dump_cache_stats,
            dump_signals,
        } => encode(scene, config.as_deref(), weights.as_deref(), dump_cache_stats.as_deref(), dump_signals.as_deref()),
        Command::Fuse { scene, config, report } => fuse(scene, config.as_deref(), report, jobs),
        Command::Plot { scene, pred, out } => plot_cmd(scene, pred.as_deref(), out),
    }
}

/// Build the model, from a checkpoint when given, and report its size.
fn build_model(cfg: &PipelineConfig, weights: Option<&Path>) -> Result<Model> {
    let model = match weights {
        Some(w) => {
            let f = File::open(w).map_err(|e| IoError::Io {
                path: w.display().to_string(),
                source: e,
            })?;
            Model::load(&cfg.model, BufReader::new(f)).with_context(|| format!("loading weights {}", w.display()))?
        }
        None => Model::new(&cfg.model)?,
    };
    eprintln!("model parameters: {}", model.parameter_count());
    Ok(model)
}

fn ingest_scenes(scenes: &[Scene], cfg: &PipelineConfig, jobs: usize) -> Result<Vec<Ingested>> {
    par_map(jobs, scenes, |s| {
        ingest(s, &cfg.assoc, &cfg.model, &mut MapRegistry::default())
            .with_context(|| format!("scenario {}", s.scenario_id))
    })
}

fn gen(
    agents: usize,
    layout: LayoutArg,
    perturb: Option<&Path>,
    seed: u64,
    count: usize,
    targets: usize,
    out: &Path,
) -> Result<()> {
    let spec: Option<PerturbationSpec> = match perturb {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| ConfigError::Invalid(vec![format!("cannot read {}: {e}", p.display())]))?;
            let spec: PerturbationSpec = serde_json::from_str(&text).map_err(ConfigError::Parse)?;
            spec.validate()?;
            Some(spec)
        }
        None => None,
    };
    let gcfg = GeneratorConfig {
        agents,
        layout: match layout {
            LayoutArg::Cross => Layout::Cross,
            LayoutArg::Tee => Layout::Tee,
        },
        targets,
        ..GeneratorConfig::default()
    };
    if count > 1 {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    }
    let mut files = Vec::new();
    let mut edits = 0usize;
    for i in 0..count as u64 {
        let mut scene = generate_synthetic(&gcfg, seed + i)?.scene;
        if let Some(spec) = &spec {
            let s = PerturbationSpec {
                seed: spec.seed + i,
                ..spec.clone()
            };
            let (perturbed, log) = apply_perturbations(&scene, &s)?;
            edits += log.iter().filter(|e| e.is_identity_edit()).count();
            scene = perturbed;
        }
        let path = if count > 1 {
            out.join(format!("scene_{:05}.jsonl", seed + i))
        } else {
            out.to_path_buf()
        };
        save_scenario(&path, &scene)?;
        files.push(path.display().to_string());
    }
    println!("wrote {count} scene(s), {edits} injected identity edits");
    write_manifest(
        out,
        "gen",
        &PipelineConfig::default(),
        seed,
        json!({ "generator": gcfg, "perturbation": spec, "files": files }),
    )
}

fn validate(file: &Path) -> Result<()> {
    let scene = load_scenario(file)?;
    println!(
        "ok: {} ({} ego tracks, {} other tracks, {} polygons, {} signals, {} targets)",
        scene.scenario_id,
        scene.ego_tracks.len(),
        scene.other_tracks.len(),
        scene.map.len(),
        scene.signals.len(),
        scene.target_ids.len()
    );
    Ok(())
}

fn correct(input: &Path, config: Option<&Path>, out: &Path, report: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let scene = load_scenario(input)?;
    let (corrected, map) = correct_scene(&scene, &cfg.assoc)?;
    save_scenario(out, &corrected)?;
    if let Some(r) = report {
        let mut w = BufWriter::new(File::create(r).with_context(|| format!("writing {}", r.display()))?);
        for e in &map.edits {
            writeln!(w, "{}", serde_json::to_string(e)?)?;
        }
        w.flush()?;
    }
    println!("{} edits, {} mapped pairs", map.edits.len(), map.ego_to_other.len());
    write_manifest(
        out,
        "correct",
        &cfg,
        0,
        json!({ "input": input.display().to_string(), "edits": map.edits.len(), "identity_map": map.ego_to_other }),
    )
}

fn train(
    data: &[PathBuf],
    config: Option<&Path>,
    val_fraction: f64,
    epochs: Option<usize>,
    out: &Path,
    jobs: usize,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(e) = epochs {
        cfg.training.epochs = e;
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(ConfigError::Invalid(vec![format!("--val-fraction {val_fraction} must be in [0,1)")]).into());
    }
    let model = build_model(&cfg, None)?;
    let scenes = load_scenes(data, jobs)?;
    let prepared: Vec<PreparedScene> = ingest_scenes(&scenes, &cfg, jobs)?.into_iter().map(|i| i.prepared).collect();
    let n_val = ((prepared.len() as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(prepared.len().saturating_sub(1));
    let (train_set, val_set) = prepared.split_at(prepared.len() - n_val);
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let curve_path = out.join("loss_curve.jsonl");
    let mut curve = BufWriter::new(File::create(&curve_path).with_context(|| format!("writing {}", curve_path.display()))?);
    let mut trainer = Trainer::new(model, cfg.training.clone());
    let mut io_err = None;
    let report = trainer.fit(train_set, (!val_set.is_empty()).then_some(val_set), |s| {
        eprintln!(
            "epoch {:>3} loss {:.4} lr {:.2e}{} ({:.1} s)",
            s.epoch,
            s.loss,
            s.lr,
            s.val_min_ade.map(|v| format!(" val minADE {v:.3}")).unwrap_or_default(),
            s.seconds
        );
        if let Err(e) = serde_json::to_string(s).map_err(std::io::Error::other).and_then(|l| writeln!(curve, "{l}")) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing loss curve");
    }
    curve.flush()?;
    let ckpt = out.join("model.ckpt");
    trainer.model.save(BufWriter::new(File::create(&ckpt)?))?;
    write_json(&out.join("config.json"), &cfg)?;
    write_json(&out.join("report.json"), &report)?;
    println!(
        "trained {} steps on {} scenes; val minADE {:?} -> {:?}",
        report.steps,
        train_set.len(),
        report.initial_val_min_ade,
        report.final_val_min_ade
    );
    write_manifest(
        out,
        "train",
        &cfg,
        cfg.training.seed,
        json!({
            "parameters": report.parameters,
            "train_scenes": train_set.len(),
            "val_scenes": val_set.len(),
            "outputs": ["model.ckpt", "loss_curve.jsonl", "config.json", "report.json"],
        }),
    )
}

fn predict(scenes: &[PathBuf], config: Option<&Path>, weights: &Path, out: &Path, jobs: usize) -> Result<()> {
    let cfg = load_config(config)?;
    let model = build_model(&cfg, Some(weights))?;
    let scenes = load_scenes(scenes, jobs)?;
    let per_scene = par_map(jobs, &scenes, |s| {
        let ing = ingest(s, &cfg.assoc, &cfg.model, &mut MapRegistry::default())
            .with_context(|| format!("scenario {}", s.scenario_id))?;
        // Report predictions under the caller's target ids even when
        // correction renamed the track.
        let rename: BTreeMap<_, _> = ing.scene.target_ids.iter().zip(&s.target_ids).collect();
        let preds = model.predict(&ing.prepared)?;
        Ok(preds
            .into_iter()
            .map(|mut p| {
                if let Some(orig) = rename.get(&p.target) {
                    p.target = (*orig).clone();
                }
                PredictionRecord {
                    scenario_id: s.scenario_id.clone(),
                    prediction: p,
                }
            })
            .collect::<Vec<_>>())
    })?;
    let records: Vec<PredictionRecord> = per_scene.into_iter().flatten().collect();
    let w = BufWriter::new(File::create(out).with_context(|| format!("writing {}", out.display()))?);
    write_predictions(w, &records)?;
    println!("{} predictions for {} scenes", records.len(), scenes.len());
    write_manifest(
        out,
        "predict",
        &cfg,
        cfg.model.seed,
        json!({ "weights": weights.display().to_string(), "predictions": records.len() }),
    )
}

fn eval(pred: &Path, truth: &[PathBuf], mode: MissRateArg, out: &Path, jobs: usize) -> Result<()> {
    let f = File::open(pred).map_err(|e| IoError::Io {
        path: pred.display().to_string(),
        source: e,
    })?;
    let records = read_predictions(BufReader::new(f))?;
    let scenes = load_scenes(truth, jobs)?;
    let by_id: BTreeMap<&str, &Scene> = scenes.iter().map(|s| (s.scenario_id.as_str(), s)).collect();
    let mut grouped: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for r in &records {
        grouped.entry(r.scenario_id.as_str()).or_default().push(r.prediction.clone());
    }
    let mut cases = Vec::new();
    for (id, preds) in &grouped {
        let scene = by_id
            .get(id)
            .ok_or_else(|| anyhow!(EvalError::Format { line: 0, message: format!("no truth scene for scenario {id}") }))?;
        cases.extend(cases_for(scene, preds));
    }
    let mode = match mode {
        MissRateArg::BestOfK => MissRateMode::BestOfK,
        MissRateArg::PerModeOverK => MissRateMode::PerModeOverK,
    };
    let report = evaluate(&cases, mode)?;
    write_json(out, &report)?;
    println!(
        "minADE {:.4}  minFDE {:.4}  MR {:.4}  ({} cases, {} scenarios)",
        report.min_ade, report.min_fde, report.mr, report.n_cases, report.n_scenarios
    );
    write_manifest(out, "eval", &PipelineConfig::default(), 0, json!({ "predictions": pred.display().to_string() }))
}

fn bench_cache(
    scenes: &[PathBuf],
    config: Option<&Path>,
    weights: Option<&Path>,
    out: Option<&Path>,
    jobs: usize,
) -> Result<()> {
    let cfg = load_config(config)?;
    let model = build_model(&cfg, weights)?;
    let scenes = load_scenes(scenes, jobs)?;
    let ingested = ingest_scenes(&scenes, &cfg, jobs)?;
    let mut report = EfficiencyReport::default();
    let mut uncached_recomputes = 0;
    let mut total_ms = 0.0;
    for ing in &ingested {
        let p = &ing.prepared;
        let start = Instant::now();
        let mut tape = Tape::new();
        let mut cache = model.new_cache();
        model.forward(&mut tape, p, &mut cache)?;
        total_ms += start.elapsed().as_secs_f64() * 1e3;
        report.map_recomputes += cache.recomputes;
        report.cache_hits += cache.hits;
        let mut tape = Tape::new();
        let mut cache = MapFeatureCache::new(false);
        model.forward(&mut tape, p, &mut cache)?;
        uncached_recomputes += cache.recomputes;
        for v in [&p.ego, &p.other] {
            report.edges_with_gating += v.graph.edges.len();
            report.edges_full += v.graph.full_pairs;
        }
    }
    report.mean_inference_ms = total_ms / ingested.len() as f64;
    let value = json!({
        "efficiency": report,
        "uncached_map_recomputes": uncached_recomputes,
        "recompute_ratio": uncached_recomputes as f64 / report.map_recomputes.max(1) as f64,
        "parameters": model.parameter_count(),
    });
    println!("{}", serde_json::to_string_pretty(&value)?);
    if let Some(out) = out {
        write_json(out, &value)?;
        write_manifest(out, "bench-cache", &cfg, cfg.model.seed, json!({ "scenes": ingested.len() }))?;
    }
    Ok(())
}

fn encode(
    scene: &Path,
    config: Option<&Path>,
    weights: Option<&Path>,
    stats: Option<&Path>,
    signals: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let model = build_model(&cfg, weights)?;
    let scene = load_scenario(scene)?;
    let ing = ingest(&scene, &cfg.assoc, &cfg.model, &mut MapRegistry::default())?;
    let p = &ing.prepared;
    let mut tape = Tape::new();
    let mut cache = model.new_cache();
    model.encode(&mut tape, p, &mut cache)?;
    let count = |tag| p.ego.graph.count(tag) + p.other.graph.count(tag);
    let value = json!({
        "recomputes": cache.recomputes,
        "hits": cache.hits,
        "edges_signal": count(EdgeTag::SameSignal),
        "edges_radius": count(EdgeTag::Radius),
        "edges_saved_vs_full": p.ego.graph.saved_vs_full() + p.other.graph.saved_vs_full(),
    });
    println!("{value}");
    if let Some(path) = stats {
        write_json(path, &value)?;
    }
    if let Some(path) = signals {
        let table = compute_trends(&ing.scene);
        let rows: Vec<_> = table
            .trends
            .iter()
            .map(|((view, id, frame), t)| json!({ "view": view, "track_id": id, "frame": frame, "trend": t }))
            .collect();
        write_json(path, &json!({ "trends": rows, "ambiguities": table.ambiguities.len() }))?;
    }
    Ok(())
}

fn fuse(scenes: &[PathBuf], config: Option<&Path>, report: &Path, jobs: usize) -> Result<()> {
    let cfg = load_config(config)?;
    let scenes = load_scenes(scenes, jobs)?;
    let ingested = ingest_scenes(&scenes, &cfg, jobs)?;
    let rows: Vec<_> = ingested
        .iter()
        .map(|ing| {
            let p = &ing.prepared;
            let f = &p.fusion;
            let ego_present: usize = p.ego.track_slots.iter().map(|t| t.iter().flatten().count()).sum();
            let fused_present: usize = f.track_slots.iter().map(|t| t.iter().flatten().count()).sum();
            let cells = p.ego.track_ids.len() * p.window.len();
            json!({
                "scenario_id": p.scenario_id,
                "ego_tracks": p.ego.track_ids.len(),
                "mapped_pairs": f.pairs.len(),
                "window_frames": p.window.len(),
                "ego_presence": ego_present,
                "fused_presence": fused_present,
                "fill_ins": f.fill_in_count(),
                "cross_edges": f.cross_edges.len(),
                "ego_coverage": ego_present as f64 / cells.max(1) as f64,
                "fused_coverage": fused_present as f64 / cells.max(1) as f64,
            })
        })
        .collect();
    write_json(report, &rows)?;
    let fills: u64 = rows.iter().filter_map(|r| r["fill_ins"].as_u64()).sum();
    println!("{} scenes, {fills} occlusion fill-ins", rows.len());
    Ok(())
}

fn plot_cmd(scene: &Path, pred: Option<&Path>, out: &Path) -> Result<()> {
    let scene = load_scenario(scene)?;
    let preds = match pred {
        Some(p) => {
            let f = File::open(p).map_err(|e| IoError::Io {
                path: p.display().to_string(),
                source: e,
            })?;
            read_predictions(BufReader::new(f))?
                .into_iter()
                .filter(|r| r.scenario_id == scene.scenario_id)
                .map(|r| r.prediction)
                .collect()
        }
        None => Vec::new(),
    };
    let svg = plot::render(&scene, &preds, View::Ego);
    fs::write(out, svg).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
