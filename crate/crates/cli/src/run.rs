//! Mode dispatch and the scene-processing loop. Scenes fan out over a
//! bounded worker pool; report assembly is single-threaded and ordered by
//! scene id, so outputs are byte-identical for a given (config, seed)
//! regardless of the job count. Failures remove any partially written
//! outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fomo3d::eval::{evaluate, ClassHierarchy, EvalDetection, EvalFrame, EvalGroundTruth};
use fomo3d::geometry::Box3D;
use fomo3d::matching::{total_loss, FrustumContext, LossBreakdown, LossWeights};
use fomo3d::pipeline::{
    run_scene, synthesize_heatmap, Detection, PipelineWeights, Provenance, SceneOutput,
    WeightsMode,
};
use fomo3d::priors::{generate_scene, load_priors, save_priors, PromptTable, SyntheticScene};
use fomo3d::selftest;

use crate::config::{self, RunConfig};
use crate::Args;

fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Files created by this run; removed again if the run fails.
struct OutputGuard {
    written: Vec<PathBuf>,
    armed: bool,
}

impl OutputGuard {
    fn new() -> Self {
        OutputGuard {
            written: Vec::new(),
            armed: true,
        }
    }

    fn write(&mut self, path: &Path, contents: &[u8]) -> Result<()> {
        std::fs::write(path, contents)
            .with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path.to_path_buf());
        Ok(())
    }

    fn disarm(&mut self) {
        self.armed = false;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.armed {
            for p in &self.written {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    scene: usize,
    #[serde(rename = "box")]
    box7: [f64; 7],
    class: String,
    score: f64,
    provenance: String,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthRecord {
    scene: usize,
    #[serde(rename = "box")]
    box7: [f64; 7],
    class: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'a str,
    mode: &'a str,
    seed: u64,
    scenes: usize,
    jobs: usize,
    config_sha256: String,
}

struct SceneResult {
    scene_id: usize,
    ground_truth: Vec<(Box3D, usize)>,
    detections: Vec<Detection>,
    loss_lines: Vec<String>,
}

pub fn run(args: &Args) -> Result<()> {
    let (cfg, resolved) = config::load(&args.config, &args.overrides)?;
    let mode = args.mode.clone().unwrap_or_else(|| cfg.mode.clone());
    let seed = args
        .seed
        .or(cfg.seed)
        .or_else(|| {
            std::env::var("FOMO_SEED")
                .ok()
                .and_then(|s| s.parse().ok())
        })
        .ok_or_else(|| anyhow!("no seed: pass --seed, set it in the config, or export FOMO_SEED"))?;
    let scenes = args.scenes.unwrap_or(cfg.scenes);

    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating output dir {}", args.out.display()))?;

    let mut guard = OutputGuard::new();
    let result = dispatch(&mode, seed, scenes, args, &cfg, &resolved, &mut guard);
    if result.is_ok() {
        guard.disarm();
    }
    result
}

fn dispatch(
    mode: &str,
    seed: u64,
    scenes: usize,
    args: &Args,
    cfg: &RunConfig,
    resolved: &str,
    guard: &mut OutputGuard,
) -> Result<()> {
    match mode {
        "selftest" => run_selftest(seed),
        "e2e" | "proposals-only" => {
            run_pipeline(mode, seed, scenes, args, cfg, resolved, guard)
        }
        "eval-only" => run_eval_only(mode, seed, args, cfg, resolved, guard),
        other => bail!("unknown mode '{other}' (e2e | proposals-only | eval-only | selftest)"),
    }
}

fn run_selftest(seed: u64) -> Result<()> {
    let results = selftest::run_all(seed);
    let mut failed = 0usize;
    for r in &results {
        println!(
            "[{}] {}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        if !r.passed {
            failed += 1;
        }
    }
    println!("{} passed, {} failed", results.len() - failed, failed);
    if failed > 0 {
        bail!("{failed} selftest suite(s) failed");
    }
    Ok(())
}

fn prompt_table(cfg: &RunConfig) -> Result<PromptTable> {
    match cfg.prompt_preset.as_str() {
        "nuscenes" => Ok(PromptTable::nuscenes()),
        other => bail!("unknown prompt preset '{other}'"),
    }
}

fn hierarchy(cfg: &RunConfig, table: &PromptTable) -> Result<ClassHierarchy> {
    let mut h = match cfg.eval.preset.as_str() {
        "nuscenes" => ClassHierarchy::nuscenes(),
        other => bail!("unknown eval preset '{other}'"),
    };
    if let Some(range) = cfg.eval.range_override {
        h = h.with_ranges(range);
    }
    // Detection class indices are prompt-table indices; the hierarchy must
    // agree name for name.
    let names: Vec<&str> = h.classes().iter().map(|c| c.name.as_str()).collect();
    if names != table.classes().iter().map(String::as_str).collect::<Vec<_>>() {
        bail!("prompt table and class hierarchy disagree on the class list");
    }
    Ok(h)
}

fn logits_from_probs(probs: &Array1<f64>) -> Array1<f64> {
    probs.mapv(|p| {
        let p = p.clamp(1e-9, 1.0 - 1e-9);
        (p / (1.0 - p)).ln()
    })
}

fn loss_line(scene_id: usize, label: &str, b: &LossBreakdown) -> String {
    format!(
        "scene {scene_id} {label}: total={:.6} box={:.6} class={:.6} matched={}",
        b.total, b.box_term, b.class_term, b.matched
    )
}

fn scene_losses(
    scene_id: usize,
    scene: &SyntheticScene,
    out: &SceneOutput,
    weights: &LossWeights,
    pipeline: &fomo3d::pipeline::PipelineConfig,
    n_classes: usize,
) -> Vec<String> {
    let gts: Vec<Box3D> = scene.ground_truth.iter().map(|g| g.box3d).collect();
    let gt_classes: Vec<usize> = scene.ground_truth.iter().map(|g| g.class).collect();
    let mut lines = Vec::new();

    // Camera-proposal loss, frustum-constrained per source camera.
    for (cam_idx, cam) in scene.cameras.iter().enumerate() {
        let dets: Vec<Box3D> = out
            .camera_proposals
            .iter()
            .filter(|d| d.provenance == Provenance::Camera { cam: cam_idx })
            .map(|d| d.box3d)
            .collect();
        let logits: Vec<Array1<f64>> = out
            .camera_proposals
            .iter()
            .filter(|d| d.provenance == Provenance::Camera { cam: cam_idx })
            .map(|d| logits_from_probs(&d.class_probs))
            .collect();
        let ctx = FrustumContext {
            cam,
            alpha_phi: pipeline.alpha_phi,
            alpha_z: pipeline.alpha_z,
        };
        let b = total_loss(&dets, &logits, &gts, &gt_classes, n_classes, weights, Some(ctx));
        lines.push(loss_line(scene_id, &format!("camera_{cam_idx}"), &b));
    }

    // Refinement loss over the final detections, unconstrained.
    let dets: Vec<Box3D> = out.detections.iter().map(|d| d.box3d).collect();
    let logits: Vec<Array1<f64>> = out
        .detections
        .iter()
        .map(|d| logits_from_probs(&d.class_probs))
        .collect();
    let b = total_loss(&dets, &logits, &gts, &gt_classes, n_classes, weights, None);
    lines.push(loss_line(scene_id, "refine", &b));
    lines
}

fn process_scene(
    scene_id: usize,
    seed: u64,
    cfg: &RunConfig,
    table: &PromptTable,
    weights: &PipelineWeights,
    proposals_only: bool,
    cached_priors: Option<&Path>,
    dump_priors_to: Option<&Path>,
) -> Result<SceneResult> {
    let scene_cfg = cfg
        .scene
        .as_ref()
        .ok_or_else(|| anyhow!("this mode needs a [scene] section"))?;
    let scene_seed = mix_seed(seed, scene_id as u64);
    let mut scene = generate_scene(scene_cfg, table, scene_seed)?;

    if let Some(path) = cached_priors {
        let cached = load_priors(path)?;
        if cached.len() != scene.cameras.len() {
            bail!(
                "prior cache has {} cameras, scene has {}",
                cached.len(),
                scene.cameras.len()
            );
        }
        scene.priors.clear();
        scene.depth_maps.clear();
        for (dets, dm) in cached {
            scene.priors.push(dets);
            scene.depth_maps.push(dm);
        }
    }
    if let Some(path) = dump_priors_to {
        let data: Vec<_> = scene
            .priors
            .iter()
            .cloned()
            .zip(scene.depth_maps.iter().cloned())
            .collect();
        save_priors(path, &data)?;
    }

    let heatmap = synthesize_heatmap(
        &scene.ground_truth,
        table.n_classes(),
        &cfg.pipeline,
        &cfg.heatmap,
        mix_seed(scene_seed, 0x48),
    );
    let out = run_scene(&scene, table, &heatmap, &cfg.pipeline, weights)?;

    let detections = if proposals_only {
        out.proposals.clone()
    } else {
        out.detections.clone()
    };
    let loss_lines = if proposals_only {
        Vec::new()
    } else {
        scene_losses(
            scene_id,
            &scene,
            &out,
            &cfg.loss.weights(),
            &cfg.pipeline,
            table.n_classes(),
        )
    };
    Ok(SceneResult {
        scene_id,
        ground_truth: scene
            .ground_truth
            .iter()
            .map(|g| (g.box3d, g.class))
            .collect(),
        detections,
        loss_lines,
    })
}

fn run_pipeline(
    mode: &str,
    seed: u64,
    scenes: usize,
    args: &Args,
    cfg: &RunConfig,
    resolved: &str,
    guard: &mut OutputGuard,
) -> Result<()> {
    let table = prompt_table(cfg)?;
    let hierarchy = hierarchy(cfg, &table)?;
    cfg.pipeline.validate()?;
    let weights_mode = match cfg.weights.as_str() {
        "passthrough" => WeightsMode::Passthrough,
        "seeded" => WeightsMode::Seeded(cfg.pipeline.weights_seed),
        other => bail!("unknown weights mode '{other}' (passthrough | seeded)"),
    };
    let weights = PipelineWeights::new(
        &cfg.pipeline,
        table.n_prompts(),
        table.n_classes(),
        weights_mode,
    );
    if cfg.priors_cache.is_some() && scenes != 1 {
        bail!("priors_cache applies to single-scene runs (scenes = 1)");
    }
    let proposals_only = mode == "proposals-only";
    let dump_path = args.out.join("priors.fomp");
    if cfg.dump_priors {
        // Registered up front so a failed run cleans it up too.
        guard.written.push(dump_path.clone());
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.max(1))
        .build()
        .context("building worker pool")?;
    let results: Result<Vec<SceneResult>> = pool.install(|| {
        (0..scenes)
            .into_par_iter()
            .map(|scene_id| {
                process_scene(
                    scene_id,
                    seed,
                    cfg,
                    &table,
                    &weights,
                    proposals_only,
                    cfg.priors_cache.as_deref(),
                    (cfg.dump_priors && scene_id == 0).then_some(dump_path.as_path()),
                )
            })
            .collect()
    });
    let results = results?;

    // Ordered, deterministic report assembly.
    let mut det_lines = String::new();
    let mut gt_lines = String::new();
    let mut loss_lines = String::new();
    let mut frames = Vec::with_capacity(results.len());
    for r in &results {
        for d in &r.detections {
            let rec = DetectionRecord {
                scene: r.scene_id,
                box7: d.box3d.to_xyzlwht(),
                class: table.classes()[d.argmax_class()].clone(),
                score: d.score,
                provenance: d.provenance.to_string(),
            };
            det_lines.push_str(&serde_json::to_string(&rec)?);
            det_lines.push('\n');
        }
        for (b, class) in &r.ground_truth {
            let rec = GroundTruthRecord {
                scene: r.scene_id,
                box7: b.to_xyzlwht(),
                class: table.classes()[*class].clone(),
            };
            gt_lines.push_str(&serde_json::to_string(&rec)?);
            gt_lines.push('\n');
        }
        for line in &r.loss_lines {
            loss_lines.push_str(line);
            loss_lines.push('\n');
        }
        frames.push(EvalFrame {
            detections: r
                .detections
                .iter()
                .map(|d| EvalDetection {
                    box3d: d.box3d,
                    class: d.argmax_class(),
                    score: d.score,
                })
                .collect(),
            ground_truths: r
                .ground_truth
                .iter()
                .map(|&(box3d, class)| EvalGroundTruth { box3d, class })
                .collect(),
            ego: (0.0, 0.0),
        });
    }

    let det_file = if proposals_only {
        "proposals.jsonl"
    } else {
        "detections.jsonl"
    };
    guard.write(&args.out.join(det_file), det_lines.as_bytes())?;
    guard.write(&args.out.join("ground_truth.jsonl"), gt_lines.as_bytes())?;
    if !proposals_only {
        guard.write(&args.out.join("losses.txt"), loss_lines.as_bytes())?;
        let report = evaluate(&frames, &hierarchy)?;
        guard.write(&args.out.join("metrics.txt"), report.to_text().as_bytes())?;
    }
    write_manifest(mode, seed, scenes, args, resolved, guard)?;
    Ok(())
}

fn run_eval_only(
    mode: &str,
    seed: u64,
    args: &Args,
    cfg: &RunConfig,
    resolved: &str,
    guard: &mut OutputGuard,
) -> Result<()> {
    let table = prompt_table(cfg)?;
    let hierarchy = hierarchy(cfg, &table)?;
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| anyhow!("eval-only mode needs `input` (a dump directory)"))?;
    let dets_text = std::fs::read_to_string(input.join("detections.jsonl"))
        .with_context(|| format!("reading {}", input.join("detections.jsonl").display()))?;
    let gts_text = std::fs::read_to_string(input.join("ground_truth.jsonl"))
        .with_context(|| format!("reading {}", input.join("ground_truth.jsonl").display()))?;

    let class_index = |name: &str| {
        hierarchy
            .index(name)
            .ok_or_else(|| anyhow!("unknown class '{name}' in dump"))
    };
    let mut frames: BTreeMap<usize, EvalFrame> = BTreeMap::new();
    for line in dets_text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: DetectionRecord = serde_json::from_str(line).context("parsing detection")?;
        frames
            .entry(rec.scene)
            .or_default()
            .detections
            .push(EvalDetection {
                box3d: Box3D::from_xyzlwht(rec.box7)?,
                class: class_index(&rec.class)?,
                score: rec.score,
            });
    }
    for line in gts_text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: GroundTruthRecord = serde_json::from_str(line).context("parsing ground truth")?;
        frames
            .entry(rec.scene)
            .or_default()
            .ground_truths
            .push(EvalGroundTruth {
                box3d: Box3D::from_xyzlwht(rec.box7)?,
                class: class_index(&rec.class)?,
            });
    }
    let frames: Vec<EvalFrame> = frames.into_values().collect();
    let report = evaluate(&frames, &hierarchy)?;
    guard.write(&args.out.join("metrics.txt"), report.to_text().as_bytes())?;
    write_manifest(mode, seed, frames.len(), args, resolved, guard)?;
    Ok(())
}

fn write_manifest(
    mode: &str,
    seed: u64,
    scenes: usize,
    args: &Args,
    resolved: &str,
    guard: &mut OutputGuard,
) -> Result<()> {
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        mode,
        seed,
        scenes,
        jobs: args.jobs,
        config_sha256: format!("{:x}", Sha256::digest(resolved.as_bytes())),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    guard.write(&args.out.join("manifest.json"), text.as_bytes())
}
