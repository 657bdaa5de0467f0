//! The pipeline commands. Each returns a small summary that is also written
//! next to its outputs; every output carries the run seed.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use sparsepose::fusion::fuse_views;
use sparsepose::heatmap::{objectness_target, roi_target, soft_suppress};
use sparsepose::metrics::{evaluate_scene, metrics_csv, summarize, ClassSummary, ModelInfo};
use sparsepose::pose::{parse_poses_csv, poses_csv, PoseEstimate, PoseRow};
use sparsepose::synth::{load_bundle, make_primitives, render_scene, sample_scene, write_bundle, SceneBundle};
use sparsepose::tsdf::{activate_blocks, SparseTsdf};
use sparsepose::voxel::{loglog_slope, occupancy_csv, occupancy_stats};
use sparsepose::{ply, Rigid};
use sparsepose_nn::pipeline::{build_network, estimate, estimate_oracle, prepare_scene, trace_csv, ClassMap, SceneInput, Trainer, TrainingScene};
use sparsepose_nn::ParamStore;

use crate::config::PipelineConfig;
use crate::error::{CliError, Result};

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    with_temp(path, |tmp| Ok(fs::write(tmp, bytes)?))
}

fn with_temp(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut name = path.file_name().ok_or_else(|| CliError::Data(format!("{} is not a file path", path.display())))?.to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    let result = write(&tmp);
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
        return result;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn seeded_csv(seed: u64, body: &str) -> String {
    format!("# seed={seed}\n{body}")
}

fn load(scene: &Path) -> Result<SceneBundle> {
    load_bundle(scene).map_err(|e| CliError::Data(format!("{}: {e}", scene.display())))
}

fn scene_input(cfg: &PipelineConfig, bundle: &SceneBundle) -> Result<SceneInput> {
    let params = cfg.pipeline_params()?;
    Ok(prepare_scene(&bundle.depths, &bundle.cameras, &bundle.scene.bin.aabb(), &params)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SynthSummary {
    pub seed: u64,
    pub objects: usize,
    pub views: usize,
    pub classes: Vec<u32>,
}

/// Samples, renders and writes a scene bundle. An existing bundle at `out` is replaced.
pub fn cmd_synth(cfg: &PipelineConfig, out: &Path) -> Result<SynthSummary> {
    let lib = make_primitives();
    let mut scene = sample_scene(&lib, &cfg.bin(), cfg.synth.objects, cfg.seed, &cfg.rig())?;
    scene.noise = cfg.noise();
    let depths = render_scene(&scene, &lib)?;
    let tmp = out.with_extension("tmp-bundle");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    write_bundle(&tmp, &scene, &lib, &depths)?;
    if out.exists() {
        if !out.join("scene.json").exists() {
            let _ = fs::remove_dir_all(&tmp);
            return Err(CliError::Data(format!("{} exists and is not a scene bundle", out.display())));
        }
        fs::remove_dir_all(out)?;
    }
    fs::rename(&tmp, out)?;
    info!("wrote {} objects in {} views to {}", scene.instances.len(), depths.len(), out.display());
    Ok(SynthSummary { seed: cfg.seed, objects: scene.instances.len(), views: depths.len(), classes: scene.instances.iter().map(|i| i.class_id).collect() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Repr {
    Cloud,
    Tsdf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FuseSummary {
    pub seed: u64,
    pub repr: Repr,
    pub theta_mm: f64,
    /// Points for a cloud, in-band voxels for a TSDF.
    pub count: usize,
    pub blocks: Option<usize>,
}

/// Fuses the views into a PLY cloud or a TSDF dump at `out`, plus `out.json`.
pub fn cmd_fuse(cfg: &PipelineConfig, scene: &Path, repr: Repr, out: &Path) -> Result<FuseSummary> {
    let bundle = load(scene)?;
    let params = cfg.pipeline_params()?;
    let cloud = fuse_views(&bundle.depths, &bundle.cameras, &bundle.scene.bin.aabb(), &params.depth_range)?;
    let summary = match repr {
        Repr::Cloud => {
            with_temp(out, |tmp| Ok(ply::write_points(tmp, &cloud.points, Some(&cloud.source_view))?))?;
            FuseSummary { seed: cfg.seed, repr, theta_mm: cfg.fusion.theta_mm, count: cloud.len(), blocks: None }
        }
        Repr::Tsdf => {
            let tcfg = cfg.tsdf_config(params.theta)?;
            let mut tsdf = SparseTsdf::from_blocks(tcfg, &activate_blocks(&cloud.points, &tcfg));
            for (d, c) in bundle.depths.iter().zip(&bundle.cameras) {
                tsdf.integrate_view(d, c, &params.depth_range)?;
            }
            with_temp(out, |tmp| Ok(tsdf.write_dump(tmp)?))?;
            FuseSummary { seed: cfg.seed, repr, theta_mm: cfg.fusion.theta_mm, count: tsdf.band_voxel_count(), blocks: Some(tsdf.block_count()) }
        }
    };
    write_json(&sidecar(out), &summary)?;
    info!("fused {:?}: {} elements", repr, summary.count);
    Ok(summary)
}

fn sidecar(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    out.with_file_name(name)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetsSummary {
    pub seed: u64,
    pub coarse_voxels: usize,
    pub fine_voxels: usize,
    pub kept_coarse: usize,
    pub positive_fine: usize,
}

/// Writes `coarse.csv` (RoI target H, attention a and the keep flag per coarse
/// voxel, with a computed from H) and `fine.csv` (objectness y and class label).
pub fn cmd_targets(cfg: &PipelineConfig, scene: &Path, out: &Path) -> Result<TargetsSummary> {
    let bundle = load(scene)?;
    let params = cfg.pipeline_params()?;
    let input = scene_input(cfg, &bundle)?;
    let h = roi_target(&input.coarse.grid, &bundle.gt, &params.heat);
    let sup = soft_suppress(&h, params.heat.beta, params.heat.epsilon, params.heat.kappa);
    let mut kept = vec![false; h.len()];
    sup.kept.iter().for_each(|&r| kept[r] = true);
    let mut coarse = String::from("i,j,k,H,a,kept\n");
    for (r, v) in input.coarse.grid.indices().iter().enumerate() {
        coarse.push_str(&format!("{},{},{},{:?},{:?},{}\n", v[0], v[1], v[2], h[r], sup.attention[r], kept[r] as u8));
    }
    let y = objectness_target(&input.fine, &bundle.gt);
    let classes = ClassMap::new(&bundle.library);
    let owners = sparsepose::heatmap::voxel_owners(&input.fine, &bundle.gt);
    let mut fine = String::from("i,j,k,y,label\n");
    for (r, v) in input.fine.indices().iter().enumerate() {
        let label = owners[r].and_then(|o| classes.label(bundle.gt.objects[o].class_id)).unwrap_or(0);
        fine.push_str(&format!("{},{},{},{},{}\n", v[0], v[1], v[2], y[r], label));
    }
    write_atomic(&out.join("coarse.csv"), seeded_csv(cfg.seed, &coarse).as_bytes())?;
    write_atomic(&out.join("fine.csv"), seeded_csv(cfg.seed, &fine).as_bytes())?;
    let summary = TargetsSummary {
        seed: cfg.seed,
        coarse_voxels: h.len(),
        fine_voxels: y.len(),
        kept_coarse: sup.kept.len(),
        positive_fine: y.iter().filter(|&&v| v > 0.5).count(),
    };
    write_json(&out.join("targets.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub seed: u64,
    pub steps: usize,
    pub warmup_steps: usize,
    pub parameters: usize,
    pub initial_total: f64,
    pub final_total: f64,
}

/// Trains the toy network on one scene. Writes `checkpoint.bin`, `trace.csv`
/// (losses before each update) and `train.json`.
pub fn cmd_train_toy(cfg: &PipelineConfig, scene: &Path, steps: usize, out: &Path) -> Result<TrainSummary> {
    let bundle = load(scene)?;
    let params = cfg.pipeline_params()?;
    let input = scene_input(cfg, &bundle)?;
    let classes = ClassMap::new(&bundle.library);
    let ts = TrainingScene::new(input, &bundle.gt, &bundle.library, &classes, &params)?;
    let (net, mut store) = build_network(&bundle.library, &params, cfg.seed)?;
    let mut trainer = Trainer::new(params.clone(), steps)?;
    let initial = trainer.evaluate(&net, &store, &ts)?;
    let mut trace = Vec::with_capacity(steps);
    for s in 0..steps {
        let r = trainer.step(&net, &mut store, &ts)?;
        if s % 50 == 0 {
            info!("step {s}: total {:.5}", r.parts.total);
        }
        trace.push(r);
    }
    let last = trainer.evaluate(&net, &store, &ts)?;
    if !last.total.is_finite() {
        return Err(CliError::Numerical("final loss is not finite".into()));
    }
    fs::create_dir_all(out)?;
    store.save(&out.join("checkpoint.bin"))?;
    write_atomic(&out.join("trace.csv"), seeded_csv(cfg.seed, &trace_csv(&trace)).as_bytes())?;
    let summary = TrainSummary {
        seed: cfg.seed,
        steps,
        warmup_steps: trace.iter().filter(|r| r.warmup).count(),
        parameters: store.num_values(),
        initial_total: initial.total,
        final_total: last.total,
    };
    write_json(&out.join("train.json"), &summary)?;
    Ok(summary)
}

pub enum PoseSource<'a> {
    Checkpoint(&'a Path),
    Oracle,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimateOutput {
    pub seed: u64,
    pub oracle: bool,
    pub poses: Vec<PoseRow>,
}

/// Writes `poses.csv` and `poses.json` under `out`.
pub fn cmd_estimate(cfg: &PipelineConfig, scene: &Path, source: PoseSource, out: &Path) -> Result<EstimateOutput> {
    let bundle = load(scene)?;
    let params = cfg.pipeline_params()?;
    let input = scene_input(cfg, &bundle)?;
    let (estimates, oracle): (Vec<PoseEstimate<f64>>, bool) = match source {
        PoseSource::Oracle => (estimate_oracle(&input, &bundle.gt, &bundle.library, &params.voting)?, true),
        PoseSource::Checkpoint(path) => {
            let saved = ParamStore::load(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let (net, mut store) = build_network(&bundle.library, &params, cfg.seed)?;
            store.load_from(&saved).map_err(|e| CliError::Data(format!("checkpoint does not match the configured network: {e}")))?;
            (estimate(&net, &store, &input, &bundle.library, &params)?, false)
        }
    };
    let poses: Vec<PoseRow> = estimates.iter().enumerate().map(|(i, e)| PoseRow::from_estimate(i, e)).collect();
    write_atomic(&out.join("poses.csv"), seeded_csv(cfg.seed, &poses_csv(&poses)).as_bytes())?;
    let output = EstimateOutput { seed: cfg.seed, oracle, poses };
    write_json(&out.join("poses.json"), &output)?;
    info!("{} pose hypotheses", output.poses.len());
    Ok(output)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub seed: u64,
    pub objects: usize,
    pub matched: usize,
    pub classes: Vec<ClassSummary>,
}

/// Scores a pose CSV against the bundle's ground truth; writes `metrics.csv` and `summary.json`.
pub fn cmd_eval(cfg: &PipelineConfig, poses: &Path, scene: &Path, out: &Path) -> Result<EvalSummary> {
    let bundle = load(scene)?;
    let text = fs::read_to_string(poses).map_err(|e| CliError::Data(format!("{}: {e}", poses.display())))?;
    let rows = parse_poses_csv(&text)?;
    let est: Vec<(u32, Rigid<f64>)> = rows.iter().map(|r| (r.class_id, r.pose())).collect();
    let gt: Vec<(u32, Rigid<f64>)> = bundle.gt.objects.iter().map(|o| (o.class_id, o.pose)).collect();
    let models: Vec<ModelInfo<f64>> = bundle
        .library
        .iter()
        .map(|m| ModelInfo { class_id: m.class_id, points: m.cloud.clone(), vertices: m.mesh.vertices.clone(), symmetries: m.symmetries.clone(), diameter: m.diameter() })
        .collect();
    let camera = bundle.cameras.first().ok_or_else(|| CliError::Data("scene has no cameras".into()))?;
    let metrics = evaluate_scene(&est, &gt, &models, camera)?;
    let classes = summarize(&metrics, camera.intrinsics.width, cfg.eval.auc_max_m, cfg.eval.mssd_mm);
    write_atomic(&out.join("metrics.csv"), seeded_csv(cfg.seed, &metrics_csv(&metrics)).as_bytes())?;
    let summary = EvalSummary { seed: cfg.seed, objects: metrics.len(), matched: metrics.iter().filter(|m| m.matched.is_some()).count(), classes };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StatsSummary {
    pub seed: u64,
    pub thetas_mm: Vec<f64>,
    pub sparse: Vec<usize>,
    pub dense: Vec<usize>,
    pub sparse_slope: f64,
    pub dense_slope: f64,
}

/// Active-voxel counts of the fused cloud at each resolution, with log-log slopes.
pub fn cmd_stats(cfg: &PipelineConfig, scene: &Path, thetas_mm: &[f64], out: &Path) -> Result<StatsSummary> {
    if thetas_mm.len() < 2 || thetas_mm.iter().any(|t| !(*t > 0.0)) {
        return Err(CliError::Config("stats needs at least two positive resolutions".into()));
    }
    let bundle = load(scene)?;
    let params = cfg.pipeline_params()?;
    let workspace = bundle.scene.bin.aabb();
    let cloud = fuse_views(&bundle.depths, &bundle.cameras, &workspace, &params.depth_range)?;
    let res: Vec<f64> = thetas_mm.iter().map(|t| t * 1e-3).collect();
    let rows = occupancy_stats(&cloud.points, &workspace, &res)?;
    let sparse: Vec<usize> = rows.iter().map(|r| r.sparse).collect();
    let dense: Vec<usize> = rows.iter().map(|r| r.dense).collect();
    let as_f = |v: &[usize]| v.iter().map(|&c| c as f64).collect::<Vec<_>>();
    let summary = StatsSummary {
        seed: cfg.seed,
        thetas_mm: thetas_mm.to_vec(),
        sparse_slope: loglog_slope(&res, &as_f(&sparse)),
        dense_slope: loglog_slope(&res, &as_f(&dense)),
        sparse,
        dense,
    };
    write_atomic(out, seeded_csv(cfg.seed, &occupancy_csv(&rows)).as_bytes())?;
    write_json(&sidecar(out), &summary)?;
    Ok(summary)
}
