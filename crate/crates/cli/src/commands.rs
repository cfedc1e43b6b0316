use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::json;

use asap3d::depth_normal::{depth_to_normal, NeighborhoodWeights};
use asap3d::edge_gt::{edge_ground_truth, edges_to_pnm, LabelMap, MergeTable};
use asap3d::gradcheck::{gradcheck_total, GradcheckConfig};
use asap3d::io::{read_pfm, read_pnm, write_atomic, write_pfm, write_pnm, Pfm};
use asap3d::maps::{BoolMap, DepthMap, EdgeMap, Grid};
use asap3d::metrics::{
    eval_depth, eval_edge, eval_edges, mean_depth_metrics, normal_angles, DepthEvalConfig, DepthMetrics, EdgeEvalConfig,
    EdgeMetrics, NormalMetrics,
};
use asap3d::optimizer::{
    median_init, optimize, FreeParams, NeighborhoodMode, OptimizerConfig, Problem, DEMO_EDGE_LOGIT, DEMO_INIT_SIGMA,
};
use asap3d::synth::{read_bundle, standard_scene, write_bundle, Bundle, PlanarScene, SCENE_NAMES};
use asap3d::{Error, Result};

use crate::config::{apply_json, WeightsConfig};
use crate::manifest::RunManifest;
use crate::{
    Cli, Command, EdgeGtArgs, EvalDepthArgs, EvalEdgeArgs, EvalNormalArgs, GradcheckArgs, LossArgs, OptimizeArgs,
    SceneArgs,
};

/// Standard deviation of the logit jitter applied before a gradient check.
pub const GRADCHECK_LOGIT_SPREAD: f64 = 1.0;

/// Name of the run manifest written into output directories.
pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Runs one command and returns a one-line summary.
pub fn run(cli: &Cli) -> Result<String> {
    let start = Instant::now();
    let (summary, manifest, path) = match &cli.command {
        Command::Scene(a) => scene(a, cli.seed)?,
        Command::Optimize(a) => optimize_cmd(a, cli.seed)?,
        Command::EvalDepth(a) => eval_depth_cmd(a, cli.seed)?,
        Command::EvalNormal(a) => eval_normal_cmd(a, cli.seed)?,
        Command::EvalEdge(a) => eval_edge_cmd(a, cli.seed)?,
        Command::EdgeGt(a) => edge_gt_cmd(a, cli.seed)?,
        Command::Gradcheck(a) => gradcheck_cmd(a, cli.seed)?,
    };
    if let (Some(mut m), Some(p)) = (manifest, path) {
        m.wall_clock_seconds = start.elapsed().as_secs_f64();
        m.write(&p)?;
    }
    Ok(summary)
}

type Outcome = (String, Option<RunManifest>, Option<PathBuf>);

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn scene(a: &SceneArgs, seed: u64) -> Result<Outcome> {
    let mut manifest;
    let scene = if SCENE_NAMES.contains(&a.scene.as_str()) {
        manifest = RunManifest::new("scene", json!({ "scene": a.scene }), seed);
        standard_scene(&a.scene)?
    } else {
        let p = Path::new(&a.scene);
        let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        let s = PlanarScene::from_json(&text)?;
        manifest = RunManifest::new("scene", serde_json::to_value(&s).expect("scenes serialize"), seed);
        manifest.input(p);
        s
    };
    let written = write_bundle(&scene, &a.out)?;
    manifest.outputs(&written);
    Ok((
        format!("wrote {} files for scene '{}' to {}", written.len(), scene.name, a.out.display()),
        Some(manifest),
        Some(a.out.join(RUN_MANIFEST)),
    ))
}

struct Prepared {
    bundle: Bundle,
    problem: Problem,
    params: FreeParams,
    config: serde_json::Value,
}

/// Loads the bundle and configuration and builds the initial parameters.
fn prepare(bundle_dir: &Path, loss: &LossArgs, seed: u64, manifest_inputs: &mut Vec<PathBuf>) -> Result<Prepared> {
    let bundle = read_bundle(bundle_dir)?;
    manifest_inputs.push(bundle_dir.to_path_buf());
    let mut weights = WeightsConfig::default();
    if loss.no_clip {
        weights.clip = false;
    }
    if let Some(p) = &loss.weights {
        weights = apply_json(&weights, p)?;
        manifest_inputs.push(p.clone());
    }
    let levels = loss.scale_levels.unwrap_or(asap3d::optimizer::LossSettings::default().levels);
    let settings = weights.settings(levels);
    let t = bundle.manifest.target;
    let sources = bundle.sources();
    let source_images: Vec<_> = sources.iter().map(|&s| bundle.images[s].clone()).collect();
    let problem = Problem::new(&bundle.images[t], &source_images, &bundle.manifest.intrinsics, settings)?;
    let twists = sources.iter().map(|&s| bundle.relative_pose(s).twist).collect();
    let (w, h) = problem.dims();
    let init = match &loss.init {
        Some(p) => {
            let d = read_pfm(p)?.to_depth()?;
            if d.dims() != (w, h) {
                return Err(Error::Size(format!("initial depth {:?} does not match the bundle {:?}", d.dims(), (w, h))));
            }
            manifest_inputs.push(p.clone());
            d
        }
        None => {
            let mut gt = bundle.depths[t].data().to_vec();
            gt.sort_by(|a, b| a.total_cmp(b));
            let median = gt[gt.len() / 2];
            DepthMap::new(median_init(w, h, median, DEMO_INIT_SIGMA, seed)?.map(|v| v.exp()))?
        }
    };
    let params = FreeParams::from_depth(&init, DEMO_EDGE_LOGIT, twists)?;
    let config = json!({
        "weights": weights,
        "levels": levels,
        "init": loss.init.as_ref().map(|p| p.display().to_string()),
    });
    Ok(Prepared {
        bundle,
        problem,
        params,
        config,
    })
}

fn optimize_cmd(a: &OptimizeArgs, seed: u64) -> Result<Outcome> {
    let mut inputs = Vec::new();
    let prep = prepare(&a.bundle, &a.loss, seed, &mut inputs)?;
    let mut cfg = OptimizerConfig {
        seed,
        ..OptimizerConfig::default()
    };
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(p) = &a.optimizer {
        cfg = apply_json(&cfg, p)?;
        inputs.push(p.clone());
    }
    cfg.validate()?;
    let trace = optimize(&prep.params, &prep.problem, &cfg)?;
    let depth = trace.params.depth()?;
    let weights = match prep.problem.settings().neighborhood {
        NeighborhoodMode::Uniform => NeighborhoodWeights::Uniform,
        NeighborhoodMode::ImageGradient { alpha } => {
            NeighborhoodWeights::image_gradient(&prep.bundle.images[prep.bundle.manifest.target], alpha)?
        }
    };
    let normals = depth_to_normal(&depth, &prep.bundle.manifest.intrinsics, &weights)?.normals;
    let edges = trace.params.edges();

    create_dir(&a.out)?;
    let paths: Vec<PathBuf> = ["trace.csv", "depth.pfm", "normal.pfm", "edge.pfm", "poses.json"]
        .iter()
        .map(|n| a.out.join(n))
        .collect();
    trace.write_csv(&paths[0])?;
    write_pfm(&paths[1], &Pfm::from_scalar(depth.grid()))?;
    write_pfm(&paths[2], &Pfm::from_normals(normals.grid()))?;
    write_pfm(&paths[3], &Pfm::from_scalar(edges.grid()))?;
    let poses = serde_json::to_string_pretty(&trace.params.twists).expect("twists serialize");
    write_atomic(&paths[4], poses.as_bytes())?;

    let mut config = prep.config;
    config["optimizer"] = serde_json::to_value(cfg).expect("config serializes");
    let mut manifest = RunManifest::new("optimize", config, seed);
    inputs.iter().for_each(|p| manifest.input(p));
    manifest.outputs(&paths);
    let first = trace.rows.first().expect("trace has a row");
    let last = trace.rows.last().expect("trace has a row");
    Ok((
        format!(
            "{} iterations{}: total loss {:.6} -> {:.6}",
            last.iteration,
            if trace.converged { " (converged)" } else { "" },
            first.total,
            last.total
        ),
        Some(manifest),
        Some(a.out.join(RUN_MANIFEST)),
    ))
}

/// Pairs ground-truth files with predictions of the same stem.
///
/// With a directory, ground truth is every `<prefix>*.<gt_ext>` file in it;
/// a prediction may use any extension of `pred_exts`.
fn pair_files(pred: &Path, gt: &Path, prefix: &str, gt_ext: &str, pred_exts: &[&str]) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let meta = fs::metadata(gt).map_err(|e| io_err(gt, e))?;
    if !meta.is_dir() {
        let name = gt.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(name, pred.to_path_buf(), gt.to_path_buf())]);
    }
    let mut names: Vec<String> = fs::read_dir(gt)
        .map_err(|e| io_err(gt, e))?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()).map_err(|err| io_err(gt, err)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|n| n.starts_with(prefix) && n.ends_with(&format!(".{gt_ext}")))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Validation(format!("no {prefix}*.{gt_ext} files in {}", gt.display())));
    }
    let mut out = Vec::new();
    for n in names {
        let stem = n.trim_end_matches(&format!(".{gt_ext}")).to_string();
        let p = pred_exts
            .iter()
            .map(|e| pred.join(format!("{stem}.{e}")))
            .find(|p| p.exists())
            .ok_or_else(|| Error::Validation(format!("no prediction for {stem} in {}", pred.display())))?;
        out.push((stem, p, gt.join(n)));
    }
    Ok(out)
}

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory CSV");
    for r in rows {
        w.write_record(r).expect("in-memory CSV");
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV")).expect("CSV is UTF-8")
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn depth_row(name: &str, m: &DepthMetrics) -> Vec<String> {
    vec![name.to_string(), num(m.abs_rel), num(m.sq_rel), num(m.rmse), num(m.rmse_log)]
}

fn eval_depth_cmd(a: &EvalDepthArgs, seed: u64) -> Result<Outcome> {
    let cfg = DepthEvalConfig {
        cap: a.cap,
        median_align: a.median_align,
    };
    let pairs = pair_files(&a.pred, &a.gt, "depth", "pfm", &["pfm"])?;
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for (name, p, g) in &pairs {
        let gt = read_pfm(g)?.to_scalar()?;
        let mask: BoolMap = gt.map(|v| v.is_finite() && *v > 0.0);
        let gt = DepthMap::new(gt.map(|v| if v.is_finite() && *v > 0.0 { *v } else { 1.0 }))?;
        let pred = read_pfm(p)?.to_depth()?;
        let m = eval_depth(&pred, &gt, &mask, &cfg)?;
        rows.push(depth_row(name, &m));
        all.push(m);
    }
    let mean = mean_depth_metrics(&all)?;
    rows.push(depth_row("aggregate", &mean));
    create_dir(&a.out)?;
    let out = a.out.join("metrics.csv");
    write_atomic(&out, csv_text(&["image", "abs_rel", "sq_rel", "rmse", "rmse_log"], &rows).as_bytes())?;
    let mut manifest = RunManifest::new("eval-depth", json!({ "cap": a.cap, "median_align": a.median_align }), seed);
    pairs.iter().for_each(|(_, p, g)| {
        manifest.input(p);
        manifest.input(g);
    });
    manifest.outputs(std::slice::from_ref(&out));
    Ok((
        format!("abs_rel {} rmse {} over {} images", mean.abs_rel, mean.rmse, all.len()),
        Some(manifest),
        Some(a.out.join(RUN_MANIFEST)),
    ))
}

fn normal_row(name: &str, m: &NormalMetrics) -> Vec<String> {
    vec![
        name.to_string(),
        num(m.mean_deg),
        num(m.median_deg),
        num(m.frac_under_11_25),
        num(m.frac_under_22_5),
        num(m.frac_under_30),
    ]
}

fn eval_normal_cmd(a: &EvalNormalArgs, seed: u64) -> Result<Outcome> {
    let pairs = pair_files(&a.pred, &a.gt, "normal", "pfm", &["pfm"])?;
    let mut rows = Vec::new();
    let mut pooled = Vec::new();
    for (name, p, g) in &pairs {
        let gt = read_pfm(g)?.to_normals()?;
        let pred = read_pfm(p)?.to_normals()?;
        let (w, h) = gt.dims();
        let angles = normal_angles(&pred, &gt, &Grid::filled(w, h, true))?;
        rows.push(normal_row(name, &NormalMetrics::from_angles(&angles)?));
        pooled.extend(angles);
    }
    let agg = NormalMetrics::from_angles(&pooled)?;
    rows.push(normal_row("aggregate", &agg));
    create_dir(&a.out)?;
    let out = a.out.join("metrics.csv");
    let header = ["image", "mean_deg", "median_deg", "frac_under_11_25", "frac_under_22_5", "frac_under_30"];
    write_atomic(&out, csv_text(&header, &rows).as_bytes())?;
    let mut manifest = RunManifest::new("eval-normal", json!({}), seed);
    pairs.iter().for_each(|(_, p, g)| {
        manifest.input(p);
        manifest.input(g);
    });
    manifest.outputs(std::slice::from_ref(&out));
    Ok((
        format!("mean {:.4} deg, median {:.4} deg over {} images", agg.mean_deg, agg.median_deg, pairs.len()),
        Some(manifest),
        Some(a.out.join(RUN_MANIFEST)),
    ))
}

/// Soft edge map from a PFM in [0, 1] or a PGM scaled by its maxval.
pub fn read_soft_edges(path: &Path) -> Result<EdgeMap> {
    let grid = if path.extension().is_some_and(|e| e == "pfm") {
        let g = read_pfm(path)?.to_scalar()?;
        if let Some(v) = g.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Validation(format!("{}: edge strength {v} outside [0, 1]", path.display())));
        }
        g
    } else {
        let p = read_pnm(path)?;
        if p.channels != 1 {
            return Err(Error::Validation(format!("{}: edge maps must be single-channel", path.display())));
        }
        let scale = 1.0 / p.maxval as f64;
        Grid::from_vec(p.width, p.height, p.data.iter().map(|&v| v as f64 * scale).collect())?
    };
    Ok(EdgeMap::from_grid_unchecked(grid))
}

fn edge_row(name: &str, m: &EdgeMetrics) -> Vec<String> {
    vec![name.to_string(), num(m.ods_f1), num(m.ods_threshold), num(m.ois_f1), num(m.ap)]
}

fn eval_edge_cmd(a: &EvalEdgeArgs, seed: u64) -> Result<Outcome> {
    let cfg = EdgeEvalConfig {
        match_radius_frac: a.match_radius,
        ..EdgeEvalConfig::default()
    };
    let pairs = pair_files(&a.pred, &a.gt, "edge", "pgm", &["pfm", "pgm"])?;
    let mut maps = Vec::new();
    for (name, p, g) in &pairs {
        let gt = read_pnm(g)?.to_binary()?;
        let pred = read_soft_edges(p)?;
        if pred.dims() != gt.dims() {
            return Err(Error::Size(format!("{name}: prediction {:?} and ground truth {:?} differ", pred.dims(), gt.dims())));
        }
        maps.push((name.clone(), pred, gt));
    }
    let mut rows = Vec::new();
    for (name, pred, gt) in &maps {
        match eval_edge(pred, gt, &cfg) {
            Ok(m) => rows.push(edge_row(name, &m)),
            Err(Error::Eval(_)) => rows.push(vec![name.clone(), String::new(), String::new(), String::new(), String::new()]),
            Err(e) => return Err(e),
        }
    }
    let refs: Vec<_> = maps.iter().map(|(_, p, g)| (p, g)).collect();
    let agg = eval_edges(&refs, &cfg)?;
    rows.push(edge_row("aggregate", &agg));
    create_dir(&a.out)?;
    let out = [a.out.join("metrics.csv"), a.out.join("pr.csv")];
    write_atomic(&out[0], csv_text(&["image", "ods_f1", "ods_threshold", "ois_f1", "ap"], &rows).as_bytes())?;
    write_atomic(&out[1], agg.pr_csv()?.as_bytes())?;
    let mut manifest = RunManifest::new("eval-edge", json!({ "match_radius": a.match_radius }), seed);
    pairs.iter().for_each(|(_, p, g)| {
        manifest.input(p);
        manifest.input(g);
    });
    manifest.outputs(&out);
    Ok((
        format!("ODS {:.4} OIS {:.4} AP {:.4} over {} images", agg.ods_f1, agg.ois_f1, agg.ap, maps.len()),
        Some(manifest),
        Some(a.out.join(RUN_MANIFEST)),
    ))
}

fn edge_gt_cmd(a: &EdgeGtArgs, seed: u64) -> Result<Outcome> {
    let labels = read_pnm(&a.labels)?;
    let instances = a.instances.as_ref().map(|p| read_pnm(p)).transpose()?;
    let table = match &a.merge {
        Some(p) => MergeTable::from_csv(&fs::read_to_string(p).map_err(|e| io_err(p, e))?)?,
        None => MergeTable::cityscapes(),
    };
    let map = LabelMap::from_pnm(&labels, instances.as_ref())?;
    let edges = edge_ground_truth(&map, &table)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_pnm(&a.out, &edges_to_pnm(&edges))?;
    let mut manifest = RunManifest::new(
        "edge-gt",
        json!({ "merge": a.merge.as_ref().map(|p| p.display().to_string()) }),
        seed,
    );
    manifest.input(&a.labels);
    if let Some(p) = &a.instances {
        manifest.input(p);
    }
    if let Some(p) = &a.merge {
        manifest.input(p);
    }
    manifest.outputs(std::slice::from_ref(&a.out));
    let n = edges.data().iter().filter(|e| **e).count();
    let mut mpath = a.out.clone().into_os_string();
    mpath.push(".manifest.json");
    Ok((
        format!("{n} edge pixels written to {}", a.out.display()),
        Some(manifest),
        Some(PathBuf::from(mpath)),
    ))
}

fn gradcheck_cmd(a: &GradcheckArgs, seed: u64) -> Result<Outcome> {
    let mut inputs = Vec::new();
    let prep = prepare(&a.bundle, &a.loss, seed, &mut inputs)?;
    let cfg = GradcheckConfig {
        step: a.step,
        tolerance: a.tolerance,
        samples_per_block: a.samples,
        seed,
        ..GradcheckConfig::default()
    };
    // Equal logits tie every κ maximum, where the loss has no derivative.
    let mut params = prep.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in params.edge_logits.data_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += z * GRADCHECK_LOGIT_SPREAD;
    }
    let report = gradcheck_total(&prep.problem, &params, &cfg)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{text}");
    let mut manifest = None;
    if let Some(out) = &a.out {
        write_atomic(out, text.as_bytes())?;
        let mut config = prep.config;
        config["gradcheck"] = json!({ "step": a.step, "tolerance": a.tolerance, "samples": a.samples });
        let mut m = RunManifest::new("gradcheck", config, seed);
        inputs.iter().for_each(|p| m.input(p));
        m.outputs(std::slice::from_ref(out));
        manifest = Some(m);
    }
    if !report.passed() {
        return Err(Error::Validation(format!(
            "gradient check failed: worst relative error {:.3e}",
            report.worst_rel_error()
        )));
    }
    let mut mpath = a.out.clone().map(PathBuf::into_os_string);
    if let Some(p) = &mut mpath {
        p.push(".manifest.json");
    }
    Ok((
        format!("gradient check passed: worst relative error {:.3e}", report.worst_rel_error()),
        manifest,
        mpath.map(PathBuf::from),
    ))
}
