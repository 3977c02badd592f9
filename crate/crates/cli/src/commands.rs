use crate::config::RunConfig;
use crate::error::CliError;
use crate::plot;
use ndarray::Array2;
use sapi::dataset::{extract_windows, read_samples, regenerate_rasters, sample_windows, split, to_ego, write_samples, Sample, SplitManifest, SplitPart};
use sapi::geometry::Vec2;
use sapi::model::{Model, ModelKind};
use sapi::raster::others_at_tick;
use sapi::simgen::{generate_scenario, read_scenarios, write_scenarios, Scenario};
use sapi::train_eval::{constant_velocity, evaluate, train, write_log_csv, EvalReport, GroundTruth, Predictor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Output layout below `--out`.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn scenarios(&self) -> PathBuf {
        self.root.join("scenarios.jsonl")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn split(&self) -> PathBuf {
        self.dataset().join("split.json")
    }
    pub fn run(&self, kind: ModelKind) -> PathBuf {
        self.root.join("runs").join(kind.as_str())
    }
    pub fn checkpoint(&self, kind: ModelKind) -> PathBuf {
        self.run(kind).join("checkpoint")
    }
}

pub fn generate(cfg: &RunConfig, out: &Layout) -> Result<(), CliError> {
    std::fs::create_dir_all(&out.root)?;
    let s = &cfg.scenarios;
    let scenarios: Vec<Scenario> =
        (0..s.count).map(|i| generate_scenario(format!("scenario_{i:05}"), &s.spec(cfg.seed, i))).collect::<Result<_, _>>()?;
    write_scenarios(&out.scenarios(), &scenarios)?;
    let tracks: usize = scenarios.iter().map(|s| s.tracks.len()).sum();
    println!("wrote {} scenarios ({} tracks) to {}", scenarios.len(), tracks, out.scenarios().display());
    Ok(())
}

fn load_scenarios(path: &Path) -> Result<Vec<Scenario>, CliError> {
    if !path.is_file() {
        return Err(CliError::Invalid(format!("scenario file {} does not exist", path.display())));
    }
    Ok(read_scenarios(path)?)
}

pub fn build_dataset(cfg: &RunConfig, out: &Layout, input: Option<&Path>) -> Result<(), CliError> {
    let path = input.map(Path::to_path_buf).unwrap_or_else(|| out.scenarios());
    let scenarios = load_scenarios(&path)?;
    let ds = &cfg.dataset;
    let ex = &ds.extract;
    let mut samples = Vec::new();
    let mut skipped = 0;
    for (i, sc) in scenarios.iter().enumerate() {
        let mut windows = sample_windows(&sc.tracks, ex.m, ex.n, ex.stride);
        if let Some(k) = ds.windows_per_agent {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut by_track: BTreeMap<usize, Vec<_>> = BTreeMap::new();
            for w in windows {
                by_track.entry(w.track).or_default().push(w);
            }
            windows = by_track
                .into_values()
                .flat_map(|mut ws| {
                    ws.shuffle(&mut rng);
                    ws.truncate(k);
                    ws.sort_by_key(|w| w.t_index);
                    ws
                })
                .collect();
        }
        let e = extract_windows(&sc.scenario_id, &sc.graph, &sc.tracks, &windows, ex)?;
        skipped += e.skipped_off_road;
        samples.extend(e.samples);
    }
    if samples.is_empty() {
        return Err(CliError::Invalid(format!("no samples could be extracted from {}", path.display())));
    }
    let manifest = split(&samples, ds.split_ratio, cfg.seed)?;
    write_samples(&samples, &out.dataset(), ex, ds.inline_rasters)?;
    std::fs::write(out.split(), serde_json::to_vec_pretty(&manifest)?)?;
    let c = manifest.counts();
    println!(
        "scenarios: {} (train/val/test: {}/{}/{})",
        scenarios.len(),
        manifest.train_scenarios.len(),
        manifest.val_scenarios.len(),
        manifest.test_scenarios.len()
    );
    println!("samples: {} (train/val/test: {}/{}/{})", samples.len(), c[0], c[1], c[2]);
    println!("skipped off-road windows: {skipped}");
    Ok(())
}

/// The archive plus its split, with rasters re-rendered when they were not stored inline.
struct Loaded {
    samples: Vec<Sample>,
    split: SplitManifest,
}

impl Loaded {
    fn part(&self, p: SplitPart) -> Vec<&Sample> {
        self.split.indices(&self.samples, p).into_iter().map(|i| &self.samples[i]).collect()
    }
}

fn load_dataset(cfg: &RunConfig, out: &Layout, need_rasters: bool) -> Result<Loaded, CliError> {
    if !out.dataset().join("manifest.json").is_file() || !out.split().is_file() {
        return Err(CliError::Invalid(format!("no dataset at {} (run build-dataset first)", out.dataset().display())));
    }
    let mut archive = read_samples(&out.dataset())?;
    let ex = &archive.config;
    let m = &cfg.model;
    if (ex.m, ex.n, ex.raster.height_px, ex.raster.width_px) != (m.m, m.n, m.raster_height, m.raster_width) {
        return Err(CliError::Invalid("dataset was built with a different m, n or raster size than the model config".into()));
    }
    if need_rasters && !archive.inline_rasters {
        let scenarios = load_scenarios(&out.scenarios())?;
        let ex = archive.config;
        regenerate_rasters(&mut archive.samples, &scenarios, &ex)?;
    }
    let split: SplitManifest = serde_json::from_slice(&std::fs::read(out.split())?)?;
    Ok(Loaded { samples: archive.samples, split })
}

pub fn train_model(cfg: &RunConfig, out: &Layout, kind: ModelKind) -> Result<(), CliError> {
    let data = load_dataset(cfg, out, kind.uses_rasters())?;
    let (tr, va) = (data.part(SplitPart::Train), data.part(SplitPart::Val));
    println!("training {kind} on {} samples, validating on {}", tr.len(), va.len());
    let outcome = train::<f32>(&tr, &va, kind, &cfg.train, &cfg.model)?;
    std::fs::create_dir_all(out.run(kind))?;
    outcome.model.save(&out.checkpoint(kind))?;
    write_log_csv(&out.run(kind).join("log.csv"), &outcome.log)?;
    println!(
        "best validation ADE {:.3} m at epoch {} of {}; checkpoint in {}",
        outcome.best_val_ade,
        outcome.best_epoch,
        outcome.log.len(),
        out.checkpoint(kind).display()
    );
    Ok(())
}

fn load_model(out: &Layout, kind: ModelKind) -> Result<Model<f32>, CliError> {
    let path = out.checkpoint(kind);
    if !path.join("manifest.json").is_file() {
        return Err(CliError::MissingCheckpoint { kind: kind.to_string(), path: path.display().to_string() });
    }
    let model = Model::<f32>::load(&path)?;
    if model.kind != kind {
        return Err(CliError::Invalid(format!("checkpoint at {} holds a {} model", path.display(), model.kind)));
    }
    Ok(model)
}

pub fn evaluate_models(cfg: &RunConfig, out: &Layout, kinds: &[ModelKind], oracle: bool) -> Result<(), CliError> {
    let need_rasters = !oracle && kinds.iter().any(|k| k.uses_rasters());
    let data = load_dataset(cfg, out, need_rasters)?;
    let test = data.part(SplitPart::Test);
    let mut rows = Vec::new();
    for &kind in kinds {
        let report = if oracle {
            evaluate(&GroundTruth, &test)?
        } else {
            let model = load_model(out, kind)?;
            let r = evaluate(&model, &test)?;
            std::fs::write(out.run(kind).join("eval.json"), r.to_json()?)?;
            r
        };
        rows.push((kind, report));
    }
    let mut w = csv::Writer::from_path(out.root.join("comparison.csv")).map_err(|e| CliError::Runtime(e.to_string()))?;
    w.write_record(["model", "fde_4s", "fde_4s_std", "fde_6s", "fde_6s_std", "ade_6s"]).map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("{:<16} {:>8} {:>11} {:>8} {:>11} {:>8}", "model", "4s FDE", "4s FDE std", "6s FDE", "6s FDE std", "6s ADE");
    for (kind, r) in &rows {
        let vals = [r.fde_4s, r.fde_4s_std, r.fde_6s, r.fde_6s_std, r.ade_6s];
        println!("{:<16} {:>8.3} {:>11.3} {:>8.3} {:>11.3} {:>8.3}", kind.as_str(), vals[0], vals[1], vals[2], vals[3], vals[4]);
        let mut rec = vec![kind.as_str().to_string()];
        rec.extend(vals.iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush()?;
    println!("evaluated {} test samples", test.len());
    Ok(())
}

/// One sample's trajectories and surroundings in its ego frame, as written by `predict`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionDump {
    pub sample_id: String,
    pub model: ModelKind,
    pub behavior: sapi::track::Behavior,
    pub history: Vec<[f64; 2]>,
    pub ground_truth: Vec<[f64; 2]>,
    pub prediction: Vec<[f64; 2]>,
    /// Extrapolation of the last history displacement.
    pub constant_velocity: Vec<[f64; 2]>,
    pub fde_6s: f64,
    /// Lane outlines near the target.
    pub lanes: Vec<Vec<[f64; 2]>>,
    /// Surrounding vehicle boxes at the last observed step.
    pub vehicles: Vec<Vec<[f64; 2]>>,
}

fn rows(a: &Array2<f64>) -> Vec<[f64; 2]> {
    a.rows().into_iter().map(|r| [r[0], r[1]]).collect()
}

fn context(sample: &Sample, scenarios: &[Scenario]) -> (Vec<Vec<[f64; 2]>>, Vec<Vec<[f64; 2]>>) {
    let Some(sc) = scenarios.iter().find(|s| s.scenario_id == sample.scenario_id) else {
        return (Vec::new(), Vec::new());
    };
    let origin = Vec2::new(sample.ego_pose[0], sample.ego_pose[1]);
    let heading = sample.ego_pose[2];
    let ego = |p: Vec2| {
        let q = to_ego(p, origin, heading);
        [q.x, q.y]
    };
    let lanes = sc
        .graph
        .ids()
        .filter_map(|id| sc.graph.polygon(id).ok())
        .filter(|poly| poly.iter().any(|p| p.distance(origin) < 150.0))
        .map(|poly| poly.iter().map(|&p| ego(p)).collect())
        .collect();
    let vehicles = sc
        .tracks
        .iter()
        .find(|t| t.agent_id == sample.target_agent_id)
        .map(|t| {
            others_at_tick(t, &sc.tracks, t.start_tick + sample.t_index as u32)
                .iter()
                .map(|s| s.corners().iter().map(|&p| ego(p)).collect())
                .collect()
        })
        .unwrap_or_default();
    (lanes, vehicles)
}

pub fn predict(cfg: &RunConfig, out: &Layout, kind: ModelKind, sample_id: &str) -> Result<PathBuf, CliError> {
    let data = load_dataset(cfg, out, kind.uses_rasters())?;
    let sample = data.samples.iter().find(|s| s.id() == sample_id).ok_or_else(|| CliError::UnknownSample(sample_id.to_string()))?;
    let model = load_model(out, kind)?;
    let pred = model.predict(&[sample])?.index_axis_move(ndarray::Axis(0), 0);
    let gt = sample.future_positions.mapv(f64::from);
    let cv = constant_velocity(&sample.history_positions.view(), sample.n());
    let fde_6s = sapi::train_eval::displacement_error(&pred.view(), &gt.view(), sample.n())?;
    let scenarios = if out.scenarios().is_file() { read_scenarios(&out.scenarios())? } else { Vec::new() };
    let (lanes, vehicles) = context(sample, &scenarios);
    let dump = PredictionDump {
        sample_id: sample.id(),
        model: kind,
        behavior: sample.behavior,
        history: rows(&sample.history_positions.mapv(f64::from)),
        ground_truth: rows(&gt),
        prediction: rows(&pred),
        constant_velocity: rows(&cv),
        fde_6s,
        lanes,
        vehicles,
    };
    let dir = out.root.join("predictions").join(kind.as_str());
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{}.json", sample_id.replace(['/', '\\'], "_")));
    std::fs::write(&path, serde_json::to_vec_pretty(&dump)?)?;
    println!("{kind} on {sample_id}: 6s FDE {fde_6s:.3} m; wrote {}", path.display());
    Ok(path)
}

fn report_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if stem == "eval" {
        if let Some(parent) = path.parent().and_then(Path::file_name) {
            return parent.to_string_lossy().into_owned();
        }
    }
    stem
}

pub fn plot_all(out: &Layout, reports: &[PathBuf], predictions: &[PathBuf]) -> Result<(), CliError> {
    if reports.is_empty() && predictions.is_empty() {
        eprintln!("warning: nothing to plot (pass --reports and/or --predictions)");
        return Ok(());
    }
    let dir = out.root.join("plots");
    std::fs::create_dir_all(&dir)?;
    if !reports.is_empty() {
        let mut series = Vec::new();
        for p in reports {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Invalid(format!("cannot read report {}: {e}", p.display())))?;
            let r: EvalReport = serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("report {}: {e}", p.display())))?;
            series.push((report_label(p), r.per_step_errors));
        }
        let path = dir.join("per_step_errors.png");
        plot::per_step_chart(&path, &series)?;
        println!("wrote {}", path.display());
    }
    for p in predictions {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::Invalid(format!("cannot read prediction {}: {e}", p.display())))?;
        let dump: PredictionDump = serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("prediction {}: {e}", p.display())))?;
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "prediction".into());
        let path = dir.join(format!("overlay_{}_{name}.png", dump.model.as_str()));
        plot::overlay(&path, &dump)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
