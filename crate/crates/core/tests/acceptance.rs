//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test -p sapi --test acceptance -- 1 5 11`. Failing
//! criteria are reported but only turn into a non-zero exit status when
//! `SAPI_ACCEPTANCE_STRICT=1` is set.

mod common;

use common::*;
use ndarray::{s, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sapi::dataset::{extract_windows, read_samples, sample_windows, split, write_samples, ExtractConfig, Sample, SplitPart};
use sapi::geometry::Vec2;
use sapi::model::{Model, ModelConfig, ModelInput, ModelKind, SapiNet};
use sapi::nn::Parameterized;
use sapi::raster::{motion_energy_pixel, others_at_tick, rasterize_scene, EnvRaster, RasterConfig};
use sapi::simgen::{generate_scenario, BehaviorMix, IntersectionKind, Scenario, ScenarioSpec};
use sapi::track::{AgentState, Behavior};
use sapi::train_eval::{
    batch_loss, evaluate, huber_loss, train, train_from, ConstantVelocity, EvalReport, Predictor, TrainConfig,
};
use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn scenario(i: u64, agents: u32) -> Scenario {
    let kind = if i % 2 == 0 { IntersectionKind::FourLeg } else { IntersectionKind::TType };
    let spec = ScenarioSpec {
        intersection_kind: kind,
        lanes_per_approach: 1 + (i % 3) as u32,
        agent_count: agents,
        behavior_mix: BehaviorMix::default(),
        seed: 0xacce_0000 + i,
    };
    generate_scenario(format!("scenario_{i:05}"), &spec).expect("valid spec")
}

// ---------------------------------------------------------------- criterion 1

fn motion_energy() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (size, speed) = (rng.gen_range(0.5..40.0), rng.gen_range(0.0..40.0));
        worst = worst.max((motion_energy_pixel(size, speed) as f64 - energy_value(size, speed)).abs());
    }
    let mut violations = 0;
    let grid = |i: usize| i as f64 * 0.8;
    for i in 0..50 {
        for j in 0..50 {
            let v = motion_energy_pixel(1.0 + grid(i), grid(j));
            if i + 1 < 50 && motion_energy_pixel(1.0 + grid(i + 1), grid(j)) > v {
                violations += 1;
            }
            if j + 1 < 50 && motion_energy_pixel(1.0 + grid(i), grid(j + 1)) > v {
                violations += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        worst <= 0.5 && violations == 0 && secs < 1.0,
        format!("max |pixel - direct value| {worst:.3} (limit 0.5), monotonicity violations {violations}, {secs:.3} s (limit 1 s)"),
    )
}

// ---------------------------------------------------------------- criterion 2

fn lra_equivalence() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut equal, mut total) = (0, 0);
    for _ in 0..200 {
        let n = rng.gen_range(1..=20);
        let g = random_graph(&mut rng, n);
        let (pos, heading) = random_pose(&mut rng, &g);
        for d in [0.0, 10.0, 100.0] {
            total += 1;
            let lra = g.compute_lra(pos, heading, d).expect("pose is on the graph");
            if lra.all == brute_lra(&g, pos, d) {
                equal += 1;
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(equal == total && secs < 10.0, format!("{equal}/{total} queries equal the path-enumeration oracle, {secs:.2} s (limit 10 s)"))
}

// ---------------------------------------------------------------- criterion 3

fn raster_invariants() -> Outcome {
    let t = Instant::now();
    let cfg = RasterConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut non_binary, mut mismatched, mut overlap_px, mut background_px) = (0usize, 0usize, 0usize, 0usize);
    for i in 0..100 {
        let sc = scenario(i, 6);
        let track = sc.tracks.choose(&mut rng).expect("scenario has tracks");
        let idx = rng.gen_range(0..track.states.len());
        let ego = track.states[idx];
        let mut others = others_at_tick(track, &sc.tracks, track.start_tick + idx as u32);
        // A shifted, faster copy of a neighbour guarantees overlapping boxes.
        let base = others.first().copied().unwrap_or(AgentState { position: ego.position + Vec2::new(0.0, 8.0), ..ego });
        let shift = Vec2::from_heading(base.heading) * 1.5;
        others.push(AgentState { position: base.position + shift, speed: base.speed + 3.0, ..base });
        let env = rasterize_scene(&sc.graph, &ego, &others, 100.0, 0.0, &cfg).expect("rasterizes");
        non_binary += env.lra_channel.iter().filter(|&&v| v != 0 && v != 255).count();
        let oracle = brute_traffic(&others, ego.position, ego.heading, &cfg);
        mismatched += env.traffic_channel.iter().zip(&oracle).filter(|(a, b)| a != b).count();
        background_px += oracle.iter().filter(|&&v| v == 255).count();
        let frame = sapi::raster::EgoFrame::new(ego.position, ego.heading, &cfg);
        let polys: Vec<Vec<Vec2>> = others
            .iter()
            .map(|a| a.corners().iter().map(|&p| frame.to_pixel(p)).map(|(c, r)| Vec2::new(c, r)).collect())
            .collect();
        for r in 0..cfg.height_px {
            for c in 0..cfg.width_px {
                let center = Vec2::new(c as f64 + 0.5, r as f64 + 0.5);
                if polys.iter().filter(|p| sapi::geometry::point_in_polygon(center, p)).count() > 1 {
                    overlap_px += 1;
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(
        non_binary == 0 && mismatched == 0 && overlap_px > 0 && secs < 30.0,
        format!(
            "100 scenes: non-binary LRA pixels {non_binary}, traffic pixels differing from the per-pixel oracle {mismatched} \
             ({background_px} background and {overlap_px} overlap pixels checked), {secs:.1} s (limit 30 s)"
        ),
    )
}

// ---------------------------------------------------------------- criterion 4

fn random_rasters(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<Arc<EnvRaster>> {
    (0..cfg.m)
        .map(|t| {
            Arc::new(EnvRaster {
                lra_channel: Array2::from_shape_simple_fn((cfg.raster_height, cfg.raster_width), || if rng.gen_bool(0.4) { 255 } else { 0 }),
                traffic_channel: Array2::from_shape_simple_fn((cfg.raster_height, cfg.raster_width), || rng.gen_range(120..=255)),
                timestamp: t as f64 * 0.4,
            })
        })
        .collect()
}

fn random_history(batch: usize, m: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut h = Array3::from_shape_fn((batch, m, 2), |(_, k, c)| {
        let back = (m - 1 - k) as f32;
        if c == 1 { -4.0 * back } else { 0.3 * back }
    });
    h.mapv_inplace(|v| v + rng.gen_range(-0.2..0.2));
    h.slice_mut(s![.., m - 1, ..]).fill(0.0);
    h
}

fn shape_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = ModelConfig::default();
    let net = SapiNet::<f32>::init(&cfg, 4).expect("default config is valid");
    let rasters = random_rasters(&cfg, &mut rng);
    let history = random_history(1, cfg.m, &mut rng);
    let x: Array4<f32> = sapi::model::raster_tensor(&rasters, sapi::model::Ablation::None);
    let t1 = net.scene_encode(&x).expect("scene encoder");
    let scaled = history.index_axis(Axis(0), 0).mapv(|v| v / cfg.position_scale as f32);
    let t2 = ndarray::concatenate(Axis(1), &[t1.view(), scaled.view()]).expect("same rows");
    let t3 = net.sequence_encode(&t2).expect("sequence encoder");
    let t4 = net.refine(&history.index_axis(Axis(0), 0).to_owned(), &t3).expect("refiner");
    let out = net.decode(&t4).expect("decoder");
    let full = net.forward(&ModelInput { rasters: vec![&rasters[..]], history: history.clone() }, sapi::model::Ablation::None).expect("forward");
    let default_ok = t1.dim() == (12, 3) && t2.dim() == (12, 5) && out.dim() == (15, 2) && full.dim() == (1, 15, 2);
    let mut detail = format!("default T1 {:?}, T2 {:?}, T3 {:?}, T4 {:?}, output {:?}", t1.dim(), t2.dim(), t3.dim(), t4.dim(), out.dim());

    let mut sweep_ok = 0;
    let sweep: Vec<ModelConfig> = vec![
        ModelConfig { raster_height: 48, raster_width: 48, ..ModelConfig::default() },
        ModelConfig { m: 8, n: 10, raster_height: 40, raster_width: 64, refiner_width: 16, ..ModelConfig::default() },
        ModelConfig { m: 16, n: 20, raster_height: 32, raster_width: 32, ..ModelConfig::default() },
        {
            let mut c = ModelConfig { m: 6, n: 5, raster_height: 24, raster_width: 24, refiner_width: 8, ..ModelConfig::default() };
            c.scene.conv3d_channels = 4;
            c.scene.pool = 2;
            c.sequence.lstm_hidden = 16;
            c.decoder.gru_hidden = 32;
            c.baseline.lstm_hidden = 64;
            c
        },
        {
            let mut c = ModelConfig { m: 10, n: 15, raster_height: 60, raster_width: 40, ..ModelConfig::default() };
            c.scene.conv3d_kernel = [3, 3, 3];
            c.sequence.conv_kernel = 5;
            c.decoder.fc_widths = [96, 48];
            c
        },
    ];
    for (i, c) in sweep.iter().enumerate() {
        let valid = c.validate().is_ok();
        let rasters = random_rasters(c, &mut rng);
        let history = random_history(2, c.m, &mut rng);
        let shapes_ok = ModelKind::ALL.iter().all(|&kind| {
            let model = Model::<f32>::init(kind, c, i as u64).expect("valid config");
            let out = model.forward(&ModelInput { rasters: vec![&rasters[..], &rasters[..]], history: history.clone() });
            out.is_ok_and(|o| o.dim() == (2, c.n, 2) && o.iter().all(|v| v.is_finite()))
        });
        if valid && shapes_ok {
            sweep_ok += 1;
        }
    }
    detail.push_str(&format!("; sweep {sweep_ok}/5 configs validate and run forward for every model kind"));
    outcome(default_ok && sweep_ok == 5, detail)
}

// ---------------------------------------------------------------- criterion 5

fn gradient_config() -> ModelConfig {
    ModelConfig { raster_height: 16, raster_width: 16, refiner_width: 4, ..ModelConfig::default() }
}

struct BlockCheck {
    name: String,
    rel_error: f64,
    checked: usize,
    /// Coordinates whose step straddles a ReLU or max-pool switch.
    kinks: usize,
}

/// Per-block relative error `|analytic - numeric| / max(|analytic|, |numeric|)`
/// over up to `per_block` sampled coordinates of every parameter block.
fn gradient_check(kind: ModelKind, per_block: usize, rng: &mut ChaCha8Rng) -> Vec<BlockCheck> {
    let cfg = gradient_config();
    let mut model = Model::<f64>::init(kind, &cfg, 5).expect("valid config");
    let rasters = [random_rasters(&cfg, rng), random_rasters(&cfg, rng)];
    let history = random_history(2, cfg.m, rng);
    let input = ModelInput { rasters: vec![&rasters[0][..], &rasters[1][..]], history };
    let pred = model.forward(&input).expect("forward");
    // Step errors of 1 m and 5 m keep every step away from the loss threshold at 3 m.
    let gt = Array3::from_shape_fn(pred.dim(), |(b, k, c)| {
        let off = if (b + k) % 2 == 0 { [0.6, 0.8] } else { [3.0, -4.0] };
        pred[[b, k, c]] + off[c]
    });
    let r = 3.0;
    let eval = |m: &Model<f64>| {
        let (p, cache) = m.forward_train(&input).expect("forward");
        (batch_loss(&p.view(), &gt.view(), r).expect("shapes").0, cache.activation_pattern())
    };
    let (pred, cache) = model.forward_train(&input).expect("forward");
    let pattern = cache.activation_pattern();
    let (_, dpred) = batch_loss(&pred.view(), &gt.view(), r).expect("shapes");
    let mut grads = model.zeros_like();
    model.backward(&cache, &dpred, &mut grads);
    let analytic: BTreeMap<String, Vec<f64>> = grads.params().into_iter().map(|(k, v)| (k, v.iter().copied().collect())).collect();

    let names: Vec<(String, usize)> = model.params().iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let eps = 3e-5;
    let mut out = Vec::new();
    for (name, len) in names {
        let mut idx: Vec<usize> = (0..len).collect();
        if len > per_block {
            idx.shuffle(rng);
            idx.truncate(per_block);
        }
        let (mut diff, mut scale, mut kinks) = (0.0f64, 0.0f64, 0);
        for &j in &idx {
            let nudge = |m: &mut Model<f64>, delta: f64| {
                for (k, mut p) in m.params_mut() {
                    if k == name {
                        *p.iter_mut().nth(j).expect("index in range") += delta;
                    }
                }
            };
            nudge(&mut model, eps);
            let (up, up_pattern) = eval(&model);
            nudge(&mut model, -2.0 * eps);
            let (down, down_pattern) = eval(&model);
            nudge(&mut model, eps);
            if up_pattern != pattern || down_pattern != pattern {
                kinks += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[&name][j];
            diff += (a - numeric).powi(2);
            scale += a.powi(2).max(numeric.powi(2));
        }
        let rel_error = if scale.sqrt() < 1e-9 { diff.sqrt() } else { diff.sqrt() / scale.sqrt() };
        out.push(BlockCheck { name, rel_error, checked: idx.len() - kinks, kinks });
    }
    out
}

fn gradient() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut blocks = gradient_check(ModelKind::Sapi, 24, &mut rng);
    blocks.extend(gradient_check(ModelKind::Lstm, 12, &mut rng).into_iter().map(|b| BlockCheck { name: format!("lstm baseline {}", b.name), ..b }));
    let secs = t.elapsed().as_secs_f64();
    let worst = blocks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error)).expect("blocks");
    let checked: usize = blocks.iter().map(|b| b.checked).sum();
    let kinks: usize = blocks.iter().map(|b| b.kinks).sum();
    let failing: Vec<String> = blocks.iter().filter(|b| b.rel_error >= 1e-4).map(|b| format!("{} {:.1e}", b.name, b.rel_error)).collect();
    let thin: Vec<&str> = blocks.iter().filter(|b| b.checked < b.kinks).map(|b| b.name.as_str()).collect();
    outcome(
        failing.is_empty() && thin.is_empty() && secs < 120.0,
        format!(
            "{} parameter blocks, {checked} coordinates compared, {kinks} straddling an activation switch skipped \
             (blocks with fewer than half compared: {}), \
             worst relative error {:.2e} in {} (limit 1e-4){}, {secs:.1} s (limit 120 s)",
            blocks.len(),
            thin.len(),
            worst.rel_error,
            worst.name,
            if failing.is_empty() { String::new() } else { format!(", failing: {}", failing.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- criterion 6

fn huber_oracle() -> Outcome {
    let single = |e: f64, r: f64| {
        let gt = Array2::<f64>::zeros((1, 2));
        let pred = Array2::from_shape_vec((1, 2), vec![e * 0.6, e * 0.8]).expect("shape");
        huber_loss(&pred.view(), &gt.view(), r).expect("shapes")
    };
    let same = Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 3.0, 4.0]).expect("shape");
    let zero = huber_loss(&same.view(), &same.view(), 3.0).expect("shapes");
    let examples = [(zero, 0.0, "pred = gt"), (single(1.0, 3.0), 1.0 / 6.0, "e = 1, r = 3"), (single(5.0, 3.0), 2.0, "e = 5, r = 3")];
    let examples_ok = examples.iter().all(|(got, want, _)| (got - want).abs() <= 4.0 * f64::EPSILON);
    let listed: Vec<String> = examples.iter().map(|(g, w, l)| format!("{l}: {g:.6} (expected {w:.6})")).collect();
    let r = 3.0;
    let below = single(r * (1.0 - 1e-12), r);
    let at = single(r, r);
    let above = single(r * (1.0 + 1e-12), r);
    let jump = (below - at).abs().max((above - at).abs());
    outcome(
        examples_ok && jump <= 1e-9,
        format!(
            "{}; continuity at e = r: loss just below {below:.6}, at {at:.6}, just above {above:.6}, jump {jump:.3e} (limit 1e-9)",
            listed.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- criterion 7

fn overfit() -> Outcome {
    let cfg = ExtractConfig::default();
    let mut samples = Vec::new();
    let mut i = 0;
    while samples.len() < 32 {
        let sc = scenario(i, 4);
        let windows = sample_windows(&sc.tracks, cfg.m, cfg.n, 1);
        if let Some(w) = windows.get(windows.len() / 2) {
            samples.extend(extract_windows(&sc.scenario_id, &sc.graph, &sc.tracks, &[*w], &cfg).expect("extracts").samples);
        }
        i += 1;
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let tc = TrainConfig {
        learning_rate: 0.003,
        huber_r: 3.0,
        batch_size: TrainConfig::default().batch_size,
        max_epochs: 500,
        patience: 500,
        seed: 7,
        target_val_ade: Some(0.1),
    };
    let t = Instant::now();
    let out = train::<f32>(&refs, &refs, ModelKind::Sapi, &tc, &ModelConfig::default()).expect("training runs");
    let secs = t.elapsed().as_secs_f64();
    outcome(
        out.best_val_ade < 0.1 && secs < 600.0,
        format!(
            "32 samples, default config, lr 0.003, r 3, batch {}: best train ADE {:.3} m at epoch {} of {} run (limit 0.1 m within 500), {:.0} s (limit 600 s)",
            tc.batch_size,
            out.best_val_ade,
            out.best_epoch,
            out.log.len(),
            secs
        ),
    )
}

// ------------------------------------------------------------ criteria 8 to 10

const BENCH_SCENARIOS: u64 = 2000;
const BENCH_SEEDS: [u64; 3] = [11, 12, 13];

fn bench_extract() -> ExtractConfig {
    ExtractConfig { raster: RasterConfig { height_px: 40, width_px: 40, resolution: 2.5, background: 255 }, ..ExtractConfig::default() }
}

fn bench_model() -> ModelConfig {
    let mut c = ModelConfig { raster_height: 40, raster_width: 40, ..ModelConfig::default() };
    c.baseline.lstm_hidden = 256;
    c
}

fn bench_train(seed: u64) -> TrainConfig {
    TrainConfig { batch_size: 32, max_epochs: 40, patience: 6, seed, ..TrainConfig::default() }
}

struct Benchmark {
    samples: Vec<Sample>,
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
    /// `reports[kind][seed]`.
    reports: BTreeMap<ModelKind, Vec<EvalReport>>,
    sapi: Vec<Model<f32>>,
    seconds: f64,
}

fn run_benchmark() -> Benchmark {
    let t = Instant::now();
    let cfg = bench_extract();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut samples = Vec::new();
    for i in 0..BENCH_SCENARIOS {
        let sc = scenario(i, 6);
        // One uniformly drawn window per agent keeps the set diverse and small.
        let mut by_track: BTreeMap<usize, Vec<sapi::dataset::Window>> = BTreeMap::new();
        for w in sample_windows(&sc.tracks, cfg.m, cfg.n, 1) {
            by_track.entry(w.track).or_default().push(w);
        }
        let chosen: Vec<_> = by_track.values().map(|ws| ws[rng.gen_range(0..ws.len())]).collect();
        samples.extend(extract_windows(&sc.scenario_id, &sc.graph, &sc.tracks, &chosen, &cfg).expect("extracts").samples);
    }
    let manifest = split(&samples, [3, 1, 1], 8).expect("non-empty");
    let (train_i, val_i, test_i) =
        (manifest.indices(&samples, SplitPart::Train), manifest.indices(&samples, SplitPart::Val), manifest.indices(&samples, SplitPart::Test));
    eprintln!(
        "benchmark: {BENCH_SCENARIOS} scenarios, {} samples (train/val/test {}/{}/{}), prepared in {:.0} s",
        samples.len(),
        train_i.len(),
        val_i.len(),
        test_i.len(),
        t.elapsed().as_secs_f64()
    );
    let pick = |idx: &[usize]| idx.iter().map(|&i| &samples[i]).collect::<Vec<&Sample>>();
    let (tr, va, te) = (pick(&train_i), pick(&val_i), pick(&test_i));
    let mut reports: BTreeMap<ModelKind, Vec<EvalReport>> = BTreeMap::new();
    let mut sapi_models = Vec::new();
    for &seed in &BENCH_SEEDS {
        for kind in ModelKind::ALL {
            let start = Instant::now();
            let model = Model::<f32>::init(kind, &bench_model(), seed).expect("valid config");
            let out = train_from(model, &tr, &va, &bench_train(seed)).expect("training runs");
            let report = evaluate(&out.model, &te).expect("test split is non-empty");
            eprintln!(
                "benchmark: {kind} seed {seed}: best val ADE {:.3} at epoch {}/{}, test ADE {:.3}, {:.0} s",
                out.best_val_ade,
                out.best_epoch,
                out.log.len(),
                report.ade_6s,
                start.elapsed().as_secs_f64()
            );
            reports.entry(kind).or_default().push(report);
            if kind == ModelKind::Sapi {
                sapi_models.push(out.model);
            }
        }
    }
    drop((tr, va, te));
    Benchmark { samples, train: train_i, val: val_i, test: test_i, reports, sapi: sapi_models, seconds: t.elapsed().as_secs_f64() }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn ordering(b: &Benchmark) -> Outcome {
    use ModelKind::*;
    let ade = |k: ModelKind| mean(b.reports[&k].iter().map(|r| r.ade_6s));
    let (sapi, no_traffic, no_lra, lstm) = (ade(Sapi), ade(SapiNoTraffic), ade(SapiNoLra), ade(Lstm));
    let means_ok = sapi < no_traffic && no_traffic < no_lra && no_lra < lstm && sapi <= 0.9 * lstm;
    let mut seed_notes = Vec::new();
    let mut seeds_ok = true;
    for (i, seed) in BENCH_SEEDS.iter().enumerate() {
        let a = |k: ModelKind| b.reports[&k][i].ade_6s;
        let outer = a(Sapi) < a(SapiNoTraffic).min(a(SapiNoLra)) && a(SapiNoTraffic).max(a(SapiNoLra)) < a(Lstm);
        seeds_ok &= outer;
        let middle_inverted = a(SapiNoTraffic) >= a(SapiNoLra);
        seed_notes.push(format!(
            "seed {seed}: {:.3}/{:.3}/{:.3}/{:.3}{}{}",
            a(Sapi),
            a(SapiNoTraffic),
            a(SapiNoLra),
            a(Lstm),
            if middle_inverted { " (middle inverted, tolerated)" } else { "" },
            if outer { "" } else { " (outer order broken)" }
        ));
    }
    outcome(
        means_ok && seeds_ok,
        format!(
            "mean 6s ADE over {} seeds: sapi {sapi:.3}, sapi_no_traffic {no_traffic:.3}, sapi_no_lra {no_lra:.3}, lstm {lstm:.3} \
             (sapi vs lstm {:+.1}%, need <= -10%); per seed sapi/no_traffic/no_lra/lstm: {}; {} train / {} val / {} test samples, {:.0} s",
            BENCH_SEEDS.len(),
            100.0 * (sapi / lstm - 1.0),
            seed_notes.join("; "),
            b.train.len(),
            b.val.len(),
            b.test.len(),
            b.seconds
        ),
    )
}

fn per_step_trend(b: &Benchmark) -> Outcome {
    let mut failures = Vec::new();
    let mut count = 0;
    for (kind, reports) in &b.reports {
        for (i, r) in reports.iter().enumerate() {
            count += 1;
            let e = &r.per_step_errors;
            let drops: Vec<usize> = (1..e.len()).filter(|&k| e[k] < 0.95 * e[k - 1]).collect();
            if !drops.is_empty() {
                failures.push(format!("{kind} seed {} drops after steps {:?}", BENCH_SEEDS[i], drops));
            }
        }
    }
    let sapi = &b.reports[&ModelKind::Sapi][0].per_step_errors;
    outcome(
        failures.is_empty(),
        format!(
            "{}/{count} trained models non-decreasing within 5%; sapi seed {} steps 1/5/10/15: {:.2}/{:.2}/{:.2}/{:.2} m{}",
            count - failures.len(),
            BENCH_SEEDS[0],
            sapi[0],
            sapi[4],
            sapi[9],
            sapi[14],
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

fn stop_behavior(b: &Benchmark) -> Outcome {
    let stops: Vec<&Sample> = b.test.iter().map(|&i| &b.samples[i]).filter(|s| s.behavior == Behavior::StopForTraffic).collect();
    if stops.len() < 20 {
        return outcome(false, format!("only {} held-out stop_for_traffic samples (need 20)", stops.len()));
    }
    let cv = ConstantVelocity.predict(&stops).expect("constant velocity");
    let gt = sapi::dataset::stack_future(&stops);
    let last = gt.dim().1 - 1;
    let travel = |a: &Array3<f64>, i: usize| a[[i, last, 0]].hypot(a[[i, last, 1]]);
    let slowing: Vec<usize> = (0..stops.len()).filter(|&i| (gt[[i, last, 0]] as f64).hypot(gt[[i, last, 1]] as f64) < travel(&cv, i)).collect();
    let (mut far, mut tracks, mut total_far, mut total_tracks) = (Vec::new(), Vec::new(), 0usize, 0usize);
    for model in &b.sapi {
        let pred = model.predict(&stops).expect("prediction");
        let f = (0..stops.len())
            .filter(|&i| (pred[[i, last, 0]] - cv[[i, last, 0]]).hypot(pred[[i, last, 1]] - cv[[i, last, 1]]) > 2.0)
            .count();
        let t = slowing.iter().filter(|&&i| travel(&pred, i) < travel(&cv, i)).count();
        far.push(f as f64 / stops.len() as f64);
        tracks.push(t as f64 / slowing.len().max(1) as f64);
        total_far += f;
        total_tracks += t;
    }
    let far_frac = total_far as f64 / (stops.len() * b.sapi.len()) as f64;
    let track_frac = total_tracks as f64 / (slowing.len().max(1) * b.sapi.len()) as f64;
    let pct = |v: &[f64]| v.iter().map(|x| format!("{:.0}%", 100.0 * x)).collect::<Vec<_>>().join("/");
    outcome(
        far_frac >= 0.7 && track_frac >= 0.7,
        format!(
            "{} held-out stop samples ({} slowing in ground truth): step-15 gap to constant velocity > 2 m in {:.0}% \
             (per seed {}), predicted travel shorter than constant velocity on slowing samples in {:.0}% (per seed {}); need 70% each",
            stops.len(),
            slowing.len(),
            100.0 * far_frac,
            pct(&far),
            100.0 * track_frac,
            pct(&tracks)
        ),
    )
}

// --------------------------------------------------------------- criterion 11

fn round_trips() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut check = |pass: bool, what: &str| {
        ok &= pass;
        notes.push(format!("{what} {}", if pass { "ok" } else { "FAILED" }));
    };

    let a: Vec<Scenario> = (0..5).map(|i| scenario(i, 6)).collect();
    let b: Vec<Scenario> = (0..5).map(|i| scenario(i, 6)).collect();
    check(a.iter().zip(&b).all(|(x, y)| x.to_json_line() == y.to_json_line()), "scenario regeneration");
    let dir = tempfile::tempdir().expect("tempdir");
    let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    sapi::simgen::write_scenarios(&p1, &a).expect("write");
    sapi::simgen::write_scenarios(&p2, &b).expect("write");
    let back = sapi::simgen::read_scenarios(&p1).expect("read");
    check(std::fs::read(&p1).ok() == std::fs::read(&p2).ok(), "scenario file bytes");
    check(back.iter().zip(&a).all(|(x, y)| x.to_json_line() == y.to_json_line() && x.graph == y.graph), "scenario file round trip");

    let cfg = ExtractConfig { raster: RasterConfig { height_px: 24, width_px: 24, resolution: 4.0, background: 255 }, stride: 9, ..ExtractConfig::default() };
    let mut samples = Vec::new();
    for sc in &a {
        let windows = sample_windows(&sc.tracks, cfg.m, cfg.n, cfg.stride);
        samples.extend(extract_windows(&sc.scenario_id, &sc.graph, &sc.tracks, &windows, &cfg).expect("extracts").samples);
    }
    let (d1, d2) = (dir.path().join("ds1"), dir.path().join("ds2"));
    write_samples(&samples, &d1, &cfg, true).expect("write");
    write_samples(&samples, &d2, &cfg, true).expect("write");
    let same_files = ["manifest.json", "positions.f32", "rasters.u8"]
        .iter()
        .all(|f| std::fs::read(d1.join(f)).map_or(true, |x| Some(x) == std::fs::read(d2.join(f)).ok()));
    check(same_files, "dataset archive bytes");
    let archive = read_samples(&d1).expect("read");
    check(archive.samples == samples && archive.config == cfg, "dataset archive round trip");
    let s1 = split(&samples, [3, 1, 1], 3).expect("split");
    check(s1 == split(&samples, [3, 1, 1], 3).expect("split"), "split determinism");

    let mcfg = ModelConfig { raster_height: 24, raster_width: 24, ..ModelConfig::default() };
    let mut all_equal = true;
    for kind in ModelKind::ALL {
        let model = Model::<f32>::init(kind, &mcfg, 21).expect("valid");
        let (c1, c2) = (dir.path().join(format!("{kind}_1")), dir.path().join(format!("{kind}_2")));
        model.save(&c1).expect("save");
        let loaded = Model::<f32>::load(&c1).expect("load");
        loaded.save(&c2).expect("save");
        let bytes_equal = model.params().iter().all(|(name, _)| {
            let f = format!("params/{name}.f32");
            std::fs::read(c1.join(&f)).ok() == std::fs::read(c2.join(&f)).ok()
        }) && std::fs::read(c1.join("manifest.json")).ok() == std::fs::read(c2.join("manifest.json")).ok();
        let refs: Vec<&Sample> = samples.iter().take(4).collect();
        let same_output = model.predict(&refs).ok() == loaded.predict(&refs).ok();
        all_equal &= loaded == model && bytes_equal && same_output;
    }
    check(all_equal, "checkpoint save/load for all four kinds");
    outcome(ok, notes.join(", "))
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).filter(|n| (1..=11).contains(n)).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let strict = std::env::var("SAPI_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut results: Vec<(usize, bool)> = Vec::new();
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let t = Instant::now();
        let o = f();
        println!("criterion {n:>2} [{}] {name}: {} ({:.1} s)", if o.pass { "PASS" } else { "FAIL" }, o.detail, t.elapsed().as_secs_f64());
        results.push((n, o.pass));
    };
    run(1, "motion energy oracle", &mut motion_energy);
    run(2, "LRA equivalence", &mut lra_equivalence);
    run(3, "raster invariants", &mut raster_invariants);
    run(4, "shape contract", &mut shape_contract);
    run(5, "gradient check", &mut gradient);
    run(6, "Huber loss oracle", &mut huber_oracle);
    run(7, "overfit sanity", &mut overfit);
    if wanted(8) || wanted(9) || wanted(10) {
        let bench = run_benchmark();
        run(8, "synthetic benchmark ordering", &mut || ordering(&bench));
        run(9, "per-step monotonic trend", &mut || per_step_trend(&bench));
        run(10, "stop-for-traffic behavior", &mut || stop_behavior(&bench));
    }
    run(11, "determinism and round trips", &mut round_trips);
    let passed = results.iter().filter(|r| r.1).count();
    let failed: Vec<String> = results.iter().filter(|r| !r.1).map(|r| r.0.to_string()).collect();
    println!(
        "acceptance: {passed}/{} criteria passed{}",
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failing: {}", failed.join(", ")) }
    );
    if strict && !failed.is_empty() {
        std::process::exit(1);
    }
}
