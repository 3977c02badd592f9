//! Sliding-window samples, scenario-level splits and the on-disk sample archive.
//!
//! Positions are expressed in the ego frame of the last observed state:
//! x points to the vehicle's right, y along its heading.

use crate::geometry::Vec2;
use crate::lane_graph::{LaneGraph, LaneGraphError};
use crate::raster::{build_history, EnvRaster, RasterConfig, RasterError};
use crate::simgen::Scenario;
use crate::track::{AgentTrack, Behavior, TICK_SECONDS};
use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

pub const ARCHIVE_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_HISTORY: usize = 12;
pub const DEFAULT_HORIZON: usize = 15;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("archive manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("archive schema version {found} is not supported (expected {ARCHIVE_SCHEMA_VERSION})")]
    SchemaVersionMismatch { found: u32 },
    #[error("corrupt archive: {0}")]
    Corrupt(String),
    #[error("invalid extraction settings: {0}")]
    InvalidConfig(String),
    #[error("scenario {0} is needed to regenerate rasters but was not supplied")]
    MissingScenario(String),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error("split needs at least one sample")]
    EmptySplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractConfig {
    pub m: usize,
    pub n: usize,
    /// Forward search distance for the legally reachable area, in meters.
    pub d: f64,
    pub raster: RasterConfig,
    /// Steps between consecutive window ends on one track.
    pub stride: usize,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig { m: DEFAULT_HISTORY, n: DEFAULT_HORIZON, d: 100.0, raster: RasterConfig::default(), stride: 1 }
    }
}

impl ExtractConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.m == 0 || self.n == 0 || self.stride == 0 {
            return Err(DatasetError::InvalidConfig("m, n and stride must be at least 1".into()));
        }
        if !(self.d >= 0.0 && self.d.is_finite()) {
            return Err(DatasetError::InvalidConfig("d must be finite and non-negative".into()));
        }
        self.raster.validate()?;
        Ok(())
    }
}

/// One training example for a target vehicle at `t_index` (its last observed state).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scenario_id: String,
    pub target_agent_id: u32,
    pub t_index: usize,
    pub behavior: Behavior,
    /// World pose `(x, y, heading)` of the ego frame.
    pub ego_pose: [f64; 3],
    /// `m x 2`, oldest first; the last row is the origin.
    pub history_positions: Array2<f32>,
    /// `n x 2` ground-truth offsets.
    pub future_positions: Array2<f32>,
    /// One raster per history step, oldest first. Empty when not loaded.
    pub history_rasters: Vec<Arc<EnvRaster>>,
}

impl Sample {
    pub fn id(&self) -> String {
        format!("{}/{}/{}", self.scenario_id, self.target_agent_id, self.t_index)
    }

    pub fn m(&self) -> usize {
        self.history_positions.nrows()
    }

    pub fn n(&self) -> usize {
        self.future_positions.nrows()
    }

    pub fn has_rasters(&self) -> bool {
        !self.history_rasters.is_empty()
    }

    /// Stacks the rasters into `m x H x W x 2` (LRA, traffic) bytes.
    pub fn raster_tensor(&self) -> ndarray::Array4<u8> {
        let (h, w) = self.history_rasters.first().map_or((0, 0), |r| r.shape());
        let mut out = ndarray::Array4::<u8>::zeros((self.history_rasters.len(), h, w, 2));
        for (t, r) in self.history_rasters.iter().enumerate() {
            out.slice_mut(ndarray::s![t, .., .., 0]).assign(&r.lra_channel);
            out.slice_mut(ndarray::s![t, .., .., 1]).assign(&r.traffic_channel);
        }
        out
    }
}

/// Maps a world point into the ego frame at `origin` with `heading` along +y.
pub fn to_ego(p: Vec2, origin: Vec2, heading: f64) -> Vec2 {
    let forward = Vec2::from_heading(heading);
    let right = Vec2::new(forward.y, -forward.x);
    let rel = p - origin;
    Vec2::new(rel.dot(right), rel.dot(forward))
}

/// Inverse of [`to_ego`].
pub fn from_ego(p: Vec2, origin: Vec2, heading: f64) -> Vec2 {
    let forward = Vec2::from_heading(heading);
    let right = Vec2::new(forward.y, -forward.x);
    origin + right * p.x + forward * p.y
}

/// A candidate window: track index into the scenario's track list and last observed index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Window {
    pub track: usize,
    pub t_index: usize,
}

/// Every window with `m` observed and `n` future states, `stride` steps apart.
pub fn sample_windows(tracks: &[AgentTrack], m: usize, n: usize, stride: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for (track, t) in tracks.iter().enumerate() {
        let len = t.states.len();
        if m == 0 || len < m + n {
            continue;
        }
        out.extend((m - 1..len - n).step_by(stride.max(1)).map(|t_index| Window { track, t_index }));
    }
    out
}

/// Samples produced from one scenario plus the windows dropped because the
/// target was off every lane.
#[derive(Debug, Default)]
pub struct Extraction {
    pub samples: Vec<Sample>,
    pub skipped_off_road: usize,
}

/// Extracts the given windows; rasters shared between overlapping windows of
/// one agent are computed once.
pub fn extract_windows(
    scenario_id: &str,
    graph: &LaneGraph,
    tracks: &[AgentTrack],
    windows: &[Window],
    cfg: &ExtractConfig,
) -> Result<Extraction, DatasetError> {
    cfg.validate()?;
    let mut cache: HashMap<(usize, usize), Option<Arc<EnvRaster>>> = HashMap::new();
    let mut out = Extraction::default();
    'windows: for w in windows {
        let track = &tracks[w.track];
        let mut rasters = Vec::with_capacity(cfg.m);
        for i in w.t_index + 1 - cfg.m..=w.t_index {
            let entry = match cache.get(&(w.track, i)) {
                Some(e) => e.clone(),
                None => {
                    let e = match build_history(graph, track, tracks, i, 1, cfg.d, &cfg.raster) {
                        Ok(mut h) => Some(Arc::new(h.pop().unwrap().0)),
                        Err(RasterError::Lane(LaneGraphError::NotOnRoad { .. })) => None,
                        Err(e) => return Err(e.into()),
                    };
                    cache.insert((w.track, i), e.clone());
                    e
                }
            };
            match entry {
                Some(r) => rasters.push(r),
                None => {
                    out.skipped_off_road += 1;
                    continue 'windows;
                }
            }
        }
        out.samples.push(make_sample(scenario_id, track, w.t_index, cfg.m, cfg.n, rasters));
    }
    Ok(out)
}

fn make_sample(scenario_id: &str, track: &AgentTrack, t_index: usize, m: usize, n: usize, rasters: Vec<Arc<EnvRaster>>) -> Sample {
    let last = track.states[t_index];
    let to_rows = |range: std::ops::RangeInclusive<usize>, rows: usize| {
        let mut a = Array2::<f32>::zeros((rows, 2));
        for (r, i) in range.enumerate() {
            let p = to_ego(track.states[i].position, last.position, last.heading);
            a[[r, 0]] = p.x as f32;
            a[[r, 1]] = p.y as f32;
        }
        a
    };
    Sample {
        scenario_id: scenario_id.to_string(),
        target_agent_id: track.agent_id,
        t_index,
        behavior: track.behavior,
        ego_pose: [last.position.x, last.position.y, last.heading],
        history_positions: to_rows(t_index + 1 - m..=t_index, m),
        future_positions: to_rows(t_index + 1..=t_index + n, n),
        history_rasters: rasters,
    }
}

/// All stride-spaced windows of every track.
pub fn extract_samples(scenario_id: &str, graph: &LaneGraph, tracks: &[AgentTrack], cfg: &ExtractConfig) -> Result<Extraction, DatasetError> {
    cfg.validate()?;
    let windows = sample_windows(tracks, cfg.m, cfg.n, cfg.stride);
    extract_windows(scenario_id, graph, tracks, &windows, cfg)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratio: [u32; 3],
    pub train_scenarios: Vec<String>,
    pub val_scenarios: Vec<String>,
    pub test_scenarios: Vec<String>,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Val,
    Test,
}

impl SplitManifest {
    /// Indices into `samples` for each part, in sample order.
    pub fn indices(&self, samples: &[Sample], part: SplitPart) -> Vec<usize> {
        let scenarios: BTreeSet<&str> = match part {
            SplitPart::Train => &self.train_scenarios,
            SplitPart::Val => &self.val_scenarios,
            SplitPart::Test => &self.test_scenarios,
        }
        .iter()
        .map(String::as_str)
        .collect();
        (0..samples.len()).filter(|&i| scenarios.contains(samples[i].scenario_id.as_str())).collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }
}

/// Shuffles scenarios with `seed` and cuts them at the cumulative `ratio` boundaries.
pub fn split(samples: &[Sample], ratio: [u32; 3], seed: u64) -> Result<SplitManifest, DatasetError> {
    if samples.is_empty() {
        return Err(DatasetError::EmptySplit);
    }
    let total: u32 = ratio.iter().sum();
    if total == 0 {
        return Err(DatasetError::InvalidConfig("split ratio must have a positive sum".into()));
    }
    let mut scenarios: Vec<String> =
        samples.iter().map(|s| s.scenario_id.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    scenarios.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = scenarios.len() as f64;
    let cut = |k: u32| (n * k as f64 / total as f64).round() as usize;
    let (b1, b2) = (cut(ratio[0]), cut(ratio[0] + ratio[1]));
    let parts = [&scenarios[..b1], &scenarios[b1..b2], &scenarios[b2..]];
    let of_part = |part: &[String]| -> Vec<String> {
        let set: BTreeSet<&str> = part.iter().map(String::as_str).collect();
        samples.iter().filter(|s| set.contains(s.scenario_id.as_str())).map(Sample::id).collect()
    };
    Ok(SplitManifest {
        seed,
        ratio,
        train_scenarios: parts[0].to_vec(),
        val_scenarios: parts[1].to_vec(),
        test_scenarios: parts[2].to_vec(),
        train: of_part(parts[0]),
        val: of_part(parts[1]),
        test: of_part(parts[2]),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobRef {
    pub file: String,
    /// Byte offset into `file`.
    pub offset: u64,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleEntry {
    id: String,
    scenario_id: String,
    target_agent_id: u32,
    t_index: usize,
    behavior: Behavior,
    ego_pose: [f64; 3],
    /// Tick of the oldest history raster, when rasters are inline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    history_start_tick: Option<u64>,
    history_positions: BlobRef,
    future_positions: BlobRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rasters: Option<BlobRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchiveManifest {
    schema_version: u32,
    m: usize,
    n: usize,
    tick_seconds: f64,
    d: f64,
    stride: usize,
    raster: RasterConfig,
    inline_rasters: bool,
    samples: Vec<SampleEntry>,
}

const POSITIONS_FILE: &str = "positions.f32";
const RASTERS_FILE: &str = "rasters.u8";

/// Writes `samples` to the directory `dir`.
///
/// Positions go to one little-endian f32 blob, rasters (when `inline_rasters`)
/// to one byte blob laid out `m x H x W x 2`; the manifest records each
/// sample's offsets and shapes.
pub fn write_samples(samples: &[Sample], dir: &Path, cfg: &ExtractConfig, inline_rasters: bool) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir)?;
    let mut pos = std::io::BufWriter::new(std::fs::File::create(dir.join(POSITIONS_FILE))?);
    let mut ras = if inline_rasters { Some(std::io::BufWriter::new(std::fs::File::create(dir.join(RASTERS_FILE))?)) } else { None };
    let (mut pos_off, mut ras_off) = (0u64, 0u64);
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        if s.m() != cfg.m || s.n() != cfg.n {
            return Err(DatasetError::InvalidConfig(format!("sample {} does not match m={} n={}", s.id(), cfg.m, cfg.n)));
        }
        let mut put = |a: &Array2<f32>| -> std::io::Result<BlobRef> {
            let r = BlobRef { file: POSITIONS_FILE.into(), offset: pos_off, shape: a.shape().to_vec(), dtype: "f32le".into() };
            for v in a.iter() {
                pos.write_all(&v.to_le_bytes())?;
            }
            pos_off += 4 * a.len() as u64;
            Ok(r)
        };
        let history_positions = put(&s.history_positions)?;
        let future_positions = put(&s.future_positions)?;
        let rasters = match ras.as_mut() {
            Some(w) => {
                if s.history_rasters.len() != cfg.m {
                    return Err(DatasetError::InvalidConfig(format!("sample {} has no rasters to store inline", s.id())));
                }
                let t = s.raster_tensor();
                let r = BlobRef { file: RASTERS_FILE.into(), offset: ras_off, shape: t.shape().to_vec(), dtype: "u8".into() };
                w.write_all(t.as_slice().expect("fresh array is contiguous"))?;
                ras_off += t.len() as u64;
                Some(r)
            }
            None => None,
        };
        entries.push(SampleEntry {
            id: s.id(),
            scenario_id: s.scenario_id.clone(),
            target_agent_id: s.target_agent_id,
            t_index: s.t_index,
            behavior: s.behavior,
            ego_pose: s.ego_pose,
            history_start_tick: s.history_rasters.first().map(|r| (r.timestamp / TICK_SECONDS).round() as u64),
            history_positions,
            future_positions,
            rasters,
        });
    }
    pos.flush()?;
    if let Some(mut w) = ras {
        w.flush()?;
    }
    let manifest = ArchiveManifest {
        schema_version: ARCHIVE_SCHEMA_VERSION,
        m: cfg.m,
        n: cfg.n,
        tick_seconds: TICK_SECONDS,
        d: cfg.d,
        stride: cfg.stride,
        raster: cfg.raster,
        inline_rasters,
        samples: entries,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// A loaded archive: samples plus the extraction settings they were built with.
#[derive(Debug)]
pub struct Archive {
    pub config: ExtractConfig,
    pub inline_rasters: bool,
    pub samples: Vec<Sample>,
}

fn read_blob(dir: &Path, cache: &mut BTreeMap<String, Vec<u8>>, r: &BlobRef, elem: usize) -> Result<Vec<u8>, DatasetError> {
    if !cache.contains_key(&r.file) {
        let mut buf = Vec::new();
        std::fs::File::open(dir.join(&r.file))?.read_to_end(&mut buf)?;
        cache.insert(r.file.clone(), buf);
    }
    let data = &cache[&r.file];
    let len = r.shape.iter().product::<usize>() * elem;
    let start = r.offset as usize;
    data.get(start..start + len)
        .map(<[u8]>::to_vec)
        .ok_or_else(|| DatasetError::Corrupt(format!("blob {}@{} out of range", r.file, r.offset)))
}

fn positions_from(bytes: &[u8], shape: &[usize]) -> Result<Array2<f32>, DatasetError> {
    let vals: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    match shape {
        [r, 2] => Array2::from_shape_vec((*r, 2), vals).map_err(|e| DatasetError::Corrupt(e.to_string())),
        _ => Err(DatasetError::Corrupt(format!("unexpected position shape {shape:?}"))),
    }
}

/// Reads an archive. Rasters are loaded when stored inline; otherwise samples
/// come back without rasters (see [`regenerate_rasters`]).
pub fn read_samples(dir: &Path) -> Result<Archive, DatasetError> {
    let raw = std::fs::read(dir.join("manifest.json"))?;
    let probe: serde_json::Value = serde_json::from_slice(&raw)?;
    let found = probe.get("schema_version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
    if found != ARCHIVE_SCHEMA_VERSION {
        return Err(DatasetError::SchemaVersionMismatch { found });
    }
    let manifest: ArchiveManifest = serde_json::from_value(probe)?;
    let mut cache = BTreeMap::new();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let history_positions = positions_from(&read_blob(dir, &mut cache, &e.history_positions, 4)?, &e.history_positions.shape)?;
        let future_positions = positions_from(&read_blob(dir, &mut cache, &e.future_positions, 4)?, &e.future_positions.shape)?;
        let mut history_rasters = Vec::new();
        if let Some(r) = &e.rasters {
            let bytes = read_blob(dir, &mut cache, r, 1)?;
            let [m, h, w, c] = r.shape[..] else {
                return Err(DatasetError::Corrupt(format!("unexpected raster shape {:?}", r.shape)));
            };
            if c != 2 {
                return Err(DatasetError::Corrupt("rasters must have two channels".into()));
            }
            let t = ndarray::Array4::from_shape_vec((m, h, w, 2), bytes).map_err(|e| DatasetError::Corrupt(e.to_string()))?;
            for k in 0..m {
                history_rasters.push(Arc::new(EnvRaster {
                    lra_channel: t.slice(ndarray::s![k, .., .., 0]).to_owned(),
                    traffic_channel: t.slice(ndarray::s![k, .., .., 1]).to_owned(),
                    timestamp: (e.history_start_tick.unwrap_or(0) + k as u64) as f64 * manifest.tick_seconds,
                }));
            }
        }
        samples.push(Sample {
            scenario_id: e.scenario_id.clone(),
            target_agent_id: e.target_agent_id,
            t_index: e.t_index,
            behavior: e.behavior,
            ego_pose: e.ego_pose,
            history_positions,
            future_positions,
            history_rasters,
        });
    }
    let config = ExtractConfig { m: manifest.m, n: manifest.n, d: manifest.d, raster: manifest.raster, stride: manifest.stride };
    Ok(Archive { config, inline_rasters: manifest.inline_rasters, samples })
}

/// Re-renders rasters for samples that were archived without them.
pub fn regenerate_rasters(samples: &mut [Sample], scenarios: &[Scenario], cfg: &ExtractConfig) -> Result<(), DatasetError> {
    let by_id: HashMap<&str, &Scenario> = scenarios.iter().map(|s| (s.scenario_id.as_str(), s)).collect();
    for s in samples.iter_mut().filter(|s| !s.has_rasters()) {
        let sc = by_id.get(s.scenario_id.as_str()).ok_or_else(|| DatasetError::MissingScenario(s.scenario_id.clone()))?;
        let track = sc
            .tracks
            .iter()
            .position(|t| t.agent_id == s.target_agent_id)
            .ok_or_else(|| DatasetError::Corrupt(format!("agent {} missing from {}", s.target_agent_id, s.scenario_id)))?;
        let ex = extract_windows(&s.scenario_id, &sc.graph, &sc.tracks, &[Window { track, t_index: s.t_index }], cfg)?;
        let fresh = ex.samples.into_iter().next().ok_or_else(|| DatasetError::Corrupt(format!("sample {} is off road", s.id())))?;
        s.history_rasters = fresh.history_rasters;
    }
    Ok(())
}

/// Stacks history positions of the selected samples into `N x m x 2`.
pub fn stack_history(samples: &[&Sample]) -> Array3<f32> {
    let m = samples.first().map_or(0, |s| s.m());
    let mut out = Array3::zeros((samples.len(), m, 2));
    for (i, s) in samples.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(&s.history_positions);
    }
    out
}

/// Stacks future positions of the selected samples into `N x n x 2`.
pub fn stack_future(samples: &[&Sample]) -> Array3<f32> {
    let n = samples.first().map_or(0, |s| s.n());
    let mut out = Array3::zeros((samples.len(), n, 2));
    for (i, s) in samples.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(&s.future_positions);
    }
    out
}
