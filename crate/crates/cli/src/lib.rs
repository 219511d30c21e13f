//! Batch front end: feeds a recorded sequence (or the built-in synthetic
//! orbit) through the fusion pipeline and writes renders plus per-frame
//! statistics.
//!
//! Output directory layout:
//!
//! - `stats.jsonl`: one record per processed frame, no wall times, so two
//!   identical runs give identical files
//! - `timings.jsonl`: per-stage wall times of the same frames
//! - `summary.json`: totals of the run
//! - `render_NNNN.ppm`: shaded raycast every `render_stride` frames
//! - `host_blocks.bin`: swapped-out blocks, only with swapping on

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Parser, ValueEnum};
use serde::Serialize;
use voxfuse_core::error::{CalibrationError, Error as EngineError, FormatError};
use voxfuse_core::math::{Image2D, Pose, Rgb};
use voxfuse_core::pipeline::{AnyEngine, Backend, EngineSettings, FrameStats, ImageMode, TrackingStatus};
use voxfuse_core::swap::SwapMetrics;
use voxfuse_core::tracking::TrackerType;
use voxfuse_core::view::pnm::{load_pgm16, load_ppm, save_ppm};
use voxfuse_core::view::synth::{orbit_poses, render_view, Scene};
use voxfuse_core::view::Calibration;
use voxfuse_core::voxel::VoxelType;

pub const SYNTHETIC_FRAMES: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Dense,
    Hash,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrackerArg {
    Icp,
    Color,
    #[value(name = "icp+ren")]
    IcpRen,
}

/// Half-open frame index range `a..b`; either end may be omitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FrameRange {
    pub start: usize,
    pub end: Option<usize>,
}

impl FrameRange {
    pub fn contains(&self, index: usize) -> bool {
        index >= self.start && self.end.is_none_or(|e| index < e)
    }
}

impl FromStr for FrameRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once("..").ok_or_else(|| format!("expected a..b, got {s:?}"))?;
        let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad frame index {t:?}: {e}"));
        let start = if a.trim().is_empty() { 0 } else { num(a)? };
        let end = if b.trim().is_empty() { None } else { Some(num(b)?) };
        if end.is_some_and(|e| e < start) {
            return Err(format!("empty frame range {s:?}"));
        }
        Ok(Self { start, end })
    }
}

/// Command line. Mirrors the classic `calib.txt [frames/]` invocation.
#[derive(Debug, Clone, Parser)]
#[command(name = "voxfuse", version, about = "Volumetric RGB-D fusion of recorded sequences")]
pub struct Args {
    /// Calibration file.
    pub calib: PathBuf,
    /// Directory of NNNN.ppm (RGB) and NNNN.pgm (disparity) pairs. Without
    /// it a synthetic 60-frame orbit is fused.
    #[arg(value_name = "FRAMES")]
    pub frames_dir: Option<PathBuf>,
    #[arg(short, long, default_value = "voxfuse-out")]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = BackendArg::Hash)]
    pub backend: BackendArg,
    #[arg(long, value_enum, default_value_t = Switch::Off)]
    pub swap: Switch,
    #[arg(long, value_enum, default_value_t = TrackerArg::Icp)]
    pub tracker: TrackerArg,
    /// Voxel edge length in metres.
    #[arg(long)]
    pub voxel_size: Option<f32>,
    /// Truncation band in metres.
    #[arg(long)]
    pub mu: Option<f32>,
    /// Blocks transferred per frame in each direction when swapping.
    #[arg(long)]
    pub swap_buffer: Option<usize>,
    /// Frame indices to process, `a..b` (end exclusive).
    #[arg(long = "frames", value_name = "A..B")]
    pub range: Option<FrameRange>,
    /// Write a render every this many processed frames; 0 disables.
    #[arg(long, default_value_t = 10)]
    pub render_stride: usize,
    /// Abort on a missing or corrupt frame instead of skipping it.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub calib: PathBuf,
    pub frames_dir: Option<PathBuf>,
    pub output: PathBuf,
    pub settings: EngineSettings,
    pub range: FrameRange,
    pub render_stride: usize,
    pub strict: bool,
}

impl Args {
    pub fn into_config(self) -> CliConfig {
        let mut settings = EngineSettings::default();
        settings.backend = match self.backend {
            BackendArg::Dense => Backend::Dense,
            BackendArg::Hash => Backend::Hash,
        };
        settings.use_swapping = self.swap == Switch::On;
        settings.tracker.tracker_type = match self.tracker {
            TrackerArg::Icp => TrackerType::Icp,
            TrackerArg::Color => TrackerType::Color,
            TrackerArg::IcpRen => TrackerType::IcpRen,
        };
        if settings.tracker.tracker_type == TrackerType::Color {
            // the colour tracker needs voxel colours
            settings.voxel_type = VoxelType::ShortRgb;
        }
        if let Some(v) = self.voxel_size {
            settings.scene.voxel_size = v;
        }
        if let Some(mu) = self.mu {
            settings.scene.mu = mu;
        }
        if let Some(b) = self.swap_buffer {
            settings.swap.budget = b;
        }
        CliConfig {
            calib: self.calib,
            frames_dir: self.frames_dir,
            output: self.output,
            settings,
            range: self.range.unwrap_or_default(),
            render_stride: self.render_stride,
            strict: self.strict,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("calibration {path}: {source}")]
    Calibration {
        path: PathBuf,
        source: CalibrationError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("frame {index}: {message}")]
    Frame { index: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Frame indices found in a directory.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrameListing {
    /// Indices with both images.
    pub paired: Vec<usize>,
    /// Indices with only one of the two images.
    pub unpaired: Vec<usize>,
    pub rgb_count: usize,
    pub depth_count: usize,
}

/// Index of a `NNNN.ext` file name (at least four digits).
fn frame_index(name: &str, ext: &str) -> Option<usize> {
    let stem = name.strip_suffix(ext)?.strip_suffix('.')?;
    (stem.len() >= 4 && stem.bytes().all(|b| b.is_ascii_digit()))
        .then(|| stem.parse().ok())
        .flatten()
}

pub fn list_frames(dir: &Path) -> Result<FrameListing, CliError> {
    let mut rgb = BTreeSet::new();
    let mut depth = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(i) = frame_index(name, "ppm") {
            rgb.insert(i);
        } else if let Some(i) = frame_index(name, "pgm") {
            depth.insert(i);
        }
    }
    Ok(FrameListing {
        paired: rgb.intersection(&depth).copied().collect(),
        unpaired: rgb.symmetric_difference(&depth).copied().collect(),
        rgb_count: rgb.len(),
        depth_count: depth.len(),
    })
}

pub fn frame_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf) {
    (dir.join(format!("{index:04}.ppm")), dir.join(format!("{index:04}.pgm")))
}

#[derive(Debug, Clone, Serialize)]
struct PoseRecord {
    /// Row-major world-to-camera rotation.
    rotation: [f64; 9],
    translation: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        let r = &p.rotation;
        Self {
            rotation: std::array::from_fn(|i| r[(i / 3, i % 3)]),
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct TrackingRecord {
    status: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pairs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
struct SwapRecord {
    swapped_in: usize,
    swapped_out: usize,
    pending_in: usize,
    bytes_in: u64,
    bytes_out: u64,
}

impl From<&SwapMetrics> for SwapRecord {
    fn from(m: &SwapMetrics) -> Self {
        Self {
            swapped_in: m.swapped_in,
            swapped_out: m.swapped_out,
            pending_in: m.pending_in,
            bytes_in: m.bytes_in,
            bytes_out: m.bytes_out,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct GroundTruthRecord {
    /// Camera position error in metres.
    translation_error: f64,
    rotation_error_deg: f64,
}

#[derive(Debug, Clone, Serialize)]
struct StatsRecord {
    frame: usize,
    tracking: TrackingRecord,
    pose: PoseRecord,
    requested_blocks: usize,
    allocated_blocks: usize,
    reactivated_blocks: usize,
    failed_allocations: usize,
    visible_blocks: usize,
    swap: SwapRecord,
    valid_depth: usize,
    raycast_valid: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    ground_truth: Option<GroundTruthRecord>,
}

impl StatsRecord {
    fn new(frame: usize, s: &FrameStats, truth: Option<&Pose>) -> Self {
        let tracking = match &s.tracking {
            TrackingStatus::Skipped => TrackingRecord {
                status: s.tracking.label(),
                iterations: None,
                pairs: None,
                rms: None,
                error: None,
            },
            TrackingStatus::Tracked(r) => TrackingRecord {
                status: s.tracking.label(),
                iterations: Some(r.iterations),
                pairs: Some(r.pairs),
                rms: Some(r.rms),
                error: None,
            },
            TrackingStatus::Failed(e) => TrackingRecord {
                status: s.tracking.label(),
                iterations: None,
                pairs: None,
                rms: None,
                error: Some(e.to_string()),
            },
        };
        let ground_truth = truth.map(|t| {
            let (dt, dr) = s.pose.inverse().distance_to(&t.inverse());
            GroundTruthRecord {
                translation_error: dt,
                rotation_error_deg: dr.to_degrees(),
            }
        });
        Self {
            frame,
            tracking,
            pose: PoseRecord::from(&s.pose),
            requested_blocks: s.allocation.requested,
            allocated_blocks: s.allocation.allocated,
            reactivated_blocks: s.allocation.reactivated,
            failed_allocations: s.allocation.failed,
            visible_blocks: s.allocation.visible,
            swap: SwapRecord::from(&s.swap),
            valid_depth: s.valid_depth,
            raycast_valid: s.raycast_valid,
            ground_truth,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct TimingRecord {
    frame: usize,
    conversion_ms: f64,
    tracking_ms: f64,
    allocation_ms: f64,
    integration_ms: f64,
    swapping_ms: f64,
    raycast_ms: f64,
    total_ms: f64,
}

impl TimingRecord {
    fn new(frame: usize, s: &FrameStats) -> Self {
        let t = &s.timings;
        let ms = |v: f64| v * 1e3;
        Self {
            frame,
            conversion_ms: ms(t.conversion),
            tracking_ms: ms(t.tracking),
            allocation_ms: ms(t.allocation),
            integration_ms: ms(t.integration),
            swapping_ms: ms(t.swapping),
            raycast_ms: ms(t.raycast),
            total_ms: ms(t.total()),
        }
    }
}

/// Totals of a run, also written to `summary.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunSummary {
    pub synthetic: bool,
    pub processed: usize,
    pub skipped: Vec<usize>,
    pub tracking_failures: usize,
    pub renders: usize,
    pub swapped_in: usize,
    pub swapped_out: usize,
    /// Largest camera position error against ground truth (synthetic only).
    pub max_translation_error: Option<f64>,
    #[serde(skip)]
    pub seconds: f64,
}

impl RunSummary {
    pub fn line(&self, output: &Path) -> String {
        let per_frame = if self.processed > 0 {
            self.seconds * 1e3 / self.processed as f64
        } else {
            0.0
        };
        let mut s = format!(
            "{} frames processed, {} skipped, {} tracking failures, {} renders in {:.2} s ({:.1} ms/frame)",
            self.processed,
            self.skipped.len(),
            self.tracking_failures,
            self.renders,
            self.seconds,
            per_frame
        );
        if self.swapped_in + self.swapped_out > 0 {
            s += &format!(", {} blocks swapped out, {} in", self.swapped_out, self.swapped_in);
        }
        if let Some(e) = self.max_translation_error {
            s += &format!(", max position error {:.2} mm", e * 1e3);
        }
        s + &format!("; output in {}", output.display())
    }
}

struct Outputs {
    dir: PathBuf,
    stats: BufWriter<File>,
    timings: BufWriter<File>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let open = |name: &str| {
            let path = dir.join(name);
            File::create(&path).map(BufWriter::new).map_err(io_err(&path))
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            stats: open("stats.jsonl")?,
            timings: open("timings.jsonl")?,
        })
    }

    fn record(&mut self, frame: usize, stats: &FrameStats, truth: Option<&Pose>) -> Result<(), CliError> {
        write_line(&mut self.stats, &StatsRecord::new(frame, stats, truth)).map_err(io_err(&self.dir))?;
        write_line(&mut self.timings, &TimingRecord::new(frame, stats)).map_err(io_err(&self.dir))
    }

    fn render(&self, frame: usize, image: &Image2D<Rgb>) -> Result<(), CliError> {
        let path = self.dir.join(format!("render_{frame:04}.ppm"));
        save_ppm(&path, image).map_err(|e| match e {
            FormatError::Io(source) => CliError::Io { path, source },
            other => CliError::Invalid(other.to_string()),
        })
    }

    fn finish(mut self, summary: &RunSummary) -> Result<(), CliError> {
        self.stats.flush().map_err(io_err(&self.dir))?;
        self.timings.flush().map_err(io_err(&self.dir))?;
        let path = self.dir.join("summary.json");
        let mut text = serde_json::to_string_pretty(summary).expect("plain data serializes");
        text.push('\n');
        fs::write(&path, text).map_err(io_err(&path))
    }
}

fn write_line<T: Serialize>(w: &mut impl Write, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}

/// One input frame, loaded.
enum Input {
    Raw { rgb: Image2D<Rgb>, disparity: Image2D<u16> },
    Synthetic { view: voxfuse_core::view::View, truth: Pose },
}

fn load_frame(dir: &Path, index: usize, calib: &Calibration) -> Result<Input, String> {
    let (rgb_path, depth_path) = frame_paths(dir, index);
    let rgb = load_ppm(&rgb_path).map_err(|e| format!("{}: {e}", rgb_path.display()))?;
    let disparity = load_pgm16(&depth_path).map_err(|e| format!("{}: {e}", depth_path.display()))?;
    let (dw, dh) = (calib.depth.width as usize, calib.depth.height as usize);
    if disparity.width() != dw || disparity.height() != dh {
        return Err(format!(
            "depth image is {}x{}, calibration expects {dw}x{dh}",
            disparity.width(),
            disparity.height()
        ));
    }
    Ok(Input::Raw { rgb, disparity })
}

/// Camera poses of the synthetic sequence: a full circle around the demo
/// scene.
pub fn synthetic_poses() -> Vec<Pose> {
    orbit_poses(SYNTHETIC_FRAMES, Scene::demo_target(), 1.4, 0.5, 0.0, std::f64::consts::TAU)
}

/// Runs the whole sequence. The calibration is read before anything is
/// written, so a bad calibration leaves no output directory behind.
pub fn run(config: &CliConfig) -> Result<RunSummary, CliError> {
    let started = Instant::now();
    let calib = Calibration::load(&config.calib).map_err(|source| CliError::Calibration {
        path: config.calib.clone(),
        source,
    })?;
    let frames: Vec<usize> = match &config.frames_dir {
        Some(dir) => {
            let listing = list_frames(dir)?;
            if listing.rgb_count != listing.depth_count || !listing.unpaired.is_empty() {
                log::warn!(
                    "{} colour and {} depth images; unpaired indices {:?}",
                    listing.rgb_count,
                    listing.depth_count,
                    listing.unpaired
                );
            }
            let mut all: Vec<usize> = listing.paired.iter().chain(&listing.unpaired).copied().collect();
            all.sort_unstable();
            all
        }
        None => (0..SYNTHETIC_FRAMES).collect(),
    };
    let frames: Vec<usize> = frames.into_iter().filter(|&i| config.range.contains(i)).collect();

    let mut engine = AnyEngine::new(config.settings, calib)?;
    let mut outputs = Outputs::create(&config.output)?;
    if engine.settings().use_swapping {
        engine.use_file_store(&config.output.join("host_blocks.bin"))?;
    }
    let scene = config.frames_dir.is_none().then(Scene::demo);
    let truth = synthetic_poses();
    let mut summary = RunSummary {
        synthetic: scene.is_some(),
        ..Default::default()
    };

    for index in frames {
        let input = match &scene {
            Some(scene) => Ok(Input::Synthetic {
                view: render_view(scene, &calib, &truth[index]),
                truth: truth[index],
            }),
            None => load_frame(config.frames_dir.as_deref().expect("recorded mode"), index, &calib),
        };
        let input = match input {
            Ok(i) => i,
            Err(message) if config.strict => return Err(CliError::Frame { index, message }),
            Err(message) => {
                log::warn!("skipping frame {index}: {message}");
                summary.skipped.push(index);
                continue;
            }
        };
        let (stats, truth) = match input {
            Input::Raw { rgb, disparity } => (engine.process_frame(Some(&rgb), &disparity)?, None),
            Input::Synthetic { view, truth } => {
                // the first synthetic frame is anchored at its true pose so
                // that stats compare directly against the orbit
                let anchor = (engine.frames_processed() == 0).then_some(truth);
                (engine.process_view(view, anchor)?, Some(truth))
            }
        };
        outputs.record(index, &stats, truth.as_ref())?;
        if matches!(stats.tracking, TrackingStatus::Failed(_)) {
            summary.tracking_failures += 1;
        }
        if let Some(t) = truth {
            let (dt, _) = stats.pose.inverse().distance_to(&t.inverse());
            summary.max_translation_error = Some(summary.max_translation_error.map_or(dt, |m| m.max(dt)));
        }
        if config.render_stride > 0 && summary.processed.is_multiple_of(config.render_stride) {
            if let Some(image) = engine.get_image(ImageMode::Raycast) {
                outputs.render(index, &image)?;
                summary.renders += 1;
            }
        }
        summary.processed += 1;
    }

    if let Some(totals) = engine.swap_totals() {
        let flushed = engine.flush_swap()?;
        summary.swapped_out = totals.swapped_out;
        summary.swapped_in = totals.swapped_in + flushed.iter().map(|m| m.swapped_in).sum::<usize>();
    }
    summary.seconds = started.elapsed().as_secs_f64();
    outputs.finish(&summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_range_parsing() {
        assert_eq!("3..7".parse::<FrameRange>().unwrap(), FrameRange { start: 3, end: Some(7) });
        assert_eq!("5..".parse::<FrameRange>().unwrap(), FrameRange { start: 5, end: None });
        assert_eq!("..4".parse::<FrameRange>().unwrap(), FrameRange { start: 0, end: Some(4) });
        assert!("7..3".parse::<FrameRange>().is_err());
        assert!("7".parse::<FrameRange>().is_err());
        assert!("a..3".parse::<FrameRange>().is_err());
        let r = FrameRange { start: 2, end: Some(4) };
        assert!(!r.contains(1) && r.contains(2) && r.contains(3) && !r.contains(4));
    }

    #[test]
    fn frame_names() {
        assert_eq!(frame_index("0000.ppm", "ppm"), Some(0));
        assert_eq!(frame_index("0123.pgm", "pgm"), Some(123));
        assert_eq!(frame_index("12345.pgm", "pgm"), Some(12345));
        assert_eq!(frame_index("123.pgm", "pgm"), None);
        assert_eq!(frame_index("0123.pgm", "ppm"), None);
        assert_eq!(frame_index("a123.ppm", "ppm"), None);
        assert_eq!(frame_index("0123ppm", "ppm"), None);
    }

    #[test]
    fn args_map_to_settings() {
        let args = Args::parse_from([
            "voxfuse",
            "calib.txt",
            "frames",
            "--backend",
            "dense",
            "--swap",
            "on",
            "--tracker",
            "color",
            "--voxel-size",
            "0.01",
            "--mu",
            "0.05",
            "--swap-buffer",
            "8",
            "--frames",
            "2..9",
            "--strict",
        ]);
        let c = args.into_config();
        assert_eq!(c.frames_dir.as_deref(), Some(Path::new("frames")));
        assert_eq!(c.settings.backend, Backend::Dense);
        assert!(c.settings.use_swapping);
        assert_eq!(c.settings.tracker.tracker_type, TrackerType::Color);
        assert_eq!(c.settings.voxel_type, VoxelType::ShortRgb);
        assert_eq!(c.settings.scene.voxel_size, 0.01);
        assert_eq!(c.settings.scene.mu, 0.05);
        assert_eq!(c.settings.swap.budget, 8);
        assert_eq!(c.range, FrameRange { start: 2, end: Some(9) });
        assert!(c.strict);

        let c = Args::parse_from(["voxfuse", "calib.txt", "--tracker", "icp+ren"]).into_config();
        assert_eq!(c.settings.tracker.tracker_type, TrackerType::IcpRen);
        assert!(c.frames_dir.is_none());
        assert!(!c.settings.use_swapping);
    }
}
