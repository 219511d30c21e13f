//! Frame-by-frame orchestration of all stages.

use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;

use crate::allocation::{allocate_frame, AllocationScratch, AllocationStats, Frustum};
use crate::error::{Error, TrackingError};
use crate::index::{DenseConfig, DenseVolume, HashConfig, HashVolume, VolumeRead};
use crate::integration::{integrate_dense, integrate_hash, IntegrationInput, ProjectedImage, SceneParams};
use crate::math::{Image2D, Pose, Rgb};
use crate::raycast::{
    create_expected_depths, forward_project_points, render_maps, shade_colors, shade_normals, CastParams, RangeImage,
    RaycastMaps,
};
use crate::swap::{FileStore, GlobalCache, SwapMetrics, SwapSettings};
use crate::tracking::pyramid::{build_color_pyramid, build_depth_pyramid};
use crate::tracking::{color_track, icp_track, ren_refine, ColorTrackInput, TrackResult, TrackerSettings, TrackerType};
use crate::view::{disparity_image_to_depth, Calibration, View, DEFAULT_MAX_DEPTH};
use crate::voxel::{Voxel, VoxelF, VoxelFRgb, VoxelS, VoxelSRgb, VoxelType};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Backend {
    Dense,
    Hash,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineSettings {
    pub backend: Backend,
    pub voxel_type: VoxelType,
    /// Only meaningful for the hash backend.
    pub use_swapping: bool,
    pub swap: SwapSettings,
    pub tracker: TrackerSettings,
    pub scene: SceneParams,
    pub dense: DenseConfig,
    pub hash: HashConfig,
    pub frustum: Frustum,
    pub max_depth: f32,
}

impl Default for EngineSettings {
    fn default() -> Self {
        Self {
            backend: Backend::Hash,
            voxel_type: VoxelType::Short,
            use_swapping: false,
            swap: SwapSettings::default(),
            tracker: TrackerSettings::default(),
            scene: SceneParams::default(),
            dense: DenseConfig::default(),
            hash: HashConfig::default(),
            frustum: Frustum::default(),
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

impl EngineSettings {
    /// Checks the settings and resolves dependent values: the dense backend
    /// never swaps, and the swap fusion cap follows the integration cap.
    pub fn normalized(mut self) -> Result<Self, Error> {
        self.scene.validate().map_err(Error::Config)?;
        self.tracker.validate().map_err(Error::Config)?;
        self.hash.validate().map_err(Error::Config)?;
        if self.backend == Backend::Dense && self.use_swapping {
            log::warn!("swapping is not available with the dense backend; disabled");
            self.use_swapping = false;
        }
        if self.use_swapping && self.swap.budget == 0 {
            return Err(Error::Config("swap buffer must hold at least one block".into()));
        }
        self.swap.max_w = self.scene.max_w;
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrackingStatus {
    /// First frame, or pose supplied by the caller.
    Skipped,
    Tracked(TrackResult),
    /// The previous pose was kept.
    Failed(TrackingError),
}

impl TrackingStatus {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Skipped => "skipped",
            Self::Tracked(_) => "ok",
            Self::Failed(_) => "failed",
        }
    }
}

/// Wall time per stage in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub conversion: f64,
    pub tracking: f64,
    pub allocation: f64,
    pub integration: f64,
    pub swapping: f64,
    pub raycast: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.conversion + self.tracking + self.allocation + self.integration + self.swapping + self.raycast
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameStats {
    pub frame: usize,
    /// World to depth camera after tracking.
    pub pose: Pose,
    pub tracking: TrackingStatus,
    pub allocation: AllocationStats,
    pub swap: SwapMetrics,
    pub valid_depth: usize,
    pub raycast_valid: usize,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageMode {
    /// Shaded normals of the latest raycast.
    Raycast,
    /// Voxel colours at the latest raycast (grey shading without colour).
    RaycastColour,
    DepthColourized,
    RgbPassthrough,
}

#[allow(clippy::large_enum_variant)]
pub enum Volume<V: Voxel> {
    Dense(DenseVolume<V>),
    Hash {
        volume: HashVolume<V>,
        scratch: AllocationScratch,
        cache: Option<GlobalCache<V>>,
        visible: Vec<usize>,
    },
}

/// Runs `$body` with `$v` bound to the volume as a concrete reader.
macro_rules! with_reader {
    ($volume:expr, $v:ident => $body:expr) => {
        match $volume {
            Volume::Dense($v) => $body,
            Volume::Hash { volume: $v, .. } => $body,
        }
    };
}

pub struct Engine<V: Voxel> {
    settings: EngineSettings,
    calib: Calibration,
    volume: Volume<V>,
    pose: Pose,
    maps: Option<RaycastMaps>,
    frames: usize,
    last_view: Option<View>,
}

impl<V: Voxel> Engine<V> {
    pub fn new(settings: EngineSettings, calib: Calibration) -> Result<Self, Error> {
        let settings = settings.normalized()?;
        calib.depth.validate()?;
        calib.rgb.validate()?;
        let vs = settings.scene.voxel_size;
        let volume = match settings.backend {
            Backend::Dense => Volume::Dense(DenseVolume::new(settings.dense, vs)),
            Backend::Hash => {
                let volume = HashVolume::new(settings.hash, vs);
                let entries = volume.table().entries().len();
                Volume::Hash {
                    volume,
                    scratch: AllocationScratch::new(entries),
                    cache: settings
                        .use_swapping
                        .then(|| GlobalCache::in_memory(entries, settings.swap)),
                    visible: Vec::new(),
                }
            }
        };
        Ok(Self {
            settings,
            calib,
            volume,
            pose: Pose::identity(),
            maps: None,
            frames: 0,
            last_view: None,
        })
    }

    /// Replaces the host store used for swapping.
    pub fn set_swap_cache(&mut self, cache: GlobalCache<V>) {
        if let Volume::Hash { cache: c, .. } = &mut self.volume {
            *c = Some(cache);
        }
    }

    /// Keeps swapped-out blocks in a file at `path` instead of memory.
    /// Only effective with swapping enabled; must be called before the
    /// first frame.
    pub fn use_file_store(&mut self, path: &Path) -> Result<(), Error> {
        if let Volume::Hash { volume, cache: Some(_), .. } = &self.volume {
            let entries = volume.table().entries().len();
            let store = FileStore::<V>::create(path, entries)?;
            self.set_swap_cache(GlobalCache::new(entries, self.settings.swap, Box::new(store)));
        }
        Ok(())
    }

    pub fn settings(&self) -> &EngineSettings {
        &self.settings
    }

    pub fn calibration(&self) -> &Calibration {
        &self.calib
    }

    /// World to depth camera of the latest frame.
    pub fn pose(&self) -> &Pose {
        &self.pose
    }

    pub fn frames_processed(&self) -> usize {
        self.frames
    }

    pub fn maps(&self) -> Option<&RaycastMaps> {
        self.maps.as_ref()
    }

    pub fn volume(&self) -> &Volume<V> {
        &self.volume
    }

    pub fn hash_volume(&self) -> Option<&HashVolume<V>> {
        match &self.volume {
            Volume::Hash { volume, .. } => Some(volume),
            Volume::Dense(_) => None,
        }
    }

    pub fn dense_volume(&self) -> Option<&DenseVolume<V>> {
        match &self.volume {
            Volume::Dense(v) => Some(v),
            Volume::Hash { .. } => None,
        }
    }

    pub fn swap_cache(&self) -> Option<&GlobalCache<V>> {
        match &self.volume {
            Volume::Hash { cache, .. } => cache.as_ref(),
            Volume::Dense(_) => None,
        }
    }

    /// Reads a voxel from whichever backend is active.
    pub fn read_voxel(&self, point: Vector3<i32>) -> Option<V> {
        with_reader!(&self.volume, v => v.read_voxel(point))
    }

    /// Brings every swapped-out block back. No-op without swapping.
    pub fn flush_swap(&mut self) -> Result<Vec<SwapMetrics>, Error> {
        match &mut self.volume {
            Volume::Hash {
                volume,
                cache: Some(cache),
                ..
            } => Ok(cache.flush_all(volume)?),
            _ => Ok(Vec::new()),
        }
    }

    /// Processes a raw frame: RGB (optional) and disparity.
    pub fn process_frame(&mut self, rgb: Option<&Image2D<Rgb>>, disparity: &Image2D<u16>) -> Result<FrameStats, Error> {
        let t0 = Instant::now();
        let depth = disparity_image_to_depth(disparity, &self.calib, self.settings.max_depth);
        let conversion = t0.elapsed().as_secs_f64();
        let mut stats = self.process_view(View::new(depth, rgb.cloned()), None)?;
        stats.timings.conversion = conversion;
        Ok(stats)
    }

    /// Processes a frame whose depth is already in metres. With `pose`
    /// given, tracking is skipped and the frame is fused at that
    /// world-to-camera pose.
    pub fn process_view(&mut self, view: View, pose: Option<Pose>) -> Result<FrameStats, Error> {
        let depth_intr = self.calib.depth;
        if view.depth.width() != depth_intr.width as usize || view.depth.height() != depth_intr.height as usize {
            return Err(Error::Config(format!(
                "depth image is {}x{}, calibration expects {}x{}",
                view.depth.width(),
                view.depth.height(),
                depth_intr.width,
                depth_intr.height
            )));
        }
        let mut timings = StageTimings::default();

        let t = Instant::now();
        let tracking = match pose {
            Some(p) => {
                self.pose = p;
                TrackingStatus::Skipped
            }
            None if self.frames == 0 => TrackingStatus::Skipped,
            None => match self.track(&view) {
                Ok(r) if r.pose.is_finite() => {
                    self.pose = r.pose;
                    TrackingStatus::Tracked(r)
                }
                Ok(_) => TrackingStatus::Failed(TrackingError::Singular(f64::NAN)),
                Err(e) => {
                    log::warn!("frame {}: tracking failed, keeping previous pose: {e}", self.frames);
                    TrackingStatus::Failed(e)
                }
            },
        };
        timings.tracking = t.elapsed().as_secs_f64();

        let pose = self.pose;
        let scene = self.settings.scene;
        let rgb_pose = self.calib.depth_to_rgb().compose(&pose);
        let input = IntegrationInput {
            depth: ProjectedImage::new(&view.depth, &pose, &depth_intr),
            rgb: match (&view.rgb, V::HAS_COLOR) {
                (Some(rgb), true) => Some(ProjectedImage::new(rgb, &rgb_pose, &self.calib.rgb)),
                _ => None,
            },
        };
        let mut allocation = AllocationStats::default();
        let mut swap = SwapMetrics::default();
        let range = match &mut self.volume {
            Volume::Dense(volume) => {
                let t = Instant::now();
                integrate_dense(volume, &input, &scene);
                timings.integration = t.elapsed().as_secs_f64();
                RangeImage::uniform(
                    depth_intr.width as usize,
                    depth_intr.height as usize,
                    self.settings.frustum.near as f32,
                    self.settings.frustum.far as f32,
                )
            }
            Volume::Hash {
                volume,
                scratch,
                cache,
                visible,
            } => {
                let t = Instant::now();
                let (a, _) = allocate_frame(
                    volume,
                    &view.depth,
                    &pose,
                    &depth_intr,
                    &scene,
                    &self.settings.frustum,
                    cache.is_some(),
                    scratch,
                );
                allocation = a;
                visible.clone_from(&scratch.visible_list);
                timings.allocation = t.elapsed().as_secs_f64();

                let t = Instant::now();
                integrate_hash(volume, visible, &input, &scene);
                timings.integration = t.elapsed().as_secs_f64();

                if let Some(cache) = cache {
                    let t = Instant::now();
                    swap = cache.process_frame(volume, &pose, &depth_intr, visible)?;
                    timings.swapping = t.elapsed().as_secs_f64();
                }

                let t = Instant::now();
                let blocks: Vec<Vector3<i32>> = visible
                    .iter()
                    .filter_map(|&e| {
                        let entry = volume.table().entry(e);
                        entry.is_allocated().then(|| entry.block_pos())
                    })
                    .collect();
                let range = create_expected_depths(
                    &blocks,
                    scene.voxel_size as f64,
                    &pose,
                    &depth_intr,
                    self.settings.frustum.near,
                );
                timings.raycast = t.elapsed().as_secs_f64();
                range
            }
        };

        let t = Instant::now();
        let params = CastParams {
            voxel_size: scene.voxel_size as f64,
            mu: scene.mu as f64,
        };
        let maps = with_reader!(&self.volume, v => render_maps(v, &pose, &depth_intr, &range, &params));
        timings.raycast += t.elapsed().as_secs_f64();

        let stats = FrameStats {
            frame: self.frames,
            pose,
            tracking,
            allocation,
            swap,
            valid_depth: view.valid_depth_count(),
            raycast_valid: maps.valid_count(),
            timings,
        };
        self.maps = Some(maps);
        self.last_view = Some(view);
        self.frames += 1;
        Ok(stats)
    }

    fn track(&self, view: &View) -> Result<TrackResult, TrackingError> {
        let maps = self.maps.as_ref().ok_or(TrackingError::NoReference)?;
        if maps.valid_count() == 0 {
            return Err(TrackingError::NoReference);
        }
        let settings = &self.settings.tracker;
        let levels = settings.num_hierarchy_levels;
        match settings.tracker_type {
            TrackerType::Icp | TrackerType::IcpRen => {
                let pyramid = build_depth_pyramid(&view.depth, levels);
                let finest = if settings.tracker_type == TrackerType::IcpRen && levels > 1 { 1 } else { 0 };
                let schedule: Vec<_> = (finest..levels)
                    .rev()
                    .map(|l| (pyramid.level(l), self.calib.depth.downsampled(l), l))
                    .collect();
                let icp = icp_track(&schedule, maps, &self.pose, settings)?;
                if settings.tracker_type == TrackerType::Icp {
                    return Ok(icp);
                }
                let ren = with_reader!(&self.volume, v => ren_refine(v, &view.depth, &self.calib.depth, &icp.pose, settings))?;
                Ok(TrackResult {
                    iterations: icp.iterations + ren.iterations,
                    ..ren
                })
            }
            TrackerType::Color => {
                if !V::HAS_COLOR {
                    return Err(TrackingError::NoColour);
                }
                let rgb = view.rgb.as_ref().ok_or(TrackingError::NoColour)?;
                let cloud = with_reader!(&self.volume, v => forward_project_points(v, maps, 1));
                let pyramid = build_color_pyramid(rgb, levels);
                let input = ColorTrackInput {
                    cloud: &cloud,
                    rgb: &pyramid,
                    rgb_intrinsics: self.calib.rgb,
                    depth_to_rgb: self.calib.depth_to_rgb(),
                };
                color_track(&input, &self.pose, settings)
            }
        }
    }

    /// A visualization of the latest frame; `None` before the first frame
    /// (or without RGB for passthrough).
    pub fn get_image(&self, mode: ImageMode) -> Option<Image2D<Rgb>> {
        match mode {
            ImageMode::Raycast => self.maps.as_ref().map(shade_normals),
            ImageMode::RaycastColour => {
                let maps = self.maps.as_ref()?;
                if V::HAS_COLOR {
                    Some(with_reader!(&self.volume, v => shade_colors(v, maps)))
                } else {
                    Some(shade_normals(maps))
                }
            }
            ImageMode::DepthColourized => {
                let view = self.last_view.as_ref()?;
                Some(colourize_depth(&view.depth, self.settings.max_depth))
            }
            ImageMode::RgbPassthrough => self.last_view.as_ref()?.rgb.clone(),
        }
    }
}

/// Maps depth to a blue-to-red ramp over `[0, max_depth]`; missing depth is
/// black.
pub fn colourize_depth(depth: &Image2D<f32>, max_depth: f32) -> Image2D<Rgb> {
    depth.map(|&d| {
        if !(d > 0.0) {
            return [0, 0, 0];
        }
        let s = (d / max_depth).clamp(0.0, 1.0);
        let r = (255.0 * (1.5 - (4.0 * s - 3.0).abs()).clamp(0.0, 1.0)).round() as u8;
        let g = (255.0 * (1.5 - (4.0 * s - 2.0).abs()).clamp(0.0, 1.0)).round() as u8;
        let b = (255.0 * (1.5 - (4.0 * s - 1.0).abs()).clamp(0.0, 1.0)).round() as u8;
        [r, g, b]
    })
}

/// An engine over any of the voxel types, chosen at runtime.
#[allow(clippy::large_enum_variant)]
pub enum AnyEngine {
    Short(Engine<VoxelS>),
    Float(Engine<VoxelF>),
    ShortRgb(Engine<VoxelSRgb>),
    FloatRgb(Engine<VoxelFRgb>),
}

macro_rules! dispatch {
    ($self:expr, $e:ident => $body:expr) => {
        match $self {
            AnyEngine::Short($e) => $body,
            AnyEngine::Float($e) => $body,
            AnyEngine::ShortRgb($e) => $body,
            AnyEngine::FloatRgb($e) => $body,
        }
    };
}

impl AnyEngine {
    pub fn new(settings: EngineSettings, calib: Calibration) -> Result<Self, Error> {
        Ok(match settings.voxel_type {
            VoxelType::Short => Self::Short(Engine::new(settings, calib)?),
            VoxelType::Float => Self::Float(Engine::new(settings, calib)?),
            VoxelType::ShortRgb => Self::ShortRgb(Engine::new(settings, calib)?),
            VoxelType::FloatRgb => Self::FloatRgb(Engine::new(settings, calib)?),
        })
    }

    pub fn settings(&self) -> &EngineSettings {
        dispatch!(self, e => e.settings())
    }

    pub fn use_file_store(&mut self, path: &Path) -> Result<(), Error> {
        dispatch!(self, e => e.use_file_store(path))
    }

    pub fn frames_processed(&self) -> usize {
        dispatch!(self, e => e.frames_processed())
    }

    pub fn swap_totals(&self) -> Option<SwapMetrics> {
        dispatch!(self, e => e.swap_cache().map(|c| c.totals()))
    }

    pub fn pose(&self) -> &Pose {
        dispatch!(self, e => e.pose())
    }

    pub fn maps(&self) -> Option<&RaycastMaps> {
        dispatch!(self, e => e.maps())
    }

    pub fn process_frame(&mut self, rgb: Option<&Image2D<Rgb>>, disparity: &Image2D<u16>) -> Result<FrameStats, Error> {
        dispatch!(self, e => e.process_frame(rgb, disparity))
    }

    pub fn process_view(&mut self, view: View, pose: Option<Pose>) -> Result<FrameStats, Error> {
        dispatch!(self, e => e.process_view(view, pose))
    }

    pub fn get_image(&self, mode: ImageMode) -> Option<Image2D<Rgb>> {
        dispatch!(self, e => e.get_image(mode))
    }

    pub fn flush_swap(&mut self) -> Result<Vec<SwapMetrics>, Error> {
        dispatch!(self, e => e.flush_swap())
    }
}
