//! Datasets on disk, segment sampling, augmentation, the multi-view
//! inference protocol, and a procedural dataset generator.
//!
//! A dataset is a directory holding `manifest.jsonl` plus one directory of
//! PNG frames per video. Frame `i` of a video lives at `{dir}/{i:05}.png`.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{write_if_changed, BinaryMask, PseudoLabelRecord, SegmentQuery, TeacherProvider};
use crate::error::{Error, Result};
use crate::params::keyed_rng;
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST: &str = "manifest.jsonl";
pub const SCALES: [f64; 4] = [1.0, 0.875, 0.75, 0.66];
pub const NORM_MEAN: f64 = 0.5;
pub const NORM_STD: f64 = 0.25;
pub const VIEWS_PER_SEGMENT: usize = 10;
pub const EVAL_SEGMENTS: usize = 25;
/// Upper bound on frames per manifest row.
pub const MAX_FRAMES: usize = 1 << 20;

/// One line of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    pub video_id: String,
    /// Frame directory relative to the manifest.
    pub dir: String,
    pub frames: usize,
    pub label: usize,
    /// Latent scene factor of generated videos.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene_factor: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoRecord {
    pub video_id: String,
    pub frame_paths: Vec<PathBuf>,
    pub action_label: usize,
    pub scene_factor: Option<u64>,
}

impl VideoRecord {
    pub fn frame_count(&self) -> usize {
        self.frame_paths.len()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub videos: Vec<VideoRecord>,
}

pub fn frame_file(i: usize) -> String {
    format!("{i:05}.png")
}

pub fn parse_manifest(text: &str, root: &Path) -> Result<Vec<VideoRecord>> {
    let mut out: Vec<VideoRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = serde_json::from_str(line)
            .map_err(|e| Error::decode("dataset manifest", format!("line {}: {e}", i + 1)))?;
        if row.frames == 0 {
            return Err(Error::Data(format!("video {} has no frames", row.video_id)));
        }
        if row.frames > MAX_FRAMES {
            return Err(Error::Data(format!(
                "video {}: {} frames exceeds {MAX_FRAMES}",
                row.video_id, row.frames
            )));
        }
        if Path::new(&row.dir).is_absolute() || row.dir.split(['/', '\\']).any(|c| c == "..") {
            return Err(Error::Data(format!(
                "video {}: directory must be relative and inside the dataset",
                row.video_id
            )));
        }
        if out.iter().any(|v| v.video_id == row.video_id) {
            return Err(Error::Data(format!("duplicate video id {}", row.video_id)));
        }
        let dir = root.join(&row.dir);
        out.push(VideoRecord {
            video_id: row.video_id,
            frame_paths: (0..row.frames).map(|f| dir.join(frame_file(f))).collect(),
            action_label: row.label,
            scene_factor: row.scene_factor,
        });
    }
    Ok(out)
}

impl Dataset {
    /// Reads `manifest.jsonl` from a dataset directory, or a manifest file
    /// given directly.
    pub fn open(path: &Path) -> Result<Self> {
        let manifest = if path.is_dir() {
            path.join(MANIFEST)
        } else {
            path.to_path_buf()
        };
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let videos = parse_manifest(&text, &root)?;
        if videos.is_empty() {
            return Err(Error::Data(format!("{} lists no videos", manifest.display())));
        }
        Ok(Dataset { root, videos })
    }

    pub fn check_labels(&self, k_action: usize) -> Result<()> {
        match self.videos.iter().find(|v| v.action_label >= k_action) {
            Some(v) => Err(Error::Validation(format!(
                "video {} has label {} but the model has {k_action} action classes",
                v.video_id, v.action_label
            ))),
            None => Ok(()),
        }
    }
}

pub fn load_frame(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::Data(format!("cannot decode frame {}: {e}", path.display())))?
        .into_rgb8())
}

/// `[start, end)` of segment `i` when `t` frames are split into `n`
/// near-equal parts; the remainder goes to the last segments.
pub fn segment_range(t: usize, n: usize, i: usize) -> (usize, usize) {
    let (base, rem) = (t / n, t % n);
    let extra_before = i.saturating_sub(n - rem);
    let start = i * base + extra_before;
    let len = base + usize::from(i >= n - rem);
    (start, start + len)
}

/// One uniformly drawn frame index per segment.
pub fn sample_train_segments(video: &VideoRecord, n_seg: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    let t = video.frame_count();
    if t < n_seg {
        return Err(Error::Data(format!(
            "video {} has {t} frames, fewer than the {n_seg} segments",
            video.video_id
        )));
    }
    Ok((0..n_seg)
        .map(|i| {
            let (s, e) = segment_range(t, n_seg, i);
            rng.random_range(s..e)
        })
        .collect())
}

/// Deterministic center frame of each of `n` uniform segments; clamps for
/// videos shorter than `n`.
pub fn center_frames(t: usize, n: usize) -> Vec<usize> {
    (0..n)
        .map(|i| (((i as f64 + 0.5) * t as f64 / n as f64) as usize).min(t.saturating_sub(1)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CropPosition {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
    Center,
}

impl CropPosition {
    pub const ALL: [CropPosition; 5] = [
        CropPosition::TopLeft,
        CropPosition::TopRight,
        CropPosition::BottomLeft,
        CropPosition::BottomRight,
        CropPosition::Center,
    ];

    fn offset(self, outer: (u32, u32), inner: (u32, u32)) -> (u32, u32) {
        let (dx, dy) = (outer.0 - inner.0, outer.1 - inner.1);
        match self {
            CropPosition::TopLeft => (0, 0),
            CropPosition::TopRight => (dx, 0),
            CropPosition::BottomLeft => (0, dy),
            CropPosition::BottomRight => (dx, dy),
            CropPosition::Center => (dx / 2, dy / 2),
        }
    }
}

/// Crop rectangle in base-size frame coordinates plus horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewGeometry {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    pub flip: bool,
}

/// Geometry of the frame before cropping: frames are first resized to
/// `base_hw`, crops are then resized to `input_hw`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSpec {
    pub base_hw: [usize; 2],
    pub input_hw: [usize; 2],
}

impl FrameSpec {
    fn resize_to_base(&self, frame: &RgbImage) -> RgbImage {
        let [bh, bw] = self.base_hw;
        if frame.dimensions() == (bw as u32, bh as u32) {
            frame.clone()
        } else {
            imageops::resize(frame, bw as u32, bh as u32, FilterType::Triangle)
        }
    }

    fn base_dims(&self) -> (u32, u32) {
        (self.base_hw[1] as u32, self.base_hw[0] as u32)
    }
}

/// Crops, flips, resizes to `input_hw` and normalizes to `[3, H, W]`.
pub fn render_view<T: Scalar>(frame: &RgbImage, spec: &FrameSpec, g: &ViewGeometry) -> Tensor<T> {
    let base = spec.resize_to_base(frame);
    let crop = imageops::crop_imm(&base, g.x, g.y, g.width, g.height).to_image();
    let [h, w] = spec.input_hw;
    let mut img = if crop.dimensions() == (w as u32, h as u32) {
        crop
    } else {
        imageops::resize(&crop, w as u32, h as u32, FilterType::Triangle)
    };
    if g.flip {
        imageops::flip_horizontal_in_place(&mut img);
    }
    to_tensor(&img)
}

/// `(x / 255 - mean) / std`, channel-major.
pub fn to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            let v = (p.0[c] as f64 / 255.0 - NORM_MEAN) / NORM_STD;
            data[(c * h + y as usize) * w + x as usize] = T::cast_from(v);
        }
    }
    Tensor::new(&[3, h, w], data).expect("sized above")
}

/// Random multiscale crop geometry: crop sides are the base short side
/// times a scale from [`SCALES`], with width and height scale indices at
/// most one step apart.
pub fn random_geometry(spec: &FrameSpec, rng: &mut impl Rng) -> ViewGeometry {
    let (bw, bh) = spec.base_dims();
    let short = bw.min(bh) as f64;
    let sides: Vec<u32> = SCALES.iter().map(|s| ((short * s) as u32).max(1)).collect();
    let pairs: Vec<(u32, u32)> = (0..SCALES.len())
        .flat_map(|i| (0..SCALES.len()).map(move |j| (i, j)))
        .filter(|(i, j)| i.abs_diff(*j) <= 1)
        .map(|(i, j)| (sides[j], sides[i]))
        .collect();
    let (cw, ch) = pairs[rng.random_range(0..pairs.len())];
    let pos = CropPosition::ALL[rng.random_range(0..5)];
    let flip = rng.random_bool(0.5);
    let (x, y) = pos.offset((bw, bh), (cw, ch));
    ViewGeometry {
        x,
        y,
        width: cw,
        height: ch,
        flip,
    }
}

/// Training augmentation of one frame; returns the tensor and the geometry
/// used, so the same transform can be applied to its label mask.
pub fn train_augment<T: Scalar>(frame: &RgbImage, spec: &FrameSpec, rng: &mut impl Rng) -> (Tensor<T>, ViewGeometry) {
    let g = random_geometry(spec, rng);
    (render_view(frame, spec, &g), g)
}

/// Resamples a frame-resolution mask through a view geometry onto an
/// `h × w` grid (nearest neighbor at cell centers).
pub fn crop_mask(mask: &BinaryMask, spec: &FrameSpec, g: &ViewGeometry, h: usize, w: usize) -> BinaryMask {
    let (bw, bh) = spec.base_dims();
    let sy = mask.height() as f64 / bh as f64;
    let sx = mask.width() as f64 / bw as f64;
    BinaryMask::from_fn(h, w, |i, j| {
        let fy = (i as f64 + 0.5) / h as f64;
        let mut fx = (j as f64 + 0.5) / w as f64;
        if g.flip {
            fx = 1.0 - fx;
        }
        let yb = g.y as f64 + fy * g.height as f64;
        let xb = g.x as f64 + fx * g.width as f64;
        let ym = ((yb * sy) as usize).min(mask.height() - 1);
        let xm = ((xb * sx) as usize).min(mask.width() - 1);
        mask.get(ym, xm)
    })
}

/// The ten test views of one frame: five crop positions, each followed by
/// its mirror image. Crops have the network input size (clamped to the base
/// frame).
pub fn ten_crop_geometry(spec: &FrameSpec) -> [ViewGeometry; VIEWS_PER_SEGMENT] {
    let (bw, bh) = spec.base_dims();
    let (cw, ch) = ((spec.input_hw[1] as u32).min(bw), (spec.input_hw[0] as u32).min(bh));
    std::array::from_fn(|v| {
        let (x, y) = CropPosition::ALL[v / 2].offset((bw, bh), (cw, ch));
        ViewGeometry {
            x,
            y,
            width: cw,
            height: ch,
            flip: v % 2 == 1,
        }
    })
}

pub fn center_geometry(spec: &FrameSpec) -> ViewGeometry {
    ten_crop_geometry(spec)[8]
}

#[derive(Debug, Clone)]
pub struct ViewBatch<T> {
    /// `[V, 3, H, W]`, segment-major then view index.
    pub frames: Tensor<T>,
    pub frame_indices: Vec<usize>,
    pub geometry: Vec<ViewGeometry>,
}

impl<T: Scalar> ViewBatch<T> {
    pub fn len(&self) -> usize {
        self.geometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.geometry.is_empty()
    }
}

fn stack<T: Scalar>(views: Vec<Tensor<T>>, spec: &FrameSpec) -> Tensor<T> {
    let [h, w] = spec.input_hw;
    let n = views.len();
    let mut data = Vec::with_capacity(n * 3 * h * w);
    for v in views {
        data.extend_from_slice(v.data());
    }
    Tensor::new(&[n, 3, h, w], data).expect("views share a shape")
}

/// The multi-view test batch: `n_eval_seg` center frames, ten views each.
pub fn inference_views<T: Scalar>(video: &VideoRecord, n_eval_seg: usize, spec: &FrameSpec) -> Result<ViewBatch<T>> {
    let idx = center_frames(video.frame_count(), n_eval_seg);
    let geo = ten_crop_geometry(spec);
    let mut views = Vec::with_capacity(idx.len() * VIEWS_PER_SEGMENT);
    let mut geometry = Vec::with_capacity(views.capacity());
    for &f in &idx {
        let frame = load_frame(&video.frame_paths[f])?;
        for g in &geo {
            views.push(render_view(&frame, spec, g));
            geometry.push(*g);
        }
    }
    Ok(ViewBatch {
        frames: stack(views, spec),
        frame_indices: idx,
        geometry,
    })
}

/// `n_seg` center crops of the segment center frames.
pub fn fast_views<T: Scalar>(video: &VideoRecord, n_seg: usize, spec: &FrameSpec) -> Result<ViewBatch<T>> {
    let idx = center_frames(video.frame_count(), n_seg);
    let g = center_geometry(spec);
    let mut views = Vec::new();
    for &f in &idx {
        views.push(render_view(&load_frame(&video.frame_paths[f])?, spec, &g));
    }
    Ok(ViewBatch {
        frames: stack(views, spec),
        geometry: vec![g; idx.len()],
        frame_indices: idx,
    })
}

/// Segment consensus: views are averaged within each segment, windows of
/// `window` consecutive segments (stride 1) are averaged, and the window
/// predictions are averaged. `view_logits` is `[segments, views, K]`.
pub fn consensus(view_logits: &Tensor<f64>, window: usize) -> Result<Vec<f64>> {
    let s = view_logits.shape();
    if s.len() != 3 || s[0] == 0 || s[1] == 0 {
        return Err(Error::shape("view logits", &[EVAL_SEGMENTS, VIEWS_PER_SEGMENT, 0], s));
    }
    let (n_seg, n_view, k) = (s[0], s[1], s[2]);
    if window == 0 || window > n_seg {
        return Err(Error::config(
            "eval.window",
            format!("window {window} must be in 1..={n_seg}"),
        ));
    }
    let d = view_logits.data();
    let seg: Vec<Vec<f64>> = (0..n_seg)
        .map(|i| {
            (0..k)
                .map(|c| (0..n_view).map(|v| d[(i * n_view + v) * k + c]).sum::<f64>() / n_view as f64)
                .collect()
        })
        .collect();
    let n_win = n_seg - window + 1;
    let mut out = vec![0.0; k];
    for w in 0..n_win {
        for c in 0..k {
            let win: f64 = seg[w..w + window].iter().map(|r| r[c]).sum::<f64>() / window as f64;
            out[c] += win / n_win as f64;
        }
    }
    Ok(out)
}

/// Parameters of the procedural dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    pub frame_hw: [usize; 2],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_classes: 4,
            videos_per_class: 8,
            frames_per_video: 16,
            frame_hw: [64, 80],
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Number of distinct actor trajectories; classes are
    /// `trajectory + n_traj · scene`.
    pub fn n_traj(&self) -> usize {
        (self.n_classes as f64).sqrt().ceil() as usize
    }

    pub fn n_scenes(&self) -> usize {
        self.n_classes.div_ceil(self.n_traj())
    }

    pub fn factors(&self, class: usize) -> (usize, usize) {
        (class % self.n_traj(), class / self.n_traj())
    }
}

pub const ACTOR: Rgb<u8> = Rgb([220, 30, 30]);
const ACTOR_RADIUS: f64 = 5.0;

/// Renders one video. The actor (a red disc) moves horizontally in a band
/// fixed by the trajectory factor; the background is a striped texture
/// whose orientation is fixed by the scene factor.
fn render_video(spec: &SynthSpec, video_id: &str, class: usize) -> Vec<RgbImage> {
    let (traj, scene) = spec.factors(class);
    let [h, w] = spec.frame_hw;
    let mut rng = keyed_rng(spec.seed, video_id, 0);
    let theta = scene as f64 * std::f64::consts::PI / spec.n_scenes() as f64;
    let period = 10.0 + rng.random_range(0.0..4.0);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.85..1.0));
    let band_y = (traj + 1) as f64 / (spec.n_traj() + 1) as f64 * h as f64 + rng.random_range(-2.0..2.0);
    let speed = rng.random_range(1.5..3.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let x0 = rng.random_range(ACTOR_RADIUS..w as f64 - ACTOR_RADIUS);
    let span = w as f64 - 2.0 * ACTOR_RADIUS;
    (0..spec.frames_per_video)
        .map(|t| {
            // bounce between the walls
            let mut u = (x0 - ACTOR_RADIUS + speed * t as f64).rem_euclid(2.0 * span);
            if u > span {
                u = 2.0 * span - u;
            }
            let cx = ACTOR_RADIUS + u;
            let cy = band_y + (t as f64 * 0.7).sin();
            RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let (xf, yf) = (x as f64, y as f64);
                if (xf - cx).powi(2) + (yf - cy).powi(2) <= ACTOR_RADIUS * ACTOR_RADIUS {
                    return ACTOR;
                }
                let s = ((xf * theta.cos() + yf * theta.sin()) * std::f64::consts::TAU / period + phase).sin();
                let noise = rng.random_range(-12.0..12.0);
                let g = 110.0 + 60.0 * s + noise;
                Rgb(std::array::from_fn(|c| (g * tint[c]).clamp(0.0, 255.0) as u8))
            })
        })
        .collect()
}

pub fn synth_video_id(class: usize, index: usize) -> String {
    format!("c{class:02}_v{index:03}")
}

/// Writes the procedural dataset under `out_dir` and returns its manifest
/// rows. Identical specs produce identical bytes; files already holding the
/// right bytes are not rewritten.
pub fn synth_dataset(out_dir: &Path, spec: &SynthSpec) -> Result<Vec<ManifestRow>> {
    if spec.n_classes == 0 || spec.videos_per_class == 0 || spec.frames_per_video == 0 {
        return Err(Error::config(
            "synthdata",
            "classes, videos per class and frames must be positive",
        ));
    }
    let [h, w] = spec.frame_hw;
    if h < 4 * ACTOR_RADIUS as usize || w < 4 * ACTOR_RADIUS as usize {
        return Err(Error::config("frame_hw", "frames must be at least 20×20"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::new();
    for class in 0..spec.n_classes {
        for v in 0..spec.videos_per_class {
            let id = synth_video_id(class, v);
            let rel = format!("videos/{id}");
            for (t, frame) in render_video(spec, &id, class).iter().enumerate() {
                let mut bytes = std::io::Cursor::new(Vec::new());
                frame
                    .write_to(&mut bytes, image::ImageFormat::Png)
                    .map_err(|e| Error::decode("frame png", e.to_string()))?;
                write_if_changed(&out_dir.join(&rel).join(frame_file(t)), bytes.get_ref())?;
            }
            rows.push(ManifestRow {
                video_id: id,
                dir: rel,
                frames: spec.frames_per_video,
                label: class,
                scene_factor: Some(spec.factors(class).1 as u64),
            });
        }
    }
    let mut text = String::new();
    for r in &rows {
        text.push_str(&serde_json::to_string(r).expect("row serializes"));
        text.push('\n');
    }
    write_if_changed(&out_dir.join(MANIFEST), text.as_bytes())?;
    Ok(rows)
}

/// Asks `teacher` for one record per video per segment, using the
/// segment's center frame.
pub fn pseudo_label_dataset(
    dataset: &Dataset,
    teacher: &dyn TeacherProvider,
    n_seg: usize,
) -> Result<Vec<PseudoLabelRecord>> {
    let mut out = Vec::with_capacity(dataset.videos.len() * n_seg);
    for v in &dataset.videos {
        if v.frame_count() == 0 {
            return Err(Error::Data(format!("video {} has no frames", v.video_id)));
        }
        for (seg, f) in center_frames(v.frame_count(), n_seg).into_iter().enumerate() {
            let frame = load_frame(&v.frame_paths[f])?;
            out.push(teacher.label(&SegmentQuery {
                video_id: &v.video_id,
                segment_index: seg,
                scene_hint: v.scene_factor,
                frame: &frame,
            })?);
        }
    }
    Ok(out)
}
