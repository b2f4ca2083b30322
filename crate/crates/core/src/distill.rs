//! Pseudo-label teachers, auxiliary heads, and the auxiliary losses.
//!
//! Scene labels are one class per segment. Human labels are binary
//! person/background masks at frame resolution; the loss compares them
//! against per-pixel logits at final-feature resolution after a
//! nearest-neighbor downsample.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat, Luma, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{fnv1a, normal_init, EntryKind, ParamStore, Session};
use crate::tensor::{Scalar, Tensor};

/// Row-major binary mask; every cell is 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    cells: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::shape("mask cells", &[height * width], &[cells.len()]));
        }
        if cells.iter().any(|&c| c > 1) {
            return Err(Error::Validation("mask cells must be 0 or 1".into()));
        }
        Ok(BinaryMask { height, width, cells })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let cells = (0..height * width).map(|i| f(i / width, i % width) as u8).collect();
        BinaryMask { height, width, cells }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.cells[y * self.width + x] == 1
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.cells.iter().map(|&c| c as f64).sum::<f64>() / self.cells.len().max(1) as f64
    }

    /// Nearest-neighbor resample to `h × w` (pixel centers).
    pub fn downsample(&self, h: usize, w: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |i, j| {
            let y = ((i as f64 + 0.5) * self.height as f64 / h as f64) as usize;
            let x = ((j as f64 + 0.5) * self.width as f64 / w as f64) as usize;
            self.get(y.min(self.height - 1), x.min(self.width - 1))
        })
    }

    pub fn to_labels(&self) -> Vec<usize> {
        self.cells.iter().map(|&c| c as usize).collect()
    }

    /// 8-bit grayscale PNG with values {0, 255}.
    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let img = GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        });
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::decode("mask png", e.to_string()))?;
        Ok(out.into_inner())
    }

    /// Decodes a PNG and thresholds at 128; rejects values other than 0 and 255.
    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)
            .map_err(|e| Error::decode("mask png", e.to_string()))?
            .into_luma8();
        let (w, h) = img.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::decode("mask png", "empty image"));
        }
        let mut cells = Vec::with_capacity((w * h) as usize);
        for p in img.pixels() {
            match p.0[0] {
                0 => cells.push(0),
                255 => cells.push(1),
                v => return Err(Error::decode("mask png", format!("pixel value {v} is not 0 or 255"))),
            }
        }
        Ok(BinaryMask {
            height: h as usize,
            width: w as usize,
            cells,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabelRecord {
    pub video_id: String,
    pub segment_index: usize,
    pub scene_class: usize,
    pub human_mask: BinaryMask,
}

/// Everything a teacher may look at for one segment.
pub struct SegmentQuery<'a> {
    pub video_id: &'a str,
    pub segment_index: usize,
    /// Latent scene factor, when the dataset generator knows it.
    pub scene_hint: Option<u64>,
    /// The segment's representative frame.
    pub frame: &'a RgbImage,
}

pub trait TeacherProvider {
    fn label(&self, query: &SegmentQuery<'_>) -> Result<PseudoLabelRecord>;
}

/// Deterministic stand-in for the scene and human-parsing teachers.
#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    pub seed: u64,
    pub k_scene: usize,
}

pub fn synthetic_teacher(seed: u64, k_scene: usize) -> SyntheticTeacher {
    SyntheticTeacher { seed, k_scene }
}

/// Pixels the synthetic generator paints as the actor.
fn is_actor_pixel(p: &image::Rgb<u8>) -> bool {
    let [r, g, b] = p.0;
    r > 150 && g < 90 && b < 90
}

const MIN_FOREGROUND: f64 = 0.2;
const MAX_FOREGROUND: f64 = 0.6;

impl SyntheticTeacher {
    fn scene_class(&self, q: &SegmentQuery<'_>) -> usize {
        match q.scene_hint {
            Some(s) => (s % self.k_scene as u64) as usize,
            None => {
                (fnv1a(q.video_id.as_bytes()) ^ self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)) as usize % self.k_scene
            }
        }
    }

    /// A full-width band around the actor's centroid row, sized so the
    /// foreground fraction stays in range.
    fn actor_band(frame: &RgbImage) -> Option<BinaryMask> {
        let (w, h) = (frame.width() as usize, frame.height() as usize);
        let (mut sum_y, mut n) = (0usize, 0usize);
        let (mut top, mut bottom) = (h, 0);
        for (_, y, p) in frame.enumerate_pixels() {
            if is_actor_pixel(p) {
                sum_y += y as usize;
                n += 1;
                top = top.min(y as usize);
                bottom = bottom.max(y as usize);
            }
        }
        if n == 0 {
            return None;
        }
        let center = sum_y as f64 / n as f64;
        let lo = (MIN_FOREGROUND * h as f64).ceil() as usize;
        let hi = (MAX_FOREGROUND * h as f64).floor() as usize;
        let band = (bottom + 1 - top).clamp(lo, hi);
        let start = (center - band as f64 / 2.0).round().clamp(0.0, (h - band) as f64) as usize;
        Some(BinaryMask::from_fn(h, w, |y, _| y >= start && y < start + band))
    }

    /// Thresholded sum of a few random low-frequency cosines. The threshold
    /// is a quantile of the field, so the foreground fraction is set exactly.
    fn pattern(&self, q: &SegmentQuery<'_>) -> BinaryMask {
        let (w, h) = (q.frame.width() as usize, q.frame.height() as usize);
        let key =
            self.seed ^ fnv1a(q.video_id.as_bytes()) ^ (q.segment_index as u64).wrapping_mul(0xff51_afd7_ed55_8ccd);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let waves: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.5..2.5) * std::f64::consts::TAU / w as f64,
                    rng.random_range(0.5..2.5) * std::f64::consts::TAU / h as f64,
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let fraction = rng.random_range(MIN_FOREGROUND + 0.02..MAX_FOREGROUND - 0.02);
        let field: Vec<f64> = (0..w * h)
            .map(|i| {
                let (y, x) = ((i / w) as f64, (i % w) as f64);
                waves.iter().map(|(fx, fy, ph)| (fx * x + fy * y + ph).cos()).sum()
            })
            .collect();
        let mut order: Vec<usize> = (0..field.len()).collect();
        order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
        let k = (fraction * field.len() as f64).round() as usize;
        let mut cells = vec![0u8; field.len()];
        for &i in &order[..k] {
            cells[i] = 1;
        }
        BinaryMask {
            height: h,
            width: w,
            cells,
        }
    }
}

impl TeacherProvider for SyntheticTeacher {
    fn label(&self, q: &SegmentQuery<'_>) -> Result<PseudoLabelRecord> {
        let human_mask = Self::actor_band(q.frame).unwrap_or_else(|| self.pattern(q));
        Ok(PseudoLabelRecord {
            video_id: q.video_id.to_string(),
            segment_index: q.segment_index,
            scene_class: self.scene_class(q),
            human_mask,
        })
    }
}

/// One line of the label-cache manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelManifestRow {
    pub video_id: String,
    pub segment_index: usize,
    pub scene_class: usize,
    /// Mask path relative to the manifest's directory.
    pub mask: String,
}

pub const LABEL_MANIFEST: &str = "labels.jsonl";

pub fn parse_label_manifest(text: &str) -> Result<Vec<LabelManifestRow>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::decode("label manifest", format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Serves records from a label cache on disk.
#[derive(Debug, Clone)]
pub struct FileTeacher {
    records: HashMap<(String, usize), PseudoLabelRecord>,
}

pub fn file_teacher(manifest_path: &Path, k_scene: usize) -> Result<FileTeacher> {
    FileTeacher::open(manifest_path, k_scene)
}

impl FileTeacher {
    pub fn open(manifest_path: &Path, k_scene: usize) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut records = HashMap::new();
        for row in parse_label_manifest(&text)? {
            if row.scene_class >= k_scene {
                return Err(Error::Validation(format!(
                    "{} segment {}: scene class {} out of range for {k_scene} classes",
                    row.video_id, row.segment_index, row.scene_class
                )));
            }
            let path = root.join(&row.mask);
            let bytes =
                fs::read(&path).map_err(|e| Error::Data(format!("cannot read mask {}: {e}", path.display())))?;
            let human_mask =
                BinaryMask::decode_png(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let key = (row.video_id.clone(), row.segment_index);
            let rec = PseudoLabelRecord {
                video_id: row.video_id,
                segment_index: row.segment_index,
                scene_class: row.scene_class,
                human_mask,
            };
            if records.insert(key, rec).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate label row in {}",
                    manifest_path.display()
                )));
            }
        }
        Ok(FileTeacher { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, video_id: &str, segment_index: usize) -> Option<&PseudoLabelRecord> {
        self.records.get(&(video_id.to_string(), segment_index))
    }

    pub fn records(&self) -> impl Iterator<Item = &PseudoLabelRecord> {
        self.records.values()
    }
}

impl TeacherProvider for FileTeacher {
    fn label(&self, q: &SegmentQuery<'_>) -> Result<PseudoLabelRecord> {
        let rec = self.get(q.video_id, q.segment_index).ok_or_else(|| {
            Error::Data(format!(
                "no pseudo-label for {} segment {}",
                q.video_id, q.segment_index
            ))
        })?;
        let (w, h) = (q.frame.width() as usize, q.frame.height() as usize);
        if rec.human_mask.height() != h || rec.human_mask.width() != w {
            return Err(Error::shape(
                format!("mask for {} segment {}", q.video_id, q.segment_index),
                &[h, w],
                &[rec.human_mask.height(), rec.human_mask.width()],
            ));
        }
        Ok(rec.clone())
    }
}

fn mask_file_name(video_id: &str, segment_index: usize) -> String {
    let safe: String = video_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("masks/{safe}_seg{segment_index}.png")
}

/// Writes `bytes` to `path` via a sibling temporary file and a rename,
/// unless the file already holds exactly these bytes. Returns whether a
/// write happened.
pub fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if fs::read(path).map(|old| old == bytes).unwrap_or(false) {
        return Ok(false);
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(true)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheWriteStats {
    pub records: usize,
    pub files_written: usize,
}

/// Writes a label cache: one mask PNG per record plus the manifest.
/// Records are sorted by (video_id, segment_index); unchanged files are
/// left alone, so an interrupted run resumes and a repeated run writes
/// nothing.
pub fn write_label_cache(dir: &Path, records: &[PseudoLabelRecord]) -> Result<CacheWriteStats> {
    let mut sorted: BTreeMap<(&str, usize), &PseudoLabelRecord> = BTreeMap::new();
    for r in records {
        if sorted.insert((r.video_id.as_str(), r.segment_index), r).is_some() {
            return Err(Error::Validation(format!(
                "duplicate record for {} segment {}",
                r.video_id, r.segment_index
            )));
        }
    }
    let mut stats = CacheWriteStats::default();
    let mut manifest = String::new();
    for r in sorted.values() {
        let rel = mask_file_name(&r.video_id, r.segment_index);
        if write_if_changed(&dir.join(&rel), &r.human_mask.encode_png()?)? {
            stats.files_written += 1;
        }
        let row = LabelManifestRow {
            video_id: r.video_id.clone(),
            segment_index: r.segment_index,
            scene_class: r.scene_class,
            mask: rel,
        };
        manifest.push_str(&serde_json::to_string(&row).expect("row serializes"));
        manifest.push('\n');
        stats.records += 1;
    }
    if write_if_changed(&dir.join(LABEL_MANIFEST), manifest.as_bytes())? {
        stats.files_written += 1;
    }
    Ok(stats)
}

/// Classifier weights start small so initial logits are near uniform.
pub const HEAD_INIT_STD: f64 = 0.01;

/// Registers a linear classifier `{prefix}/weight [d, k]`, `{prefix}/bias [k]`.
pub fn register_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    k: usize,
    seed: u64,
) -> Result<()> {
    let name = format!("{prefix}/weight");
    store.insert(
        &name,
        EntryKind::Param,
        normal_init(&[d, k], HEAD_INIT_STD, seed, &name),
    )?;
    store.insert(format!("{prefix}/bias"), EntryKind::Param, Tensor::zeros(&[k]))?;
    Ok(())
}

/// `x · W + b` for `x: [B, d]`.
pub fn linear<T: Scalar>(s: &mut Session<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let w = s.param(&format!("{prefix}/weight"))?;
    let b = s.param(&format!("{prefix}/bias"))?;
    let y = s.tape.matmul(x, w, false)?;
    s.tape.channel_bias(y, b)
}

pub const SCENE_HEAD: &str = "heads/scene";
pub const HUMAN_HEAD: &str = "heads/human";

/// Per-segment scene logits `[B, k_scene]` from pooled scene features `[B, d]`.
pub fn scene_head<T: Scalar>(s: &mut Session<'_, T>, scene_pooled: Var) -> Result<Var> {
    linear(s, SCENE_HEAD, scene_pooled)
}

/// Registers the 1×1 human-parsing classifier `[2, d, 1, 1]` plus bias.
pub fn register_human_head<T: Scalar>(store: &mut ParamStore<T>, d: usize, seed: u64) -> Result<()> {
    let name = format!("{HUMAN_HEAD}/weight");
    store.insert(
        &name,
        EntryKind::Param,
        normal_init(&[2, d, 1, 1], HEAD_INIT_STD, seed, &name),
    )?;
    store.insert(format!("{HUMAN_HEAD}/bias"), EntryKind::Param, Tensor::zeros(&[2]))?;
    Ok(())
}

/// Per-pixel person/background logits `[B, 2, h, w]`.
pub fn human_head<T: Scalar>(s: &mut Session<'_, T>, human_fm: Var) -> Result<Var> {
    let y = s.conv(HUMAN_HEAD, human_fm, 1, 0)?;
    let b = s.param(&format!("{HUMAN_HEAD}/bias"))?;
    s.tape.channel_bias(y, b)
}

/// Mean softmax cross-entropy over segments.
pub fn scene_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    if tape.shape(logits).len() != 2 {
        return Err(Error::shape("scene logits rank", &[2], &[tape.shape(logits).len()]));
    }
    tape.cross_entropy(logits, labels)
}

/// Mean over segments of the per-pixel mean binary cross-entropy. Masks at
/// another resolution are nearest-downsampled to the logit grid first.
pub fn human_loss<T: Scalar>(tape: &mut Tape<T>, pixel_logits: Var, masks: &[BinaryMask]) -> Result<Var> {
    let shape = tape.shape(pixel_logits).to_vec();
    if shape.len() != 4 || shape[1] != 2 {
        return Err(Error::shape("human logits", &[masks.len(), 2, 0, 0], &shape));
    }
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    if masks.len() != b {
        return Err(Error::shape("human masks batch", &[b], &[masks.len()]));
    }
    let mut labels = Vec::with_capacity(b * h * w);
    for m in masks {
        if m.height() == h && m.width() == w {
            labels.extend(m.cells().iter().map(|&c| c as usize));
        } else {
            labels.extend(m.downsample(h, w).cells().iter().map(|&c| c as usize));
        }
    }
    let flat = tape.reshape(pixel_logits, &[b, 2, h * w])?;
    tape.cross_entropy(flat, &labels)
}
