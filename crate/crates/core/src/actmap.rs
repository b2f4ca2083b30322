//! Per-branch activation heatmaps: the channel mean of each branch's final
//! feature map, min-max scaled to 8 bits and upsampled to the frame size.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma};

use crate::distill::write_if_changed;
use crate::error::{Error, Result};
use crate::netcore::{ForwardOptions, Model};
use crate::params::Mode;
use crate::pipeline::{center_frames, load_frame, render_view, FrameSpec, VideoRecord, ViewGeometry};
use crate::tensor::{Scalar, Tensor};

pub struct ActivationMap {
    pub branch: &'static str,
    pub segment: usize,
    pub image: GrayImage,
}

impl ActivationMap {
    pub fn file_name(&self) -> String {
        format!("{}_seg{}.png", self.branch, self.segment)
    }
}

/// Min-max scaling to `[0, 1]`; a constant map becomes 0.5.
pub fn normalize(values: &[f64]) -> Vec<f32> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range.is_nan() || range <= 1e-12 {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| ((v - lo) / range) as f32).collect()
}

/// Bilinear upsampling of a `[h, w]` map in `[0, 1]` to `width × height`
/// 8-bit grayscale.
pub fn render_heatmap(map: &[f32], h: usize, w: usize, width: u32, height: u32) -> GrayImage {
    let small: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, map.to_vec()).expect("map has h·w values");
    let big = imageops::resize(&small, width, height, FilterType::Triangle);
    GrayImage::from_fn(width, height, |x, y| {
        Luma([(big.get_pixel(x, y).0[0].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Channel mean of each map in a `[B, C, h, w]` tensor, as `B` planes.
fn channel_means<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let [b, c, h, w] = [t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]];
    let plane = h * w;
    (0..b)
        .map(|i| {
            let mut acc = vec![0.0; plane];
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for (a, v) in acc.iter_mut().zip(&t.data()[off..off + plane]) {
                    *a += v.as_f64() / c as f64;
                }
            }
            acc
        })
        .collect()
}

/// Heatmaps for every branch the model has, at the center frame of each
/// segment. Each frame is fed whole (resized, not cropped) so the map covers
/// the full frame.
pub fn activation_maps<T: Scalar>(
    model: &Model<T>,
    video: &VideoRecord,
    base_hw: [usize; 2],
) -> Result<Vec<ActivationMap>> {
    let cfg = model.config();
    if video.frame_count() == 0 {
        return Err(Error::Data(format!("video {} has no frames", video.video_id)));
    }
    let spec = FrameSpec {
        base_hw,
        input_hw: cfg.input_hw,
    };
    let full = ViewGeometry {
        x: 0,
        y: 0,
        width: base_hw[1] as u32,
        height: base_hw[0] as u32,
        flip: false,
    };
    let idx = center_frames(video.frame_count(), cfg.n_seg);
    let mut data = Vec::new();
    let mut sizes = Vec::new();
    for &f in &idx {
        let frame = load_frame(&video.frame_paths[f])?;
        sizes.push(frame.dimensions());
        data.extend_from_slice(render_view::<T>(&frame, &spec, &full).data());
    }
    let [h, w] = cfg.input_hw;
    let frames = Tensor::new(&[idx.len(), 3, h, w], data)?;

    let mut s = model.session(Mode::Eval);
    let x = s.tape.constant(frames);
    let stem = model.forward_stem(&mut s, x)?;
    let opts = ForwardOptions {
        scene_head: true,
        human_head: true,
    };
    let stages = model.forward_branches(&mut s, stem, opts)?;
    let last = stages.last().expect("at least one private stage");
    let mut out = Vec::new();
    for (branch, var) in [
        ("action", Some(last.action)),
        ("scene", last.scene),
        ("human", last.human),
    ] {
        let Some(v) = var else { continue };
        let t = s.tape.value(v);
        let (fh, fw) = (t.shape()[2], t.shape()[3]);
        for (segment, plane) in channel_means(t).iter().enumerate() {
            let (width, height) = sizes[segment];
            out.push(ActivationMap {
                branch,
                segment,
                image: render_heatmap(&normalize(plane), fh, fw, width, height),
            });
        }
    }
    Ok(out)
}

/// Writes each map as `{branch}_seg{i}.png` under `dir`; returns the paths.
pub fn write_maps(dir: &Path, maps: &[ActivationMap]) -> Result<Vec<std::path::PathBuf>> {
    let mut paths = Vec::new();
    for m in maps {
        let mut bytes = Vec::new();
        m.image
            .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|e| Error::Validation(format!("encoding heatmap: {e}")))?;
        let p = dir.join(m.file_name());
        write_if_changed(&p, &bytes)?;
        paths.push(p);
    }
    Ok(paths)
}
