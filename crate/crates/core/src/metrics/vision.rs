use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel rectangle of one pedal indicator in the console UI.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

fn mean_color(img: &RgbImage, roi: &Roi) -> [f64; 3] {
    let mut sum = [0.0; 3];
    for y in roi.y..roi.y + roi.height {
        for x in roi.x..roi.x + roi.width {
            let p = img.get_pixel(x, y).0;
            for c in 0..3 {
                sum[c] += p[c] as f64;
            }
        }
    }
    let n = (roi.width * roi.height) as f64;
    sum.map(|s| s / n)
}

fn dist2(a: [f64; 3], b: [u8; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c] as f64).powi(2)).sum()
}

/// Pressed/not-pressed series per ROI from UI indicator colors.
///
/// Each frame's mean ROI color is assigned to the nearer reference (ties go
/// to off). A change of state is accepted only when the following frame
/// agrees, so single-frame flicker holds the previous state.
pub fn extract_pedal_gt_from_frames(
    frames: &[RgbImage],
    rois: &[Roi],
    on_color: [u8; 3],
    off_color: [u8; 3],
) -> Result<Vec<Vec<u8>>> {
    if on_color == off_color {
        return Err(Error::invalid("on and off reference colors are equal"));
    }
    for f in frames {
        for r in rois {
            let inside = r.width > 0
                && r.height > 0
                && r.x.checked_add(r.width).is_some_and(|e| e <= f.width())
                && r.y.checked_add(r.height).is_some_and(|e| e <= f.height());
            if !inside {
                return Err(Error::invalid(format!(
                    "ROI {r:?} outside {}x{} frame",
                    f.width(),
                    f.height()
                )));
            }
        }
    }
    Ok(rois
        .iter()
        .map(|roi| {
            let raw: Vec<u8> = frames
                .iter()
                .map(|f| {
                    let m = mean_color(f, roi);
                    u8::from(dist2(m, on_color) < dist2(m, off_color))
                })
                .collect();
            let mut out = Vec::with_capacity(raw.len());
            for i in 0..raw.len() {
                let state = match out.last() {
                    None => raw[0],
                    Some(&prev) if raw[i] != prev && raw.get(i + 1) == Some(&raw[i]) => raw[i],
                    Some(&prev) => prev,
                };
                out.push(state);
            }
            out
        })
        .collect())
}
