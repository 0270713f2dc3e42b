//! Class activation maps: the classifier's weights applied to the spatial
//! feature maps that enter global average pooling, upsampled to frame
//! resolution and checked against event masks.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{LayerSpec, ModelState, NnError};
use crate::pnm::{encode_ppm, write_file, PnmError};
use crate::synthdata::{Dataset, Mask};
use crate::tensor::Tensor;
use crate::trainer::batch_tensor;
use crate::types::{FrameRef, Label};

#[derive(Debug, Error)]
pub enum CamError {
    #[error("{weights} weights for {channels} feature channels")]
    LengthMismatch { weights: usize, channels: usize },
    #[error("feature maps must be K × h × w, got shape {0:?}")]
    BadFeatureShape(Vec<usize>),
    #[error("unsupported architecture: {0}")]
    Unsupported(String),
    #[error("class index {0} is not 0 or 1")]
    BadClass(usize),
    #[error("cannot upsample {from:?} to the smaller {to:?}")]
    TargetTooSmall { from: (usize, usize), to: (usize, usize) },
    #[error("map is {map:?} but the mask is {mask}×{mask}")]
    DimensionMismatch { map: (usize, usize), mask: usize },
    #[error("event mask is empty")]
    EmptyMask,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Pnm(#[from] PnmError),
}

pub type Result<T> = std::result::Result<T, CamError>;

/// A real-valued map over a `height × width` grid, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationMap {
    pub frame: FrameRef,
    pub class: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ActivationMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// `(x, y)` of the largest value; the first in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best % self.width, best / self.width)
    }

    /// Rows of comma-separated values, full precision.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.values.chunks(self.width) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Weighted channel sum of one `K × h × w` stack of feature maps.
pub fn compute_cam(feature_maps: &[f64], shape: &[usize], weights: &[f64]) -> Result<Vec<f64>> {
    let [k, h, w] = shape else {
        return Err(CamError::BadFeatureShape(shape.to_vec()));
    };
    if feature_maps.len() != k * h * w {
        return Err(CamError::BadFeatureShape(shape.to_vec()));
    }
    if weights.len() != *k {
        return Err(CamError::LengthMismatch {
            weights: weights.len(),
            channels: *k,
        });
    }
    let plane = h * w;
    let mut out = vec![0.0; plane];
    for (map, &wk) in feature_maps.chunks(plane).zip(weights) {
        for (o, &f) in out.iter_mut().zip(map) {
            *o += wk * f;
        }
    }
    Ok(out)
}

/// Per-channel weights relating the pooled features to `class` (1 =
/// positive, 0 = negative). Through an embedding head the linear parts are
/// composed and the head's activation is ignored.
pub fn effective_weights(model: &ModelState, class: usize) -> Result<Vec<f64>> {
    let sign = match class {
        1 => 1.0,
        0 => -1.0,
        c => return Err(CamError::BadClass(c)),
    };
    let gap = model.global_pool_index().map_err(|e| CamError::Unsupported(e.to_string()))?;
    let ci = model.classifier_index().map_err(|e| CamError::Unsupported(e.to_string()))?;
    let (v, _) = model.classifier()?;
    let layers = model.layers();
    let params = model.params();
    let weights = match &layers[gap + 1..ci] {
        [] => v.to_vec(),
        [LayerSpec::Dense { in_dim, out_dim }, LayerSpec::Relu] | [LayerSpec::Dense { in_dim, out_dim }] => {
            let head = params[gap + 1][0].data();
            (0..*in_dim)
                .map(|k| (0..*out_dim).map(|j| head[j * in_dim + k] * v[j]).sum())
                .collect()
        }
        other => {
            let names: Vec<&str> = other.iter().map(LayerSpec::name).collect();
            return Err(CamError::Unsupported(format!(
                "expected pooling, an optional dense head and the classifier, found {names:?} in between"
            )));
        }
    };
    Ok(weights.into_iter().map(|w| sign * w).collect())
}

/// Bilinear resampling with corners aligned: source corner values land on
/// target corners exactly.
pub fn upsample(map: &ActivationMap, height: usize, width: usize) -> Result<ActivationMap> {
    if height < map.height || width < map.width {
        return Err(CamError::TargetTooSmall {
            from: (map.height, map.width),
            to: (height, width),
        });
    }
    let coord = |i: usize, n: usize, src: usize| -> (usize, usize, f64) {
        if n == 1 || src == 1 {
            return (0, 0, 0.0);
        }
        let t = i as f64 * (src - 1) as f64 / (n - 1) as f64;
        let lo = (t.floor() as usize).min(src - 2);
        (lo, lo + 1, t - lo as f64)
    };
    let mut values = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = coord(y, height, map.height);
        for x in 0..width {
            let (x0, x1, fx) = coord(x, width, map.width);
            let top = map.get(x0, y0) * (1.0 - fx) + map.get(x1, y0) * fx;
            let bottom = map.get(x0, y1) * (1.0 - fx) + map.get(x1, y1) * fx;
            values.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(ActivationMap {
        height,
        width,
        values,
        ..map.clone()
    })
}

/// Whether the map's peak lies within `dilation` pixels (Euclidean,
/// inclusive) of a mask pixel.
pub fn localization_hit(map: &ActivationMap, mask: &Mask, dilation: usize) -> Result<bool> {
    if map.height != mask.size() || map.width != mask.size() {
        return Err(CamError::DimensionMismatch {
            map: (map.height, map.width),
            mask: mask.size(),
        });
    }
    if mask.area() == 0 {
        return Err(CamError::EmptyMask);
    }
    let (px, py) = map.argmax();
    let reach = (dilation * dilation) as i64;
    Ok(mask.pixels().any(|(x, y)| {
        let dx = x as i64 - px as i64;
        let dy = y as i64 - py as i64;
        dx * dx + dy * dy <= reach
    }))
}

/// Blends the min-max normalised map as a red layer 50/50 onto the frame
/// (`c × s × s`, values in [0, 1]) and returns interleaved RGB bytes.
pub fn overlay_rgb(frame: &Tensor, map: &ActivationMap) -> Result<Vec<u8>> {
    let shape = frame.shape();
    if shape.len() != 3 || shape[0] != 3 || shape[1] != map.height || shape[2] != map.width {
        return Err(CamError::DimensionMismatch {
            map: (map.height, map.width),
            mask: shape.get(1).copied().unwrap_or(0),
        });
    }
    let lo = map.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let plane = map.height * map.width;
    let px = frame.data();
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut rgb = Vec::with_capacity(plane * 3);
    for (i, &m) in map.values.iter().enumerate() {
        let heat = if span > 0.0 { (m - lo) / span } else { 0.0 };
        rgb.push(byte(0.5 * px[i] + 0.5 * heat));
        rgb.push(byte(0.5 * px[plane + i]));
        rgb.push(byte(0.5 * px[2 * plane + i]));
    }
    Ok(rgb)
}

pub fn export_overlay(frame: &Tensor, map: &ActivationMap, path: &Path) -> Result<()> {
    let rgb = overlay_rgb(frame, map)?;
    write_file(path, &encode_ppm(map.width, map.height, &rgb))?;
    Ok(())
}

/// Feature-resolution maps for `class` on each frame.
pub fn frame_cams(model: &ModelState, dataset: &Dataset, frames: &[FrameRef], class: usize) -> Result<Vec<ActivationMap>> {
    let weights = effective_weights(model, class)?;
    let mut out = Vec::with_capacity(frames.len());
    for chunk in frames.chunks(64) {
        let acts = model.forward(&batch_tensor(dataset, chunk, None))?;
        let maps = model.feature_maps(&acts)?;
        let shape = &maps.shape()[1..];
        for (i, &frame) in chunk.iter().enumerate() {
            let values = compute_cam(maps.item(i), shape, &weights)?;
            out.push(ActivationMap {
                frame,
                class,
                height: shape[1],
                width: shape[2],
                values,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub frame: FrameRef,
    pub peak: (usize, usize),
    pub hit: bool,
}

/// Upsamples the positive-class map of each positive frame and checks its
/// peak against the frame's event mask.
pub fn localize(
    model: &ModelState,
    dataset: &Dataset,
    frames: &[FrameRef],
    dilation: usize,
) -> Result<Vec<LocalizationRecord>> {
    let size = dataset.store.frame_size();
    let maps = frame_cams(model, dataset, frames, 1)?;
    maps.iter()
        .map(|m| {
            let up = upsample(m, size, size)?;
            let mask = dataset
                .manifest
                .event_of(m.frame)
                .and_then(|e| dataset.manifest.event(e))
                .and_then(|e| e.mask_for(m.frame.frame_index))
                .filter(|_| dataset.manifest.label(m.frame) == Some(Label::Positive))
                .ok_or(CamError::EmptyMask)?;
            Ok(LocalizationRecord {
                frame: m.frame,
                peak: up.argmax(),
                hit: localization_hit(&up, mask, dilation)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, values: Vec<f64>) -> ActivationMap {
        ActivationMap {
            frame: FrameRef::new(0, 0),
            class: 1,
            height: h,
            width: w,
            values,
        }
    }

    #[test]
    fn single_channel_unit_weight_is_identity() {
        let f = vec![0.5, -1.0, 2.0, 3.0];
        assert_eq!(compute_cam(&f, &[1, 2, 2], &[1.0]).unwrap(), f);
        assert_eq!(compute_cam(&f, &[1, 2, 2], &[0.0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn weight_length_checked() {
        let err = compute_cam(&[0.0; 8], &[2, 2, 2], &[1.0]).unwrap_err();
        assert!(matches!(err, CamError::LengthMismatch { weights: 1, channels: 2 }));
    }

    #[test]
    fn upsample_conventions() {
        let c = upsample(&map(2, 2, vec![0.7; 4]), 5, 7).unwrap();
        assert!(c.values.iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let m = map(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let u = upsample(&m, 9, 9).unwrap();
        assert_eq!((u.get(0, 0), u.get(8, 0), u.get(0, 8), u.get(8, 8)), (1.0, 2.0, 3.0, 4.0));
        let rows = upsample(&map(2, 2, vec![0.0, 0.0, 1.0, 1.0]), 3, 3).unwrap();
        assert_eq!(rows.get(1, 1), 0.5);
        assert!(matches!(upsample(&m, 1, 4), Err(CamError::TargetTooSmall { .. })));
    }

    fn square_mask(size: usize, x0: usize, y0: usize, side: usize) -> Mask {
        let mut bits = vec![false; size * size];
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                bits[y * size + x] = true;
            }
        }
        Mask::new(size, bits)
    }

    fn peak_at(size: usize, x: usize, y: usize) -> ActivationMap {
        let mut v = vec![0.0; size * size];
        v[y * size + x] = 1.0;
        map(size, size, v)
    }

    #[test]
    fn hit_rules() {
        let mask = square_mask(16, 6, 6, 3);
        assert!(localization_hit(&peak_at(16, 7, 7), &mask, 2).unwrap());
        assert!(!localization_hit(&peak_at(16, 15, 15), &mask, 2).unwrap());
        assert!(localization_hit(&peak_at(16, 10, 7), &mask, 2).unwrap());
        assert!(!localization_hit(&peak_at(16, 11, 7), &mask, 2).unwrap());
        assert!(matches!(
            localization_hit(&peak_at(16, 0, 0), &Mask::empty(16), 2),
            Err(CamError::EmptyMask)
        ));
    }

    #[test]
    fn zero_map_overlay_dims_frame() {
        let frame = Tensor::new(vec![3, 2, 2], (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        let rgb = overlay_rgb(&frame, &map(2, 2, vec![0.0; 4])).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                let expected = (0.5 * frame.data()[c * 4 + i] * 255.0).round() as u8;
                assert_eq!(rgb[i * 3 + c], expected);
            }
        }
    }
}
