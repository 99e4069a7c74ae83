//! Landmark sets, the canonical mean shape, and conversions between
//! landmarks and per-landmark response maps (binary disks for detection,
//! Gaussian heatmaps for regression), plus the sub-pixel decode.

use crate::config::ModelConfig;
use crate::error::{AlignError, Result};
use crate::tensor::Tensor4;

/// Number of coarse landmarks in the canonical table.
pub const COARSE_COUNT: usize = 7;
/// Number of fine landmarks in the canonical table.
pub const FINE_COUNT: usize = 18;
/// First fine landmark id.
pub const FINE_BASE: u16 = 7;

/// Canonical 25-point mean shape in normalized `[0,1]^2` coordinates.
/// Coarse ids 0-6: four eye corners (left outer, left inner, right inner,
/// right outer), nose tip, mouth left/right corner. Fine ids 7-24: two
/// 4-point eye contours, a 6-point mouth contour and 4 jaw points.
pub const MEAN_SHAPE: [(f64, f64); COARSE_COUNT + FINE_COUNT] = [
    // coarse
    (0.30, 0.40),
    (0.42, 0.40),
    (0.58, 0.40),
    (0.70, 0.40),
    (0.50, 0.56),
    (0.37, 0.70),
    (0.63, 0.70),
    // left eye contour: TL, TR, BR, BL
    (0.33, 0.375),
    (0.39, 0.375),
    (0.39, 0.425),
    (0.33, 0.425),
    // right eye contour: TL, TR, BR, BL
    (0.61, 0.375),
    (0.67, 0.375),
    (0.67, 0.425),
    (0.61, 0.425),
    // mouth contour: TL, TM, TR, BR, BM, BL
    (0.43, 0.675),
    (0.50, 0.665),
    (0.57, 0.675),
    (0.57, 0.735),
    (0.50, 0.75),
    (0.43, 0.735),
    // jaw: upper-left, lower-left, lower-right, upper-right
    (0.24, 0.60),
    (0.34, 0.84),
    (0.66, 0.84),
    (0.76, 0.60),
];

/// Horizontal-mirror id relabeling (an involution).
pub const HFLIP_ID_MAP: [u16; COARSE_COUNT + FINE_COUNT] = [
    3, 2, 1, 0, 4, 6, 5, // coarse
    12, 11, 14, 13, // left eye -> right eye (TL<->TR, BR<->BL mirrored)
    8, 7, 10, 9, // right eye -> left eye
    17, 16, 15, 20, 19, 18, // mouth
    24, 23, 22, 21, // jaw
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkPoint {
    pub id: u16,
    pub x: f64,
    pub y: f64,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LandmarkSet {
    pub points: Vec<LandmarkPoint>,
}

impl LandmarkSet {
    pub fn from_xy(ids: impl IntoIterator<Item = u16>, xy: &[(f64, f64)]) -> Self {
        let points = ids
            .into_iter()
            .zip(xy)
            .map(|(id, &(x, y))| LandmarkPoint {
                id,
                x,
                y,
                low_confidence: false,
            })
            .collect();
        LandmarkSet { points }
    }

    pub fn get(&self, id: u16) -> Option<&LandmarkPoint> {
        self.points.iter().find(|p| p.id == id)
    }

    pub fn select(&self, ids: &[u16]) -> LandmarkSet {
        LandmarkSet {
            points: ids
                .iter()
                .filter_map(|id| self.get(*id).copied())
                .collect(),
        }
    }

    pub fn ids(&self) -> Vec<u16> {
        self.points.iter().map(|p| p.id).collect()
    }

    /// Clamp every coordinate inside the image bounds.
    pub fn clamp_to(&mut self, h: usize, w: usize) {
        for p in &mut self.points {
            p.x = p.x.clamp(0.0, (w - 1) as f64);
            p.y = p.y.clamp(0.0, (h - 1) as f64);
        }
    }
}

/// Mean shape scaled to pixel coordinates for the configured landmark counts:
/// coarse ids `0..c_d`, fine ids `7..7+c_r`.
pub fn mean_shape_px(size: usize, c_d: usize, c_r: usize) -> LandmarkSet {
    let s = (size - 1) as f64;
    let mut points = Vec::with_capacity(c_d + c_r);
    for id in 0..c_d {
        let (x, y) = MEAN_SHAPE[id];
        points.push(LandmarkPoint {
            id: id as u16,
            x: x * s,
            y: y * s,
            low_confidence: false,
        });
    }
    for k in 0..c_r {
        let (x, y) = MEAN_SHAPE[COARSE_COUNT + k];
        points.push(LandmarkPoint {
            id: FINE_BASE + k as u16,
            x: x * s,
            y: y * s,
            low_confidence: false,
        });
    }
    LandmarkSet { points }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Binary,
    Heat,
}

/// Per-landmark confidence planes at input resolution, one channel per landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseMap {
    pub kind: MapKind,
    pub planes: Tensor4,
}

/// Binary disk map: 1 within Euclidean radius `r` of each landmark, in its
/// own channel; overlapping landmarks mark multiple channels independently.
pub fn landmarks_to_binary(lms: &LandmarkSet, r: f64, h: usize, w: usize) -> Result<ResponseMap> {
    if r < 0.0 {
        return Err(AlignError::config("binary map radius must be >= 0"));
    }
    let mut planes = Tensor4::zeros(1, lms.points.len(), h, w);
    let r2 = r * r;
    for (c, p) in lms.points.iter().enumerate() {
        let i0 = ((p.y - r).floor().max(0.0)) as usize;
        let i1 = ((p.y + r).ceil().min((h - 1) as f64)) as usize;
        let j0 = ((p.x - r).floor().max(0.0)) as usize;
        let j1 = ((p.x + r).ceil().min((w - 1) as f64)) as usize;
        if p.y + r < 0.0 || p.x + r < 0.0 || p.y - r > (h - 1) as f64 || p.x - r > (w - 1) as f64 {
            continue; // entirely outside: channel stays empty
        }
        for i in i0..=i1 {
            for j in j0..=j1 {
                let dx = j as f64 - p.x;
                let dy = i as f64 - p.y;
                if dx * dx + dy * dy <= r2 {
                    *planes.at_mut(0, c, i, j) = 1.0;
                }
            }
        }
    }
    Ok(ResponseMap {
        kind: MapKind::Binary,
        planes,
    })
}

/// Gaussian heatmap: `exp(-||p - lm||^2 / (2 sigma^2))` per channel.
pub fn landmarks_to_heat(lms: &LandmarkSet, sigma: f64, h: usize, w: usize) -> Result<ResponseMap> {
    if sigma <= 0.0 {
        return Err(AlignError::config("heatmap sigma must be positive"));
    }
    let mut planes = Tensor4::zeros(1, lms.points.len(), h, w);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for (c, p) in lms.points.iter().enumerate() {
        for i in 0..h {
            for j in 0..w {
                let dx = j as f64 - p.x;
                let dy = i as f64 - p.y;
                *planes.at_mut(0, c, i, j) = (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    Ok(ResponseMap {
        kind: MapKind::Heat,
        planes,
    })
}

/// Soft-argmax over a 5x5 window centered at the global argmax of one channel.
/// Returns `(x, y, low_confidence)`.
fn decode_channel(planes: &Tensor4, n: usize, c: usize) -> (f64, f64, bool) {
    let d = planes.dims();
    let mut best = f64::NEG_INFINITY;
    let (mut bi, mut bj) = (0usize, 0usize);
    for i in 0..d.h {
        for j in 0..d.w {
            let v = planes.at(n, c, i, j);
            if v > best {
                best = v;
                bi = i;
                bj = j;
            }
        }
    }
    if best <= 1e-12 {
        return (bj as f64, bi as f64, true);
    }
    let i0 = bi.saturating_sub(2);
    let i1 = (bi + 2).min(d.h - 1);
    let j0 = bj.saturating_sub(2);
    let j1 = (bj + 2).min(d.w - 1);
    let mut sw = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for i in i0..=i1 {
        for j in j0..=j1 {
            let v = planes.at(n, c, i, j).max(0.0);
            sw += v;
            sx += v * j as f64;
            sy += v * i as f64;
        }
    }
    if sw <= 1e-12 {
        return (bj as f64, bi as f64, true);
    }
    (
        (sx / sw).clamp(0.0, (d.w - 1) as f64),
        (sy / sw).clamp(0.0, (d.h - 1) as f64),
        false,
    )
}

/// Decode landmark coordinates from arbitrary confidence planes,
/// labelling channel `k` with `ids[k]`.
pub fn decode_planes(planes: &Tensor4, item: usize, ids: &[u16]) -> Result<LandmarkSet> {
    if ids.len() != planes.dims().c {
        return Err(AlignError::shape(format!(
            "decode_planes: {} ids for {} channels",
            ids.len(),
            planes.dims().c
        )));
    }
    let points = ids
        .iter()
        .enumerate()
        .map(|(c, &id)| {
            let (x, y, low) = decode_channel(planes, item, c);
            LandmarkPoint {
                id,
                x,
                y,
                low_confidence: low,
            }
        })
        .collect();
    Ok(LandmarkSet { points })
}

/// Decode a regression heatmap into fine landmarks (ids `7..7+C_r`).
pub fn heat_to_landmarks(map: &ResponseMap, item: usize) -> Result<LandmarkSet> {
    if map.kind != MapKind::Heat {
        return Err(AlignError::config(
            "heat_to_landmarks expects a heatmap response",
        ));
    }
    let ids: Vec<u16> = (0..map.planes.dims().c)
        .map(|k| FINE_BASE + k as u16)
        .collect();
    decode_planes(&map.planes, item, &ids)
}

/// Source for the initial spatial-recurrence map `z0`.
pub enum InitSource<'a> {
    MeanShape,
    PreviousLandmarks(&'a LandmarkSet),
}

/// Build the `C_d`-channel binary-style map that seeds the first spatial step.
pub fn make_initial_map(source: InitSource<'_>, cfg: &ModelConfig) -> Result<ResponseMap> {
    let size = cfg.input_size;
    let coarse_ids: Vec<u16> = (0..cfg.c_d as u16).collect();
    let lms = match source {
        InitSource::MeanShape => mean_shape_px(size, cfg.c_d, 0),
        InitSource::PreviousLandmarks(prev) => {
            let sel = prev.select(&coarse_ids);
            if sel.points.len() != cfg.c_d {
                return Err(AlignError::shape(format!(
                    "previous landmarks carry {} of the {} coarse ids",
                    sel.points.len(),
                    cfg.c_d
                )));
            }
            let mut sel = sel;
            sel.clamp_to(size, size);
            sel
        }
    };
    landmarks_to_binary(&lms, cfg.map_radius, size, size)
}
