//! Synthetic face-like sequence generator with controllable identity
//! (temporal-invariant) and pose/expression (temporal-variant) factors.
//! Everything is a pure function of `(config, master seed)`.

use crate::config::{Config, ModelConfig};
use crate::engine::{ClipGt, FrameGt};
use crate::error::Result;
use crate::maps::{
    landmarks_to_binary, landmarks_to_heat, mean_shape_px, LandmarkSet, COARSE_COUNT, FINE_BASE,
    FINE_COUNT, HFLIP_ID_MAP,
};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor4;

/// Reference scale at which offsets/deformations are specified in pixels.
const REF_SIZE: f64 = 64.0;

/// Per-feature brightness profile; every stored value lies in `[0.3, 1.0]`.
/// `face` is an absolute level, `eye`/`mouth` are multiplicative darkness
/// factors and `nose` scales the highlight ridge.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityProfile {
    pub face: f64,
    pub eye: f64,
    pub mouth: f64,
    pub nose: f64,
}

/// Temporal-invariant identity factors, constant across all frames and clips.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityParams {
    pub id: u64,
    /// Per-landmark `(dx, dy)` at the reference 64 px scale.
    pub shape_offset: Vec<(f64, f64)>,
    pub texture_seed: u64,
    pub intensity_profile: IntensityProfile,
}

/// Temporal-variant pose/expression factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeState {
    pub rotation: f64,
    pub scale: f64,
    pub translation: (f64, f64),
    pub mouth_open: f64,
    pub eye_close: f64,
}

pub const ROT_LIMIT: f64 = 30.0 * std::f64::consts::PI / 180.0;
pub const SCALE_RANGE: (f64, f64) = (0.8, 1.2);
const TRANS_LIMIT: f64 = 6.0;

/// One labeled sequence: frames, landmark tracks and ground-truth maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: u64,
    pub identity: u64,
    pub frames: Vec<Tensor4>,
    pub landmarks: Vec<LandmarkSet>,
    pub gt_binary: Vec<Tensor4>,
    pub gt_heat: Vec<Tensor4>,
}

impl Clip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }
    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
    /// Ground truth in the shape the engine consumes; `label` is the
    /// classifier index of this clip's identity (not the raw id).
    pub fn gt(&self, label: Option<usize>) -> ClipGt {
        ClipGt {
            frames: self
                .gt_binary
                .iter()
                .zip(&self.gt_heat)
                .map(|(b, h)| FrameGt {
                    binary: b.clone(),
                    heat: h.clone(),
                })
                .collect(),
            identity: label,
        }
    }
}

pub fn sample_identity(rng: &mut SeededRng, id: u64) -> IdentityParams {
    let mut shape_offset = Vec::with_capacity(COARSE_COUNT + FINE_COUNT);
    for _ in 0..(COARSE_COUNT + FINE_COUNT) {
        let dx = rng.normal(0.0, 1.5).clamp(-4.0, 4.0);
        let dy = rng.normal(0.0, 1.5).clamp(-4.0, 4.0);
        shape_offset.push((dx, dy));
    }
    IdentityParams {
        id,
        shape_offset,
        texture_seed: rng.next_u64(),
        intensity_profile: IntensityProfile {
            face: rng.uniform(0.5, 0.8),
            eye: rng.uniform(0.3, 0.55),
            mouth: rng.uniform(0.3, 0.55),
            nose: rng.uniform(0.85, 1.0),
        },
    }
}

impl ShapeState {
    fn sample_initial(rng: &mut SeededRng) -> ShapeState {
        ShapeState {
            rotation: rng.uniform(-20.0, 20.0) * std::f64::consts::PI / 180.0,
            scale: rng.uniform(0.9, 1.1),
            translation: (rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)),
            mouth_open: rng.uniform(0.0, 0.6),
            eye_close: rng.uniform(0.0, 0.4),
        }
    }

    /// Clipped Gaussian random-walk step; clip bounds keep per-frame landmark
    /// displacement under the track-continuity limit.
    fn step(&self, rng: &mut SeededRng) -> ShapeState {
        let sig_rot = 2.0 * std::f64::consts::PI / 180.0;
        let d_rot = rng.normal(0.0, sig_rot).clamp(-1.75 * sig_rot, 1.75 * sig_rot);
        let d_scale = rng.normal(0.0, 0.02).clamp(-0.035, 0.035);
        let d_tx = rng.normal(0.0, 1.0).clamp(-1.4, 1.4);
        let d_ty = rng.normal(0.0, 1.0).clamp(-1.4, 1.4);
        let d_mouth = rng.normal(0.0, 0.08).clamp(-0.15, 0.15);
        let d_eye = rng.normal(0.0, 0.08).clamp(-0.15, 0.15);
        ShapeState {
            rotation: (self.rotation + d_rot).clamp(-ROT_LIMIT, ROT_LIMIT),
            scale: (self.scale + d_scale).clamp(SCALE_RANGE.0, SCALE_RANGE.1),
            translation: (
                (self.translation.0 + d_tx).clamp(-TRANS_LIMIT, TRANS_LIMIT),
                (self.translation.1 + d_ty).clamp(-TRANS_LIMIT, TRANS_LIMIT),
            ),
            mouth_open: (self.mouth_open + d_mouth).clamp(0.0, 1.0),
            eye_close: (self.eye_close + d_eye).clamp(0.0, 1.0),
        }
    }
}

/// Expression deformation at the reference scale: mouth opening displaces
/// the lower mouth downward, eye closing collapses the contour height.
fn expression_deform(id_pt: u16, base_y: f64, eye_mid_y: f64, state: &ShapeState) -> (f64, f64) {
    let mut dy = 0.0;
    match id_pt {
        18 | 20 => dy += 2.4 * state.mouth_open,
        19 => dy += 3.0 * state.mouth_open,
        5 | 6 => dy += 1.2 * state.mouth_open,
        7..=14 => {
            dy += (eye_mid_y - base_y) * state.eye_close;
        }
        _ => {}
    }
    (0.0, dy)
}

/// Landmarks for one frame: mean shape + identity offsets + expression,
/// pushed through the frame's similarity transform about the image center.
pub fn landmarks_for(
    identity: &IdentityParams,
    state: &ShapeState,
    size: usize,
    c_r: usize,
) -> LandmarkSet {
    let s_px = (size - 1) as f64 / (REF_SIZE - 1.0);
    let base = mean_shape_px(size, COARSE_COUNT, c_r);
    let eye_mid_y = 0.40 * (size - 1) as f64;
    let center = (size as f64 - 1.0) / 2.0;
    let (sin, cos) = state.rotation.sin_cos();
    let mut out = base.clone();
    for p in &mut out.points {
        let table_idx = if p.id < FINE_BASE {
            p.id as usize
        } else {
            COARSE_COUNT + (p.id - FINE_BASE) as usize
        };
        let (ox, oy) = identity.shape_offset[table_idx];
        let (ex, ey) = expression_deform(p.id, p.y, eye_mid_y, state);
        let px = p.x + ox * s_px + ex * s_px;
        let py = p.y + oy * s_px + ey * s_px;
        let (rx, ry) = (px - center, py - center);
        p.x = center + state.scale * (cos * rx - sin * ry) + state.translation.0 * s_px;
        p.y = center + state.scale * (sin * rx + cos * ry) + state.translation.1 * s_px;
    }
    out
}

/// The pose/expression trajectory of one clip (no rendering).
pub fn sample_track(rng: &mut SeededRng, t: usize) -> Vec<ShapeState> {
    let mut states = Vec::with_capacity(t);
    let mut s = ShapeState::sample_initial(rng);
    for _ in 0..t {
        states.push(s);
        s = s.step(rng);
    }
    states
}

fn put_pixel(img: &mut Tensor4, i: usize, j: usize, rgb: (f64, f64, f64), alpha: f64) {
    if alpha <= 0.0 {
        return;
    }
    let a = alpha.min(1.0);
    for (c, v) in [rgb.0, rgb.1, rgb.2].into_iter().enumerate() {
        let cur = img.at(0, c, i, j);
        *img.at_mut(0, c, i, j) = cur * (1.0 - a) + v * a;
    }
}

fn ellipse_alpha(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let d = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
    ((1.0 - d) * rx.min(ry) + 0.5).clamp(0.0, 1.0)
}

fn fill_ellipse(img: &mut Tensor4, cx: f64, cy: f64, rx: f64, ry: f64, rgb: (f64, f64, f64)) {
    let d = img.dims();
    let i0 = ((cy - ry - 1.0).floor().max(0.0)) as usize;
    let i1 = ((cy + ry + 1.0).ceil().min((d.h - 1) as f64)) as usize;
    let j0 = ((cx - rx - 1.0).floor().max(0.0)) as usize;
    let j1 = ((cx + rx + 1.0).ceil().min((d.w - 1) as f64)) as usize;
    for i in i0..=i1 {
        for j in j0..=j1 {
            let a = ellipse_alpha(j as f64, i as f64, cx, cy, rx, ry);
            put_pixel(img, i, j, rgb, a);
        }
    }
}

fn stroke(img: &mut Tensor4, a: (f64, f64), b: (f64, f64), half_width: f64, rgb: (f64, f64, f64)) {
    let d = img.dims();
    let (ax, ay) = a;
    let (bx, by) = b;
    let i0 = (ay.min(by) - half_width - 1.0).floor().max(0.0) as usize;
    let i1 = (ay.max(by) + half_width + 1.0).ceil().min((d.h - 1) as f64) as usize;
    let j0 = (ax.min(bx) - half_width - 1.0).floor().max(0.0) as usize;
    let j1 = (ax.max(bx) + half_width + 1.0).ceil().min((d.w - 1) as f64) as usize;
    let len2 = (bx - ax).powi(2) + (by - ay).powi(2);
    for i in i0..=i1 {
        for j in j0..=j1 {
            let (px, py) = (j as f64, i as f64);
            let t = if len2 == 0.0 {
                0.0
            } else {
                (((px - ax) * (bx - ax) + (py - ay) * (by - ay)) / len2).clamp(0.0, 1.0)
            };
            let (qx, qy) = (ax + t * (bx - ax), ay + t * (by - ay));
            let dist = ((px - qx).powi(2) + (py - qy).powi(2)).sqrt();
            let alpha = (half_width - dist + 0.5).clamp(0.0, 1.0);
            put_pixel(img, i, j, rgb, alpha);
        }
    }
}

fn extent(points: &[(f64, f64)]) -> (f64, f64, f64, f64) {
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for &(x, y) in points {
        min_x = min_x.min(x);
        max_x = max_x.max(x);
        min_y = min_y.min(y);
        max_y = max_y.max(y);
    }
    (min_x, max_x, min_y, max_y)
}

fn pts(lms: &LandmarkSet, ids: &[u16]) -> Vec<(f64, f64)> {
    ids.iter()
        .filter_map(|id| lms.get(*id).map(|p| (p.x, p.y)))
        .collect()
}

/// Deterministic raster of one frame: anti-aliased face ellipse carrying a
/// low-frequency identity texture, eye/mouth/nose features at the landmark
/// positions, jaw shading, then additive pixel noise from the clip rng.
pub fn render_frame(
    lms: &LandmarkSet,
    identity: &IdentityParams,
    size: usize,
    noise_std: f64,
    noise_rng: &mut SeededRng,
) -> Tensor4 {
    let s_px = (size - 1) as f64 / (REF_SIZE - 1.0);
    let mut img = Tensor4::full(1, 3, size, size, 0.0);
    // background
    for c in 0..3 {
        let level = 0.16 - 0.02 * c as f64;
        for i in 0..size {
            for j in 0..size {
                *img.at_mut(0, c, i, j) = level;
            }
        }
    }

    let prof = &identity.intensity_profile;
    let all: Vec<(f64, f64)> = lms.points.iter().map(|p| (p.x, p.y)).collect();
    let (min_x, max_x, raw_min_y, max_y) = extent(&all);
    // the landmark extent tops out at the eye line; extend it for a forehead
    let min_y = raw_min_y - 8.0 * s_px;
    let (cx, cy) = ((min_x + max_x) / 2.0, (min_y + max_y) / 2.0);
    let rx = (max_x - min_x) / 2.0 * 1.22 + 1.5 * s_px;
    let ry = (max_y - min_y) / 2.0 * 1.12 + 2.0 * s_px;

    // face with identity texture
    let mut trng = SeededRng::new(identity.texture_seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                trng.uniform(0.02, 0.05),
                trng.uniform(0.5, 2.0),
                trng.uniform(0.5, 2.0),
                trng.uniform(0.0, std::f64::consts::TAU),
            )
        })
        .collect();
    let d = img.dims();
    for i in 0..d.h {
        for j in 0..d.w {
            let a = ellipse_alpha(j as f64, i as f64, cx, cy, rx, ry);
            if a <= 0.0 {
                continue;
            }
            let mut tex = 0.0;
            for &(amp, u, v, phase) in &waves {
                tex += amp
                    * (std::f64::consts::TAU * (u * j as f64 + v * i as f64) / size as f64 + phase)
                        .sin();
            }
            let f = (prof.face + tex).clamp(0.0, 1.0);
            put_pixel(&mut img, i, j, (f, f * 0.82, f * 0.70), a);
        }
    }

    // nose ridge: from between the inner eye corners down to the tip
    if let (Some(l_in), Some(r_in), Some(tip)) = (lms.get(1), lms.get(2), lms.get(4)) {
        let top = ((l_in.x + r_in.x) / 2.0, (l_in.y + r_in.y) / 2.0 + 3.0 * s_px);
        let n = (prof.face * (1.0 + 0.45 * prof.nose)).min(1.0);
        stroke(&mut img, top, (tip.x, tip.y), 0.9 * s_px, (n, n * 0.9, n * 0.8));
    }

    // eyes: ellipse spanning the corner pair, height from the contour and
    // the corners' vertical spread (identity offsets tilt the eye line)
    let eye_rgb = {
        let e = prof.face * prof.eye;
        (e * 0.9, e * 0.95, e * 1.1)
    };
    for (corner_ids, contour_ids) in [([0u16, 1u16], [7u16, 8, 9, 10]), ([2, 3], [11, 12, 13, 14])] {
        let corners = pts(lms, &corner_ids);
        if corners.len() != 2 {
            continue;
        }
        let (cminx, cmaxx, cminy, cmaxy) = extent(&corners);
        let contour = pts(lms, &contour_ids);
        let half_h = if contour.is_empty() {
            1.6 * s_px
        } else {
            let (_, _, ciny, cmaxy2) = extent(&contour);
            ((cmaxy2 - ciny) / 2.0).max(0.25)
        };
        let ecx = (cminx + cmaxx) / 2.0;
        let ecy = (cminy + cmaxy) / 2.0;
        let erx = (cmaxx - cminx) / 2.0 + 1.1 * s_px;
        let ery = half_h.max((cmaxy - cminy) / 2.0) + 0.8 * s_px;
        fill_ellipse(&mut img, ecx, ecy, erx, ery, eye_rgb);
    }
    // corner shadows keep all four eye corners visible under any offsets
    for idc in [0u16, 1, 2, 3] {
        if let Some(p) = lms.get(idc) {
            fill_ellipse(&mut img, p.x, p.y, 1.2 * s_px, 1.0 * s_px, eye_rgb);
        }
    }

    // mouth: ellipse spanning the corner pair, height from the contour
    if let (Some(lc), Some(rc)) = (lms.get(5), lms.get(6)) {
        let contour = pts(lms, &[15, 16, 17, 18, 19, 20]);
        let half_h = if contour.is_empty() {
            2.0 * s_px
        } else {
            let (_, _, miny, maxy) = extent(&contour);
            ((maxy - miny) / 2.0).max(0.6)
        };
        let mcx = (lc.x + rc.x) / 2.0;
        let mcy = (lc.y + rc.y) / 2.0;
        let mrx = ((rc.x - lc.x).abs()) / 2.0 + 0.8 * s_px;
        let m = prof.face * prof.mouth;
        fill_ellipse(&mut img, mcx, mcy, mrx, half_h + 0.5 * s_px, ((m * 1.5).min(1.0), m * 0.6, m * 0.6));
    }

    // jaw shading anchors
    for id in [21u16, 22, 23, 24] {
        if let Some(p) = lms.get(id) {
            let f = prof.face * 0.55;
            let d = img.dims();
            let i0 = (p.y - 2.0).floor().max(0.0) as usize;
            let i1 = (p.y + 2.0).ceil().min((d.h - 1) as f64) as usize;
            let j0 = (p.x - 2.0).floor().max(0.0) as usize;
            let j1 = (p.x + 2.0).ceil().min((d.w - 1) as f64) as usize;
            for i in i0..=i1 {
                for j in j0..=j1 {
                    let dist = ((j as f64 - p.x).powi(2) + (i as f64 - p.y).powi(2)).sqrt();
                    let a = 0.35 * (1.2 * s_px - dist + 0.5).clamp(0.0, 1.0);
                    put_pixel(&mut img, i, j, (f, f * 0.82, f * 0.70), a);
                }
            }
        }
    }

    // pixel noise
    if noise_std > 0.0 {
        for v in img.data_mut() {
            *v += noise_rng.normal(0.0, noise_std);
        }
    }
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    img
}

/// Build ground-truth maps for the configured landmark counts.
pub fn gt_maps(lms: &LandmarkSet, cfg: &ModelConfig) -> Result<(Tensor4, Tensor4)> {
    let coarse_ids: Vec<u16> = (0..cfg.c_d as u16).collect();
    let fine_ids: Vec<u16> = (0..cfg.c_r as u16).map(|k| FINE_BASE + k).collect();
    let b = landmarks_to_binary(
        &lms.select(&coarse_ids),
        cfg.map_radius,
        cfg.input_size,
        cfg.input_size,
    )?;
    let h = landmarks_to_heat(
        &lms.select(&fine_ids),
        cfg.heat_sigma,
        cfg.input_size,
        cfg.input_size,
    )?;
    Ok((b.planes, h.planes))
}

/// Generate one clip; fully determined by `(identity, clip_id, master_seed)`.
pub fn sample_clip(
    identity: &IdentityParams,
    cfg: &ModelConfig,
    noise_std: f64,
    t: usize,
    clip_id: u64,
    master_seed: u64,
) -> Result<Clip> {
    let mut rng = SeededRng::new(derive_seed(master_seed, 0x1000 + clip_id));
    let states = sample_track(&mut rng, t);
    let mut frames = Vec::with_capacity(t);
    let mut landmarks = Vec::with_capacity(t);
    let mut gt_binary = Vec::with_capacity(t);
    let mut gt_heat = Vec::with_capacity(t);
    for state in &states {
        let mut lms = landmarks_for(identity, state, cfg.input_size, cfg.c_r);
        lms.clamp_to(cfg.input_size, cfg.input_size);
        let img = render_frame(&lms, identity, cfg.input_size, noise_std, &mut rng);
        let (b, h) = gt_maps(&lms, cfg)?;
        frames.push(img);
        landmarks.push(lms);
        gt_binary.push(b);
        gt_heat.push(h);
    }
    Ok(Clip {
        id: clip_id,
        identity: identity.id,
        frames,
        landmarks,
        gt_binary,
        gt_heat,
    })
}

/// A labeled synthetic dataset (identities plus their clips).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub master_seed: u64,
    pub identities: Vec<IdentityParams>,
    pub clips: Vec<Clip>,
}

impl Dataset {
    /// Classifier label (index into `identities`) for a clip.
    pub fn label_of(&self, clip: &Clip) -> Option<usize> {
        self.identities.iter().position(|i| i.id == clip.identity)
    }
}

/// Deterministic identity roster for `(seed, id_base)`.
pub fn sample_identities(seed: u64, n: usize, id_base: u64) -> Vec<IdentityParams> {
    let root = SeededRng::new(seed);
    (0..n)
        .map(|k| {
            let mut id_rng = root.derive(0x49 + id_base + k as u64);
            sample_identity(&mut id_rng, id_base + k as u64)
        })
        .collect()
}

/// Clips for an existing identity roster; `clip_seed` controls the motion
/// and noise streams so disjoint splits can reuse the same identities.
pub fn generate_clips(
    cfg: &Config,
    identities: &[IdentityParams],
    clips_per_identity: usize,
    clip_seed: u64,
) -> Result<Vec<Clip>> {
    let jobs: Vec<(usize, u64)> = (0..identities.len())
        .flat_map(|i| {
            (0..clips_per_identity).map(move |c| (i, (i * clips_per_identity + c) as u64))
        })
        .collect();
    crate::parallel::try_map(&jobs, |&(i, clip_id)| {
        sample_clip(
            &identities[i],
            &cfg.model,
            cfg.synth.noise_std,
            cfg.model.t,
            clip_id,
            clip_seed,
        )
    })
}

/// Generate `n_identities x clips_per_identity` clips. Identity ids start
/// at `id_base` so held-out sets can carry disjoint identities.
pub fn generate_dataset(
    cfg: &Config,
    n_identities: usize,
    clips_per_identity: usize,
    master_seed: u64,
    id_base: u64,
) -> Result<Dataset> {
    let identities = sample_identities(master_seed, n_identities, id_base);
    let clips = generate_clips(cfg, &identities, clips_per_identity, master_seed)?;
    Ok(Dataset {
        master_seed,
        identities,
        clips,
    })
}

/// The standard split: training clips and held-out validation clips of the
/// same identities (validation differs only in motion/noise streams).
pub fn generate_train_val(cfg: &Config) -> Result<(Dataset, Dataset)> {
    let identities = sample_identities(cfg.seed, cfg.model.n_identities, 0);
    let train_clips = generate_clips(cfg, &identities, cfg.synth.clips_per_identity, cfg.seed)?;
    let val_seed = crate::rng::derive_seed(cfg.seed, 0x7A1);
    let val_clips = generate_clips(cfg, &identities, cfg.synth.val_clips_per_identity, val_seed)?;
    Ok((
        Dataset {
            master_seed: cfg.seed,
            identities: identities.clone(),
            clips: train_clips,
        },
        Dataset {
            master_seed: val_seed,
            identities,
            clips: val_clips,
        },
    ))
}

/// Frame augmentation parameters; translation is given at the reference
/// 64 px scale and scaled to the image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    pub rotation: f64,
    pub translation: (f64, f64),
    pub hflip: bool,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            scale: 1.0,
            rotation: 0.0,
            translation: (0.0, 0.0),
            hflip: false,
        }
    }

    pub fn sample(rng: &mut SeededRng) -> Self {
        AugmentParams {
            scale: rng.uniform(0.9, 1.1),
            rotation: rng.uniform(-15.0, 15.0) * std::f64::consts::PI / 180.0,
            translation: (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)),
            hflip: rng.chance(0.5),
        }
    }
}

fn bilinear(img: &Tensor4, c: usize, y: f64, x: f64) -> f64 {
    let d = img.dims();
    // border replicate
    let xc = x.clamp(0.0, (d.w - 1) as f64);
    let yc = y.clamp(0.0, (d.h - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(d.w - 1);
    let y1 = (y0 + 1).min(d.h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    let v00 = img.at(0, c, y0, x0);
    let v01 = img.at(0, c, y0, x1);
    let v10 = img.at(0, c, y1, x0);
    let v11 = img.at(0, c, y1, x1);
    v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
}

/// Apply the same similarity transform to the image (bilinear, border
/// replicate) and the landmarks; a horizontal flip mirrors exactly and
/// relabels left/right semantic ids.
pub fn augment(
    frame: &Tensor4,
    lms: &LandmarkSet,
    params: &AugmentParams,
) -> (Tensor4, LandmarkSet) {
    let d = frame.dims();
    let size = d.h;
    let s_px = (size - 1) as f64 / (REF_SIZE - 1.0);
    let center = (size as f64 - 1.0) / 2.0;
    let (sin, cos) = params.rotation.sin_cos();
    let (tx, ty) = (params.translation.0 * s_px, params.translation.1 * s_px);

    let mut out = Tensor4::zeros(1, 3, size, size);
    let needs_resample =
        params.scale != 1.0 || params.rotation != 0.0 || tx != 0.0 || ty != 0.0;
    if needs_resample {
        // inverse map: rotate by -theta, scale by 1/s
        let inv_s = 1.0 / params.scale;
        for i in 0..size {
            for j in 0..size {
                let rx = j as f64 - center - tx;
                let ry = i as f64 - center - ty;
                let sx = center + inv_s * (cos * rx + sin * ry);
                let sy = center + inv_s * (-sin * rx + cos * ry);
                for c in 0..3 {
                    *out.at_mut(0, c, i, j) = bilinear(frame, c, sy, sx);
                }
            }
        }
    } else {
        out = frame.clone();
    }

    let mut new_lms = lms.clone();
    for p in &mut new_lms.points {
        let rx = p.x - center;
        let ry = p.y - center;
        p.x = center + params.scale * (cos * rx - sin * ry) + tx;
        p.y = center + params.scale * (sin * rx + cos * ry) + ty;
    }

    if params.hflip {
        let mut flipped = Tensor4::zeros(1, 3, size, size);
        for c in 0..3 {
            for i in 0..size {
                for j in 0..size {
                    *flipped.at_mut(0, c, i, j) = out.at(0, c, i, size - 1 - j);
                }
            }
        }
        out = flipped;
        for p in &mut new_lms.points {
            p.x = (size - 1) as f64 - p.x;
            p.id = HFLIP_ID_MAP[if p.id < FINE_BASE {
                p.id as usize
            } else {
                COARSE_COUNT + (p.id - FINE_BASE) as usize
            }];
        }
        new_lms.points.sort_by_key(|p| p.id);
    }
    (out, new_lms)
}
