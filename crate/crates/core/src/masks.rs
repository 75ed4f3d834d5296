//! Landmark-driven component masks, layer bundles, and the synthetic face fixture generator.

use std::collections::BTreeMap;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{apply_mask, Component, ComponentMask, FaceImage, LayerBundle};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LANDMARK_COUNT: usize = 68;

const JAW: std::ops::Range<usize> = 0..17;
const RIGHT_BROW: std::ops::Range<usize> = 17..22;
const LEFT_BROW: std::ops::Range<usize> = 22..27;
const NOSE_BRIDGE: std::ops::Range<usize> = 27..31;
const NOSE_BASE: std::ops::Range<usize> = 31..36;
const RIGHT_EYE: std::ops::Range<usize> = 36..42;
const LEFT_EYE: std::ops::Range<usize> = 42..48;
const OUTER_LIP: std::ops::Range<usize> = 48..60;
const INNER_LIP: std::ops::Range<usize> = 60..68;

/// 68 `(x, y)` pixel coordinates in the usual iBUG ordering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>, height: usize, width: usize) -> Result<Self> {
        if points.len() != LANDMARK_COUNT {
            return Err(Error::Arity(format!(
                "expected {LANDMARK_COUNT} landmarks, got {}",
                points.len()
            )));
        }
        for (i, p) in points.iter().enumerate() {
            let inside = p[0].is_finite()
                && p[1].is_finite()
                && (0.0..=width as f64).contains(&p[0])
                && (0.0..=height as f64).contains(&p[1]);
            if !inside {
                return Err(Error::Range(format!("landmark {i} = {p:?} outside the image")));
            }
        }
        Ok(LandmarkSet { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    fn slice(&self, r: std::ops::Range<usize>) -> Vec<[f64; 2]> {
        self.points[r].to_vec()
    }

    /// Parses the detector plug-in output: a JSON array of 68 `[x, y]` pairs.
    pub fn from_json(text: &str, height: usize, width: usize) -> Result<Self> {
        let points: Vec<[f64; 2]> = serde_json::from_str(text)?;
        Self::new(points, height, width)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.points).expect("landmarks serialize")
    }
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    let mut s = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        s += a[0] * b[1] - b[0] * a[1];
    }
    0.5 * s.abs()
}

fn point_in_polygon(x: f64, y: f64, poly: &[[f64; 2]]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (pi, pj) = (poly[i], poly[j]);
        if (pi[1] > y) != (pj[1] > y) {
            let xc = pj[0] + (y - pj[1]) * (pi[0] - pj[0]) / (pi[1] - pj[1]);
            if x < xc {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn segment_distance(x: f64, y: f64, a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((x - a[0]) * dx + (y - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (px, py) = (a[0] + t * dx, a[1] + t * dy);
    ((x - px).powi(2) + (y - py).powi(2)).sqrt()
}

/// Andrew's monotone chain; returns the hull counter-clockwise.
fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

const MIN_AREA: f64 = 1e-9;

fn fill_polygons(polys: &[Vec<[f64; 2]>], h: usize, w: usize) -> Vec<bool> {
    let mut bits = vec![false; h * w];
    for poly in polys {
        if poly.len() < 3 || polygon_area(poly) < MIN_AREA {
            continue;
        }
        let (x0, x1, y0, y1) = bounds(poly, h, w);
        for y in y0..y1 {
            for x in x0..x1 {
                if point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, poly) {
                    bits[y * w + x] = true;
                }
            }
        }
    }
    bits
}

fn bounds(poly: &[[f64; 2]], h: usize, w: usize) -> (usize, usize, usize, usize) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in poly {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let lo = |v: f64| (v.floor().max(0.0)) as usize;
    let hi = |v: f64, n: usize| ((v.ceil() + 1.0).max(0.0) as usize).min(n);
    (lo(x0), hi(x1, w), lo(y0), hi(y1, h))
}

fn dilate_polylines(lines: &[Vec<[f64; 2]>], radius: f64, h: usize, w: usize) -> Vec<bool> {
    let mut bits = vec![false; h * w];
    for line in lines {
        let (x0, x1, y0, y1) = bounds(line, h, w);
        let r = radius.ceil() as usize + 1;
        for y in y0.saturating_sub(r)..(y1 + r).min(h) {
            for x in x0.saturating_sub(r)..(x1 + r).min(w) {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if line
                    .windows(2)
                    .any(|s| segment_distance(px, py, s[0], s[1]) <= radius)
                {
                    bits[y * w + x] = true;
                }
            }
        }
    }
    bits
}

/// Brow dilation radius: 2 px at 128×128, scaled with the image side.
pub fn brow_radius(side: usize) -> f64 {
    2.0 * side as f64 / 128.0
}

/// Rasterizes the five component masks from 68 landmarks.
///
/// A zero-area face hull marks every component as a detection failure; a
/// zero-area component polygon marks just that component.
pub fn masks_from_landmarks(
    lm: &LandmarkSet,
    height: usize,
    width: usize,
) -> BTreeMap<Component, ComponentMask> {
    let (h, w) = (height, width);
    let hull = convex_hull(lm.points());
    if hull.len() < 3 || polygon_area(&hull) < MIN_AREA {
        return Component::ALL
            .iter()
            .map(|&c| (c, ComponentMask::failure(c, h, w)))
            .collect();
    }
    let mut nose = vec![lm.points()[NOSE_BRIDGE.start]];
    nose.extend(lm.slice(NOSE_BASE));

    let mut fg: BTreeMap<Component, Vec<bool>> = BTreeMap::new();
    fg.insert(
        Component::Eyebrows,
        dilate_polylines(
            &[lm.slice(RIGHT_BROW), lm.slice(LEFT_BROW)],
            brow_radius(h.min(w)),
            h,
            w,
        ),
    );
    fg.insert(
        Component::Eyes,
        fill_polygons(&[lm.slice(RIGHT_EYE), lm.slice(LEFT_EYE)], h, w),
    );
    fg.insert(Component::Nose, fill_polygons(&[nose], h, w));
    fg.insert(Component::Mouth, fill_polygons(&[lm.slice(OUTER_LIP)], h, w));

    let mut skin = fill_polygons(&[hull], h, w);
    for bits in fg.values() {
        for (s, f) in skin.iter_mut().zip(bits) {
            if *f {
                *s = false;
            }
        }
    }
    let mut out: BTreeMap<Component, ComponentMask> = fg
        .into_iter()
        .map(|(c, bits)| (c, ComponentMask::from_bits(c, h, w, bits).expect("sized")))
        .collect();
    out.insert(
        Component::Skin,
        ComponentMask::from_bits(Component::Skin, h, w, skin).expect("sized"),
    );
    out
}

/// Splits an image into masked per-component layers.
pub fn make_layer_bundle<T: Scalar>(
    image: &FaceImage<T>,
    masks: &BTreeMap<Component, ComponentMask>,
) -> Result<LayerBundle<T>> {
    let mut layers = BTreeMap::new();
    for c in Component::ALL {
        let m = masks
            .get(&c)
            .ok_or_else(|| Error::Arity(format!("no mask for {c}")))?;
        layers.insert(c, apply_mask(image, m)?);
    }
    LayerBundle::new(layers, masks.clone(), image.clone())
}

/// Bounds for per-image jitter, in units of a 128-pixel face.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JitterBounds {
    pub max_shift_px: f64,
    pub max_scale: f64,
    pub max_brightness: f64,
    pub landmark_noise_px: f64,
    pub pixel_noise: f64,
}

impl Default for JitterBounds {
    fn default() -> Self {
        JitterBounds {
            max_shift_px: 2.0,
            max_scale: 0.03,
            max_brightness: 0.06,
            landmark_noise_px: 0.3,
            pixel_noise: 0.02,
        }
    }
}

/// Realised jitter for one rendering.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub shift: [f64; 2],
    pub scale: f64,
    pub brightness: f64,
    pub background: [f64; 3],
    pub landmark_noise_px: f64,
    pub pixel_noise: f64,
    pub noise_seed: u64,
}

impl Jitter {
    pub fn none() -> Self {
        Jitter {
            shift: [0.0, 0.0],
            scale: 1.0,
            brightness: 0.0,
            background: [0.35, 0.45, 0.55],
            landmark_noise_px: 0.0,
            pixel_noise: 0.0,
            noise_seed: 0,
        }
    }

    pub fn draw(seed: u64, bounds: &JitterBounds) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x6a09_e667_f3bc_c908);
        let mut sym = |m: f64| if m > 0.0 { r.random_range(-m..=m) } else { 0.0 };
        let shift = [sym(bounds.max_shift_px), sym(bounds.max_shift_px)];
        let scale = 1.0 + sym(bounds.max_scale);
        let brightness = sym(bounds.max_brightness);
        let background = [
            r.random_range(0.05..0.95),
            r.random_range(0.05..0.95),
            r.random_range(0.05..0.95),
        ];
        Jitter {
            shift,
            scale,
            brightness,
            background,
            landmark_noise_px: bounds.landmark_noise_px,
            pixel_noise: bounds.pixel_noise,
            noise_seed: r.random(),
        }
    }
}

/// Identity seed plus the jitter applied to one rendering of that identity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFaceSpec {
    pub identity_seed: u64,
    pub jitter: Jitter,
}

impl SyntheticFaceSpec {
    pub fn new(identity_seed: u64, jitter: Jitter) -> Self {
        SyntheticFaceSpec {
            identity_seed,
            jitter,
        }
    }

    /// Jitter draw `index` of identity `identity_seed`.
    pub fn sample(identity_seed: u64, index: u64, bounds: &JitterBounds) -> Self {
        let seed = identity_seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        Self::new(identity_seed, Jitter::draw(seed, bounds))
    }

    pub fn subject_id(&self) -> String {
        format!("s{:04}", self.identity_seed)
    }
}

/// Identity geometry and palette in unit coordinates (side = 1).
#[derive(Clone, Debug, PartialEq)]
pub struct FaceGeometry {
    pub face_half_width: f64,
    pub jaw_depth: f64,
    pub eye_y: f64,
    pub eye_offset: f64,
    pub eye_half_width: f64,
    pub eye_half_height: f64,
    pub brow_gap: f64,
    pub brow_half_length: f64,
    pub brow_arch: f64,
    pub brow_tilt: f64,
    pub nose_length: f64,
    pub nose_half_width: f64,
    pub mouth_gap: f64,
    pub mouth_half_width: f64,
    pub upper_lip: f64,
    pub lower_lip: f64,
    pub skin: [f64; 3],
    pub brow_color: [f64; 3],
    pub iris: [f64; 3],
    pub lips: [f64; 3],
}

impl FaceGeometry {
    pub fn from_seed(identity_seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(identity_seed.wrapping_add(0x1234_5678));
        let mut u = |lo: f64, hi: f64| r.random_range(lo..hi);
        let tone = u(0.0, 1.0);
        let skin = [0.45 + 0.5 * tone, 0.30 + 0.45 * tone, 0.20 + 0.40 * tone];
        let face_half_width = u(0.28, 0.36);
        let jaw_depth = u(0.34, 0.40);
        let eye_y = u(0.40, 0.45);
        let eye_offset = u(0.11, 0.15);
        let eye_half_width = u(0.045, 0.065);
        let eye_half_height = u(0.02, 0.032);
        let brow_gap = u(0.035, 0.055);
        let brow_half_length = u(0.055, 0.08);
        let brow_arch = u(0.0, 0.025);
        let brow_tilt = u(-0.015, 0.015);
        let nose_length = u(0.12, 0.16);
        let nose_half_width = u(0.03, 0.05);
        let mouth_gap = u(0.06, 0.085);
        let mouth_half_width = u(0.07, 0.105);
        let upper_lip = u(0.012, 0.022);
        let lower_lip = u(0.015, 0.028);
        let shade = u(0.0, 0.35);
        let brow_color = [shade, shade * u(0.5, 1.0), shade * u(0.3, 0.9)];
        let iris = [u(0.1, 0.6), u(0.1, 0.7), u(0.1, 0.8)];
        let lips = [u(0.5, 0.9), u(0.15, 0.45), u(0.2, 0.5)];
        FaceGeometry {
            face_half_width,
            jaw_depth,
            eye_y,
            eye_offset,
            eye_half_width,
            eye_half_height,
            brow_gap,
            brow_half_length,
            brow_arch,
            brow_tilt,
            nose_length,
            nose_half_width,
            mouth_gap,
            mouth_half_width,
            upper_lip,
            lower_lip,
            skin,
            brow_color,
            iris,
            lips,
        }
    }

    /// Landmarks in unit coordinates before jitter.
    pub fn unit_landmarks(&self) -> Vec<[f64; 2]> {
        use std::f64::consts::PI;
        let cx = 0.5;
        let g = self;
        let mut p = Vec::with_capacity(LANDMARK_COUNT);
        // jaw: ear to ear through the chin
        for k in 0..17 {
            let a = PI * k as f64 / 16.0;
            p.push([cx - g.face_half_width * a.cos(), g.eye_y + g.jaw_depth * a.sin()]);
        }
        // brows, subject's right (image left) first
        let brow_y = g.eye_y - g.eye_half_height - g.brow_gap;
        for side in [-1.0, 1.0] {
            let bc = cx + side * g.eye_offset;
            for k in 0..5 {
                let s = k as f64 / 4.0 * 2.0 - 1.0;
                let x = bc + s * g.brow_half_length;
                let y = brow_y - g.brow_arch * (1.0 - s * s) + side * s * g.brow_tilt;
                p.push([x, y]);
            }
        }
        // nose bridge and base
        let nose_bottom = g.eye_y + g.nose_length;
        for k in 0..4 {
            p.push([cx, g.eye_y + g.nose_length * 0.8 * k as f64 / 3.0]);
        }
        for k in 0..5 {
            let s = k as f64 / 2.0 - 1.0;
            p.push([cx + s * g.nose_half_width, nose_bottom - 0.012 * (1.0 - s * s)]);
        }
        // eyes: outer corner, upper lid, inner corner, lower lid
        for side in [-1.0, 1.0] {
            let ec = cx + side * g.eye_offset;
            let angles = [180.0f64, 120.0, 60.0, 0.0, -60.0, -120.0];
            for a in angles {
                let t = a.to_radians();
                let dx = -side * t.cos();
                p.push([ec + dx * g.eye_half_width, g.eye_y - t.sin() * g.eye_half_height]);
            }
        }
        // outer lip (12) and inner lip (8)
        let my = nose_bottom + g.mouth_gap;
        for k in 0..12 {
            let t = PI - 2.0 * PI * k as f64 / 12.0;
            let ry = if t.sin() > 0.0 { g.upper_lip } else { g.lower_lip };
            p.push([cx + g.mouth_half_width * t.cos(), my - ry * 2.0 * t.sin()]);
        }
        for k in 0..8 {
            let t = PI - 2.0 * PI * k as f64 / 8.0;
            p.push([cx + 0.75 * g.mouth_half_width * t.cos(), my - 0.006 * t.sin()]);
        }
        p
    }
}

/// Rendered fixture face with exact ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticFace<T> {
    pub image: FaceImage<T>,
    pub bundle: LayerBundle<T>,
    pub subject_id: String,
    pub landmarks: LandmarkSet,
}

/// Renders one synthetic face at `side × side`.
pub fn generate_synthetic_face<T: Scalar>(spec: &SyntheticFaceSpec, side: usize) -> Result<SyntheticFace<T>> {
    if side < 32 || !side.is_power_of_two() {
        return Err(Error::Dimension(format!("side {side} must be a power of two >= 32")));
    }
    let geo = FaceGeometry::from_seed(spec.identity_seed);
    let j = spec.jitter;
    let px_scale = side as f64 / 128.0;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(j.noise_seed);
    let s = side as f64;
    let points: Vec<[f64; 2]> = geo
        .unit_landmarks()
        .into_iter()
        .map(|[x, y]| {
            let mut n = |m: f64| if m > 0.0 { noise_rng.random_range(-m..=m) } else { 0.0 };
            let nx = n(j.landmark_noise_px);
            let ny = n(j.landmark_noise_px);
            let ux = 0.5 + (x - 0.5) * j.scale;
            let uy = 0.5 + (y - 0.5) * j.scale;
            [
                (ux * s + (j.shift[0] + nx) * px_scale).clamp(0.0, s),
                (uy * s + (j.shift[1] + ny) * px_scale).clamp(0.0, s),
            ]
        })
        .collect();
    let landmarks = LandmarkSet::new(points, side, side)?;
    let masks = masks_from_landmarks(&landmarks, side, side);
    let lm = landmarks.points();
    let inner_lip = lm[INNER_LIP].to_vec();
    let eye_centers = [
        centroid(&lm[RIGHT_EYE]),
        centroid(&lm[LEFT_EYE]),
    ];
    let face_center = centroid(&lm[JAW]);
    let iris_r = geo.eye_half_height * 0.95 * s * j.scale;
    let bright = 1.0 + j.brightness;

    let plane = side * side;
    let mut data = vec![T::zero(); 3 * plane];
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let i = y * side + x;
            let on = |c: Component| masks[&c].bits()[i];
            let rgb: [f64; 3] = if on(Component::Mouth) {
                if point_in_polygon(px, py, &inner_lip) {
                    [0.25, 0.05, 0.08].map(|v| v * bright)
                } else {
                    geo.lips.map(|v| v * bright)
                }
            } else if on(Component::Eyes) {
                let d = eye_centers
                    .iter()
                    .map(|c| ((px - c[0]).powi(2) + (py - c[1]).powi(2)).sqrt())
                    .fold(f64::MAX, f64::min);
                if d < 0.4 * iris_r {
                    [0.05, 0.05, 0.05]
                } else if d < iris_r {
                    geo.iris.map(|v| v * bright)
                } else {
                    [0.92, 0.92, 0.9].map(|v| v * bright)
                }
            } else if on(Component::Eyebrows) {
                geo.brow_color.map(|v| v * bright)
            } else if on(Component::Nose) {
                geo.skin.map(|v| v * 0.82 * bright)
            } else if on(Component::Skin) {
                let r2 = ((px - face_center[0]).powi(2) + (py - face_center[1]).powi(2))
                    / (0.35 * s).powi(2);
                let shading = 1.0 - 0.15 * r2.min(1.5);
                geo.skin.map(|v| v * shading * bright)
            } else {
                let t = py / s;
                j.background.map(|v| v * (1.1 - 0.2 * t))
            };
            for c in 0..3 {
                let n = if j.pixel_noise > 0.0 {
                    noise_rng.random_range(-j.pixel_noise..=j.pixel_noise)
                } else {
                    0.0
                };
                let v = (rgb[c].clamp(0.0, 1.0) * 2.0 - 1.0 + n).clamp(-1.0, 1.0);
                // 8-bit levels, so that writing to PNG and reading back is lossless
                data[c * plane + i] = T::lit(crate::io::from_u8(crate::io::to_u8(v)));
            }
        }
    }
    let image = FaceImage::new(Tensor::from_vec(&[3, side, side], data)?)?;
    let bundle = make_layer_bundle(&image, &masks)?;
    Ok(SyntheticFace {
        image,
        bundle,
        subject_id: spec.subject_id(),
        landmarks,
    })
}

fn centroid(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    [sx / n, sy / n]
}
