//! Procedural face renderer. Identity fixes geometry and tone, age drives
//! skin texture, wrinkles and fullness, the pose seed picks lighting,
//! background and the noise realization.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageTensor};
use crate::seed;

pub const GEOMETRY_DIM: usize = 12;
pub const MIN_AGE: u32 = 5;
pub const MAX_AGE: u32 = 90;

/// Geometry parameter slots, each in [0, 1].
pub mod geom {
    pub const FACE_WIDTH: usize = 0;
    pub const FACE_HEIGHT: usize = 1;
    pub const EYE_SPACING: usize = 2;
    pub const EYE_HEIGHT: usize = 3;
    pub const EYE_SIZE: usize = 4;
    pub const BROW_ARCH: usize = 5;
    pub const BROW_THICKNESS: usize = 6;
    pub const NOSE_LENGTH: usize = 7;
    pub const NOSE_WIDTH: usize = 8;
    pub const MOUTH_WIDTH: usize = 9;
    pub const MOUTH_DROP: usize = 10;
    pub const MOUTH_THICKNESS: usize = 11;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id_seed: u64,
    pub geometry_params: [f32; GEOMETRY_DIM],
    pub base_tone: f32,
}

pub fn gen_identity(seed: u64) -> IdentitySpec {
    let mut rng = seed::derived_rng(seed, "identity");
    let mut geometry_params = [0f32; GEOMETRY_DIM];
    for g in &mut geometry_params {
        *g = rng.gen::<f32>();
    }
    IdentitySpec { id_seed: seed, geometry_params, base_tone: rng.gen::<f32>() }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgeFactor {
    pub age_years: u32,
    pub wrinkle_density: f32,
    pub texture_roughness: f32,
    pub fullness: f32,
}

impl AgeFactor {
    pub fn from_age(age_years: u32) -> Result<Self> {
        if !(MIN_AGE..=MAX_AGE).contains(&age_years) {
            return Err(Error::InvalidArgument(format!(
                "age {age_years} outside [{MIN_AGE}, {MAX_AGE}]"
            )));
        }
        let u = (age_years - MIN_AGE) as f32 / (MAX_AGE - MIN_AGE) as f32;
        Ok(Self {
            age_years,
            wrinkle_density: ((age_years as f32 - 25.0) / 60.0).clamp(0.0, 1.0),
            texture_roughness: u,
            fullness: 1.0 - u,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RenderedFace {
    pub image: ImageTensor,
    pub organ_mask: BinaryMask,
    /// Skin pixels: inside the face outline and outside the organs.
    pub skin_mask: BinaryMask,
    pub identity: IdentitySpec,
    pub age: AgeFactor,
}

pub const DEFAULT_SIZE: usize = 32;
const SUPERSAMPLE: usize = 4;

/// Face layout in a 32-unit canvas.
struct Layout {
    cx: f32,
    cy: f32,
    face_ry: f32,
    face_rx_base: f32,
    eye_dx: f32,
    eye_y: f32,
    eye_rx: f32,
    eye_ry: f32,
    brow_y: f32,
    brow_half: f32,
    brow_arch: f32,
    brow_thick: f32,
    nose_top: f32,
    nose_len: f32,
    nose_w: f32,
    mouth_y: f32,
    mouth_rx: f32,
    mouth_ry: f32,
}

impl Layout {
    fn new(spec: &IdentitySpec) -> Self {
        let g = &spec.geometry_params;
        let cx = 16.0;
        let cy = 16.5;
        let eye_y = cy - 2.5 - 1.5 * g[geom::EYE_HEIGHT];
        let eye_rx = 1.7 + 0.9 * g[geom::EYE_SIZE];
        let eye_ry = 0.9 + 0.5 * g[geom::EYE_SIZE];
        let nose_len = 3.0 + 2.0 * g[geom::NOSE_LENGTH];
        let nose_top = eye_y + 1.0;
        Self {
            cx,
            cy,
            face_ry: 12.0 + 2.5 * g[geom::FACE_HEIGHT],
            face_rx_base: 9.5 + 2.0 * g[geom::FACE_WIDTH],
            eye_dx: 3.6 + 1.4 * g[geom::EYE_SPACING],
            eye_y,
            eye_rx,
            eye_ry,
            brow_y: eye_y - eye_ry - 1.3,
            brow_half: eye_rx + 0.6,
            brow_arch: 0.3 + 1.0 * g[geom::BROW_ARCH],
            brow_thick: 0.7 + 0.6 * g[geom::BROW_THICKNESS],
            nose_top,
            nose_len,
            nose_w: 1.1 + 1.0 * g[geom::NOSE_WIDTH],
            mouth_y: nose_top + nose_len + 2.0 + 1.5 * g[geom::MOUTH_DROP],
            mouth_rx: 2.6 + 2.2 * g[geom::MOUTH_WIDTH],
            mouth_ry: 0.6 + 0.6 * g[geom::MOUTH_THICKNESS],
        }
    }

    fn face_rx(&self, age: &AgeFactor) -> f32 {
        self.face_rx_base * (0.9 + 0.2 * age.fullness)
    }

    fn in_face(&self, x: f32, y: f32, rx: f32) -> bool {
        ellipse(x, y, self.cx, self.cy, rx, self.face_ry) <= 1.0
    }

    fn organ_at(&self, x: f32, y: f32) -> Option<Organ> {
        for side in [-1.0f32, 1.0] {
            let ex = self.cx + side * self.eye_dx;
            if ellipse(x, y, ex, self.eye_y, self.eye_rx, self.eye_ry) <= 1.0 {
                let iris = ellipse(x, y, ex, self.eye_y, self.eye_ry * 0.85, self.eye_ry * 0.85) <= 1.0;
                return Some(if iris { Organ::Iris } else { Organ::Sclera });
            }
            let t = (x - ex) / self.brow_half;
            if t.abs() <= 1.0 {
                let curve = self.brow_y - self.brow_arch * (1.0 - t * t);
                if (y - curve).abs() <= self.brow_thick * 0.5 {
                    return Some(Organ::Brow);
                }
            }
        }
        let nose_cy = self.nose_top + self.nose_len * 0.5;
        if ellipse(x, y, self.cx, nose_cy, self.nose_w, self.nose_len * 0.5) <= 1.0 {
            let bottom = self.nose_top + self.nose_len;
            let nostril = [-1.0f32, 1.0].iter().any(|s| {
                ellipse(x, y, self.cx + s * self.nose_w * 0.5, bottom - 0.7, 0.5, 0.45) <= 1.0
            });
            return Some(if nostril { Organ::Nostril } else { Organ::Nose });
        }
        if ellipse(x, y, self.cx, self.mouth_y, self.mouth_rx, self.mouth_ry) <= 1.0 {
            return Some(Organ::Mouth);
        }
        None
    }

    /// Wrinkle line coverage: forehead lines, crow's feet, nasolabial folds.
    fn on_wrinkle(&self, x: f32, y: f32) -> bool {
        let half = 0.28;
        for k in 0..3 {
            let ly = self.brow_y - self.brow_arch - 1.6 - 1.5 * k as f32;
            let t = (x - self.cx) / 5.5;
            if t.abs() <= 1.0 && (y - (ly - 0.6 * (1.0 - t * t))).abs() <= half {
                return true;
            }
        }
        for side in [-1.0f32, 1.0] {
            let ox = self.cx + side * (self.eye_dx + self.eye_rx + 0.8);
            for slope in [-0.6f32, 0.0, 0.6] {
                let dx = (x - ox) * side;
                if (0.0..=2.2).contains(&dx) && (y - (self.eye_y + slope * dx)).abs() <= half {
                    return true;
                }
            }
            // fold from the nose wing to the mouth corner
            let (x0, y0) = (self.cx + side * (self.nose_w + 0.8), self.nose_top + self.nose_len - 0.5);
            let (x1, y1) = (self.cx + side * (self.mouth_rx + 0.8), self.mouth_y + 0.5);
            if segment_distance(x, y, x0, y0, x1, y1) <= half {
                return true;
            }
        }
        false
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Organ {
    Sclera,
    Iris,
    Brow,
    Nose,
    Nostril,
    Mouth,
}

fn ellipse(x: f32, y: f32, cx: f32, cy: f32, rx: f32, ry: f32) -> f32 {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    dx * dx + dy * dy
}

fn segment_distance(x: f32, y: f32, x0: f32, y0: f32, x1: f32, y1: f32) -> f32 {
    let (vx, vy) = (x1 - x0, y1 - y0);
    let t = (((x - x0) * vx + (y - y0) * vy) / (vx * vx + vy * vy)).clamp(0.0, 1.0);
    let (px, py) = (x0 + t * vx - x, y0 + t * vy - y);
    (px * px + py * py).sqrt()
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn skin_color(tone: f32) -> [f32; 3] {
    lerp3([0.93, 0.78, 0.68], [0.48, 0.33, 0.25], tone)
}

fn organ_color(organ: Organ, skin: [f32; 3]) -> [f32; 3] {
    match organ {
        Organ::Sclera => [0.94, 0.94, 0.92],
        Organ::Iris => [0.16, 0.11, 0.09],
        Organ::Brow => [skin[0] * 0.32, skin[1] * 0.28, skin[2] * 0.26],
        Organ::Nose => [skin[0] * 0.86, skin[1] * 0.84, skin[2] * 0.84],
        Organ::Nostril => [skin[0] * 0.45, skin[1] * 0.40, skin[2] * 0.40],
        Organ::Mouth => [0.72, 0.28, 0.30],
    }
}

pub fn render_face(spec: &IdentitySpec, age: &AgeFactor, pose_seed: u64) -> RenderedFace {
    render_face_sized(spec, age, pose_seed, DEFAULT_SIZE)
}

/// Renders at `size` x `size`; the layout is defined on a 32-unit canvas.
pub fn render_face_sized(spec: &IdentitySpec, age: &AgeFactor, pose_seed: u64, size: usize) -> RenderedFace {
    let lay = Layout::new(spec);
    let face_rx = lay.face_rx(age);
    let unit = 32.0 / size as f32;
    let mut rng = seed::derived_rng(pose_seed, "pose");

    let bg_a: [f32; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let bg_b: [f32; 3] = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
    let bg_angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let light_x: f32 = rng.gen_range(-0.12..0.12);
    let light_y: f32 = rng.gen_range(-0.12..0.12);
    let brightness: f32 = rng.gen_range(0.92..1.04);

    let skin = skin_color(spec.base_tone);
    let noise_amp = 0.012 + 0.10 * age.texture_roughness;
    let wrinkle_depth = 0.38 * age.wrinkle_density;

    let mut img = ImageTensor::filled(size, size, 3, 0.0);
    let mut organ_mask = BinaryMask::empty(size, size);
    let mut skin_mask = BinaryMask::empty(size, size);
    let n_sub = (SUPERSAMPLE * SUPERSAMPLE) as f32;

    for py in 0..size {
        for px in 0..size {
            let mut acc = [0f32; 3];
            let mut face_cov = 0f32;
            let mut organ_cov = 0f32;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = (px as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32) * unit;
                    let y = (py as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32) * unit;
                    let c = if lay.in_face(x, y, face_rx) {
                        face_cov += 1.0;
                        let shade = brightness
                            * (1.0 + light_x * (x - lay.cx) / 16.0 + light_y * (y - lay.cy) / 16.0);
                        let base = match lay.organ_at(x, y) {
                            Some(o) => {
                                organ_cov += 1.0;
                                organ_color(o, skin)
                            }
                            None if lay.on_wrinkle(x, y) => skin.map(|v| v * (1.0 - wrinkle_depth)),
                            None => skin,
                        };
                        base.map(|v| v * shade)
                    } else {
                        let t = 0.5
                            + 0.5 * ((x / 32.0 - 0.5) * bg_angle.cos() + (y / 32.0 - 0.5) * bg_angle.sin());
                        lerp3(bg_a, bg_b, t)
                    };
                    for ch in 0..3 {
                        acc[ch] += c[ch];
                    }
                }
            }
            face_cov /= n_sub;
            organ_cov /= n_sub;
            // one draw per pixel keeps the realization independent of age
            let z: f32 = rng.sample(StandardNormal);
            let tint: [f32; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let skin_weight = face_cov * (1.0 - organ_cov);
            for ch in 0..3 {
                let grain = noise_amp * skin_weight * (z + 0.25 * tint[ch]);
                img.set(py, px, ch, (acc[ch] / n_sub + grain).clamp(0.0, 1.0));
            }
            organ_mask.set(py, px, organ_cov >= 0.25);
            skin_mask.set(py, px, face_cov >= 0.99 && organ_cov == 0.0);
        }
    }
    RenderedFace { image: img, organ_mask, skin_mask, identity: spec.clone(), age: *age }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identities_are_seeded_and_bounded() {
        assert_eq!(gen_identity(7), gen_identity(7));
        assert_ne!(gen_identity(7).geometry_params, gen_identity(8).geometry_params);
        let s = gen_identity(0);
        assert!(s.geometry_params.iter().all(|g| (0.0..=1.0).contains(g)));
        assert!((0.0..=1.0).contains(&s.base_tone));
    }

    #[test]
    fn age_factor_is_monotone() {
        let mut prev = AgeFactor::from_age(MIN_AGE).unwrap();
        for a in MIN_AGE + 1..=MAX_AGE {
            let f = AgeFactor::from_age(a).unwrap();
            assert!(f.wrinkle_density >= prev.wrinkle_density);
            assert!(f.texture_roughness > prev.texture_roughness);
            assert!(f.fullness < prev.fullness);
            prev = f;
        }
        assert!(AgeFactor::from_age(4).is_err());
        assert!(AgeFactor::from_age(91).is_err());
    }

    #[test]
    fn organ_mask_is_nonempty_and_bounded() {
        for s in 0..40 {
            let f = render_face(&gen_identity(s), &AgeFactor::from_age(40).unwrap(), s);
            let frac = f.organ_mask.fraction();
            assert!(f.organ_mask.count() >= 1 && frac <= 0.6, "seed {s}: {frac}");
            assert!(f.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
