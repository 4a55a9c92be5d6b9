//! Seeded synthetic eye images with matching semantic masks.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::image_io::{write_image, Image};
use crate::masks::{encode_mask, SemanticMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// Uneven outdoor lighting, color cast and sensor noise.
    Real,
    /// Clean, evenly lit rendering.
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EyeGeometry {
    pub cx: f64,
    pub cy: f64,
    pub iris_radius: f64,
    pub pupil_radius: f64,
    pub sclera_rx: f64,
    pub sclera_ry: f64,
}

#[derive(Clone, Debug)]
pub struct EyeFixture {
    pub image: Image,
    pub mask: SemanticMask,
    pub geometry: EyeGeometry,
}

fn inside_disc(x: usize, y: usize, cx: f64, cy: f64, r: f64) -> bool {
    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
    dx * dx + dy * dy <= r * r
}

/// Mask with a pupil disc of radius `r` at `(cx, cy)` inside a concentric
/// iris disc of radius `2r`.
pub fn disc_mask(height: usize, width: usize, cx: f64, cy: f64, r: f64) -> SemanticMask {
    SemanticMask::from_fn(
        height,
        width,
        |y, x| inside_disc(x, y, cx, cy, r),
        |y, x| inside_disc(x, y, cx, cy, 2.0 * r),
    )
}

fn random_geometry(h: usize, w: usize, rng: &mut ChaCha8Rng) -> EyeGeometry {
    let s = h.min(w) as f64;
    let iris_radius = s * rng.gen_range(0.18..0.24);
    EyeGeometry {
        cx: w as f64 / 2.0 + s * rng.gen_range(-0.08..0.08),
        cy: h as f64 / 2.0 + s * rng.gen_range(-0.05..0.05),
        iris_radius,
        pupil_radius: iris_radius * rng.gen_range(0.35..0.5),
        sclera_rx: w as f64 * rng.gen_range(0.38..0.45),
        sclera_ry: h as f64 * rng.gen_range(0.22..0.3),
    }
}

fn render(h: usize, w: usize, g: &EyeGeometry, domain: Domain, show_pupil: bool, rng: &mut ChaCha8Rng) -> Image {
    let skin = [rng.gen_range(170.0..215.0), rng.gen_range(120.0..160.0), rng.gen_range(100.0..140.0)];
    let iris = [rng.gen_range(60.0..130.0), rng.gen_range(50.0..110.0), rng.gen_range(30.0..90.0)];
    let sclera = [235.0, 230.0, 225.0];
    let pupil = [18.0, 15.0, 15.0];
    let (cast, gain_x, gain_y, noise) = match domain {
        Domain::Real => (
            [rng.gen_range(-25.0..25.0), rng.gen_range(-25.0..25.0), rng.gen_range(-25.0..25.0)],
            rng.gen_range(-0.5..0.5),
            rng.gen_range(-0.3..0.3),
            6.0,
        ),
        Domain::Synthetic => ([0.0; 3], 0.0, 0.0, 0.0),
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut img = Image::from_fn(h, w, |_, _, _| 0.0);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = ((x as f64 - g.cx) / g.sclera_rx, (y as f64 - g.cy) / g.sclera_ry);
            let base = if show_pupil && inside_disc(x, y, g.cx, g.cy, g.pupil_radius) {
                pupil
            } else if inside_disc(x, y, g.cx, g.cy, g.iris_radius) {
                iris
            } else if dx * dx + dy * dy <= 1.0 {
                sclera
            } else {
                skin
            };
            let light = 1.0 + gain_x * (x as f64 / w as f64 - 0.5) + gain_y * (y as f64 / h as f64 - 0.5);
            for c in 0..3 {
                let v = base[c] * light + cast[c] + noise * normal.sample(rng);
                img.set(c, y, x, v.clamp(0.0, 255.0) as f32);
            }
        }
    }
    img
}

fn geometry_mask(h: usize, w: usize, g: &EyeGeometry, with_pupil: bool) -> SemanticMask {
    SemanticMask::from_fn(
        h,
        w,
        |y, x| with_pupil && inside_disc(x, y, g.cx, g.cy, g.pupil_radius),
        |y, x| inside_disc(x, y, g.cx, g.cy, g.iris_radius),
    )
}

/// Eye image of the given domain with pupil and iris annotated.
pub fn eye_fixture(height: usize, width: usize, domain: Domain, seed: u64) -> EyeFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = random_geometry(height, width, &mut rng);
    EyeFixture {
        image: render(height, width, &geometry, domain, true, &mut rng),
        mask: geometry_mask(height, width, &geometry, true),
        geometry,
    }
}

/// Overexposed eye whose pupil is washed out: the mask labels the iris only.
pub fn orphan_fixture(height: usize, width: usize, seed: u64) -> EyeFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geometry = random_geometry(height, width, &mut rng);
    let raw = render(height, width, &geometry, Domain::Real, false, &mut rng);
    let image = Image::from_fn(height, width, |c, y, x| (raw.get(c, y, x) * 1.3 + 40.0).min(255.0));
    EyeFixture {
        image,
        mask: geometry_mask(height, width, &geometry, false),
        geometry,
    }
}

/// Writes `count` fixtures as `eye_NNN.png` plus `eye_NNN.mask.png` into `dir`.
pub fn write_corpus(
    dir: &Path,
    count: usize,
    height: usize,
    width: usize,
    domain: Domain,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let f = eye_fixture(height, width, domain, seed.wrapping_add(i as u64));
        let path = dir.join(format!("eye_{i:03}.png"));
        write_image(&f.image, &path)?;
        write_image(&encode_mask(&f.mask), dir.join(format!("eye_{i:03}.mask.png")))?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{IRIS, PUPIL};

    #[test]
    fn fixtures_are_seeded_and_masks_nest() {
        let a = eye_fixture(64, 64, Domain::Real, 9);
        let b = eye_fixture(64, 64, Domain::Real, 9);
        assert_eq!(a.image, b.image);
        let pupil = a.mask.support(PUPIL);
        let iris = a.mask.support(IRIS);
        assert!(pupil.iter().any(|&p| p));
        assert!(pupil.iter().zip(&iris).all(|(p, i)| !p || *i));
    }

    #[test]
    fn orphan_has_no_pupil() {
        let f = orphan_fixture(64, 64, 2);
        assert_eq!(f.mask.support_count(PUPIL), 0);
        assert!(f.mask.support_count(IRIS) > 0);
    }
}
