//! Color-coded pupil/iris masks, orphan-pupil repair and per-layer pyramids.
//!
//! Color code: white pixels are pupil, red pixels are iris. The iris channel
//! covers the whole iris disc, so it contains the pupil as well.

use std::collections::BTreeMap;

use eyepurify_tensor::{Element, Tensor};

use crate::error::{Error, Result};
use crate::image_io::{resize_planes, Image};
use crate::lossnet::{feature_size, layer_stride};

pub const PUPIL: usize = 0;
pub const IRIS: usize = 1;
pub const MASK_CHANNELS: usize = 2;

/// Values at or above this count as inside a channel's support.
pub const SUPPORT_THRESHOLD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskThresholds {
    /// Pupil: every channel at least this bright.
    pub white_min: f32,
    /// Iris: red at least this bright...
    pub red_min: f32,
    /// ...while green and blue stay at or below this.
    pub red_other_max: f32,
}

impl Default for MaskThresholds {
    fn default() -> Self {
        MaskThresholds {
            white_min: 250.0,
            red_min: 200.0,
            red_other_max: 80.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Decoded,
    Repaired,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMask {
    height: usize,
    width: usize,
    channels: [Vec<f32>; MASK_CHANNELS],
    provenance: Provenance,
}

impl SemanticMask {
    pub fn new(height: usize, width: usize, pupil: Vec<f32>, iris: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!("mask extents must be positive, got {height}x{width}")));
        }
        for (name, ch) in [("pupil", &pupil), ("iris", &iris)] {
            if ch.len() != height * width {
                return Err(Error::Config(format!(
                    "{name} channel has {} values, expected {}",
                    ch.len(),
                    height * width
                )));
            }
            if let Some(v) = ch.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Config(format!("{name} channel value {v} outside [0, 1]")));
            }
        }
        Ok(SemanticMask {
            height,
            width,
            channels: [pupil, iris],
            provenance: Provenance::Decoded,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width], vec![0.0; height * width]).expect("valid extents")
    }

    /// Binary mask from per-pixel predicates `(row, col)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        pupil: impl Fn(usize, usize) -> bool,
        iris: impl Fn(usize, usize) -> bool,
    ) -> Self {
        let mut m = Self::empty(height, width);
        for y in 0..height {
            for x in 0..width {
                m.channels[PUPIL][y * width + x] = pupil(y, x) as u8 as f32;
                m.channels[IRIS][y * width + x] = iris(y, x) as u8 as f32;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.channels[c]
    }

    pub fn pupil(&self) -> &[f32] {
        &self.channels[PUPIL]
    }

    pub fn iris(&self) -> &[f32] {
        &self.channels[IRIS]
    }

    pub fn support(&self, c: usize) -> Vec<bool> {
        self.channels[c].iter().map(|&v| v >= SUPPORT_THRESHOLD).collect()
    }

    pub fn support_count(&self, c: usize) -> usize {
        self.channels[c].iter().filter(|&&v| v >= SUPPORT_THRESHOLD).count()
    }

    /// Both channels thresholded at [`SUPPORT_THRESHOLD`].
    pub fn binarized(&self) -> Self {
        let mut m = self.clone();
        for ch in &mut m.channels {
            for v in ch.iter_mut() {
                *v = if *v >= SUPPORT_THRESHOLD { 1.0 } else { 0.0 };
            }
        }
        m
    }

    /// Channels as a `[C, H, W]` tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self.channels.iter().flatten().map(|&v| T::lit(v as f64)).collect();
        Tensor::new(&[MASK_CHANNELS, self.height, self.width], data).expect("sizes checked")
    }

    /// Bilinearly resampled soft mask.
    pub fn resized(&self, height: usize, width: usize) -> Self {
        let planes: Vec<f32> = self.channels.concat();
        let data = resize_planes(&planes, MASK_CHANNELS, self.height, self.width, height, width)
            .expect("positive extents");
        let (pupil, iris) = data.split_at(height * width);
        SemanticMask {
            height,
            width,
            channels: [
                pupil.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
                iris.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            ],
            provenance: self.provenance,
        }
    }
}

pub fn decode_mask(image: &Image) -> SemanticMask {
    decode_mask_with(image, &MaskThresholds::default())
}

pub fn decode_mask_with(image: &Image, t: &MaskThresholds) -> SemanticMask {
    let (h, w) = (image.height(), image.width());
    let mut m = SemanticMask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let [r, g, b] = image.rgb(y, x);
            let white = r >= t.white_min && g >= t.white_min && b >= t.white_min;
            let red = r >= t.red_min && g <= t.red_other_max && b <= t.red_other_max;
            m.channels[PUPIL][y * w + x] = white as u8 as f32;
            m.channels[IRIS][y * w + x] = (white || red) as u8 as f32;
        }
    }
    m
}

/// White where the pupil is set, red where only the iris is, black elsewhere.
pub fn encode_mask(mask: &SemanticMask) -> Image {
    Image::from_fn(mask.height, mask.width, |c, y, x| {
        let i = y * mask.width + x;
        let pupil = mask.channels[PUPIL][i] >= SUPPORT_THRESHOLD;
        if pupil || (mask.channels[IRIS][i] >= SUPPORT_THRESHOLD && c == 0) {
            255.0
        } else {
            0.0
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RepairConfig {
    /// Radius of a synthesized pupil relative to the iris's equivalent radius.
    pub pupil_ratio: f64,
}

impl Default for RepairConfig {
    fn default() -> Self {
        RepairConfig { pupil_ratio: 0.4 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RepairOutcome {
    /// A pupil was synthesized because none survived decoding.
    pub orphan_fixed: bool,
    /// Pupil pixels zeroed because they fell outside the iris.
    pub clipped: usize,
}

pub fn repair_orphans(mask: &SemanticMask) -> Result<(SemanticMask, RepairOutcome)> {
    repair_orphans_with(mask, &RepairConfig::default())
}

/// Ensures a non-empty pupil that lies inside the iris. An orphaned iris gets a
/// pupil disc at its centroid.
pub fn repair_orphans_with(mask: &SemanticMask, cfg: &RepairConfig) -> Result<(SemanticMask, RepairOutcome)> {
    let (h, w) = (mask.height, mask.width);
    let iris = mask.support(IRIS);
    let area = iris.iter().filter(|&&s| s).count();
    if area == 0 {
        return Err(Error::NoEyeRegion);
    }
    let mut out = mask.clone();
    let mut outcome = RepairOutcome::default();
    for (p, &inside) in out.channels[PUPIL].iter_mut().zip(&iris) {
        if !inside && *p != 0.0 {
            if *p >= SUPPORT_THRESHOLD {
                outcome.clipped += 1;
            }
            *p = 0.0;
        }
    }
    if out.support_count(PUPIL) == 0 {
        let (mut sy, mut sx) = (0.0, 0.0);
        for (i, _) in iris.iter().enumerate().filter(|(_, &s)| s) {
            sy += (i / w) as f64;
            sx += (i % w) as f64;
        }
        let (cy, cx) = (sy / area as f64, sx / area as f64);
        let radius = cfg.pupil_ratio * (area as f64 / std::f64::consts::PI).sqrt();
        let pupil = &mut out.channels[PUPIL];
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                if d2 <= radius * radius && iris[y * w + x] {
                    pupil[y * w + x] = 1.0;
                }
            }
        }
        if !pupil.iter().any(|&v| v >= SUPPORT_THRESHOLD) {
            let nearest = (0..h * w)
                .filter(|&i| iris[i])
                .min_by(|&a, &b| {
                    let d = |i: usize| ((i / w) as f64 - cy).powi(2) + ((i % w) as f64 - cx).powi(2);
                    d(a).total_cmp(&d(b))
                })
                .expect("iris is non-empty");
            pupil[nearest] = 1.0;
        }
        outcome.orphan_fixed = true;
    }
    if outcome.orphan_fixed || outcome.clipped > 0 {
        out.provenance = Provenance::Repaired;
    }
    Ok((out, outcome))
}

/// Soft masks at the spatial resolution of each loss-network layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMasks<T = f32> {
    layers: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> LayerMasks<T> {
    /// `[C, h_l, w_l]` masks for `layer`.
    pub fn get(&self, layer: &str) -> Result<&Tensor<T>> {
        self.layers.get(layer).ok_or_else(|| Error::MissingMask(layer.to_string()))
    }

    pub fn layers(&self) -> impl Iterator<Item = &str> {
        self.layers.keys().map(String::as_str)
    }

    pub fn from_layers(layers: BTreeMap<String, Tensor<T>>) -> Self {
        LayerMasks { layers }
    }

    pub fn channels(&self) -> Option<usize> {
        self.layers.values().next().map(|t| t.shape()[0])
    }

    pub fn cast<U: Element>(&self) -> LayerMasks<U> {
        LayerMasks {
            layers: self.layers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }
}

/// Average-pools each channel by every layer's cumulative stride. `image_size`
/// is the `(height, width)` of the image the masks belong to.
pub fn downsample_masks(
    mask: &SemanticMask,
    image_size: (usize, usize),
    layers: &[&str],
) -> Result<LayerMasks<f32>> {
    if (mask.height, mask.width) != image_size {
        return Err(Error::Resolution {
            what: "mask".into(),
            expected_h: image_size.0,
            expected_w: image_size.1,
            actual_h: mask.height,
            actual_w: mask.width,
        });
    }
    let mut out = BTreeMap::new();
    for &layer in layers {
        let s = layer_stride(layer)?;
        let (lh, lw) = feature_size(layer, mask.height, mask.width)?;
        let norm = 1.0 / (s * s) as f64;
        let mut data = Vec::with_capacity(MASK_CHANNELS * lh * lw);
        for ch in &mask.channels {
            for y in 0..lh {
                for x in 0..lw {
                    let mut acc = 0.0f64;
                    for dy in 0..s {
                        let row = (y * s + dy) * mask.width;
                        for dx in 0..s {
                            acc += ch[row + x * s + dx] as f64;
                        }
                    }
                    data.push((acc * norm) as f32);
                }
            }
        }
        out.insert(layer.to_string(), Tensor::new(&[MASK_CHANNELS, lh, lw], data)?);
    }
    Ok(LayerMasks { layers: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc(cy: f64, cx: f64, r: f64) -> impl Fn(usize, usize) -> bool {
        move |y, x| (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) <= r * r
    }

    #[test]
    fn white_block_decodes_to_nine_pupil_pixels() {
        let img = Image::from_fn(8, 8, |_, y, x| if (2..5).contains(&y) && (3..6).contains(&x) { 255.0 } else { 0.0 });
        let m = decode_mask(&img);
        assert_eq!(m.support_count(PUPIL), 9);
        assert_eq!(m.pupil().iter().sum::<f32>(), 9.0);
    }

    #[test]
    fn red_disc_decodes_to_iris_only() {
        let inside = disc(16.0, 16.0, 9.0);
        let img = Image::from_fn(32, 32, |c, y, x| if inside(y, x) && c == 0 { 230.0 } else { 10.0 });
        let m = decode_mask(&img);
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(m.iris()[y * 32 + x], inside(y, x) as u8 as f32);
            }
        }
        assert_eq!(m.support_count(PUPIL), 0);
    }

    #[test]
    fn anti_aliased_red_is_background() {
        let m = decode_mask(&Image::filled(1, 1, [128.0, 0.0, 0.0]));
        assert_eq!((m.pupil()[0], m.iris()[0]), (0.0, 0.0));
    }

    #[test]
    fn orphan_iris_gets_centered_pupil() {
        let m = SemanticMask::from_fn(64, 64, |_, _| false, disc(32.0, 32.0, 20.0));
        let (r, outcome) = repair_orphans(&m).unwrap();
        assert!(outcome.orphan_fixed);
        assert_eq!(r.provenance(), Provenance::Repaired);
        let pupil = r.support(PUPIL);
        let n = pupil.iter().filter(|&&p| p).count() as f64;
        let (mut sy, mut sx) = (0.0, 0.0);
        for (i, _) in pupil.iter().enumerate().filter(|(_, &p)| p) {
            sy += (i / 64) as f64;
            sx += (i % 64) as f64;
        }
        assert!((sy / n - 32.0).abs() <= 1.0 && (sx / n - 32.0).abs() <= 1.0);
        let want = std::f64::consts::PI * 64.0;
        assert!((n - want).abs() <= 0.1 * want, "pupil area {n}");
    }

    #[test]
    fn valid_mask_is_unchanged() {
        let m = SemanticMask::from_fn(32, 32, disc(16.0, 16.0, 4.0), disc(16.0, 16.0, 10.0));
        let (r, outcome) = repair_orphans(&m).unwrap();
        assert_eq!(r, m);
        assert_eq!(outcome, RepairOutcome::default());
    }

    #[test]
    fn pupil_is_clipped_to_iris() {
        let m = SemanticMask::from_fn(32, 32, disc(16.0, 24.0, 6.0), disc(16.0, 16.0, 10.0));
        let (r, outcome) = repair_orphans(&m).unwrap();
        assert!(outcome.clipped > 0 && !outcome.orphan_fixed);
        for (p, i) in r.pupil().iter().zip(r.iris()) {
            assert!(p <= i);
        }
    }

    #[test]
    fn ring_iris_falls_back_to_nearest_pixel() {
        let m = SemanticMask::from_fn(32, 32, |_, _| false, |y, x| {
            let d2 = (y as f64 - 16.0).powi(2) + (x as f64 - 16.0).powi(2);
            (100.0..=144.0).contains(&d2)
        });
        let (r, _) = repair_orphans(&m).unwrap();
        assert_eq!(r.support_count(PUPIL), 1);
        let (again, outcome) = repair_orphans(&r).unwrap();
        assert_eq!(again, r);
        assert!(!outcome.orphan_fixed);
    }

    #[test]
    fn empty_mask_has_no_eye_region() {
        assert!(matches!(repair_orphans(&SemanticMask::empty(4, 4)), Err(Error::NoEyeRegion)));
    }

    #[test]
    fn encode_threshold_and_round_trip() {
        let m = SemanticMask::from_fn(16, 16, disc(8.0, 8.0, 3.0), disc(8.0, 8.0, 6.0));
        assert_eq!(decode_mask(&encode_mask(&m)), m);
        let soft = SemanticMask::new(1, 1, vec![0.4], vec![0.4]).unwrap();
        assert_eq!(encode_mask(&soft).rgb(0, 0), [0.0, 0.0, 0.0]);
        let black = encode_mask(&SemanticMask::empty(3, 3));
        assert!(black.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pooled_masks_match_layer_sizes_and_averages() {
        let ones = SemanticMask::new(32, 32, vec![1.0; 1024], vec![1.0; 1024]).unwrap();
        let lm = downsample_masks(&ones, (32, 32), &["conv1_1", "conv3_1", "conv5_1"]).unwrap();
        assert_eq!(lm.get("conv3_1").unwrap().shape(), &[2, 8, 8]);
        assert_eq!(lm.get("conv5_1").unwrap().shape(), &[2, 2, 2]);
        for layer in lm.layers() {
            assert!(lm.get(layer).unwrap().data().iter().all(|&v| v == 1.0));
        }
        let checker = SemanticMask::from_fn(8, 8, |y, x| (y + x) % 2 == 0, |_, _| true);
        let lm = downsample_masks(&checker, (8, 8), &["conv2_1"]).unwrap();
        let pooled = lm.get("conv2_1").unwrap();
        assert_eq!(pooled.shape(), &[2, 4, 4]);
        assert!(pooled.data()[..16].iter().all(|&v| v == 0.5));
        assert!(matches!(downsample_masks(&ones, (16, 32), &["conv1_1"]), Err(Error::Resolution { .. })));
        assert!(matches!(lm.get("conv4_2"), Err(Error::MissingMask(_))));
    }
}
