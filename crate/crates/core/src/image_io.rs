//! RGB images in pixel units, PNG and binary PPM codecs, bilinear resizing.

use std::io::Cursor;
use std::path::Path;

use eyepurify_tensor::{Element, Tensor};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;

/// Three-channel image stored channel-planar (`[3, H, W]` row-major), values in
/// pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config(format!("image extents must be positive, got {height}x{width}")));
        }
        if data.len() != 3 * height * width {
            return Err(Error::Config(format!(
                "image {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image value at index {i}")));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    /// Builds an image from `f(channel, row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        assert!(height > 0 && width > 0, "image extents must be positive");
        let mut data = Vec::with_capacity(3 * height * width);
        for c in 0..3 {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn rgb(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::new(
            &[1, 3, self.height, self.width],
            self.data.iter().map(|&v| T::lit(v as f64)).collect(),
        )
        .expect("length checked at construction")
    }

    /// Stacks same-sized images into a `[B, 3, H, W]` tensor.
    pub fn stack<T: Element>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images.first().ok_or_else(|| Error::Config("cannot stack zero images".into()))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if (img.height, img.width) != (first.height, first.width) {
                return Err(Error::Resolution {
                    what: "image batch".into(),
                    expected_h: first.height,
                    expected_w: first.width,
                    actual_h: img.height,
                    actual_w: img.width,
                });
            }
            data.extend(img.data.iter().map(|&v| T::lit(v as f64)));
        }
        Ok(Tensor::new(&[images.len(), 3, first.height, first.width], data)?)
    }

    /// Sample `index` of a `[B, 3, H, W]` tensor.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, index: usize) -> Result<Self> {
        let (b, c, h, w) = t.dims4("image")?;
        if c != 3 || index >= b {
            return Err(Error::Config(format!(
                "expected a [B, 3, H, W] tensor with B > {index}, got {:?}",
                t.shape()
            )));
        }
        let plane = 3 * h * w;
        let data = t.data()[index * plane..(index + 1) * plane]
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        Image::new(h, w, data)
    }

    /// Interleaved 8-bit RGB, rounding and clamping to `[0, 255]`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    out.push(self.get(c, y, x).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::Config(format!(
                "{height}x{width} RGB buffer needs {} bytes, got {}",
                3 * height * width,
                rgb.len()
            )));
        }
        let mut img = Image::filled(height, width, [0.0; 3]);
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                img.set(c, i / width, i % width, v as f32);
            }
        }
        Ok(img)
    }
}

const PNG_SIGNATURE: &[u8] = &[0x89, b'P', b'N', b'G', b'\r', b'\n', 0x1a, b'\n'];

/// Reads a PNG or binary PPM (P6) file, detected from its leading bytes.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes, path)
}

/// Decodes PNG or PPM bytes; `origin` only labels errors.
pub fn decode_image(bytes: &[u8], origin: &Path) -> Result<Image> {
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes, origin)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes, origin)
    } else {
        Err(Error::format(origin, "not a PNG or binary PPM (P6) file"))
    }
}

/// Writes the image as PNG or PPM according to the file extension.
pub fn write_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default();
    let bytes = match ext.as_str() {
        "png" => encode_png(img),
        "ppm" => encode_ppm(img),
        _ => return Err(Error::format(path, "output extension must be .png or .ppm")),
    };
    write_atomic(path, &bytes)
}

fn decode_png(bytes: &[u8], origin: &Path) -> Result<Image> {
    use png::{BitDepth, ColorType, Transformations};

    let bad = |e: png::DecodingError| Error::format(origin, e.to_string());
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(bad)?;
    let info = reader.info();
    if info.bit_depth == BitDepth::Sixteen {
        return Err(Error::UnsupportedDepth {
            path: origin.to_path_buf(),
            depth: 16,
        });
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(origin, "image too large"))?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(bad)?;
    if frame.bit_depth != BitDepth::Eight {
        return Err(Error::UnsupportedDepth {
            path: origin.to_path_buf(),
            depth: frame.bit_depth as u8,
        });
    }
    let (h, w) = (frame.height as usize, frame.width as usize);
    let buf = &buf[..frame.buffer_size()];
    let stride = frame.line_size;
    let channels = match frame.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(Error::format(origin, "palette was not expanded")),
    };
    // Alpha is dropped; gray is replicated into all three channels.
    Ok(Image::from_fn(h, w, |c, y, x| {
        let px = &buf[y * stride + x * channels..];
        let src = if channels >= 3 { c } else { 0 };
        px[src] as f32
    }))
}

fn encode_png(img: &Image) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().expect("writing to a Vec cannot fail");
        writer
            .write_image_data(&img.to_rgb8())
            .expect("buffer length matches header");
    }
    out
}

fn decode_ppm(bytes: &[u8], origin: &Path) -> Result<Image> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::format(origin, "malformed PPM header"))?;
    }
    let [w, h, maxval] = fields;
    if bytes.get(pos).is_none_or(|b| !b.is_ascii_whitespace()) {
        return Err(Error::format(origin, "malformed PPM header"));
    }
    pos += 1;
    if maxval > 255 {
        return Err(Error::UnsupportedDepth {
            path: origin.to_path_buf(),
            depth: 16,
        });
    }
    if maxval != 255 {
        return Err(Error::format(origin, format!("PPM maxval {maxval} is not 255")));
    }
    if w == 0 || h == 0 {
        return Err(Error::format(origin, "PPM has zero extent"));
    }
    let need = 3 * w * h;
    let data = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::format(origin, format!("PPM truncated: need {need} pixel bytes")))?;
    Image::from_rgb8(h, w, data)
}

fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_rgb8());
    out
}

/// Source coordinate for output index `i` when mapping `n_in` samples onto
/// `n_out` with the end samples aligned.
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in - 1) as f64 / 2.0
    } else {
        i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
    }
}

/// Bilinear resize with corner-aligned sampling and edge clamping.
pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Image {
    resize_planes(&img.data, 3, img.height, img.width, height, width)
        .map(|data| Image { height, width, data })
        .expect("positive extents")
}

/// Bilinear resize of `planes` stacked `[planes, h, w]` buffers.
pub(crate) fn resize_planes(
    data: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Option<Vec<f32>> {
    if out_h == 0 || out_w == 0 {
        return None;
    }
    if (h, w) == (out_h, out_w) {
        return Some(data.to_vec());
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let s = source_coord(i, n_in, n_out);
                let lo = (s.floor() as usize).min(n_in - 1);
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let rows = taps(h, out_h);
    let cols = taps(w, out_w);
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let plane = &data[p * h * w..(p + 1) * h * w];
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let at = |y: usize, x: usize| plane[y * w + x] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Image {
        Image::from_fn(5, 7, |c, y, x| ((c * 91 + y * 13 + x * 29) % 256) as f32)
    }

    #[test]
    fn png_and_ppm_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = sample();
        for name in ["a.png", "a.ppm"] {
            let path = dir.path().join(name);
            write_image(&img, &path).unwrap();
            assert_eq!(read_image(&path).unwrap(), img, "{name}");
        }
    }

    #[test]
    fn sixteen_bit_png_is_rejected() {
        let mut bytes = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut bytes, 2, 2);
            encoder.set_color(png::ColorType::Rgb);
            encoder.set_depth(png::BitDepth::Sixteen);
            encoder.write_header().unwrap().write_image_data(&[0u8; 24]).unwrap();
        }
        let err = decode_image(&bytes, Path::new("deep.png")).unwrap_err();
        assert!(matches!(err, Error::UnsupportedDepth { depth: 16, .. }), "{err}");
    }

    #[test]
    fn grayscale_png_is_replicated() {
        let mut bytes = Vec::new();
        {
            let mut encoder = png::Encoder::new(&mut bytes, 3, 1);
            encoder.set_color(png::ColorType::Grayscale);
            encoder.set_depth(png::BitDepth::Eight);
            encoder.write_header().unwrap().write_image_data(&[10, 20, 30]).unwrap();
        }
        let img = decode_image(&bytes, Path::new("gray.png")).unwrap();
        for c in 0..3 {
            assert_eq!([img.get(c, 0, 0), img.get(c, 0, 1), img.get(c, 0, 2)], [10.0, 20.0, 30.0]);
        }
    }

    #[test]
    fn ppm_with_comment_and_bad_inputs() {
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend([1, 2, 3, 4, 5, 6]);
        let img = decode_image(&bytes, Path::new("x.ppm")).unwrap();
        assert_eq!(img.rgb(0, 1), [4.0, 5.0, 6.0]);
        assert!(decode_image(&bytes[..bytes.len() - 1], Path::new("x.ppm")).is_err());
        let deep = b"P6 1 1 65535\n\0\0\0\0\0\0";
        assert!(matches!(
            decode_image(deep, Path::new("x.ppm")),
            Err(Error::UnsupportedDepth { .. })
        ));
        assert!(decode_image(b"GIF89a", Path::new("x.gif")).is_err());
    }

    #[test]
    fn unknown_extension_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_image(&sample(), dir.path().join("a.jpg")).is_err());
    }

    #[test]
    fn identity_resize_is_bit_identical() {
        let img = sample();
        assert_eq!(resize_bilinear(&img, 5, 7), img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(3, 4, [12.5, 80.0, 255.0]);
        let out = resize_bilinear(&img, 7, 2);
        for c in 0..3 {
            for y in 0..7 {
                for x in 0..2 {
                    assert_eq!(out.get(c, y, x), img.get(c, 0, 0));
                }
            }
        }
    }

    #[test]
    fn two_column_ramp_upsamples_linearly() {
        let img = Image::from_fn(2, 2, |_, _, x| if x == 0 { 0.0 } else { 255.0 });
        let out = resize_bilinear(&img, 2, 4);
        for y in 0..2 {
            let row: Vec<f32> = (0..4).map(|x| out.get(0, y, x)).collect();
            for (got, want) in row.iter().zip([0.0, 85.0, 170.0, 255.0]) {
                assert!((got - want).abs() <= 1.0, "{row:?}");
            }
        }
    }

    #[test]
    fn tensor_round_trip() {
        let img = sample();
        let t = Image::stack::<f64>(&[&img, &img]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 5, 7]);
        assert_eq!(Image::from_tensor(&t, 1).unwrap(), img);
        assert!(Image::from_tensor(&t, 2).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        assert!(Image::new(1, 1, vec![0.0, f32::NAN, 0.0]).is_err());
    }
}
