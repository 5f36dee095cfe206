//! Image buffers, PNG/PPM codecs, resampling, color conversion and
//! Laplacian pyramids.
//!
//! Every [`Image`] holds display-referred RGB in row-major `H×W×3` order with
//! all channels in `[0, 1]`. Signed intermediate data (pyramid bands, YUV
//! chroma) lives in [`Raster`] / [`YuvImage`], which carry no range invariant.

use std::io::Read;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// BT.601 luma weights.
pub const LUMA_R: f64 = 0.299;
pub const LUMA_G: f64 = 0.587;
pub const LUMA_B: f64 = 0.114;

#[inline]
pub fn luminance(rgb: [f64; 3]) -> f64 {
    LUMA_R * rgb[0] + LUMA_G * rgb[1] + LUMA_B * rgb[2]
}

#[inline]
fn clamp_unit(v: f64) -> f64 {
    // NaN never reaches here from the public API; map it to black regardless.
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Display-referred RGB image with channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from row-major `H×W×3` data, validating dimensions and range.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::arg(format!(
                "image dimensions must be >= 1, got {height}x{width}"
            )));
        }
        if data.len() != height * width * CHANNELS {
            return Err(Error::shape("Image::new", &[height, width, CHANNELS], &[data.len()]));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::arg(format!("element {i} = {} outside [0,1]", data[i])));
        }
        Ok(Self { height, width, data })
    }

    /// Builds an image, clamping every element into `[0, 1]`.
    ///
    /// Panics if the data length disagrees with the dimensions; this is only
    /// used on buffers computed from a valid image of the same shape.
    pub fn from_raw_clamped(height: usize, width: usize, mut data: Vec<f64>) -> Self {
        assert!(height >= 1 && width >= 1);
        assert_eq!(data.len(), height * width * CHANNELS);
        data.iter_mut().for_each(|v| *v = clamp_unit(*v));
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let px = rgb.map(clamp_unit);
        let data = (0..height * width).flat_map(|_| px).collect();
        Self::from_raw_clamped(height, width, data)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * CHANNELS);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::from_raw_clamped(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(CHANNELS).map(|p| [p[0], p[1], p[2]])
    }

    /// Mean over all channel values.
    pub fn mean_intensity(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// BT.601 luminance plane.
    pub fn luminance_plane(&self) -> Vec<f64> {
        self.pixels().map(luminance).collect()
    }

    /// Root-mean-square difference over all channel values.
    pub fn rms_distance(&self, other: &Image) -> Result<f64> {
        self.check_same_dims(other, "rms_distance")?;
        let sq: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok((sq / self.data.len() as f64).sqrt())
    }

    pub(crate) fn check_same_dims(&self, other: &Image, context: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::arg(format!(
                "{context}: dimension mismatch {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn as_raster(&self) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            data: self.data.clone(),
        }
    }
}

/// Three-channel `H×W×3` buffer of unconstrained reals (pyramid bands and
/// other signed intermediates).
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * CHANNELS],
        }
    }

    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Result<Raster> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::arg(format!("resize target must be >= 1, got {out_h}x{out_w}")));
        }
        Ok(Raster {
            height: out_h,
            width: out_w,
            data: resize_planar(&self.data, self.height, self.width, CHANNELS, out_h, out_w),
        })
    }

    pub fn max_abs_diff(&self, other: &[f64]) -> f64 {
        self.data
            .iter()
            .zip(other)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Padding and separable filtering
// ---------------------------------------------------------------------------

/// Mirror index into `[0, n)` without repeating the edge sample.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Separable convolution of an interleaved `h×w×c` buffer with a normalized,
/// odd-length symmetric kernel and reflect padding.
///
/// Evaluated as `x + Σ k_i (x_i − x)` so that constant inputs pass through
/// bit-exactly.
pub(crate) fn blur_separable(data: &[f64], h: usize, w: usize, c: usize, kernel: &[f64]) -> Vec<f64> {
    debug_assert!(kernel.len() % 2 == 1);
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; data.len()];
    for y in 0..h {
        let row = y * w * c;
        for x in 0..w {
            for ch in 0..c {
                let centre = data[row + x * c + ch];
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    let xx = reflect(x as isize + k as isize - r, w);
                    acc += wgt * (data[row + xx * c + ch] - centre);
                }
                tmp[row + x * c + ch] = centre + acc;
            }
        }
    }
    let mut out = vec![0.0; data.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let centre = tmp[(y * w + x) * c + ch];
                let mut acc = 0.0;
                for (k, wgt) in kernel.iter().enumerate() {
                    let yy = reflect(y as isize + k as isize - r, h);
                    acc += wgt * (tmp[(yy * w + x) * c + ch] - centre);
                }
                out[(y * w + x) * c + ch] = centre + acc;
            }
        }
    }
    out
}

/// Normalized Gaussian kernel with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Gaussian blur with reflect padding; output stays in `[0, 1]`.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let k = gaussian_kernel(sigma);
    let out = blur_separable(&img.data, img.height, img.width, CHANNELS, &k);
    Image::from_raw_clamped(img.height, img.width, out)
}

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Half-pixel-centred bilinear resampling of an interleaved buffer with edge clamping.
pub(crate) fn resize_planar(data: &[f64], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let src = |n: usize, scale: f64, i: usize| -> (usize, usize, f64) {
        let p = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| src(w, sx, x)).collect();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let (y0, y1, fy) = src(h, sy, y);
        for &(x0, x1, fx) in &cols {
            for ch in 0..c {
                let p00 = data[(y0 * w + x0) * c + ch];
                let p01 = data[(y0 * w + x1) * c + ch];
                let p10 = data[(y1 * w + x0) * c + ch];
                let p11 = data[(y1 * w + x1) * c + ch];
                out.push(lerp(lerp(p00, p01, fx), lerp(p10, p11, fx), fy));
            }
        }
    }
    out
}

/// Bilinear resize to `out_h × out_w`.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::arg(format!("resize target must be >= 1, got {out_h}x{out_w}")));
    }
    if (out_h, out_w) == img.dims() {
        return Ok(img.clone());
    }
    let data = resize_planar(&img.data, img.height, img.width, CHANNELS, out_h, out_w);
    Ok(Image::from_raw_clamped(out_h, out_w, data))
}

// ---------------------------------------------------------------------------
// Laplacian pyramid
// ---------------------------------------------------------------------------

/// Band-pass decomposition: `bands[0]` is the finest level, `residual` the
/// low-pass remainder.
#[derive(Clone, Debug)]
pub struct LaplacianPyramid {
    pub bands: Vec<Raster>,
    pub residual: Image,
    pub base_size: (usize, usize),
}

impl LaplacianPyramid {
    pub fn level_count(&self) -> usize {
        self.bands.len()
    }

    /// Rebuilds the source image by upsampling and adding bands coarse to fine.
    pub fn collapse(&self) -> Raster {
        let mut cur = self.residual.as_raster();
        for band in self.bands.iter().rev() {
            let up = resize_planar(&cur.data, cur.height, cur.width, CHANNELS, band.height, band.width);
            let data = band.data.iter().zip(&up).map(|(b, u)| b + u).collect();
            cur = Raster {
                height: band.height,
                width: band.width,
                data,
            };
        }
        cur
    }
}

fn blur_downsample(r: &Raster) -> Raster {
    let blurred = blur_separable(&r.data, r.height, r.width, CHANNELS, &BINOMIAL5);
    let oh = r.height.div_ceil(2);
    let ow = r.width.div_ceil(2);
    let mut data = Vec::with_capacity(oh * ow * CHANNELS);
    for y in 0..oh {
        for x in 0..ow {
            let i = (2 * y * r.width + 2 * x) * CHANNELS;
            data.extend_from_slice(&blurred[i..i + CHANNELS]);
        }
    }
    Raster {
        height: oh,
        width: ow,
        data,
    }
}

/// Builds a `levels`-band Laplacian pyramid using a `[1,4,6,4,1]/16` blur.
pub fn laplacian_pyramid(img: &Image, levels: usize) -> Result<LaplacianPyramid> {
    let min_side = img.height.min(img.width);
    if levels == 0 || levels >= usize::BITS as usize || min_side < (1usize << levels) {
        return Err(Error::arg(format!(
            "image {}x{} too small for a {levels}-level pyramid",
            img.height, img.width
        )));
    }
    let mut bands = Vec::with_capacity(levels);
    let mut cur = img.as_raster();
    for _ in 0..levels {
        let low = blur_downsample(&cur);
        let up = resize_planar(&low.data, low.height, low.width, CHANNELS, cur.height, cur.width);
        let band = cur.data.iter().zip(&up).map(|(c, u)| c - u).collect();
        bands.push(Raster {
            height: cur.height,
            width: cur.width,
            data: band,
        });
        cur = low;
    }
    let residual = Image::from_raw_clamped(cur.height, cur.width, cur.data);
    Ok(LaplacianPyramid {
        bands,
        residual,
        base_size: img.dims(),
    })
}

// ---------------------------------------------------------------------------
// Color conversion
// ---------------------------------------------------------------------------

/// Planar BT.601 full-range YUV: `y ∈ [0,1]`, `u, v ∈ [-0.5, 0.5]`.
#[derive(Clone, Debug, PartialEq)]
pub struct YuvImage {
    pub height: usize,
    pub width: usize,
    pub y: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn rgb_to_yuv(img: &Image) -> YuvImage {
    let n = img.pixel_count();
    let (mut y, mut u, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for [r, g, b] in img.pixels() {
        y.push(luminance([r, g, b]).clamp(0.0, 1.0));
        u.push((-0.168_736 * r - 0.331_264 * g + 0.5 * b).clamp(-0.5, 0.5));
        v.push((0.5 * r - 0.418_688 * g - 0.081_312 * b).clamp(-0.5, 0.5));
    }
    YuvImage {
        height: img.height,
        width: img.width,
        y,
        u,
        v,
    }
}

// ---------------------------------------------------------------------------
// Codecs
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Png,
    Ppm,
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0D, 0x0A, 0x1A, 0x0A];

/// Decodes an 8/16-bit PNG or a binary (P6) PPM stream.
pub fn decode(bytes: &[u8]) -> Result<Image> {
    if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.len() >= 8 && bytes[..8] == PNG_SIGNATURE {
        decode_png(bytes)
    } else if !bytes.is_empty() && PNG_SIGNATURE.starts_with(bytes) {
        Err(Error::Decode {
            offset: bytes.len(),
            message: "truncated PNG signature".into(),
        })
    } else {
        Err(Error::Decode {
            offset: 0,
            message: "unrecognized magic; expected PNG or P6 PPM".into(),
        })
    }
}

struct CountingReader<'a> {
    inner: &'a [u8],
    pos: usize,
}

impl Read for CountingReader<'_> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = (&self.inner[self.pos..]).read(buf)?;
        self.pos += n;
        Ok(n)
    }
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut reader = CountingReader { inner: bytes, pos: 0 };
    let err = |pos: usize, e: png::DecodingError| Error::Decode {
        offset: pos,
        message: e.to_string(),
    };
    let mut decoder = png::Decoder::new(&mut reader);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut png_reader = match decoder.read_info() {
        Ok(r) => r,
        Err(e) => return Err(err(reader.pos, e)),
    };
    let info = png_reader.info();
    let depth = info.bit_depth;
    if !matches!(depth, png::BitDepth::Eight | png::BitDepth::Sixteen) {
        return Err(Error::UnsupportedFormat(format!("PNG bit depth {depth:?}")));
    }
    let mut buf = vec![0; png_reader.output_buffer_size()];
    let frame = png_reader.next_frame(&mut buf).map_err(|e| Error::Decode {
        offset: bytes.len(),
        message: e.to_string(),
    })?;
    let (w, h) = (frame.width as usize, frame.height as usize);
    let samples = match frame.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(Error::UnsupportedFormat(format!("PNG color type {other:?}"))),
    };
    let buf = &buf[..frame.buffer_size()];
    let sixteen = frame.bit_depth == png::BitDepth::Sixteen;
    let sample = |i: usize| -> f64 {
        if sixteen {
            u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f64 / 65535.0
        } else {
            buf[i] as f64 / 255.0
        }
    };
    let mut data = Vec::with_capacity(w * h * CHANNELS);
    for p in 0..w * h {
        let base = p * samples;
        if samples <= 2 {
            let g = sample(base);
            data.extend_from_slice(&[g, g, g]);
        } else {
            data.extend_from_slice(&[sample(base), sample(base + 1), sample(base + 2)]);
        }
    }
    Image::new(h, w, data)
}

fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|b| *b != b'\n') {
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
        if start == pos {
            return Err(Error::Decode {
                offset: pos,
                message: "expected decimal header field".into(),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Decode {
                offset: start,
                message: "header field out of range".into(),
            })?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Decode {
            offset: pos,
            message: "expected single whitespace after maxval".into(),
        });
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(Error::Decode {
            offset: pos,
            message: format!("zero dimension {w}x{h}"),
        });
    }
    let bytes_per_sample = match maxval {
        1..=255 => 1,
        256..=65535 => 2,
        _ => return Err(Error::UnsupportedFormat(format!("PPM maxval {maxval}"))),
    };
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(CHANNELS * bytes_per_sample))
        .ok_or_else(|| Error::Decode {
            offset: pos,
            message: "dimensions overflow".into(),
        })?;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(Error::Decode {
            offset: bytes.len(),
            message: format!("truncated pixel data: need {need} bytes, have {}", payload.len()),
        });
    }
    let scale = maxval as f64;
    let data = if bytes_per_sample == 1 {
        payload[..need].iter().map(|&b| (b as f64 / scale).min(1.0)).collect()
    } else {
        payload[..need]
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f64 / scale).min(1.0))
            .collect()
    };
    Image::new(h, w, data)
}

#[inline]
fn quantize8(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Encodes as 8-bit RGB PNG or binary PPM.
pub fn encode(img: &Image, format: Format) -> Result<Vec<u8>> {
    let pixels: Vec<u8> = img.data.iter().map(|&v| quantize8(v)).collect();
    match format {
        Format::Ppm => {
            let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend_from_slice(&pixels);
            Ok(out)
        }
        Format::Png => {
            let mut out = Vec::new();
            {
                let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
                enc.set_color(png::ColorType::Rgb);
                enc.set_depth(png::BitDepth::Eight);
                let mut writer = enc.write_header().map_err(|e| Error::arg(e.to_string()))?;
                writer
                    .write_image_data(&pixels)
                    .map_err(|e| Error::arg(e.to_string()))?;
            }
            Ok(out)
        }
    }
}

pub fn read_image(path: impl AsRef<std::path::Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn new_rejects_bad_input() {
        assert!(Image::new(0, 1, vec![]).is_err());
        assert!(Image::new(1, 1, vec![0.0; 2]).is_err());
        assert!(Image::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(Image::new(1, 1, vec![0.0, f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn decode_ppm_examples() {
        let mut red = b"P6\n1 1\n255\n".to_vec();
        red.extend_from_slice(&[255, 0, 0]);
        let img = decode(&red).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.0]);

        let mut gray = b"P6 2 2 255\n".to_vec();
        gray.extend_from_slice(&[128; 12]);
        let img = decode(&gray).unwrap();
        assert_eq!(img.dims(), (2, 2));
        assert!(img.data().iter().all(|&v| v == 128.0 / 255.0));
    }

    #[test]
    fn decode_ppm_with_comment_and_16bit() {
        let mut bytes = b"P6\n# made by hand\n1 1\n65535\n".to_vec();
        bytes.extend_from_slice(&[0xFF, 0xFF, 0x00, 0x00, 0x80, 0x00]);
        let img = decode(&bytes).unwrap();
        assert_eq!(img.data()[0], 1.0);
        assert_eq!(img.data()[1], 0.0);
        assert!((img.data()[2] - 32768.0 / 65535.0).abs() < 1e-15);
    }

    #[test]
    fn decode_errors() {
        let png = encode(&Image::filled(2, 2, [0.5; 3]), Format::Png).unwrap();
        match decode(&png[..5]) {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("expected decode error, got {other:?}"),
        }
        assert!(matches!(decode(&png[..20]), Err(Error::Decode { .. })));
        assert!(matches!(decode(b"GIF89a"), Err(Error::Decode { offset: 0, .. })));
        let mut short = b"P6\n2 2\n255\n".to_vec();
        short.extend_from_slice(&[0; 5]);
        assert!(matches!(decode(&short), Err(Error::Decode { .. })));
        assert!(matches!(
            decode(b"P6\n1 1\n70000\n\0\0\0"),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn decode_rejects_low_bit_depth_png() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 8, 1);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::One);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0b1010_1010]).unwrap();
        }
        assert!(matches!(decode(&out), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn decode_16bit_rgba_png_drops_alpha() {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, 1, 1);
            enc.set_color(png::ColorType::Rgba);
            enc.set_depth(png::BitDepth::Sixteen);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0xFF, 0xFF, 0, 0, 0x80, 0, 0x12, 0x34]).unwrap();
        }
        let img = decode(&out).unwrap();
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 32768.0 / 65535.0]);
    }

    #[test]
    fn encode_examples() {
        let black = Image::filled(1, 1, [0.0; 3]);
        for f in [Format::Png, Format::Ppm] {
            let bytes = encode(&black, f).unwrap();
            assert_eq!(decode(&bytes).unwrap().data(), &[0.0, 0.0, 0.0]);
        }
        assert!(encode(&black, Format::Ppm).unwrap().starts_with(b"P6"));
    }

    #[test]
    fn resize_same_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 7, 5);
        assert_eq!(resize_bilinear(&img, 7, 5).unwrap(), img);
        assert!(resize_bilinear(&img, 0, 5).is_err());
    }

    #[test]
    fn resize_constant_is_exact() {
        let img = Image::filled(9, 13, [0.3, 0.7, 0.123_456_789]);
        for (h, w) in [(1, 1), (4, 31), (64, 64), (17, 3)] {
            let out = resize_bilinear(&img, h, w).unwrap();
            assert!(out.pixels().all(|p| p == [0.3, 0.7, 0.123_456_789]));
        }
    }

    /// Independent scalar oracle: sample position under half-pixel centres,
    /// clamp to the edge, then linear interpolation between the two taps.
    fn bilinear_1d_oracle(src: &[f64], out_n: usize) -> Vec<f64> {
        let n = src.len();
        (0..out_n)
            .map(|i| {
                let pos = (i as f64 + 0.5) * n as f64 / out_n as f64 - 0.5;
                let pos = pos.max(0.0).min((n - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                let t = pos - lo as f64;
                src[lo] * (1.0 - t) + src[hi] * t
            })
            .collect()
    }

    #[test]
    fn resize_matches_scalar_oracle() {
        // 2 rows × 1 column with values 0 and 1, upsampled to 4 rows.
        let img = Image::new(2, 1, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let out = resize_bilinear(&img, 4, 1).unwrap();
        let expected = bilinear_1d_oracle(&[0.0, 1.0], 4);
        assert_eq!(expected, vec![0.0, 0.25, 0.75, 1.0]);
        for (y, e) in expected.iter().enumerate() {
            for c in out.pixel(y, 0) {
                assert!((c - e).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn pyramid_examples() {
        let constant = Image::filled(64, 64, [0.4, 0.5, 0.6]);
        let pyr = laplacian_pyramid(&constant, 3).unwrap();
        assert_eq!(pyr.level_count(), 3);
        for band in &pyr.bands {
            assert!(band.data.iter().all(|&v| v == 0.0));
        }
        assert_eq!(pyr.residual.dims(), (8, 8));
        assert!(pyr.residual.pixels().all(|p| p == [0.4, 0.5, 0.6]));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 37, 50);
        let pyr = laplacian_pyramid(&img, 3).unwrap();
        assert!(pyr.collapse().max_abs_diff(img.data()) <= 1e-6);
        assert_eq!(pyr.bands[1].height, 19);

        assert!(laplacian_pyramid(&Image::filled(7, 64, [0.0; 3]), 3).is_err());
        assert!(laplacian_pyramid(&Image::filled(8, 8, [0.0; 3]), 3).is_ok());
    }

    #[test]
    fn yuv_examples() {
        let g = 0.42;
        let yuv = rgb_to_yuv(&Image::filled(1, 1, [g, g, g]));
        assert!((yuv.y[0] - g).abs() < 1e-12);
        assert!(yuv.u[0].abs() < 1e-12 && yuv.v[0].abs() < 1e-12);
        let red = rgb_to_yuv(&Image::filled(1, 1, [1.0, 0.0, 0.0]));
        assert!((red.y[0] - 0.299).abs() < 1e-15);
    }

    #[test]
    fn yuv_matches_matrix_oracle() {
        const M: [[f64; 3]; 3] = [
            [0.299, 0.587, 0.114],
            [-0.168_736, -0.331_264, 0.5],
            [0.5, -0.418_688, -0.081_312],
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = random_image(&mut rng, 8, 8);
        let yuv = rgb_to_yuv(&img);
        for (i, p) in img.pixels().enumerate() {
            let row = |r: usize| M[r][0] * p[0] + M[r][1] * p[1] + M[r][2] * p[2];
            assert!((yuv.y[i] - row(0)).abs() < 1e-9);
            assert!((yuv.u[i] - row(1)).abs() < 1e-9);
            assert!((yuv.v[i] - row(2)).abs() < 1e-9);
            assert!((yuv.y[i] - luminance(p)).abs() == 0.0);
        }
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(7, 2), 1);
        assert_eq!(reflect(-6, 1), 0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn codec_round_trip_within_half_step(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let img = random_image(&mut rng, h, w);
                for f in [Format::Png, Format::Ppm] {
                    let back = decode(&encode(&img, f).unwrap()).unwrap();
                    let err = img.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    prop_assert!(err <= 1.0 / 510.0 + 1e-12);
                }
            }

            #[test]
            fn resize_stays_in_range(seed in any::<u64>(), oh in 1usize..40, ow in 1usize..40) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let img = random_image(&mut rng, 9, 11);
                let out = resize_bilinear(&img, oh, ow).unwrap();
                prop_assert_eq!(out.dims(), (oh, ow));
                prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
