//! The black-box photo-finishing pipeline: nine slider parameters driving six
//! operators applied in a fixed order.
//!
//! Order: exposure → color balance → saturation → contrast → tone mapping → texture.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{blur_separable, gaussian_kernel, luminance, Image, CHANNELS};

pub const NUM_PARAMS: usize = 9;

pub const PARAM_NAMES: [&str; NUM_PARAMS] = [
    "exposure",
    "wb_r",
    "wb_g",
    "wb_b",
    "saturation",
    "contrast",
    "highlights",
    "shadows",
    "texture",
];

/// Slider → physical-unit scale factors (symmetric affine maps about zero).
pub const EXPOSURE_STOPS: f64 = 2.0;
pub const WB_STOPS: f64 = 0.75;
pub const SATURATION_RANGE: f64 = 1.0;
pub const CONTRAST_RANGE: f64 = 0.6;
pub const TONE_RANGE: f64 = 1.0;
pub const TEXTURE_RANGE: f64 = 1.0;

pub const TEXTURE_SIGMA: f64 = 2.0;

/// Nine normalized slider values in `[-1, 1]`, serialized as a flat array in
/// the order of [`PARAM_NAMES`].
#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PipelineParams([f64; NUM_PARAMS]);

impl PipelineParams {
    pub const NEUTRAL: PipelineParams = PipelineParams([0.0; NUM_PARAMS]);

    /// Clamps each slider into `[-1, 1]`; non-finite values are rejected.
    pub fn new(values: [f64; NUM_PARAMS]) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "parameter {} = {}",
                PARAM_NAMES[i], values[i]
            )));
        }
        Ok(Self(values.map(|v| v.clamp(-1.0, 1.0))))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; NUM_PARAMS] = values
            .try_into()
            .map_err(|_| Error::shape("PipelineParams", &[NUM_PARAMS], &[values.len()]))?;
        Self::new(arr)
    }

    pub fn values(&self) -> &[f64; NUM_PARAMS] {
        &self.0
    }

    pub fn exposure(&self) -> f64 {
        self.0[0]
    }
    pub fn wb(&self) -> [f64; 3] {
        [self.0[1], self.0[2], self.0[3]]
    }
    pub fn saturation(&self) -> f64 {
        self.0[4]
    }
    pub fn contrast(&self) -> f64 {
        self.0[5]
    }
    pub fn highlights(&self) -> f64 {
        self.0[6]
    }
    pub fn shadows(&self) -> f64 {
        self.0[7]
    }
    pub fn texture(&self) -> f64 {
        self.0[8]
    }

    /// Zeroes every slider whose mask entry is false.
    pub fn masked(&self, active: &[bool; NUM_PARAMS]) -> Self {
        let mut v = self.0;
        for (x, on) in v.iter_mut().zip(active) {
            if !on {
                *x = 0.0;
            }
        }
        Self(v)
    }

    pub fn l2_distance(&self, other: &PipelineParams) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl TryFrom<Vec<f64>> for PipelineParams {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::from_slice(&v)
    }
}

impl From<PipelineParams> for Vec<f64> {
    fn from(p: PipelineParams) -> Self {
        p.0.to_vec()
    }
}

impl fmt::Display for PipelineParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:.4}")?;
        }
        write!(f, "]")
    }
}

/// One operator in the fixed chain.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorSpec {
    pub name: &'static str,
    pub param_slice: std::ops::Range<usize>,
    /// Physical value = `scale × slider`.
    pub scale: f64,
}

pub const OPERATORS: [OperatorSpec; 6] = [
    OperatorSpec {
        name: "exposure",
        param_slice: 0..1,
        scale: EXPOSURE_STOPS,
    },
    OperatorSpec {
        name: "color_balance",
        param_slice: 1..4,
        scale: WB_STOPS,
    },
    OperatorSpec {
        name: "saturation",
        param_slice: 4..5,
        scale: SATURATION_RANGE,
    },
    OperatorSpec {
        name: "contrast",
        param_slice: 5..6,
        scale: CONTRAST_RANGE,
    },
    OperatorSpec {
        name: "tone_mapping",
        param_slice: 6..8,
        scale: TONE_RANGE,
    },
    OperatorSpec {
        name: "texture",
        param_slice: 8..9,
        scale: TEXTURE_RANGE,
    },
];

// ---------------------------------------------------------------------------
// Operators (physical units)
// ---------------------------------------------------------------------------

fn map_pixels(img: &Image, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> Image {
    let mut out = Vec::with_capacity(img.data().len());
    for p in img.pixels() {
        out.extend_from_slice(&f(p));
    }
    Image::from_raw_clamped(img.height(), img.width(), out)
}

/// `O = clamp(I · 2^stops)`.
pub fn apply_exposure(img: &Image, stops: f64) -> Image {
    if stops == 0.0 {
        return img.clone();
    }
    let gain = stops.exp2();
    map_pixels(img, |p| p.map(|v| v * gain))
}

/// Independent per-channel log2 gains.
pub fn apply_color_balance(img: &Image, gains: [f64; 3]) -> Image {
    if gains == [0.0; 3] {
        return img.clone();
    }
    let g = gains.map(f64::exp2);
    map_pixels(img, |p| [p[0] * g[0], p[1] * g[1], p[2] * g[2]])
}

/// Scales chroma about BT.601 luminance by `1 + s`.
pub fn apply_saturation(img: &Image, s: f64) -> Image {
    if s == 0.0 {
        return img.clone();
    }
    let k = 1.0 + s;
    map_pixels(img, |p| {
        let y = luminance(p);
        p.map(|v| y + (v - y) * k)
    })
}

/// Linear stretch about mid-grey.
pub fn apply_contrast(img: &Image, c: f64) -> Image {
    if c == 0.0 {
        return img.clone();
    }
    let k = 1.0 + c;
    map_pixels(img, |p| p.map(|v| 0.5 + (v - 0.5) * k))
}

#[inline]
fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Luminance remap with smoothstep masks for highlights (`Y > 0.5`) and shadows (`Y < 0.5`).
pub fn apply_tone_mapping(img: &Image, highlights: f64, shadows: f64) -> Image {
    if highlights == 0.0 && shadows == 0.0 {
        return img.clone();
    }
    map_pixels(img, |p| {
        let y = luminance(p);
        let m_hi = smoothstep(0.5, 1.0, y);
        let m_sh = smoothstep(0.5, 1.0, 1.0 - y);
        let y_new = y + 0.5 * highlights * m_hi * (1.0 - y) + 0.5 * shadows * m_sh * y;
        let ratio = y_new / y.max(1e-6);
        p.map(|v| v * ratio)
    })
}

/// Unsharp masking against a σ=2 Gaussian blur: `O = I + x·(I − blur(I))`.
pub fn apply_texture(img: &Image, amount: f64) -> Image {
    if amount == 0.0 {
        return img.clone();
    }
    let kernel = gaussian_kernel(TEXTURE_SIGMA);
    let blurred = blur_separable(img.data(), img.height(), img.width(), CHANNELS, &kernel);
    let out = img
        .data()
        .iter()
        .zip(&blurred)
        .map(|(&i, &b)| i + amount * (i - b))
        .collect();
    Image::from_raw_clamped(img.height(), img.width(), out)
}

/// Renders `img` through the full slider chain. The input is never modified.
pub fn apply_pipeline(img: &Image, params: &PipelineParams) -> Result<Image> {
    let p = params.values();
    if let Some(i) = p.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("parameter {} = {}", PARAM_NAMES[i], p[i])));
    }
    let out = apply_exposure(img, EXPOSURE_STOPS * params.exposure());
    let out = apply_color_balance(&out, params.wb().map(|w| WB_STOPS * w));
    let out = apply_saturation(&out, SATURATION_RANGE * params.saturation());
    let out = apply_contrast(&out, CONTRAST_RANGE * params.contrast());
    let out = apply_tone_mapping(&out, TONE_RANGE * params.highlights(), TONE_RANGE * params.shadows());
    Ok(apply_texture(&out, TEXTURE_RANGE * params.texture()))
}

// ---------------------------------------------------------------------------
// Black-box interface
// ---------------------------------------------------------------------------

/// Anything that renders an image from slider parameters. Tuners reach the
/// pipeline only through this trait.
pub trait PhotoPipeline: Send + Sync {
    fn render(&self, img: &Image, params: &PipelineParams) -> Result<Image>;
}

/// The slider pipeline, optionally restricted to a subset of active sliders
/// (inactive sliders are forced to zero before rendering).
#[derive(Clone, Debug)]
pub struct SliderPipeline {
    pub active: [bool; NUM_PARAMS],
}

impl Default for SliderPipeline {
    fn default() -> Self {
        Self {
            active: [true; NUM_PARAMS],
        }
    }
}

impl SliderPipeline {
    /// Only exposure is active.
    pub fn exposure_only() -> Self {
        let mut active = [false; NUM_PARAMS];
        active[0] = true;
        Self { active }
    }
}

impl PhotoPipeline for SliderPipeline {
    fn render(&self, img: &Image, params: &PipelineParams) -> Result<Image> {
        apply_pipeline(img, &params.masked(&self.active))
    }
}

/// Wraps a pipeline and counts every render call.
#[derive(Debug)]
pub struct CountingPipeline<P> {
    inner: P,
    calls: AtomicU64,
}

impl<P: PhotoPipeline> CountingPipeline<P> {
    pub fn new(inner: P) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }
}

impl<P: PhotoPipeline> PhotoPipeline for CountingPipeline<P> {
    fn render(&self, img: &Image, params: &PipelineParams) -> Result<Image> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.render(img, params)
    }
}

impl<P: PhotoPipeline + ?Sized> PhotoPipeline for &P {
    fn render(&self, img: &Image, params: &PipelineParams) -> Result<Image> {
        (**self).render(img, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::gaussian_blur;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    fn random_params(rng: &mut impl Rng) -> PipelineParams {
        PipelineParams::new(std::array::from_fn(|_| rng.gen_range(-1.0..=1.0))).unwrap()
    }

    fn max_diff(a: &Image, b: &Image) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn params_clamp_and_reject_non_finite() {
        let p = PipelineParams::new([2.0, -3.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.exposure(), 1.0);
        assert_eq!(p.wb()[0], -1.0);
        assert!(PipelineParams::new([f64::NAN; 9]).is_err());
        assert!(PipelineParams::new([0.0, 0.0, f64::INFINITY, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(PipelineParams::from_slice(&[0.0; 8]).is_err());
    }

    #[test]
    fn params_serialize_as_flat_array() {
        let p = PipelineParams::new([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, "[0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9]");
        let back: PipelineParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<PipelineParams>("[1,2]").is_err());
    }

    #[test]
    fn operator_slices_partition_params() {
        let mut seen = [0u8; NUM_PARAMS];
        for op in &OPERATORS {
            for i in op.param_slice.clone() {
                seen[i] += 1;
            }
        }
        assert_eq!(seen, [1; NUM_PARAMS]);
    }

    #[test]
    fn neutral_params_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = random_image(&mut rng, 13, 9);
        assert_eq!(apply_pipeline(&img, &PipelineParams::NEUTRAL).unwrap(), img);
    }

    #[test]
    fn exposure_half_slider_is_one_stop() {
        let img = Image::filled(4, 4, [0.25; 3]);
        let mut v = [0.0; 9];
        v[0] = 0.5;
        let out = apply_pipeline(&img, &PipelineParams::new(v).unwrap()).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn pipeline_is_composition_of_operators() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let img = random_image(&mut rng, 12, 10);
            let p = random_params(&mut rng);
            let manual = apply_exposure(&img, 2.0 * p.exposure());
            let manual = apply_color_balance(&manual, p.wb().map(|w| 0.75 * w));
            let manual = apply_saturation(&manual, p.saturation());
            let manual = apply_contrast(&manual, 0.6 * p.contrast());
            let manual = apply_tone_mapping(&manual, p.highlights(), p.shadows());
            let manual = apply_texture(&manual, p.texture());
            assert_eq!(apply_pipeline(&img, &p).unwrap(), manual);
        }
    }

    #[test]
    fn exposure_examples() {
        let img = Image::filled(1, 2, [0.25; 3]);
        assert_eq!(apply_exposure(&img, 0.0), img);
        assert!(apply_exposure(&img, 1.0).data().iter().all(|&v| v == 0.5));
        let bright = Image::filled(1, 1, [0.9; 3]);
        assert!(apply_exposure(&bright, 1.0).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn color_balance_examples() {
        let white = Image::filled(1, 1, [1.0; 3]);
        assert_eq!(apply_color_balance(&white, [0.0; 3]), white);
        assert_eq!(
            apply_color_balance(&white, [-1.0, 0.0, 0.0]).pixel(0, 0),
            [0.5, 1.0, 1.0]
        );

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = random_image(&mut rng, 5, 5);
        let gains = [0.3, -0.6, 0.1];
        let out = apply_color_balance(&img, gains);
        for (p, q) in img.pixels().zip(out.pixels()) {
            for c in 0..3 {
                // scalar exposure oracle, one channel at a time
                let expect = (p[c] * 2f64.powf(gains[c])).clamp(0.0, 1.0);
                assert!((q[c] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn saturation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 6, 6);
        assert_eq!(apply_saturation(&img, 0.0), img);
        let gray = apply_saturation(&img, -1.0);
        for p in gray.pixels() {
            assert!((p[0] - p[1]).abs() < 1e-15 && (p[1] - p[2]).abs() < 1e-15);
        }
        let g = Image::filled(2, 2, [0.3; 3]);
        for s in [-0.7, 0.4, 1.0] {
            assert!(max_diff(&apply_saturation(&g, s), &g) < 1e-15);
        }
    }

    #[test]
    fn contrast_examples() {
        let img = Image::filled(1, 1, [0.5; 3]);
        assert_eq!(apply_contrast(&img, 0.0), img);
        assert_eq!(apply_contrast(&img, 0.6).pixel(0, 0), [0.5; 3]);
        let q = Image::filled(1, 1, [0.75; 3]);
        assert_eq!(apply_contrast(&q, 0.5).pixel(0, 0), [0.875; 3]);
    }

    #[test]
    fn tone_mapping_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(&mut rng, 6, 6);
        assert_eq!(apply_tone_mapping(&img, 0.0, 0.0), img);
        let mid = Image::filled(1, 1, [0.5; 3]);
        for (h, d) in [(1.0, -1.0), (-0.3, 0.8)] {
            assert!(max_diff(&apply_tone_mapping(&mid, h, d), &mid) < 1e-15);
        }
        let white = Image::filled(1, 1, [1.0; 3]);
        assert!(max_diff(&apply_tone_mapping(&white, -1.0, 0.0), &white) < 1e-15);
        // shadows lift a dark pixel
        let dark = Image::filled(1, 1, [0.1; 3]);
        assert!(apply_tone_mapping(&dark, 0.0, 1.0).pixel(0, 0)[0] > 0.1);
    }

    #[test]
    fn texture_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_image(&mut rng, 16, 16);
        assert_eq!(apply_texture(&img, 0.0), img);
        let flat = Image::filled(8, 8, [0.2, 0.4, 0.6]);
        assert_eq!(apply_texture(&flat, 0.9), flat);
        assert!(max_diff(&apply_texture(&img, -1.0), &gaussian_blur(&img, 2.0)) < 1e-15);
    }

    #[test]
    fn non_finite_params_rejected_at_construction() {
        let mut v = [0.0; 9];
        v[4] = f64::NAN;
        assert!(matches!(PipelineParams::new(v), Err(Error::NonFinite(_))));
    }

    #[test]
    fn masked_pipeline_ignores_inactive_sliders() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = random_image(&mut rng, 8, 8);
        let p = random_params(&mut rng);
        let mut only_exp = [0.0; 9];
        only_exp[0] = p.exposure();
        let expected = apply_pipeline(&img, &PipelineParams::new(only_exp).unwrap()).unwrap();
        assert_eq!(SliderPipeline::exposure_only().render(&img, &p).unwrap(), expected);
    }

    #[test]
    fn counting_pipeline_counts() {
        let pipe = CountingPipeline::new(SliderPipeline::default());
        let img = Image::filled(2, 2, [0.5; 3]);
        for _ in 0..3 {
            pipe.render(&img, &PipelineParams::NEUTRAL).unwrap();
        }
        assert_eq!(pipe.calls(), 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]

            #[test]
            fn output_in_unit_range(seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let img = random_image(&mut rng, 10, 10);
                let p = random_params(&mut rng);
                let out = apply_pipeline(&img, &p).unwrap();
                prop_assert!(out.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
                // purity
                prop_assert_eq!(apply_pipeline(&img, &p).unwrap(), out);
            }

            #[test]
            fn exposure_is_monotone(seed in any::<u64>(), e in -1.0f64..1.0, de in 0.0f64..0.5) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let img = random_image(&mut rng, 6, 6);
                let a = apply_exposure(&img, EXPOSURE_STOPS * e);
                let b = apply_exposure(&img, EXPOSURE_STOPS * (e + de).min(1.0));
                prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| y >= x));
            }
        }
    }
}
