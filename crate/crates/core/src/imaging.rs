//! Image representation, LAB color conversion, the shadow-unaware lightness
//! transform, spatial gradients, and PNG/JPEG I/O.
//!
//! Images are stored channel-last (`H x W x 3`) in `f64`. RGB values live in
//! `[0, 1]`; LAB uses L in `[0, 100]` and A/B in `[-128, 127]`. Quantization
//! to 8-bit happens only at file boundaries.

use std::path::Path;

use ndarray::{Array2, Array3, Array4};

use crate::error::{Error, Result};

/// Color space tag for an [`ImagePlane`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    Lab,
}

/// A floating-point raster with explicit channel semantics.
#[derive(Clone, Debug)]
pub struct ImagePlane {
    data: Array3<f64>,
    colorspace: ColorSpace,
}

/// A single-channel lightness raster (LAB L scale, `[0, 100]`).
#[derive(Clone, Debug, PartialEq)]
pub struct LightnessPlane {
    data: Array2<f64>,
}

const RGB_RANGE_SLACK: f64 = 1e-6;

impl ImagePlane {
    /// Wraps an `H x W x 3` array, validating finiteness and value ranges.
    pub fn from_array(data: Array3<f64>, colorspace: ColorSpace) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h < 1 || w < 1 {
            return Err(Error::validation("image must be at least 1x1"));
        }
        if c != 3 {
            return Err(Error::validation(format!("expected 3 channels, got {c}")));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("image contains non-finite values"));
        }
        let mut data = data;
        match colorspace {
            ColorSpace::Rgb => {
                if data
                    .iter()
                    .any(|&v| v < -RGB_RANGE_SLACK || v > 1.0 + RGB_RANGE_SLACK)
                {
                    return Err(Error::validation("RGB values must lie in [0, 1]"));
                }
                data.mapv_inplace(|v| v.clamp(0.0, 1.0));
            }
            ColorSpace::Lab => {
                // Permit slight numeric overshoot, then clamp to the declared ranges.
                for (idx, v) in data.indexed_iter_mut() {
                    let (lo, hi) = if idx.2 == 0 { (0.0, 100.0) } else { (-128.0, 127.0) };
                    if *v < lo - 1e-3 || *v > hi + 1e-3 {
                        return Err(Error::validation(format!(
                            "LAB channel {} value {v} outside [{lo}, {hi}]",
                            idx.2
                        )));
                    }
                    *v = v.clamp(lo, hi);
                }
            }
        }
        Ok(ImagePlane { data, colorspace })
    }

    /// Constant-valued RGB image, mostly useful in tests and fixtures.
    pub fn filled_rgb(h: usize, w: usize, rgb: [f64; 3]) -> Result<Self> {
        let mut data = Array3::zeros((h, w, 3));
        for ch in 0..3 {
            data.slice_mut(ndarray::s![.., .., ch]).fill(rgb[ch]);
        }
        Self::from_array(data, ColorSpace::Rgb)
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn colorspace(&self) -> ColorSpace {
        self.colorspace
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array3<f64> {
        self.data
    }

    /// Extracts the L channel as a [`LightnessPlane`]. The image must already
    /// be in LAB space; convert first when starting from RGB.
    pub fn lightness(&self) -> Result<LightnessPlane> {
        if self.colorspace != ColorSpace::Lab {
            return Err(Error::validation(
                "lightness() expects a LAB image; call rgb_to_lab first",
            ));
        }
        LightnessPlane::from_array(self.data.slice(ndarray::s![.., .., 0]).to_owned())
    }
}

impl LightnessPlane {
    pub fn from_array(data: Array2<f64>) -> Result<Self> {
        if data.nrows() < 1 || data.ncols() < 1 {
            return Err(Error::validation("lightness plane must be at least 1x1"));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("lightness plane contains non-finite values"));
        }
        Ok(LightnessPlane { data })
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }
}

// sRGB <-> XYZ (D65) matrices and LAB constants. KAPPA/EPSILON follow the
// continuity-corrected values so f() and its inverse agree at the junction.
const XYZ_FROM_RGB: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];
const RGB_FROM_XYZ: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];
const WHITE_D65: [f64; 3] = [0.95047, 1.0, 1.08883];
const KAPPA: f64 = 24389.0 / 27.0;
const EPSILON: f64 = 216.0 / 24389.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(l: f64) -> f64 {
    if l <= 0.003_130_8 {
        12.92 * l
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let f3 = f * f * f;
    if f3 > EPSILON {
        f3
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

/// Converts one sRGB pixel (components in `[0, 1]`) to LAB.
pub fn rgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = [
        srgb_to_linear(rgb[0]),
        srgb_to_linear(rgb[1]),
        srgb_to_linear(rgb[2]),
    ];
    let mut xyz = [0.0f64; 3];
    for i in 0..3 {
        xyz[i] = XYZ_FROM_RGB[i][0] * lin[0] + XYZ_FROM_RGB[i][1] * lin[1] + XYZ_FROM_RGB[i][2] * lin[2];
    }
    let fx = lab_f(xyz[0] / WHITE_D65[0]);
    let fy = lab_f(xyz[1] / WHITE_D65[1]);
    let fz = lab_f(xyz[2] / WHITE_D65[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Converts one LAB pixel to sRGB, clamping to `[0, 1]`.
pub fn lab_pixel_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let yr = if lab[0] > KAPPA * EPSILON {
        fy * fy * fy
    } else {
        lab[0] / KAPPA
    };
    let xyz = [lab_f_inv(fx) * WHITE_D65[0], yr * WHITE_D65[1], lab_f_inv(fz) * WHITE_D65[2]];
    let mut rgb = [0.0f64; 3];
    for i in 0..3 {
        let lin = RGB_FROM_XYZ[i][0] * xyz[0] + RGB_FROM_XYZ[i][1] * xyz[1] + RGB_FROM_XYZ[i][2] * xyz[2];
        rgb[i] = linear_to_srgb(lin).clamp(0.0, 1.0);
    }
    rgb
}

/// Converts an RGB image to LAB (CIE-LAB, D65 white point).
pub fn rgb_to_lab(img: &ImagePlane) -> Result<ImagePlane> {
    if img.colorspace != ColorSpace::Rgb {
        return Err(Error::validation("rgb_to_lab expects an RGB image"));
    }
    let (h, w, _) = img.data.dim();
    let mut out = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            let lab = rgb_pixel_to_lab([img.data[[r, c, 0]], img.data[[r, c, 1]], img.data[[r, c, 2]]]);
            for ch in 0..3 {
                out[[r, c, ch]] = lab[ch];
            }
        }
    }
    ImagePlane::from_array(out, ColorSpace::Lab)
}

/// Converts a LAB image back to RGB. Out-of-gamut colors clamp to `[0, 1]`.
pub fn lab_to_rgb(img: &ImagePlane) -> Result<ImagePlane> {
    if img.colorspace != ColorSpace::Lab {
        return Err(Error::validation("lab_to_rgb expects a LAB image"));
    }
    let (h, w, _) = img.data.dim();
    let mut out = Array3::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            let rgb = lab_pixel_to_rgb([img.data[[r, c, 0]], img.data[[r, c, 1]], img.data[[r, c, 2]]]);
            for ch in 0..3 {
                out[[r, c, ch]] = rgb[ch];
            }
        }
    }
    ImagePlane::from_array(out, ColorSpace::Rgb)
}

/// Mean filter with replicate padding; the building block of
/// [`shadow_unaware`] and exposed so tests can check the algebraic inverse.
pub fn local_mean(plane: &LightnessPlane, kernel: usize) -> Result<LightnessPlane> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::config(format!("mean-filter kernel must be odd, got {kernel}")));
    }
    let (h, w) = (plane.height(), plane.width());
    let half = (kernel / 2) as isize;
    let src = &plane.data;
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for dr in -half..=half {
                for dc in -half..=half {
                    let rr = (r as isize + dr).clamp(0, h as isize - 1) as usize;
                    let cc = (c as isize + dc).clamp(0, w as isize - 1) as usize;
                    acc += src[[rr, cc]];
                }
            }
            out[[r, c]] = acc / (kernel * kernel) as f64;
        }
    }
    LightnessPlane::from_array(out)
}

/// Shadow-unaware transform: each pixel's local mean lightness is replaced by
/// the global mean, suppressing shadow-induced intensity differences.
/// Per pixel the output is `I - localMean(I) + I_avg`.
pub fn shadow_unaware(plane: &LightnessPlane, kernel: usize) -> Result<LightnessPlane> {
    // kernel 1 is the degenerate no-op filter: nothing is averaged, so the
    // transform is disabled rather than collapsing to the global mean.
    if kernel == 1 {
        return Ok(plane.clone());
    }
    let lm = local_mean(plane, kernel)?;
    let avg = plane.data.mean().expect("non-empty plane");
    let out = &plane.data - lm.data() + avg;
    LightnessPlane::from_array(out)
}

/// Divisor bringing the L channel to [0, 1] for network consumption.
pub const LAB_L_SCALE: f64 = 100.0;
/// Divisor bringing a/b channels to roughly [-1, 1]; 110 covers the sRGB gamut.
pub const LAB_AB_SCALE: f64 = 110.0;

/// Channelwise LAB scaling: L / 100, a / 110, b / 110.
pub fn normalize_lab(lab: &Array3<f64>) -> Array3<f64> {
    let mut out = lab.clone();
    for (idx, v) in out.indexed_iter_mut() {
        *v /= if idx.2 == 0 { LAB_L_SCALE } else { LAB_AB_SCALE };
    }
    out
}

/// Inverse of [`normalize_lab`].
pub fn denormalize_lab(norm: &Array3<f64>) -> Array3<f64> {
    let mut out = norm.clone();
    for (idx, v) in out.indexed_iter_mut() {
        *v *= if idx.2 == 0 { LAB_L_SCALE } else { LAB_AB_SCALE };
    }
    out
}

/// Forward-difference spatial gradient, `H x W x C x 2` with x (columns)
/// at index 0 and y (rows) at index 1. The trailing column/row is zero.
pub fn image_gradient(img: &ImagePlane) -> Array4<f64> {
    let (h, w, c) = img.data.dim();
    let mut out = Array4::zeros((h, w, c, 2));
    for r in 0..h {
        for col in 0..w {
            for ch in 0..c {
                if col + 1 < w {
                    out[[r, col, ch, 0]] = img.data[[r, col + 1, ch]] - img.data[[r, col, ch]];
                }
                if r + 1 < h {
                    out[[r, col, ch, 1]] = img.data[[r + 1, col, ch]] - img.data[[r, col, ch]];
                }
            }
        }
    }
    out
}

/// Decodes a PNG or JPEG file to an RGB image with values in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let dynimg = image::open(path).map_err(|source| Error::ImageDecode {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = Array3::zeros((h, w, 3));
    for (x, y, px) in rgb.enumerate_pixels() {
        for ch in 0..3 {
            data[[y as usize, x as usize, ch]] = px.0[ch] as f64 / 255.0;
        }
    }
    ImagePlane::from_array(data, ColorSpace::Rgb)
}

/// Encodes an RGB image to the format implied by the file extension
/// (PNG or JPEG), quantizing to 8-bit with round-half-up.
pub fn save_image(img: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if img.colorspace != ColorSpace::Rgb {
        return Err(Error::validation("save_image expects an RGB image"));
    }
    let (h, w, _) = img.data.dim();
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let px = [
                quantize(img.data[[r, c, 0]]),
                quantize(img.data[[r, c, 1]]),
                quantize(img.data[[r, c, 2]]),
            ];
            rgb.put_pixel(c as u32, r as u32, image::Rgb(px));
        }
    }
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()) {
        Some(ext) if ext == "png" || ext == "jpg" || ext == "jpeg" => {}
        other => {
            return Err(Error::validation(format!(
                "unsupported output format {other:?}; use .png or .jpg"
            )))
        }
    }
    rgb.save(path).map_err(|source| Error::ImageEncode {
        path: path.to_path_buf(),
        source,
    })
}

fn quantize(v: f64) -> u8 {
    // round-half-up; values are clamped to [0,1] at construction
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn white_maps_to_l100() {
        let lab = rgb_pixel_to_lab([1.0, 1.0, 1.0]);
        assert!((lab[0] - 100.0).abs() < 1e-2, "L = {}", lab[0]);
        assert!(lab[1].abs() < 0.5 && lab[2].abs() < 0.5);
    }

    #[test]
    fn black_maps_to_origin() {
        let lab = rgb_pixel_to_lab([0.0, 0.0, 0.0]);
        assert!(lab[0].abs() < 1e-9 && lab[1].abs() < 1e-9 && lab[2].abs() < 1e-9);
    }

    #[test]
    fn mid_gray_matches_reference() {
        // frozen from an independent evaluation of the textbook
        // sRGB -> XYZ -> LAB chain at (0.5, 0.5, 0.5)
        let lab = rgb_pixel_to_lab([0.5, 0.5, 0.5]);
        assert!((lab[0] - 53.38896705407974).abs() < 1e-6, "L = {}", lab[0]);
        assert!(lab[1].abs() < 1e-3 && lab[2].abs() < 1e-3);
    }

    #[test]
    fn lab_white_round_trip() {
        let rgb = lab_pixel_to_rgb([100.0, 0.0, 0.0]);
        for ch in 0..3 {
            assert!((rgb[ch] - 1.0).abs() < 1e-3);
        }
        let rgb = lab_pixel_to_rgb([0.0, 0.0, 0.0]);
        for ch in 0..3 {
            assert!(rgb[ch].abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_rejected() {
        let mut data = Array3::zeros((2, 2, 3));
        data[[0, 0, 0]] = f64::NAN;
        assert!(ImagePlane::from_array(data, ColorSpace::Rgb).is_err());
    }

    #[test]
    fn shadow_unaware_constant_is_identity() {
        let plane = LightnessPlane::from_array(Array2::from_elem((5, 7), 0.5)).unwrap();
        let out = shadow_unaware(&plane, 3).unwrap();
        for (a, b) in out.data().iter().zip(plane.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shadow_unaware_hand_example() {
        // 3x3 lightness with replicate padding: I_avg = 4, center local mean 4,
        // corner local mean 2.
        let plane =
            LightnessPlane::from_array(array![[2.0, 2.0, 2.0], [2.0, 2.0, 2.0], [8.0, 8.0, 8.0]])
                .unwrap();
        let out = shadow_unaware(&plane, 3).unwrap();
        assert!((out.data()[[1, 1]] - 2.0).abs() < 1e-9);
        assert!((out.data()[[0, 0]] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn shadow_unaware_kernel_one_is_identity() {
        let data = Array2::from_shape_fn((4, 6), |(r, c)| (r * 7 + c) as f64 * 0.3 + 1.0);
        let plane = LightnessPlane::from_array(data).unwrap();
        let out = shadow_unaware(&plane, 1).unwrap();
        for (a, b) in out.data().iter().zip(plane.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shadow_unaware_even_kernel_rejected() {
        let plane = LightnessPlane::from_array(Array2::zeros((3, 3))).unwrap();
        assert!(matches!(shadow_unaware(&plane, 2), Err(Error::Config(_))));
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let img = ImagePlane::filled_rgb(4, 5, [0.3, 0.3, 0.3]).unwrap();
        let g = image_gradient(&img);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_forward_difference_1x2() {
        // single-channel content replicated over RGB; x-gradient 3 then 0
        let mut data = Array3::zeros((1, 2, 3));
        // keep within [0,1] by scaling: use 0.0 and 0.3 then scale expectations
        data.slice_mut(ndarray::s![0, 1, ..]).fill(0.3);
        let img = ImagePlane::from_array(data, ColorSpace::Rgb).unwrap();
        let g = image_gradient(&img);
        assert!((g[[0, 0, 0, 0]] - 0.3).abs() < 1e-12);
        assert_eq!(g[[0, 1, 0, 0]], 0.0);
    }

    #[test]
    fn gradient_ramp_in_x() {
        let mut data = Array3::zeros((3, 5, 3));
        for ((_, c, _), v) in data.indexed_iter_mut() {
            *v = c as f64 * 0.1;
        }
        let img = ImagePlane::from_array(data, ColorSpace::Rgb).unwrap();
        let g = image_gradient(&img);
        for r in 0..3 {
            for c in 0..4 {
                assert!((g[[r, c, 0, 0]] - 0.1).abs() < 1e-12);
            }
            assert_eq!(g[[r, 4, 0, 0]], 0.0);
        }
    }
}
