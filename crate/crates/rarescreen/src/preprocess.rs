//! Fundus photograph normalization: square field-of-view crop, resize to
//! 299x299, and luminance background subtraction in YCrCb (BT.601
//! full-range coefficients). Chrominance passes through untouched; the Y
//! channel is re-centered at 128 after subtraction so values stay in range.
//!
//! Not idempotent: ROI detection sees a different picture on an already
//! processed image, so running the step twice is not a no-op.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::RgbImage;

use crate::error::{Error, Result};

pub const OUTPUT_SIZE: u32 = 299;
pub const DEFAULT_ROI_THRESHOLD: u8 = 10;
pub const DEFAULT_SIGMA: f64 = 5.0;

#[derive(Debug, Clone, Copy)]
pub struct PreprocessOptions {
    /// Luminance threshold (out of 255) for field-of-view detection.
    pub roi_threshold: u8,
    /// Standard deviation of the background blur, in pixels.
    pub sigma: f64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            roi_threshold: DEFAULT_ROI_THRESHOLD,
            sigma: DEFAULT_SIGMA,
        }
    }
}

// BT.601 full-range luma/chroma.
pub fn rgb_to_ycrcb(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let y = 0.299 * r + 0.587 * g + 0.114 * b;
    let cr = 128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b;
    let cb = 128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b;
    (y, cr, cb)
}

pub fn ycrcb_to_rgb(y: f64, cr: f64, cb: f64) -> (f64, f64, f64) {
    let r = y + 1.402 * (cr - 128.0);
    let g = y - 0.714_136 * (cr - 128.0) - 0.344_136 * (cb - 128.0);
    let b = y + 1.772 * (cb - 128.0);
    (r, g, b)
}

fn luma(pixel: &image::Rgb<u8>) -> f64 {
    rgb_to_ycrcb(f64::from(pixel[0]), f64::from(pixel[1]), f64::from(pixel[2])).0
}

/// Separable Gaussian blur with reflected borders, kernel radius 4 sigma.
pub fn gaussian_blur_reflect(plane: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    assert_eq!(plane.len(), width * height);
    let radius = (4.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    for i in -radius..=radius {
        kernel.push((-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= norm;
    }
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        // mirror without repeating the edge sample
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
        }
        i as usize
    };
    let mut horizontal = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let xi = reflect(x as isize + ki as isize - radius, width as isize);
                acc += k * plane[y * width + xi];
            }
            horizontal[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; plane.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let yi = reflect(y as isize + ki as isize - radius, height as isize);
                acc += k * horizontal[yi * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

/// Bounding box of pixels brighter than the threshold, expanded to a square
/// centered on it and clipped to the frame. Returns (x, y, w, h).
fn field_of_view(img: &RgbImage, threshold: u8) -> Option<(u32, u32, u32, u32)> {
    let (mut x0, mut y0) = (u32::MAX, u32::MAX);
    let (mut x1, mut y1) = (0u32, 0u32);
    let mut found = false;
    for (x, y, pixel) in img.enumerate_pixels() {
        if luma(pixel) > f64::from(threshold) {
            found = true;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    if !found {
        return None;
    }
    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    let side = w.max(h);
    let cx = x0 as i64 + i64::from(w) / 2;
    let cy = y0 as i64 + i64::from(h) / 2;
    let half = i64::from(side) / 2;
    let rx0 = (cx - half).clamp(0, i64::from(img.width()) - 1) as u32;
    let ry0 = (cy - half).clamp(0, i64::from(img.height()) - 1) as u32;
    let rw = side.min(img.width() - rx0);
    let rh = side.min(img.height() - ry0);
    Some((rx0, ry0, rw, rh))
}

fn center_square(img: &RgbImage) -> (u32, u32, u32, u32) {
    let side = img.width().min(img.height());
    let x = (img.width() - side) / 2;
    let y = (img.height() - side) / 2;
    (x, y, side, side)
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub image: RgbImage,
    pub warnings: Vec<String>,
}

/// Full normalization: crop the bright field of view to a square (falling
/// back to the center square when nothing clears the threshold), resize to
/// 299x299 bilinear, blur-estimate the Y background (sigma 5, radius 4
/// sigma, reflected borders), replace Y by clamp(Y - background + 128) and
/// convert back to RGB. Cr and Cb are untouched.
pub fn preprocess_fundus(img: &RgbImage, opts: &PreprocessOptions) -> Result<Preprocessed> {
    if img.width() == 0 || img.height() == 0 {
        return Err(Error::Image("empty image".into()));
    }
    let mut warnings = Vec::new();
    let (x, y, w, h) = match field_of_view(img, opts.roi_threshold) {
        Some(roi) => roi,
        None => {
            warnings.push("no field of view above threshold; using center square".into());
            center_square(img)
        }
    };
    let cropped = imageops::crop_imm(img, x, y, w, h).to_image();
    let resized = imageops::resize(&cropped, OUTPUT_SIZE, OUTPUT_SIZE, FilterType::Triangle);

    let n = (OUTPUT_SIZE * OUTPUT_SIZE) as usize;
    let mut y_plane = vec![0.0; n];
    let mut cr_plane = vec![0.0; n];
    let mut cb_plane = vec![0.0; n];
    for (i, pixel) in resized.pixels().enumerate() {
        let (yy, cr, cb) = rgb_to_ycrcb(
            f64::from(pixel[0]),
            f64::from(pixel[1]),
            f64::from(pixel[2]),
        );
        y_plane[i] = yy;
        cr_plane[i] = cr;
        cb_plane[i] = cb;
    }
    let background =
        gaussian_blur_reflect(&y_plane, OUTPUT_SIZE as usize, OUTPUT_SIZE as usize, opts.sigma);
    for (yv, bg) in y_plane.iter_mut().zip(&background) {
        *yv = (*yv - bg + 128.0).clamp(0.0, 255.0);
    }

    let mut out = RgbImage::new(OUTPUT_SIZE, OUTPUT_SIZE);
    for (i, pixel) in out.pixels_mut().enumerate() {
        let (r, g, b) = ycrcb_to_rgb(y_plane[i], cr_plane[i], cb_plane[i]);
        pixel[0] = r.round().clamp(0.0, 255.0) as u8;
        pixel[1] = g.round().clamp(0.0, 255.0) as u8;
        pixel[2] = b.round().clamp(0.0, 255.0) as u8;
    }
    Ok(Preprocessed {
        image: out,
        warnings,
    })
}

/// Decode a PNG (or any supported format) and normalize it.
pub fn preprocess_file(input: &Path, output: &Path, opts: &PreprocessOptions) -> Result<Vec<String>> {
    if !input.exists() {
        return Err(Error::FileNotFound(input.to_path_buf()));
    }
    let img = image::open(input)
        .map_err(|e| Error::Image(format!("{}: {e}", input.display())))?
        .to_rgb8();
    let processed = preprocess_fundus(&img, opts)?;
    processed
        .image
        .save(output)
        .map_err(|e| Error::Image(format!("{}: {e}", output.display())))?;
    Ok(processed.warnings)
}

/// Decode from raw bytes; used by untrusted-input checks.
pub fn preprocess_bytes(data: &[u8], opts: &PreprocessOptions) -> Result<Preprocessed> {
    let img = image::load_from_memory(data)
        .map_err(|e| Error::Image(e.to_string()))?
        .to_rgb8();
    preprocess_fundus(&img, opts)
}
