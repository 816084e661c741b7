//! 8-bit RGB image buffer and the pixel operations the augmentation policies
//! are built from: bilinear resize/crop, inverse-mapped affine warps with
//! constant fill, and the classic photometric table ops (equalize,
//! autocontrast, posterize, solarize, enhancement blends).
//!
//! Semantics follow the common reference implementations of these transforms
//! (top-left-origin shears/translations, center rotation, gray fill 128,
//! ITU-R 601 luma), so magnitude tags mean what they usually mean.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    pub h: usize,
    pub w: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

pub const FILL: u8 = 128;

impl ImageU8 {
    pub fn new(h: usize, w: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), h * w * 3);
        ImageU8 { h, w, data }
    }

    pub fn filled(h: usize, w: usize, value: u8) -> Self {
        ImageU8 {
            h,
            w,
            data: vec![value; h * w * 3],
        }
    }

    #[inline]
    pub fn px(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_px(&mut self, y: usize, x: usize, p: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.data[i] = p[0];
        self.data[i + 1] = p[1];
        self.data[i + 2] = p[2];
    }

    /// CHW float in [0,1] normalized per channel: (v/255 - mean) / std.
    pub fn to_chw_normalized(&self, mean: [f32; 3], std: [f32; 3]) -> Vec<f32> {
        let hw = self.h * self.w;
        let mut out = vec![0.0f32; 3 * hw];
        for c in 0..3 {
            let inv = 1.0 / std[c];
            for i in 0..hw {
                out[c * hw + i] = (self.data[i * 3 + c] as f32 / 255.0 - mean[c]) * inv;
            }
        }
        out
    }
}

#[inline]
fn clamp_u8(v: f32) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Bilinear sample with coordinates clamped to the edges (resize semantics).
fn sample_clamped(img: &ImageU8, fy: f32, fx: f32) -> [f32; 3] {
    let max_y = (img.h - 1) as f32;
    let max_x = (img.w - 1) as f32;
    let fy = fy.clamp(0.0, max_y);
    let fx = fx.clamp(0.0, max_x);
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let y1 = (y0 + 1).min(img.h - 1);
    let x1 = (x0 + 1).min(img.w - 1);
    let dy = fy - y0 as f32;
    let dx = fx - x0 as f32;
    let mut out = [0.0f32; 3];
    let p00 = img.px(y0, x0);
    let p01 = img.px(y0, x1);
    let p10 = img.px(y1, x0);
    let p11 = img.px(y1, x1);
    for c in 0..3 {
        let top = p00[c] as f32 * (1.0 - dx) + p01[c] as f32 * dx;
        let bot = p10[c] as f32 * (1.0 - dx) + p11[c] as f32 * dx;
        out[c] = top * (1.0 - dy) + bot * dy;
    }
    out
}

/// Bilinear resize with half-pixel-centered sampling.
pub fn resize(img: &ImageU8, out_h: usize, out_w: usize) -> ImageU8 {
    if out_h == img.h && out_w == img.w {
        return img.clone();
    }
    let sy = img.h as f32 / out_h as f32;
    let sx = img.w as f32 / out_w as f32;
    let mut out = ImageU8::filled(out_h, out_w, 0);
    for y in 0..out_h {
        let fy = (y as f32 + 0.5) * sy - 0.5;
        for x in 0..out_w {
            let fx = (x as f32 + 0.5) * sx - 0.5;
            let p = sample_clamped(img, fy, fx);
            out.set_px(y, x, [clamp_u8(p[0]), clamp_u8(p[1]), clamp_u8(p[2])]);
        }
    }
    out
}

pub fn crop(img: &ImageU8, top: usize, left: usize, h: usize, w: usize) -> ImageU8 {
    assert!(top + h <= img.h && left + w <= img.w, "crop out of bounds");
    let mut out = ImageU8::filled(h, w, 0);
    for y in 0..h {
        let src = ((top + y) * img.w + left) * 3;
        let dst = y * w * 3;
        out.data[dst..dst + w * 3].copy_from_slice(&img.data[src..src + w * 3]);
    }
    out
}

pub fn center_crop(img: &ImageU8, h: usize, w: usize) -> ImageU8 {
    let top = (img.h.saturating_sub(h)) / 2;
    let left = (img.w.saturating_sub(w)) / 2;
    crop(img, top, left, h, w)
}

/// Output (x, y) is sampled from input (a*x + b*y + c, d*x + e*y + f);
/// samples falling outside the image blend toward the constant fill.
pub fn affine(img: &ImageU8, coeffs: [f32; 6]) -> ImageU8 {
    let [a, b, c, d, e, f] = coeffs;
    let mut out = ImageU8::filled(img.h, img.w, FILL);
    for y in 0..img.h {
        for x in 0..img.w {
            let fx = a * x as f32 + b * y as f32 + c;
            let fy = d * x as f32 + e * y as f32 + f;
            // outside with margin: pure fill
            if fx < -1.0 || fy < -1.0 || fx > img.w as f32 || fy > img.h as f32 {
                continue;
            }
            let x0 = fx.floor() as isize;
            let y0 = fy.floor() as isize;
            let dx = fx - x0 as f32;
            let dy = fy - y0 as f32;
            let mut acc = [0.0f32; 3];
            for (yy, wy) in [(y0, 1.0 - dy), (y0 + 1, dy)] {
                for (xx, wx) in [(x0, 1.0 - dx), (x0 + 1, dx)] {
                    let w = wy * wx;
                    if w == 0.0 {
                        continue;
                    }
                    let p = if yy >= 0 && (yy as usize) < img.h && xx >= 0 && (xx as usize) < img.w
                    {
                        img.px(yy as usize, xx as usize)
                    } else {
                        [FILL; 3]
                    };
                    for ch in 0..3 {
                        acc[ch] += w * p[ch] as f32;
                    }
                }
            }
            out.set_px(y, x, [clamp_u8(acc[0]), clamp_u8(acc[1]), clamp_u8(acc[2])]);
        }
    }
    out
}

/// Counterclockwise rotation about the image center, gray fill.
pub fn rotate(img: &ImageU8, degrees: f32) -> ImageU8 {
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let cx = img.w as f32 / 2.0;
    let cy = img.h as f32 / 2.0;
    // inverse rotation of output coords about the center
    affine(
        img,
        [
            cos,
            sin,
            cx - cos * cx - sin * cy,
            -sin,
            cos,
            cy + sin * cx - cos * cy,
        ],
    )
}

pub fn shear_x(img: &ImageU8, factor: f32) -> ImageU8 {
    affine(img, [1.0, factor, 0.0, 0.0, 1.0, 0.0])
}

pub fn shear_y(img: &ImageU8, factor: f32) -> ImageU8 {
    affine(img, [1.0, 0.0, 0.0, factor, 1.0, 0.0])
}

pub fn translate_x(img: &ImageU8, pixels: f32) -> ImageU8 {
    affine(img, [1.0, 0.0, pixels, 0.0, 1.0, 0.0])
}

pub fn translate_y(img: &ImageU8, pixels: f32) -> ImageU8 {
    affine(img, [1.0, 0.0, 0.0, 0.0, 1.0, pixels])
}

// ---- photometric table ops ---------------------------------------------------

pub fn invert(img: &ImageU8) -> ImageU8 {
    ImageU8 {
        h: img.h,
        w: img.w,
        data: img.data.iter().map(|&v| 255 - v).collect(),
    }
}

/// Keep the top `bits` bits of each channel value.
pub fn posterize(img: &ImageU8, bits: u8) -> ImageU8 {
    let mask = !(0xFFu16 >> bits.min(8)) as u8;
    ImageU8 {
        h: img.h,
        w: img.w,
        data: img.data.iter().map(|&v| v & mask).collect(),
    }
}

/// Invert all values at or above the threshold.
pub fn solarize(img: &ImageU8, threshold: u8) -> ImageU8 {
    ImageU8 {
        h: img.h,
        w: img.w,
        data: img
            .data
            .iter()
            .map(|&v| if v >= threshold { 255 - v } else { v })
            .collect(),
    }
}

/// Add `amount` to values below the threshold (128), clamped.
pub fn solarize_add(img: &ImageU8, amount: i16) -> ImageU8 {
    ImageU8 {
        h: img.h,
        w: img.w,
        data: img
            .data
            .iter()
            .map(|&v| {
                if v < 128 {
                    (v as i16 + amount).clamp(0, 255) as u8
                } else {
                    v
                }
            })
            .collect(),
    }
}

/// Per-channel min/max stretch to the full range.
pub fn autocontrast(img: &ImageU8) -> ImageU8 {
    let mut out = img.clone();
    for c in 0..3 {
        let mut lo = 255u8;
        let mut hi = 0u8;
        for px in img.data.chunks(3) {
            lo = lo.min(px[c]);
            hi = hi.max(px[c]);
        }
        if hi <= lo {
            continue;
        }
        let scale = 255.0 / (hi - lo) as f32;
        for px in out.data.chunks_mut(3) {
            px[c] = clamp_u8((px[c] - lo) as f32 * scale);
        }
    }
    out
}

/// Per-channel histogram equalization (cumulative-lookup form).
pub fn equalize(img: &ImageU8) -> ImageU8 {
    let mut out = img.clone();
    for c in 0..3 {
        let mut hist = [0u32; 256];
        for px in img.data.chunks(3) {
            hist[px[c] as usize] += 1;
        }
        let nonzero: Vec<u32> = hist.iter().copied().filter(|&v| v > 0).collect();
        if nonzero.len() <= 1 {
            continue;
        }
        let total: u32 = nonzero.iter().sum();
        let step = (total - nonzero[nonzero.len() - 1]) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (i, l) in lut.iter_mut().enumerate() {
            *l = (n / step).min(255) as u8;
            n += hist[i];
        }
        for px in out.data.chunks_mut(3) {
            px[c] = lut[px[c] as usize];
        }
    }
    out
}

/// ITU-R 601 luma.
#[inline]
pub fn luma(p: [u8; 3]) -> u8 {
    ((p[0] as u32 * 299 + p[1] as u32 * 587 + p[2] as u32 * 114) / 1000) as u8
}

pub fn grayscale(img: &ImageU8) -> ImageU8 {
    let mut out = img.clone();
    for px in out.data.chunks_mut(3) {
        let l = luma([px[0], px[1], px[2]]);
        px.fill(l);
    }
    out
}

/// out = degenerate + factor * (img - degenerate); factor 1 is the identity.
pub fn blend(degenerate: &ImageU8, img: &ImageU8, factor: f32) -> ImageU8 {
    assert_eq!(degenerate.data.len(), img.data.len());
    let data = degenerate
        .data
        .iter()
        .zip(&img.data)
        .map(|(&d, &v)| clamp_u8(d as f32 + factor * (v as f32 - d as f32)))
        .collect();
    ImageU8 {
        h: img.h,
        w: img.w,
        data,
    }
}

pub fn adjust_color(img: &ImageU8, factor: f32) -> ImageU8 {
    blend(&grayscale(img), img, factor)
}

pub fn adjust_contrast(img: &ImageU8, factor: f32) -> ImageU8 {
    let mean = {
        let n = (img.h * img.w) as u64;
        let sum: u64 = img.data.chunks(3).map(|p| luma([p[0], p[1], p[2]]) as u64).sum();
        ((sum as f64 / n as f64) + 0.5) as u8
    };
    blend(&ImageU8::filled(img.h, img.w, mean), img, factor)
}

pub fn adjust_brightness(img: &ImageU8, factor: f32) -> ImageU8 {
    blend(&ImageU8::filled(img.h, img.w, 0), img, factor)
}

/// Blend against a 3x3 smoothing of the interior (border rows stay put).
pub fn adjust_sharpness(img: &ImageU8, factor: f32) -> ImageU8 {
    let mut smooth = img.clone();
    if img.h > 2 && img.w > 2 {
        for y in 1..img.h - 1 {
            for x in 1..img.w - 1 {
                let mut acc = [0.0f32; 3];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let wgt = if dy == 1 && dx == 1 { 5.0 } else { 1.0 };
                        let p = img.px(y + dy - 1, x + dx - 1);
                        for c in 0..3 {
                            acc[c] += wgt * p[c] as f32;
                        }
                    }
                }
                smooth.set_px(
                    y,
                    x,
                    [
                        clamp_u8(acc[0] / 13.0),
                        clamp_u8(acc[1] / 13.0),
                        clamp_u8(acc[2] / 13.0),
                    ],
                );
            }
        }
    }
    blend(&smooth, img, factor)
}

/// Separable Gaussian blur with clamp-to-edge; radius 3 sigma.
pub fn gaussian_blur(img: &ImageU8, sigma: f32) -> ImageU8 {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-(i * i) as f32 / denom).exp());
    }
    let norm: f32 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let pass = |src: &ImageU8, horizontal: bool| -> ImageU8 {
        let mut out = src.clone();
        for y in 0..src.h {
            for x in 0..src.w {
                let mut acc = [0.0f32; 3];
                for (ki, &kv) in kernel.iter().enumerate() {
                    let off = ki as isize - radius;
                    let (sy, sx) = if horizontal {
                        (y as isize, (x as isize + off).clamp(0, src.w as isize - 1))
                    } else {
                        ((y as isize + off).clamp(0, src.h as isize - 1), x as isize)
                    };
                    let p = src.px(sy as usize, sx as usize);
                    for c in 0..3 {
                        acc[c] += kv * p[c] as f32;
                    }
                }
                out.set_px(y, x, [clamp_u8(acc[0]), clamp_u8(acc[1]), clamp_u8(acc[2])]);
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageU8 {
        let mut data = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let v = ((y * w + x) * 7 % 256) as u8;
                data.extend_from_slice(&[v, v.wrapping_add(40), v.wrapping_add(90)]);
            }
        }
        ImageU8::new(h, w, data)
    }

    #[test]
    fn resize_identity_when_same_size() {
        let img = ramp(8, 8);
        assert_eq!(resize(&img, 8, 8), img);
    }

    #[test]
    fn resize_constant_image_stays_constant() {
        let img = ImageU8::filled(10, 6, 77);
        let out = resize(&img, 23, 17);
        assert!(out.data.iter().all(|&v| v == 77));
    }

    #[test]
    fn crop_extracts_expected_region() {
        let img = ramp(8, 8);
        let c = crop(&img, 2, 3, 4, 5);
        assert_eq!(c.h, 4);
        assert_eq!(c.w, 5);
        assert_eq!(c.px(0, 0), img.px(2, 3));
        assert_eq!(c.px(3, 4), img.px(5, 7));
    }

    #[test]
    fn invert_is_involutive() {
        let img = ramp(5, 5);
        assert_eq!(invert(&invert(&img)), img);
    }

    #[test]
    fn posterize_full_bits_is_identity() {
        let img = ramp(5, 5);
        assert_eq!(posterize(&img, 8), img);
        let p4 = posterize(&img, 4);
        assert!(p4.data.iter().all(|&v| v & 0x0F == 0));
    }

    #[test]
    fn solarize_identity_above_range() {
        let img = ramp(5, 5);
        // no u8 reaches a threshold above 255
        let lut_identity = solarize(&img, 255);
        for (a, b) in lut_identity.data.iter().zip(&img.data) {
            if *b == 255 {
                assert_eq!(*a, 0);
            } else {
                assert_eq!(*a, *b);
            }
        }
    }

    #[test]
    fn blend_endpoints() {
        let img = ramp(4, 4);
        let deg = grayscale(&img);
        assert_eq!(blend(&deg, &img, 1.0), img);
        assert_eq!(blend(&deg, &img, 0.0), deg);
    }

    #[test]
    fn rotate_zero_is_identity() {
        let img = ramp(9, 9);
        assert_eq!(rotate(&img, 0.0), img);
    }

    #[test]
    fn translate_shifts_content() {
        let img = ramp(6, 6);
        let t = translate_x(&img, 2.0);
        // output pixel (0,0) samples input (2,0)
        assert_eq!(t.px(0, 0), img.px(0, 2));
        // far right columns fall outside -> fill
        assert_eq!(t.px(0, 5), [FILL; 3]);
    }

    #[test]
    fn autocontrast_stretches_range() {
        let mut img = ImageU8::filled(4, 4, 100);
        img.data[0] = 50;
        img.data[3] = 150; // channel 0 spans 50..150
        let out = autocontrast(&img);
        assert_eq!(out.data[0], 0);
        assert_eq!(out.data[3], 255);
    }

    #[test]
    fn grayscale_channels_agree() {
        let img = ramp(4, 4);
        let g = grayscale(&img);
        for px in g.data.chunks(3) {
            assert!(px[0] == px[1] && px[1] == px[2]);
        }
    }

    #[test]
    fn gaussian_blur_preserves_constant() {
        let img = ImageU8::filled(8, 8, 99);
        let out = gaussian_blur(&img, 1.5);
        assert!(out.data.iter().all(|&v| (v as i16 - 99).abs() <= 1));
    }
}
