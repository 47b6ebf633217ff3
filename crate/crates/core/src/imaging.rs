//! Color-space conversion, bicubic resampling and PNG I/O.
//!
//! Pixels are kept as `f64` in `[0, 1]` with interleaved RGB layout
//! (`(row * width + col) * 3 + channel`). Quantization to integer codes only
//! happens when writing PNG files.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

/// Full-range BT.601 luma weights.
pub const KR: f64 = 0.299;
pub const KG: f64 = 0.587;
pub const KB: f64 = 0.114;

/// Bicubic kernel parameter.
pub const BICUBIC_A: f64 = -0.5;

/// An RGB raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Builds an image from interleaved RGB samples. Samples must be finite;
    /// range is not enforced here since network outputs may overshoot.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "image must be at least 1x1, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{height}x{width}x3 image needs {} samples, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite sample at index {i}")));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        assert!(height > 0 && width > 0, "image must be at least 1x1");
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Image {
            height,
            width,
            data,
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        assert!(height > 0 && width > 0, "image must be at least 1x1");
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend_from_slice(&f(r, c));
            }
        }
        Image {
            height,
            width,
            data,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f64; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamped(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    /// Copies the `h x w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if h == 0 || w == 0 || top + h > self.height || left + w > self.width {
            return Err(Error::Dimension(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for r in top..top + h {
            let start = (r * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Ok(Image {
            height: h,
            width: w,
            data,
        })
    }

    /// Removes `border` pixels from every side.
    pub fn crop_border(&self, border: usize) -> Result<Image> {
        if 2 * border >= self.height || 2 * border >= self.width {
            return Err(Error::Dimension(format!(
                "border {border} leaves nothing of a {}x{} image",
                self.height, self.width
            )));
        }
        self.crop(
            border,
            border,
            self.height - 2 * border,
            self.width - 2 * border,
        )
    }

    pub(crate) fn same_dims(&self, other: &Image, what: &str) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// A single-channel plane.
#[derive(Clone, Debug, PartialEq)]
pub struct LumaPlane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl LumaPlane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} plane cannot hold {} samples",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("non-finite plane sample".into()));
        }
        Ok(LumaPlane {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

#[inline]
pub fn luma(rgb: [f64; 3]) -> f64 {
    KR * rgb[0] + KG * rgb[1] + KB * rgb[2]
}

/// Splits an image into full-range BT.601 Y, Cb and Cr planes.
pub fn rgb_to_ycbcr(img: &Image) -> (LumaPlane, LumaPlane, LumaPlane) {
    let n = img.height * img.width;
    let (mut y, mut cb, mut cr) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for px in img.data.chunks_exact(3) {
        let l = luma([px[0], px[1], px[2]]);
        y.push(l);
        cb.push(0.5 + (px[2] - l) / (2.0 * (1.0 - KB)));
        cr.push(0.5 + (px[0] - l) / (2.0 * (1.0 - KR)));
    }
    let plane = |data| LumaPlane {
        height: img.height,
        width: img.width,
        data,
    };
    (plane(y), plane(cb), plane(cr))
}

/// Inverse of [`rgb_to_ycbcr`].
pub fn ycbcr_to_rgb(y: &LumaPlane, cb: &LumaPlane, cr: &LumaPlane) -> Result<Image> {
    if (y.height, y.width) != (cb.height, cb.width) || (y.height, y.width) != (cr.height, cr.width)
    {
        return Err(Error::Dimension("Y/Cb/Cr planes differ in size".into()));
    }
    let mut data = Vec::with_capacity(y.data.len() * 3);
    for ((&l, &b), &r) in y.data.iter().zip(&cb.data).zip(&cr.data) {
        let red = l + 2.0 * (1.0 - KR) * (r - 0.5);
        let blue = l + 2.0 * (1.0 - KB) * (b - 0.5);
        let green = (l - KR * red - KB * blue) / KG;
        data.extend_from_slice(&[red, green, blue]);
    }
    Image::new(y.height, y.width, data)
}

pub fn extract_y(img: &Image) -> LumaPlane {
    LumaPlane {
        height: img.height,
        width: img.width,
        data: img
            .data
            .chunks_exact(3)
            .map(|px| luma([px[0], px[1], px[2]]))
            .collect(),
    }
}

/// Keys cubic convolution kernel.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Mirror index into `[0, n)` without repeating the edge sample.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Per-output-sample taps for resampling a length-`n_in` axis to `n_out`.
struct AxisTaps {
    /// (first source index (unreflected), weights); weights sum to one.
    taps: Vec<(isize, Vec<f64>)>,
}

fn axis_taps(n_in: usize, n_out: usize) -> AxisTaps {
    let ratio = n_out as f64 / n_in as f64;
    // Downscaling widens the kernel to low-pass before decimation.
    let stretch = if ratio < 1.0 { ratio } else { 1.0 };
    let support = 2.0 / stretch;
    let taps = (0..n_out)
        .map(|o| {
            let center = (o as f64 + 0.5) / ratio - 0.5;
            let first = (center - support).floor() as isize + 1;
            let last = (center + support).ceil() as isize - 1;
            let mut weights: Vec<f64> = (first..=last)
                .map(|i| stretch * cubic_kernel(stretch * (center - i as f64)))
                .collect();
            let sum: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= sum);
            (first, weights)
        })
        .collect();
    AxisTaps { taps }
}

/// Applies one axis of taps. The weighted sum is formed around the sample
/// nearest to the kernel center so a constant signal is reproduced exactly.
fn resample_line(taps: &(isize, Vec<f64>), n: usize, sample: impl Fn(usize) -> f64) -> f64 {
    let (first, weights) = taps;
    let anchor_pos = weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(k, _)| k)
        .unwrap_or(0);
    let anchor = sample(reflect_index(first + anchor_pos as isize, n));
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        if k == anchor_pos {
            continue;
        }
        acc += w * (sample(reflect_index(first + k as isize, n)) - anchor);
    }
    anchor + acc
}

/// Separable bicubic resize with reflect padding; output clamped to `[0, 1]`.
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension(format!(
            "resize target must be at least 1x1, got {out_h}x{out_w}"
        )));
    }
    if (out_h, out_w) == img.dims() {
        return Ok(img.clamped());
    }
    let (h, w) = img.dims();
    let col_taps = axis_taps(w, out_w);
    let row_taps = axis_taps(h, out_h);

    // horizontal pass: h x out_w
    let mut tmp = vec![0.0; h * out_w * 3];
    for r in 0..h {
        for (oc, taps) in col_taps.taps.iter().enumerate() {
            for ch in 0..3 {
                tmp[(r * out_w + oc) * 3 + ch] =
                    resample_line(taps, w, |c| img.data[(r * w + c) * 3 + ch]);
            }
        }
    }
    let mut out = vec![0.0; out_h * out_w * 3];
    for (or, taps) in row_taps.taps.iter().enumerate() {
        for oc in 0..out_w {
            for ch in 0..3 {
                let v = resample_line(taps, h, |r| tmp[(r * out_w + oc) * 3 + ch]);
                out[(or * out_w + oc) * 3 + ch] = v.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(out_h, out_w, out)
}

/// PNG sample depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max_code(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
    load_png_with_depth(path).map(|(img, _)| img)
}

/// Loads an RGB PNG and reports its sample depth.
pub fn load_png_with_depth(path: impl AsRef<Path>) -> Result<(Image, BitDepth)> {
    let path = path.as_ref();
    let png_err = |message: String| Error::Png {
        path: path.to_path_buf(),
        message,
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| png_err(format!("malformed PNG: {e}")))?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Rgb {
        return Err(png_err(format!("expected RGB color type, found {color:?}")));
    }
    let depth = match depth {
        png::BitDepth::Eight => BitDepth::Eight,
        png::BitDepth::Sixteen => BitDepth::Sixteen,
        other => return Err(png_err(format!("unsupported bit depth {other:?}"))),
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err("image too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| png_err(format!("malformed PNG: {e}")))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let max = depth.max_code();
    let data: Vec<f64> = match depth {
        BitDepth::Eight => buf[..h * w * 3].iter().map(|&b| b as f64 / max).collect(),
        BitDepth::Sixteen => buf[..h * w * 6]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / max)
            .collect(),
    };
    Ok((Image::new(h, w, data)?, depth))
}

/// Round-half-up quantization of a `[0, 1]` sample (clamped first).
pub fn quantize(v: f64, depth: BitDepth) -> u16 {
    let max = depth.max_code();
    (v.clamp(0.0, 1.0) * max + 0.5).floor().min(max) as u16
}

pub fn save_png(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    save_png_with_depth(img, path, BitDepth::Eight)
}

pub fn save_png_with_depth(img: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    let bytes: Vec<u8> = match depth {
        BitDepth::Eight => {
            encoder.set_depth(png::BitDepth::Eight);
            img.data
                .iter()
                .map(|&v| quantize(v, depth) as u8)
                .collect()
        }
        BitDepth::Sixteen => {
            encoder.set_depth(png::BitDepth::Sixteen);
            img.data
                .iter()
                .flat_map(|&v| quantize(v, depth).to_be_bytes())
                .collect()
        }
    };
    let png_err = |e: png::EncodingError| Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Image::from_fn(h, w, |_, _| {
            let mut next = || {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64
            };
            [next(), next(), next()]
        })
    }

    #[test]
    fn luma_of_primaries() {
        let white = Image::filled(2, 2, [1.0; 3]);
        let black = Image::filled(2, 2, [0.0; 3]);
        let red = Image::filled(2, 2, [1.0, 0.0, 0.0]);
        assert!(extract_y(&white).data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(extract_y(&black).data().iter().all(|&v| v == 0.0));
        assert!(extract_y(&red).data().iter().all(|&v| v == 0.299));
        let (y, _, _) = rgb_to_ycbcr(&red);
        assert_eq!(y, extract_y(&red));
    }

    #[test]
    fn gray_luma_is_gray() {
        let g = Image::filled(3, 5, [0.37; 3]);
        assert!(extract_y(&g).data().iter().all(|&v| (v - 0.37).abs() < 1e-15));
    }

    /// Direct, non-separable evaluation of the resampler: for each output
    /// sample, sum the 2-D product kernel over the whole (reflected) source.
    fn resize_oracle(img: &Image, out_h: usize, out_w: usize) -> Vec<f64> {
        let (h, w) = img.dims();
        let weights_1d = |n_in: usize, n_out: usize, o: usize| -> Vec<(usize, f64)> {
            let ratio = n_out as f64 / n_in as f64;
            let s = ratio.min(1.0);
            let center = (o as f64 + 0.5) / ratio - 0.5;
            let mut taps = Vec::new();
            for i in -20isize..(n_in as isize + 20) {
                let wgt = s * cubic_kernel(s * (center - i as f64));
                if wgt != 0.0 {
                    taps.push((reflect_index(i, n_in), wgt));
                }
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.into_iter().map(|(i, w)| (i, w / total)).collect()
        };
        let mut out = Vec::new();
        for orow in 0..out_h {
            let rw = weights_1d(h, out_h, orow);
            for ocol in 0..out_w {
                let cw = weights_1d(w, out_w, ocol);
                for ch in 0..3 {
                    let mut acc = 0.0;
                    for &(r, wr) in &rw {
                        for &(c, wc) in &cw {
                            acc += wr * wc * img.pixel(r, c)[ch];
                        }
                    }
                    out.push(acc.clamp(0.0, 1.0));
                }
            }
        }
        out
    }

    #[test]
    fn ramp_downscale_matches_direct_convolution() {
        let ramp = Image::from_fn(4, 4, |r, c| {
            let v = (r * 4 + c) as f64 / 15.0;
            [v, v, v]
        });
        let got = bicubic_resize(&ramp, 2, 2).unwrap();
        let want = resize_oracle(&ramp, 2, 2);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
        // frozen values from the oracle: the ramp is symmetric about its center
        assert!((got.pixel(0, 0)[0] + got.pixel(1, 1)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn upscale_matches_direct_convolution() {
        let img = random_image(5, 7, 3);
        let got = bicubic_resize(&img, 10, 14).unwrap();
        let want = resize_oracle(&img, 10, 14);
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_resize() {
        let img = random_image(6, 9, 1);
        assert_eq!(bicubic_resize(&img, 6, 9).unwrap(), img);
    }

    #[test]
    fn zero_target_rejected() {
        let img = random_image(4, 4, 1);
        assert!(bicubic_resize(&img, 0, 3).is_err());
    }

    #[test]
    fn png_roundtrip_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = Image::filled(3, 4, [128.0 / 255.0; 3]);
        save_png(&img, &p).unwrap();
        let back = load_png(&p).unwrap();
        assert!(back.data().iter().all(|&v| v == 128.0 / 255.0));

        let rnd = random_image(13, 11, 9);
        let (p1, p2) = (dir.path().join("r1.png"), dir.path().join("r2.png"));
        save_png(&rnd, &p1).unwrap();
        save_png(&load_png(&p1).unwrap(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn png_16bit_max_code_is_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        save_png_with_depth(&Image::filled(2, 2, [1.0; 3]), &p, BitDepth::Sixteen).unwrap();
        let (img, depth) = load_png_with_depth(&p).unwrap();
        assert_eq!(depth, BitDepth::Sixteen);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn png_errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.png");
        let err = load_png(&missing).unwrap_err().to_string();
        assert!(err.contains("missing.png"));

        let bogus = dir.path().join("bogus.png");
        std::fs::write(&bogus, b"not a png").unwrap();
        let err = load_png(&bogus).unwrap_err().to_string();
        assert!(err.contains("bogus.png") && err.contains("malformed"));

        let gray = dir.path().join("gray.png");
        {
            let f = File::create(&gray).unwrap();
            let mut enc = png::Encoder::new(BufWriter::new(f), 2, 2);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().unwrap();
            w.write_image_data(&[0, 1, 2, 3]).unwrap();
        }
        let err = load_png(&gray).unwrap_err().to_string();
        assert!(err.contains("RGB"));
    }

    #[test]
    fn crop_border_bounds() {
        let img = random_image(6, 6, 2);
        assert_eq!(img.crop_border(2).unwrap().dims(), (2, 2));
        assert!(img.crop_border(3).is_err());
    }

    proptest! {
        #[test]
        fn ycbcr_roundtrip(seed in any::<u64>(), h in 1usize..6, w in 1usize..6) {
            let img = random_image(h, w, seed);
            let (y, cb, cr) = rgb_to_ycbcr(&img);
            let back = ycbcr_to_rgb(&y, &cb, &cr).unwrap();
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn constant_resize_is_exact(v in 0.0f64..=1.0, h in 1usize..9, w in 1usize..9,
                                    oh in 1usize..17, ow in 1usize..17) {
            let img = Image::filled(h, w, [v, v * 0.5, 1.0 - v]);
            let out = bicubic_resize(&img, oh, ow).unwrap();
            for px in out.data().chunks_exact(3) {
                prop_assert_eq!(px, &[v, v * 0.5, 1.0 - v][..]);
            }
        }

        #[test]
        fn brightening_never_lowers_luma(seed in any::<u64>(), c in 0.0f64..0.5) {
            let img = random_image(4, 4, seed);
            let brighter = Image::new(4, 4, img.data().iter().map(|v| (v + c).min(1.0)).collect()).unwrap();
            let (y1, y2) = (extract_y(&img), extract_y(&brighter));
            for (a, b) in y1.data().iter().zip(y2.data()) {
                prop_assert!(b >= a);
            }
        }
    }
}
