//! Y-channel quality metrics, branch diagnostics and weight-map rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::imaging::{bicubic_resize, extract_y, save_png, Image, LumaPlane};
use crate::model::{path_label, ConvergenceModel, DivergenceModel, PredictionSet, WeightMaps};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn cropped_y(img: &Image, border: usize) -> Result<LumaPlane> {
    let (h, w) = img.dims();
    if 2 * border >= h.min(w) {
        return Err(Error::Dimension(format!(
            "border {border} leaves nothing of a {h}x{w} image"
        )));
    }
    Ok(extract_y(&img.crop_border(border)?))
}

/// PSNR in dB on the Y planes after removing `border` pixels per side, with
/// peak 1.0. Identical inputs give `f64::INFINITY`.
pub fn psnr_y(sr: &Image, hr: &Image, border: usize) -> Result<f64> {
    sr.same_dims(hr, "psnr_y")?;
    let (a, b) = (cropped_y(sr, border)?, cropped_y(hr, border)?);
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filtering over "valid" window positions.
fn blur_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let n = SSIM_WINDOW;
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|i| k[i] * src[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM on Y over every full 11x11 Gaussian window (sigma 1.5).
pub fn ssim_y(sr: &Image, hr: &Image) -> Result<f64> {
    sr.same_dims(hr, "ssim_y")?;
    let (h, w) = sr.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimension(format!(
            "ssim_y needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let (x, y) = (extract_y(sr), extract_y(hr));
    let (x, y) = (x.data(), y.data());
    let k = gaussian_window();
    let prod = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(f).collect::<Vec<_>>();
    let mx = blur_valid(x, h, w, &k);
    let my = blur_valid(y, h, w, &k);
    let sxx = blur_valid(&prod(&|i| x[i] * x[i]), h, w, &k);
    let syy = blur_valid(&prod(&|i| y[i] * y[i]), h, w, &k);
    let sxy = blur_valid(&prod(&|i| x[i] * y[i]), h, w, &k);
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (a, b) = (mx[i], my[i]);
            let vx = sxx[i] - a * a;
            let vy = syy[i] - b * b;
            let cov = sxy[i] - a * b;
            ((2.0 * a * b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((a * a + b * b + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// `P x P` matrix of mean squared Y differences between predictions.
pub fn pairwise_divergence(preds: &PredictionSet) -> Vec<Vec<f64>> {
    let ys: Vec<LumaPlane> = preds.predictions().iter().map(extract_y).collect();
    let p = ys.len();
    let mut m = vec![vec![0.0; p]; p];
    for i in 0..p {
        for j in i + 1..p {
            let a = ys[i].data();
            let d = a
                .iter()
                .zip(ys[j].data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / a.len() as f64;
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    m
}

/// Mean of the off-diagonal entries; zero for a single prediction.
pub fn mean_offdiagonal(m: &[Vec<f64>]) -> f64 {
    let p = m.len();
    if p < 2 {
        return 0.0;
    }
    let s: f64 = (0..p)
        .flat_map(|i| (0..p).filter(move |&j| j != i).map(move |j| (i, j)))
        .map(|(i, j)| m[i][j])
        .sum();
    s / (p * (p - 1)) as f64
}

/// Energy of the alternating-sign component of Y: mean over valid 2x2
/// positions of `(Y' * k)^2` with `Y' = 2Y - 1` and
/// `k = [[1, -1], [-1, 1]] / 4`. A 0/1 checkerboard scores 1.
pub fn checkerboard_energy(img: &Image) -> Result<f64> {
    let (h, w) = img.dims();
    if h < 2 || w < 2 {
        return Err(Error::Dimension(format!(
            "checkerboard_energy needs at least 2x2, got {h}x{w}"
        )));
    }
    let y = extract_y(img);
    let v = |r: usize, c: usize| 2.0 * y.get(r, c) - 1.0;
    let mut acc = 0.0;
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            let resp = (v(r, c) - v(r, c + 1) - v(r + 1, c) + v(r + 1, c + 1)) / 4.0;
            acc += resp * resp;
        }
    }
    Ok(acc / ((h - 1) * (w - 1)) as f64)
}

/// Min-max normalizes a plane and maps `t` to RGB `(t, 0, 1 - t)`: blue for
/// the lowest weight, red for the highest. A flat plane renders all blue.
pub fn heatmap(plane: &[f64], height: usize, width: usize) -> Result<Image> {
    if plane.len() != height * width {
        return Err(Error::Dimension("heatmap plane does not match geometry".into()));
    }
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(Image::from_fn(height, width, |r, c| {
        let t = if span > 0.0 {
            (plane[r * width + c] - lo) / span
        } else {
            0.0
        };
        [t, 0.0, 1.0 - t]
    }))
}

/// Writes `weight_<leafpath>.png` for every plane and returns the paths.
pub fn export_weight_heatmaps(weights: &WeightMaps, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (h, w) = weights.dims();
    weights
        .planes()
        .iter()
        .zip(weights.leaf_paths())
        .map(|(plane, path)| {
            let file = dir.join(format!("weight_{}.png", path_label(path)));
            save_png(&heatmap(plane, h, w)?, &file)?;
            Ok(file)
        })
        .collect()
}

/// Equal-weight average of all predictions.
pub fn uniform_average(preds: &PredictionSet) -> Image {
    let p = preds.len() as f64;
    let (h, w) = preds.dims();
    let mut data = vec![0.0; h * w * 3];
    for img in preds.predictions() {
        for (d, v) in data.iter_mut().zip(img.data()) {
            *d += v / p;
        }
    }
    Image::new(h, w, data).expect("average of finite images")
}

/// Output of the full two-stage model on one input.
#[derive(Clone, Debug)]
pub struct Restoration {
    pub predictions: PredictionSet,
    pub weights: WeightMaps,
    pub sr: Image,
}

/// Runs the tree and the fusion head on a single LR image.
pub fn super_resolve(
    divergence: &DivergenceModel,
    head: &ConvergenceModel,
    lr: &Image,
) -> Result<Restoration> {
    if head.config() != divergence.config() {
        return Err(Error::ConfigHash {
            expected: divergence.config().hash(),
            found: head.config().hash(),
        });
    }
    let predictions = divergence.forward(lr)?;
    let (weights, sr) = head.forward(&predictions)?;
    // Fused values are a convex mix of clamped inputs; clamp away rounding.
    Ok(Restoration {
        predictions,
        weights,
        sr: sr.clamped(),
    })
}

/// Averages over a set of inputs of per-branch diagnostics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchStats {
    pub images: usize,
    /// Mean off-diagonal entry of [`pairwise_divergence`].
    pub mean_divergence: f64,
    /// [`checkerboard_energy`] averaged over branches and images.
    pub mean_checkerboard: f64,
    /// PSNR of the equal-weight average of the branches.
    pub psnr_uniform: f64,
    /// PSNR of the worst and best branch on each image, averaged.
    pub psnr_worst_branch: f64,
    pub psnr_best_branch: f64,
}

/// Runs the tree on every pair and summarizes its branches.
pub fn branch_statistics(model: &DivergenceModel, pairs: &[ImagePair], border: usize) -> Result<BranchStats> {
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to evaluate".into()));
    }
    let mut acc = [0.0; 5];
    for pair in pairs {
        let set = model.forward(pair.lr())?;
        let psnrs = set
            .predictions()
            .iter()
            .map(|p| psnr_y(p, pair.hr(), border))
            .collect::<Result<Vec<f64>>>()?;
        let mut cb = 0.0;
        for p in set.predictions() {
            cb += checkerboard_energy(p)?;
        }
        acc[0] += mean_offdiagonal(&pairwise_divergence(&set));
        acc[1] += cb / set.len() as f64;
        acc[2] += psnr_y(&uniform_average(&set), pair.hr(), border)?;
        acc[3] += psnrs.iter().copied().fold(f64::INFINITY, f64::min);
        acc[4] += psnrs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    let n = pairs.len() as f64;
    Ok(BranchStats {
        images: pairs.len(),
        mean_divergence: acc[0] / n,
        mean_checkerboard: acc[1] / n,
        psnr_uniform: acc[2] / n,
        psnr_worst_branch: acc[3] / n,
        psnr_best_branch: acc[4] / n,
    })
}

/// Mean PSNR of plain bicubic upsampling of each LR input.
pub fn bicubic_psnr(pairs: &[ImagePair], border: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to evaluate".into()));
    }
    let mut total = 0.0;
    for pair in pairs {
        let (h, w) = pair.hr().dims();
        total += psnr_y(&bicubic_resize(pair.lr(), h, w)?, pair.hr(), border)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Scores the full model on every pair.
pub fn evaluate_model(
    divergence: &DivergenceModel,
    head: &ConvergenceModel,
    pairs: &[ImagePair],
    border: usize,
) -> Result<EvalReport> {
    let mut report = EvalReport::new(border, divergence.config().scale);
    for pair in pairs {
        let r = super_resolve(divergence, head, pair.lr())?;
        report.score(pair.identifier(), &r.sr, pair.hr());
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub identifier: String,
    pub psnr_y: f64,
    pub ssim_y: f64,
}

/// Per-image scores plus the protocol they were measured under.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub border: usize,
    pub scale: usize,
    pub records: Vec<EvalRecord>,
    /// Items that could not be scored, with the reason.
    pub skipped: Vec<(String, String)>,
}

impl EvalReport {
    pub fn new(border: usize, scale: usize) -> Self {
        EvalReport {
            border,
            scale,
            records: Vec::new(),
            skipped: Vec::new(),
        }
    }

    /// Scores one image; failures are recorded as skipped items.
    pub fn score(&mut self, identifier: &str, sr: &Image, hr: &Image) {
        match score_pair(sr, hr, self.border) {
            Ok((psnr_y, ssim_y)) => self.records.push(EvalRecord {
                identifier: identifier.to_string(),
                psnr_y,
                ssim_y,
            }),
            Err(e) => self.skipped.push((identifier.to_string(), e.to_string())),
        }
    }

    pub fn mean_psnr(&self) -> Option<f64> {
        mean(self.records.iter().map(|r| r.psnr_y))
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        mean(self.records.iter().map(|r| r.ssim_y))
    }

    /// `identifier,psnr_y,ssim_y` rows and a `mean,...` footer. Infinite
    /// PSNR is written as `inf`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("identifier,psnr_y,ssim_y\n");
        for r in &self.records {
            writeln!(s, "{},{},{}", r.identifier, r.psnr_y, r.ssim_y).unwrap();
        }
        let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| x.to_string());
        writeln!(s, "mean,{},{}", fmt(self.mean_psnr()), fmt(self.mean_ssim())).unwrap();
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// `(psnr_y, ssim_y)` with the same border crop applied to both.
pub fn score_pair(sr: &Image, hr: &Image, border: usize) -> Result<(f64, f64)> {
    let psnr = psnr_y(sr, hr, border)?;
    let ssim = ssim_y(&sr.crop_border(border)?, &hr.crop_border(border)?)?;
    Ok((psnr, ssim))
}
