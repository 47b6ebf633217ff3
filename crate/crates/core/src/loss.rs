//! Divergence and convergence losses with closed-form gradients.
//!
//! The divergence loss is `L2 + alpha * T`, where `L2` sums the per-branch
//! mean squared error against the HR target and `T` is a triplet hinge on
//! luma residual maps that pushes the residuals of different branches apart:
//!
//! * `G(x) = (Y(x) - mean) / (std + eps)` standardizes the Y channel,
//! * `res_i = |G(pred_i) - G(hr)|`,
//! * `T = 1/(P(P-1)) * sum_{i != j} beta_ij * trip(res_i, 0, res_j)`,
//! * `beta_ij = theta^(l - 1)` with `l` the depth of the deepest common
//!   ancestor of branches `i` and `j`.
//!
//! Everything is computed in `f64` so gradients can be checked against
//! finite differences.

use crate::error::{Error, Result};
use crate::imaging::{extract_y, Image, LumaPlane, KB, KG, KR};
use crate::model::PredictionSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Distance {
    /// Mean of squared element differences.
    #[default]
    MeanSquared,
}

impl Distance {
    pub fn name(self) -> &'static str {
        match self {
            Distance::MeanSquared => "mse",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mse" | "mean-squared" => Some(Distance::MeanSquared),
            _ => None,
        }
    }

    fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::MeanSquared => {
                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Weight of the triplet term.
    pub alpha: f64,
    pub margin: f64,
    /// Attenuation base in `(0, 1]`.
    pub theta: f64,
    pub distance: Distance,
    /// Take the absolute value of residual maps (disable for the signed ablation).
    pub use_abs: bool,
    pub sigma_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.1,
            margin: 0.1,
            theta: 0.5,
            distance: Distance::MeanSquared,
            use_abs: true,
            sigma_epsilon: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Config(format!("theta must lie in (0, 1], got {}", self.theta)));
        }
        if !(self.alpha >= 0.0) || !(self.margin >= 0.0) {
            return Err(Error::Config("alpha and margin must be nonnegative".into()));
        }
        if !(self.sigma_epsilon > 0.0) {
            return Err(Error::Config("sigma_epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Residual of a prediction against the target in normalized-luma space.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ResidualMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() || data.is_empty() {
            return Err(Error::Dimension(format!(
                "{height}x{width} residual map cannot hold {} values",
                data.len()
            )));
        }
        Ok(ResidualMap {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        ResidualMap {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Standardized luma plus what the backward pass needs.
struct Standardized {
    z: Vec<f64>,
    centered: Vec<f64>,
    sigma: f64,
    denom: f64,
}

fn standardize(y: &[f64], eps: f64) -> Standardized {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let centered: Vec<f64> = y.iter().map(|v| v - mean).collect();
    let sigma = (centered.iter().map(|c| c * c).sum::<f64>() / n).sqrt();
    let denom = sigma + eps;
    Standardized {
        z: centered.iter().map(|c| c / denom).collect(),
        centered,
        sigma,
        denom,
    }
}

/// Pulls a gradient on the standardized plane back onto the raw luma.
fn standardize_backward(s: &Standardized, gz: &[f64]) -> Vec<f64> {
    let n = gz.len() as f64;
    let g_mean = gz.iter().sum::<f64>() / n;
    let g_dot_c: f64 = gz.iter().zip(&s.centered).map(|(g, c)| g * c).sum();
    let sigma_term = if s.sigma > 0.0 {
        g_dot_c / (s.denom * s.denom * n * s.sigma)
    } else {
        0.0
    };
    gz.iter()
        .zip(&s.centered)
        .map(|(g, c)| (g - g_mean) / s.denom - sigma_term * c)
        .collect()
}

/// `(Y - mean(Y)) / (std(Y) + eps)` with the population standard deviation.
pub fn luma_normalize(img: &Image, eps: f64) -> LumaPlane {
    let y = extract_y(img);
    let s = standardize(y.data(), eps);
    LumaPlane::new(img.height(), img.width(), s.z).expect("same geometry as input")
}

pub fn residual_map(pred: &Image, hr: &Image, cfg: &LossConfig) -> Result<ResidualMap> {
    pred.same_dims(hr, "residual map operands")?;
    let a = luma_normalize(pred, cfg.sigma_epsilon);
    let b = luma_normalize(hr, cfg.sigma_epsilon);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| if cfg.use_abs { (x - y).abs() } else { x - y })
        .collect();
    ResidualMap::new(pred.height(), pred.width(), data)
}

/// `max(d(a, p) - d(a, n) + margin, 0)`.
pub fn triplet_term(
    anchor: &ResidualMap,
    positive: &ResidualMap,
    negative: &ResidualMap,
    margin: f64,
    distance: Distance,
) -> Result<f64> {
    if anchor.dims() != positive.dims() || anchor.dims() != negative.dims() {
        return Err(Error::Dimension("triplet operands differ in size".into()));
    }
    let v = distance.eval(&anchor.data, &positive.data) - distance.eval(&anchor.data, &negative.data)
        + margin;
    Ok(v.max(0.0))
}

/// Depth (1-based) of the deepest tree node shared by two leaf paths:
/// one more than the length of their common prefix.
pub fn common_ancestry_level(path_i: &[usize], path_j: &[usize]) -> Result<usize> {
    if path_i.len() != path_j.len() || path_i.is_empty() {
        return Err(Error::Contract(format!(
            "leaf paths must be non-empty and of equal length ({} vs {})",
            path_i.len(),
            path_j.len()
        )));
    }
    if path_i == path_j {
        return Err(Error::Contract(format!(
            "ancestry of a leaf with itself ({path_i:?}) is undefined"
        )));
    }
    let prefix = path_i
        .iter()
        .zip(path_j)
        .take_while(|(a, b)| a == b)
        .count();
    Ok(1 + prefix)
}

/// `theta^(level - 1)`.
pub fn attenuation(level: usize, theta: f64) -> f64 {
    debug_assert!(level >= 1);
    theta.powi(level as i32 - 1)
}

/// Components of the divergence loss for one prediction set.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct DivergenceLoss {
    pub total: f64,
    pub l2: f64,
    pub triplet: f64,
}

fn check_set(preds: &[Image], paths: &[Vec<usize>], hr: &Image) -> Result<()> {
    if preds.is_empty() || preds.len() != paths.len() {
        return Err(Error::Structure(format!(
            "{} predictions with {} leaf paths",
            preds.len(),
            paths.len()
        )));
    }
    for p in preds {
        p.same_dims(hr, "prediction vs HR")?;
    }
    Ok(())
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Evaluates the divergence loss and, when `want_grad`, its gradient with
/// respect to every prediction sample (same layout as `Image::data`).
pub(crate) fn divergence_loss_impl(
    preds: &[Image],
    paths: &[Vec<usize>],
    hr: &Image,
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(DivergenceLoss, Vec<Vec<f64>>)> {
    check_set(preds, paths, hr)?;
    let p = preds.len();
    let n_rgb = hr.data().len();

    let mut grads: Vec<Vec<f64>> = if want_grad {
        vec![vec![0.0; n_rgb]; p]
    } else {
        Vec::new()
    };

    let mut l2 = 0.0;
    for (i, pred) in preds.iter().enumerate() {
        l2 += mse(pred.data(), hr.data());
        if want_grad {
            let scale = 2.0 / n_rgb as f64;
            for ((g, a), b) in grads[i].iter_mut().zip(pred.data()).zip(hr.data()) {
                *g = scale * (a - b);
            }
        }
    }

    let mut triplet = 0.0;
    if p > 1 {
        let target = standardize(extract_y(hr).data(), cfg.sigma_epsilon);
        let normed: Vec<Standardized> = preds
            .iter()
            .map(|x| standardize(extract_y(x).data(), cfg.sigma_epsilon))
            .collect();
        let signed: Vec<Vec<f64>> = normed
            .iter()
            .map(|s| s.z.iter().zip(&target.z).map(|(a, b)| a - b).collect())
            .collect();
        let residuals: Vec<Vec<f64>> = signed
            .iter()
            .map(|u| {
                if cfg.use_abs {
                    u.iter().map(|v| v.abs()).collect()
                } else {
                    u.clone()
                }
            })
            .collect();
        let n_px = residuals[0].len();
        let norm = 1.0 / (p * (p - 1)) as f64;
        let zero = vec![0.0; n_px];
        let mut g_res = if want_grad {
            vec![vec![0.0; n_px]; p]
        } else {
            Vec::new()
        };
        for i in 0..p {
            for j in 0..p {
                if i == j {
                    continue;
                }
                let beta = attenuation(common_ancestry_level(&paths[i], &paths[j])?, cfg.theta);
                let (ri, rj) = (&residuals[i], &residuals[j]);
                let hinge = cfg.distance.eval(ri, &zero) - cfg.distance.eval(ri, rj) + cfg.margin;
                if hinge <= 0.0 {
                    continue;
                }
                triplet += beta * hinge;
                if want_grad {
                    let c = norm * beta * 2.0 / n_px as f64;
                    for k in 0..n_px {
                        g_res[i][k] += c * rj[k];
                        g_res[j][k] += c * (ri[k] - rj[k]);
                    }
                }
            }
        }
        triplet *= norm;

        if want_grad {
            for i in 0..p {
                let scaled: Vec<f64> = g_res[i]
                    .iter()
                    .zip(&signed[i])
                    .map(|(g, u)| {
                        let gu = if cfg.use_abs { g * sign(*u) } else { *g };
                        cfg.alpha * gu
                    })
                    .collect();
                let g_y = standardize_backward(&normed[i], &scaled);
                for (px, gy) in grads[i].chunks_exact_mut(3).zip(g_y) {
                    px[0] += KR * gy;
                    px[1] += KG * gy;
                    px[2] += KB * gy;
                }
            }
        }
    }

    Ok((
        DivergenceLoss {
            total: l2 + cfg.alpha * triplet,
            l2,
            triplet,
        },
        grads,
    ))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn divergence_triplet_loss(preds: &PredictionSet, hr: &Image, cfg: &LossConfig) -> Result<f64> {
    let (parts, _) =
        divergence_loss_impl(preds.predictions(), preds.leaf_paths(), hr, cfg, false)?;
    Ok(parts.triplet)
}

/// Sum over branches of the per-branch mean squared error.
pub fn divergence_l2(preds: &PredictionSet, hr: &Image) -> Result<f64> {
    let mut total = 0.0;
    for p in preds.predictions() {
        p.same_dims(hr, "prediction vs HR")?;
        total += mse(p.data(), hr.data());
    }
    Ok(total)
}

pub fn divergence_loss(preds: &PredictionSet, hr: &Image, cfg: &LossConfig) -> Result<DivergenceLoss> {
    divergence_loss_impl(preds.predictions(), preds.leaf_paths(), hr, cfg, false).map(|r| r.0)
}

/// Divergence loss together with its gradient per prediction sample.
pub fn divergence_loss_with_grad(
    preds: &PredictionSet,
    hr: &Image,
    cfg: &LossConfig,
) -> Result<(DivergenceLoss, Vec<Vec<f64>>)> {
    divergence_loss_impl(preds.predictions(), preds.leaf_paths(), hr, cfg, true)
}

pub fn convergence_loss(sr: &Image, hr: &Image) -> Result<f64> {
    sr.same_dims(hr, "SR vs HR")?;
    Ok(mse(sr.data(), hr.data()))
}

/// Convergence loss and its gradient with respect to `sr`.
pub fn convergence_loss_with_grad(sr: &Image, hr: &Image) -> Result<(f64, Vec<f64>)> {
    let loss = convergence_loss(sr, hr)?;
    let scale = 2.0 / sr.data().len() as f64;
    let grad = sr
        .data()
        .iter()
        .zip(hr.data())
        .map(|(a, b)| scale * (a - b))
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::leaf_paths;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    fn set(preds: Vec<Image>, depth: usize, branching: usize) -> PredictionSet {
        PredictionSet::new(preds, leaf_paths(depth, branching)).unwrap()
    }

    fn map(data: Vec<f64>) -> ResidualMap {
        let n = data.len();
        ResidualMap::new(1, n, data).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let c = Image::filled(3, 3, [0.4, 0.5, 0.6]);
        assert!(luma_normalize(&c, 1e-8).data().iter().all(|&v| v == 0.0));

        let two = Image::new(1, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let z = luma_normalize(&two, 1e-12);
        assert!((z.data()[0] + 1.0).abs() < 1e-9 && (z.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn normalize_is_affine_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = rand_image(&mut rng, 6, 6);
        let scaled = Image::new(6, 6, img.data().iter().map(|v| 0.5 * v + 0.2).collect()).unwrap();
        for (a, b) in luma_normalize(&img, 1e-8)
            .data()
            .iter()
            .zip(luma_normalize(&scaled, 1e-8).data())
        {
            assert!((a - b).abs() < 1e-5);
        }
        let z = luma_normalize(&img, 1e-8);
        assert!(z.mean().abs() < 1e-6);
        let var = z.data().iter().map(|v| v * v).sum::<f64>() / 36.0;
        assert!((var.sqrt() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn residual_map_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hr = rand_image(&mut rng, 4, 4);
        let cfg = LossConfig::default();
        assert!(residual_map(&hr, &hr, &cfg).unwrap().data().iter().all(|&v| v == 0.0));

        let pred = rand_image(&mut rng, 4, 4);
        let r = residual_map(&pred, &hr, &cfg).unwrap();
        assert!(r.data().iter().all(|&v| v >= 0.0));
        // compose-of-primitives oracle
        let (gp, gh) = (luma_normalize(&pred, 1e-8), luma_normalize(&hr, 1e-8));
        for (k, v) in r.data().iter().enumerate() {
            assert_eq!(*v, (gp.data()[k] - gh.data()[k]).abs());
        }
        let signed = residual_map(&pred, &hr, &LossConfig { use_abs: false, ..cfg }).unwrap();
        assert!(signed.data().iter().any(|&v| v < 0.0));

        let small = rand_image(&mut rng, 3, 4);
        assert!(matches!(residual_map(&small, &hr, &cfg), Err(Error::Dimension(_))));
    }

    #[test]
    fn triplet_examples() {
        let a = map(vec![0.3, -0.2]);
        assert_eq!(triplet_term(&a, &a, &a, 0.25, Distance::MeanSquared).unwrap(), 0.25);
        assert_eq!(triplet_term(&a, &a, &a, 0.0, Distance::MeanSquared).unwrap(), 0.0);

        // one-element maps with d(a,p)=0.02 and d(a,n)=0.05 under MSE
        let anchor = map(vec![0.0]);
        let p = map(vec![0.02f64.sqrt()]);
        let n = map(vec![0.05f64.sqrt()]);
        assert_eq!(triplet_term(&anchor, &p, &n, 0.01, Distance::MeanSquared).unwrap(), 0.0);
        let v = triplet_term(&anchor, &n, &p, 0.01, Distance::MeanSquared).unwrap();
        assert!((v - 0.04).abs() < 1e-12);

        assert!(triplet_term(&anchor, &a, &n, 0.0, Distance::MeanSquared).is_err());
    }

    #[test]
    fn ancestry_levels() {
        assert_eq!(common_ancestry_level(&[0, 0], &[0, 1]).unwrap(), 2);
        assert_eq!(common_ancestry_level(&[0, 0], &[1, 0]).unwrap(), 1);
        assert_eq!(common_ancestry_level(&[0], &[2]).unwrap(), 1);
        assert_eq!(common_ancestry_level(&[1, 1, 0], &[1, 1, 1]).unwrap(), 3);
        assert!(common_ancestry_level(&[0, 1], &[0, 1]).is_err());
        assert!(common_ancestry_level(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn attenuation_values() {
        for l in 1..5 {
            assert_eq!(attenuation(l, 1.0), 1.0);
        }
        assert_eq!(attenuation(1, 0.5), 1.0);
        assert_eq!(attenuation(2, 0.5), 0.5);
    }

    #[test]
    fn l2_and_convergence_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hr = Image::from_fn(4, 4, |_, _| [rng.gen_range(0.3..0.7); 3]);
        let shift = |d: f64| Image::new(4, 4, hr.data().iter().map(|v| v + d).collect()).unwrap();
        let s = set(vec![shift(0.1), shift(0.2)], 1, 2);
        assert!((divergence_l2(&s, &hr).unwrap() - 0.05).abs() < 1e-12);
        let same = set(vec![hr.clone(), hr.clone()], 1, 2);
        assert_eq!(divergence_l2(&same, &hr).unwrap(), 0.0);

        let dup = set(vec![shift(0.1), shift(0.2), shift(0.2), hr.clone()], 2, 2);
        let base = set(vec![shift(0.1), shift(0.2), hr.clone(), hr.clone()], 2, 2);
        let extra = convergence_loss(&shift(0.2), &hr).unwrap();
        assert!((divergence_l2(&dup, &hr).unwrap() - divergence_l2(&base, &hr).unwrap() - extra).abs() < 1e-12);

        assert_eq!(convergence_loss(&hr, &hr).unwrap(), 0.0);
        assert!((convergence_loss(&shift(0.1), &hr).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn divergence_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hr = rand_image(&mut rng, 8, 8);
        let cfg = LossConfig { margin: 0.0, ..LossConfig::default() };
        let same = set(vec![hr.clone(); 4], 2, 2);
        let parts = divergence_loss(&same, &hr, &cfg).unwrap();
        assert_eq!(parts, DivergenceLoss::default());

        let single = set(vec![rand_image(&mut rng, 8, 8)], 1, 1);
        assert_eq!(divergence_triplet_loss(&single, &hr, &LossConfig::default()).unwrap(), 0.0);

        let preds = set((0..4).map(|_| rand_image(&mut rng, 8, 8)).collect(), 2, 2);
        let a0 = divergence_loss(&preds, &hr, &LossConfig { alpha: 0.0, ..LossConfig::default() }).unwrap();
        assert_eq!(a0.total, a0.l2);
        let a2 = divergence_loss(&preds, &hr, &LossConfig { alpha: 2.0, ..LossConfig::default() }).unwrap();
        assert!((a2.total - a2.l2 - 2.0 * a2.triplet).abs() < 1e-12);
        assert!(a2.triplet > 0.0);
    }

    #[test]
    fn beta_is_symmetric() {
        let paths = leaf_paths(3, 3);
        for i in 0..paths.len() {
            for j in 0..paths.len() {
                if i != j {
                    assert_eq!(
                        common_ancestry_level(&paths[i], &paths[j]).unwrap(),
                        common_ancestry_level(&paths[j], &paths[i]).unwrap()
                    );
                }
            }
        }
    }

    proptest! {
        #[test]
        fn hinge_is_monotone_in_negative_distance(a in prop::collection::vec(-1.0f64..1.0, 6),
                                                  n in prop::collection::vec(-1.0f64..1.0, 6),
                                                  push in 0.0f64..1.0, margin in 0.0f64..0.5) {
            let anchor = map(a.clone());
            let zero = ResidualMap::zeros(1, 6);
            let near = map(n.clone());
            // move the negative further away from the anchor along (n - a)
            let far = map(n.iter().zip(&a).map(|(x, y)| x + push * (x - y)).collect());
            let t_near = triplet_term(&anchor, &zero, &near, margin, Distance::MeanSquared).unwrap();
            let t_far = triplet_term(&anchor, &zero, &far, margin, Distance::MeanSquared).unwrap();
            prop_assert!(t_far <= t_near + 1e-15);
        }

        #[test]
        fn triplet_part_is_luma_affine_invariant(seed in any::<u64>(), a in 0.2f64..3.0, b in -1.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hr = rand_image(&mut rng, 6, 6);
            let preds: Vec<Image> = (0..4).map(|_| rand_image(&mut rng, 6, 6)).collect();
            let tf = |x: &Image| Image::new(6, 6, x.data().iter().map(|v| a * v + b).collect()).unwrap();
            let cfg = LossConfig::default();
            let t1 = divergence_triplet_loss(&set(preds.clone(), 2, 2), &hr, &cfg).unwrap();
            let t2 = divergence_triplet_loss(&set(preds.iter().map(tf).collect(), 2, 2), &tf(&hr), &cfg).unwrap();
            prop_assert!((t1 - t2).abs() < 1e-5);
        }

        #[test]
        fn abs_residuals_never_negative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, h) = (rand_image(&mut rng, 5, 5), rand_image(&mut rng, 5, 5));
            let r = residual_map(&p, &h, &LossConfig::default()).unwrap();
            prop_assert!(r.data().iter().all(|&v| v >= 0.0));
        }
    }
}
