//! Acceptance suite: every criterion at its stated tolerance, one line each.
//! Runs as a plain binary (`cargo test --test acceptance`).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use divsr::data::{generate_bicubic_pairs, load_pairs, synth, ImagePair, Split};
use divsr::evaluation::{
    bicubic_psnr, branch_statistics, psnr_y, ssim_y, super_resolve, uniform_average, BranchStats,
};
use divsr::imaging::{save_png, Image};
use divsr::loss::{
    attenuation, common_ancestry_level, convergence_loss, divergence_l2, divergence_loss,
    divergence_loss_with_grad, divergence_triplet_loss, LossConfig,
};
use divsr::model::{leaf_paths, ConvergenceModel, DivergenceModel, ModelConfig, PredictionSet};
use divsr::training::{
    train_convergence, train_divergence, MemoryObserver, NullObserver, TrainConfig,
};

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------------------
// Independent reference formulas, written from the definitions with plain
// loops and no library helpers.

fn ref_luma(img: &Image) -> Vec<f64> {
    let (h, w) = img.dims();
    let mut y = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let [red, g, b] = img.pixel(r, c);
            y.push(0.299 * red + 0.587 * g + 0.114 * b);
        }
    }
    y
}

fn ref_normalize(y: &[f64], eps: f64) -> Vec<f64> {
    let n = y.len() as f64;
    let mut mu = 0.0;
    for v in y {
        mu += v;
    }
    mu /= n;
    let mut var = 0.0;
    for v in y {
        var += (v - mu) * (v - mu);
    }
    let sigma = (var / n).sqrt();
    y.iter().map(|v| (v - mu) / (sigma + eps)).collect()
}

fn ref_residual(pred: &Image, hr: &Image, cfg: &LossConfig) -> Vec<f64> {
    let a = ref_normalize(&ref_luma(pred), cfg.sigma_epsilon);
    let b = ref_normalize(&ref_luma(hr), cfg.sigma_epsilon);
    let mut out = Vec::new();
    for k in 0..a.len() {
        let d = a[k] - b[k];
        out.push(if cfg.use_abs { d.abs() } else { d });
    }
    out
}

fn ref_msd(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        s += (a[k] - b[k]) * (a[k] - b[k]);
    }
    s / a.len() as f64
}

fn ref_beta(pi: &[usize], pj: &[usize], theta: f64) -> f64 {
    let mut prefix = 0;
    while prefix < pi.len() && pi[prefix] == pj[prefix] {
        prefix += 1;
    }
    let level = 1 + prefix;
    let mut b = 1.0;
    for _ in 1..level {
        b *= theta;
    }
    b
}

/// Hinge arguments of every ordered pair, alongside the triplet loss.
fn ref_triplet(preds: &[Image], paths: &[Vec<usize>], hr: &Image, cfg: &LossConfig) -> (f64, Vec<f64>) {
    let p = preds.len();
    if p < 2 {
        return (0.0, Vec::new());
    }
    let res: Vec<Vec<f64>> = preds.iter().map(|x| ref_residual(x, hr, cfg)).collect();
    let zero = vec![0.0; res[0].len()];
    let mut total = 0.0;
    let mut args = Vec::new();
    for i in 0..p {
        for j in 0..p {
            if i == j {
                continue;
            }
            let arg = ref_msd(&res[i], &zero) - ref_msd(&res[i], &res[j]) + cfg.margin;
            args.push(arg);
            total += ref_beta(&paths[i], &paths[j], cfg.theta) * arg.max(0.0);
        }
    }
    (total / (p * (p - 1)) as f64, args)
}

fn ref_l2(preds: &[Image], hr: &Image) -> f64 {
    preds.iter().map(|p| ref_msd(p.data(), hr.data())).sum()
}

fn ref_psnr(a: &Image, b: &Image, border: usize) -> f64 {
    let (ya, yb) = (ref_luma(a), ref_luma(b));
    let (h, w) = a.dims();
    let mut se = 0.0;
    let mut n = 0.0;
    for r in border..h - border {
        for c in border..w - border {
            se += (ya[r * w + c] - yb[r * w + c]).powi(2);
            n += 1.0;
        }
    }
    10.0 * (1.0 / (se / n)).log10()
}

fn ref_ssim(a: &Image, b: &Image) -> f64 {
    let (ya, yb) = (ref_luma(a), ref_luma(b));
    let (h, w) = a.dims();
    let mut g = vec![0.0; 121];
    let mut gs = 0.0;
    for i in 0..11 {
        for j in 0..11 {
            let d2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
            g[i * 11 + j] = (-d2 / 4.5).exp();
            gs += g[i * 11 + j];
        }
    }
    let (c1, c2) = (0.0001, 0.0009);
    let mut total = 0.0;
    let mut count = 0.0;
    for r in 0..=h - 11 {
        for c in 0..=w - 11 {
            let mut m = [0.0; 5];
            for i in 0..11 {
                for j in 0..11 {
                    let k = g[i * 11 + j] / gs;
                    let (x, y) = (ya[(r + i) * w + c + j], yb[(r + i) * w + c + j]);
                    m[0] += k * x;
                    m[1] += k * y;
                    m[2] += k * x * x;
                    m[3] += k * y * y;
                    m[4] += k * x * y;
                }
            }
            let (vx, vy, cov) = (m[2] - m[0] * m[0], m[3] - m[1] * m[1], m[4] - m[0] * m[1]);
            total += (2.0 * m[0] * m[1] + c1) * (2.0 * cov + c2)
                / ((m[0] * m[0] + m[1] * m[1] + c1) * (vx + vy + c2));
            count += 1.0;
        }
    }
    total / count
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()])
}

/// A target plus `p` predictions scattered around it.
fn random_instance(rng: &mut ChaCha8Rng, p: usize) -> (Vec<Image>, Image) {
    let hr = random_image(rng, 8, 8);
    let preds = (0..p)
        .map(|_| {
            let amp = rng.gen_range(0.02..0.3);
            let data = hr
                .data()
                .iter()
                .map(|v| (v + amp * rng.gen_range(-1.0..1.0)).clamp(0.0, 1.0))
                .collect();
            Image::new(8, 8, data).unwrap()
        })
        .collect();
    (preds, hr)
}

fn depth_for(p: usize) -> usize {
    if p == 4 {
        2
    } else {
        1
    }
}

// ---------------------------------------------------------------------------
// Criteria with closed-form answers.

fn c1_loss_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for k in 0..50 {
        let p = if k % 2 == 0 { 2 } else { 4 };
        let (preds, hr) = random_instance(&mut rng, p);
        let paths = leaf_paths(depth_for(p), 2);
        let cfg = LossConfig {
            alpha: rng.gen_range(0.0..1.0),
            margin: rng.gen_range(0.0..0.5),
            theta: rng.gen_range(0.1..1.0),
            use_abs: k % 3 != 0,
            ..LossConfig::default()
        };
        let set = PredictionSet::new(preds.clone(), paths.clone()).unwrap();
        let trip = divergence_triplet_loss(&set, &hr, &cfg).unwrap();
        let l2 = divergence_l2(&set, &hr).unwrap();
        let conv = convergence_loss(&preds[0], &hr).unwrap();
        let errs = [
            (trip - ref_triplet(&preds, &paths, &hr, &cfg).0).abs(),
            (l2 - ref_l2(&preds, &hr)).abs(),
            (conv - ref_msd(preds[0].data(), hr.data())).abs(),
        ];
        for e in errs {
            worst = worst.max(e);
        }
    }
    ensure(worst <= 1e-10, format!("50 instances, max abs error {worst:.2e} (tol 1e-10)"))
}

fn c2_gradient_check() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let cfg = LossConfig {
        alpha: 0.1,
        margin: 0.1,
        theta: 0.5,
        ..LossConfig::default()
    };
    let h = 1e-4;
    let (mut worst, mut checked, mut excluded) = (0.0f64, 0usize, 0usize);
    for k in 0..10 {
        let p = if k % 2 == 0 { 2 } else { 4 };
        let (preds, hr) = random_instance(&mut rng, p);
        let paths = leaf_paths(depth_for(p), 2);
        let set = PredictionSet::new(preds.clone(), paths.clone()).unwrap();
        let (_, grads) = divergence_loss_with_grad(&set, &hr, &cfg).unwrap();
        let eval = |imgs: &[Image]| -> (f64, Vec<f64>, Vec<f64>) {
            let s = PredictionSet::new(imgs.to_vec(), paths.clone()).unwrap();
            let total = divergence_loss(&s, &hr, &cfg).unwrap().total;
            let (_, args) = ref_triplet(imgs, &paths, &hr, &cfg);
            let signed = LossConfig { use_abs: false, ..cfg };
            let res: Vec<f64> = imgs.iter().flat_map(|x| ref_residual(x, &hr, &signed)).collect();
            (total, args, res)
        };
        let (_, base_args, base_res) = eval(&preds);
        for i in 0..p {
            for idx in 0..preds[i].data().len() {
                let shifted = |d: f64| {
                    let mut v = preds.clone();
                    let mut data = v[i].data().to_vec();
                    data[idx] += d;
                    v[i] = Image::new(8, 8, data).unwrap();
                    v
                };
                let (fp, ap, rp) = eval(&shifted(h));
                let (fm, am, rm) = eval(&shifted(-h));
                // Skip coordinates whose stencil straddles a kink of the
                // hinge or of the absolute value.
                let near_kink = base_args
                    .iter()
                    .zip(ap.iter().zip(&am))
                    .any(|(b, (x, y))| b.abs() < 1e-6 || x.signum() != y.signum())
                    || base_res
                        .iter()
                        .zip(rp.iter().zip(&rm))
                        .any(|(b, (x, y))| b.abs() < 1e-6 || x.signum() != y.signum());
                if near_kink {
                    excluded += 1;
                    continue;
                }
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = grads[i][idx];
                let scale = analytic.abs().max(numeric.abs());
                if scale < 1e-9 {
                    continue;
                }
                worst = worst.max((analytic - numeric).abs() / scale);
                checked += 1;
            }
        }
    }
    ensure(
        worst < 1e-3 && checked > 1000,
        format!("{checked} coordinates, {excluded} near kinks excluded, max rel error {worst:.2e} (tol 1e-3)"),
    )
}

fn c3_beta_schedule() -> Check {
    let paths = leaf_paths(2, 2);
    let mut details = Vec::new();
    let mut ok = true;
    for i in 0..4 {
        for j in 0..4 {
            if i == j {
                continue;
            }
            let l = common_ancestry_level(&paths[i], &paths[j]).unwrap();
            let sibling = paths[i][0] == paths[j][0];
            let want = if sibling { 0.5 } else { 1.0 };
            ok &= attenuation(l, 0.5) == want && attenuation(l, 1.0) == 1.0;
        }
    }
    details.push("siblings 0.5, cousins 1.0, theta=1 all 1.0".to_string());
    ensure(ok, details.join(""))
}

fn c4_tree_shape() -> Check {
    let lr = Image::filled(8, 8, [0.5; 3]);
    for depth in 1..=4 {
        for branching in 1..=4 {
            let cfg = ModelConfig {
                tree_depth: depth,
                branching,
                residual_groups: 1,
                blocks_per_group: 1,
                channels: 4,
                scale: 2,
                reduction: 2,
                deep_residual: true,
            };
            let set = DivergenceModel::new(cfg, 1).unwrap().forward(&lr).unwrap();
            let want = branching.pow(depth as u32);
            if set.len() != want || set.dims() != (16, 16) {
                return Err(format!("L={depth} C={branching}: {} outputs of {:?}", set.len(), set.dims()));
            }
        }
    }
    Ok("16 configurations, C^L outputs at 2x size".into())
}

fn c9_schedule() -> Check {
    let hr = synth::scene(16, 16, 5);
    let lr = divsr::imaging::bicubic_resize(&hr, 8, 8).unwrap();
    let pairs = vec![ImagePair::new(lr, hr, 2, "one").unwrap()];
    let model = DivergenceModel::new(
        ModelConfig {
            tree_depth: 1,
            branching: 1,
            residual_groups: 1,
            blocks_per_group: 1,
            channels: 4,
            scale: 2,
            reduction: 2,
            deep_residual: true,
        },
        1,
    )
    .unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        lr_patch: 8,
        epochs: 4001,
        ..TrainConfig::default()
    };
    let mut obs = MemoryObserver::default();
    train_divergence(model, &pairs, &cfg, None, &mut obs).map_err(|e| e.to_string())?;
    let at = |epoch: u64| {
        obs.records
            .iter()
            .find(|r| r.epoch == epoch)
            .map(|r| r.learning_rate)
    };
    let got = [at(0), at(2000), at(4000)];
    ensure(
        got == [Some(1e-4), Some(5e-5), Some(2.5e-5)],
        format!("lr at epochs 0/2000/4000 = {got:?}"),
    )
}

fn c10_metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let (mut dp, mut ds) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let h = rng.gen_range(11..28);
        let w = rng.gen_range(11..28);
        let a = random_image(&mut rng, h, w);
        let b = random_image(&mut rng, h, w);
        let border = rng.gen_range(0..3);
        dp = dp.max((psnr_y(&a, &b, border).unwrap() - ref_psnr(&a, &b, border)).abs());
        ds = ds.max((ssim_y(&a, &b).unwrap() - ref_ssim(&a, &b)).abs());
    }
    let base = Image::filled(16, 16, [0.3; 3]);
    let off = Image::filled(16, 16, [0.4; 3]);
    let p20 = psnr_y(&off, &base, 0).unwrap();
    ensure(
        dp <= 1e-6 && ds <= 1e-6 && (p20 - 20.0).abs() <= 1e-9,
        format!("psnr err {dp:.1e}, ssim err {ds:.1e}, offset example {p20:.12} dB"),
    )
}

// ---------------------------------------------------------------------------
// Desk-scale training experiments.

struct Toy {
    _dir: tempfile::TempDir,
    train: Vec<ImagePair>,
    test: Vec<ImagePair>,
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        tree_depth: 2,
        branching: 2,
        residual_groups: 1,
        blocks_per_group: 2,
        channels: 16,
        scale: 2,
        reduction: 4,
        deep_residual: true,
    }
}

fn toy_train(steps: u64, initial_lr: f64, loss: LossConfig) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        lr_patch: 16,
        initial_lr,
        max_steps: Some(steps),
        seed: 3,
        loss,
        ..TrainConfig::default()
    }
}

fn write_scenes(dir: &Path, count: usize, size: usize, seed: u64) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..count {
        save_png(&synth::scene(size, size, seed + i as u64), dir.join(format!("s{i:02}.png"))).unwrap();
    }
}

/// Eight 96x96 training scenes and four 64x64 test scenes, degraded to
/// x2 pairs through the on-disk dataset path.
fn toy_data() -> Toy {
    let dir = tempfile::tempdir().unwrap();
    write_scenes(&dir.path().join("hr_train"), 8, 96, 0);
    write_scenes(&dir.path().join("hr_test"), 4, 64, 1000);
    let load = |hr: &str, split| {
        let m = generate_bicubic_pairs(dir.path().join(hr), 2, dir.path().join("pairs"), split).unwrap();
        let loaded = load_pairs(&m);
        assert!(loaded.rejected.is_empty());
        loaded.pairs
    };
    let train = load("hr_train", Split::Train);
    let test = load("hr_test", Split::Test);
    Toy {
        _dir: dir,
        train,
        test,
    }
}

fn stage1(toy: &Toy, cfg: &TrainConfig) -> (DivergenceModel, BranchStats) {
    let m = DivergenceModel::new(toy_model(), 1).unwrap();
    let (m, _) = train_divergence(m, &toy.train, cfg, None, &mut NullObserver).unwrap();
    let stats = branch_statistics(&m, &toy.test, 2).unwrap();
    (m, stats)
}

struct Shared {
    toy: Toy,
    abs_run: Option<(DivergenceModel, BranchStats)>,
    long_run: Option<(DivergenceModel, BranchStats)>,
}

const LONG_STEPS: u64 = 3000;
const LONG_LR: f64 = 2e-3;

impl Shared {
    fn abs_run(&mut self) -> &(DivergenceModel, BranchStats) {
        if self.abs_run.is_none() {
            let cfg = toy_train(500, 1e-3, LossConfig::default());
            self.abs_run = Some(stage1(&self.toy, &cfg));
        }
        self.abs_run.as_ref().unwrap()
    }

    fn long_run(&mut self) -> &(DivergenceModel, BranchStats) {
        if self.long_run.is_none() {
            let cfg = toy_train(LONG_STEPS, LONG_LR, LossConfig::default());
            self.long_run = Some(stage1(&self.toy, &cfg));
        }
        self.long_run.as_ref().unwrap()
    }
}

fn c5_divergence(shared: &mut Shared) -> Check {
    let with = shared.abs_run().1.mean_divergence;
    let cfg = toy_train(500, 1e-3, LossConfig { alpha: 0.0, ..LossConfig::default() });
    let without = stage1(&shared.toy, &cfg).1.mean_divergence;
    let ratio = with / without;
    ensure(
        ratio >= 1.5,
        format!("divergence alpha=0.1 {with:.3e} vs alpha=0 {without:.3e}, ratio {ratio:.2} (need >= 1.5)"),
    )
}

fn mean_psnr(images: impl Iterator<Item = (Image, Image)>) -> f64 {
    let v: Vec<f64> = images.map(|(a, b)| psnr_y(&a, &b, 2).unwrap()).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn c6_fusion(shared: &mut Shared) -> Check {
    let (div, stats) = shared.abs_run().clone();
    let head = ConvergenceModel::new(toy_model(), 2).unwrap();
    let cfg = toy_train(500, 1e-3, LossConfig::default());
    let mut obs = MemoryObserver::default();
    let (head, _) = train_convergence(&div, head, &shared.toy.train, &cfg, None, &mut obs)
        .map_err(|e| e.to_string())?;
    let fused = mean_psnr(shared.toy.test.iter().map(|p| {
        (super_resolve(&div, &head, p.lr()).unwrap().sr, p.hr().clone())
    }));
    let uniform = mean_psnr(shared.toy.test.iter().map(|p| {
        (uniform_average(&div.forward(p.lr()).unwrap()), p.hr().clone())
    }));
    ensure(
        fused >= uniform - 0.05 && fused >= stats.psnr_worst_branch,
        format!(
            "fused {fused:.3} dB, uniform {uniform:.3} dB, worst branch {:.3} dB",
            stats.psnr_worst_branch
        ),
    )
}

fn c7_and_c8(shared: &mut Shared) -> (Check, Check) {
    let div = shared.long_run().0.clone();
    let toy = &shared.toy;
    let before = div.params().digest();
    let head = ConvergenceModel::new(toy_model(), 2).unwrap();
    let cfg2 = toy_train(500, LONG_LR, LossConfig::default());
    let trained = train_convergence(&div, head, &toy.train, &cfg2, None, &mut NullObserver);
    let after = div.params().digest();
    let c8 = ensure(
        before == after && trained.is_ok(),
        format!("tree digest {}.. before and {}.. after stage 2", &before[..12], &after[..12]),
    );
    let c7 = match trained {
        Err(e) => Err(e.to_string()),
        Ok((head, _)) => {
            let model = mean_psnr(toy.test.iter().map(|p| {
                (super_resolve(&div, &head, p.lr()).unwrap().sr, p.hr().clone())
            }));
            let bicubic = bicubic_psnr(&toy.test, 2).unwrap();
            ensure(
                model >= bicubic + 0.2,
                format!("two-stage {model:.3} dB vs bicubic {bicubic:.3} dB (need +0.2)"),
            )
        }
    };
    (c7, c8)
}

fn c11_checkerboard(shared: &mut Shared) -> Check {
    let abs = shared.long_run().1.mean_checkerboard;
    let cfg = toy_train(LONG_STEPS, LONG_LR, LossConfig { use_abs: false, ..LossConfig::default() });
    let signed = stage1(&shared.toy, &cfg).1.mean_checkerboard;
    ensure(
        abs <= signed,
        format!("checkerboard energy use_abs=true {abs:.4e} vs use_abs=false {signed:.4e}"),
    )
}

// ---------------------------------------------------------------------------
// Reproducibility through the command-line pipeline.

fn divsr(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_divsr"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("divsr {args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(root: &Path, name: &str) -> Result<Vec<(PathBuf, Vec<u8>)>, String> {
    let r = root.to_str().unwrap();
    let config = root.join("toy.toml");
    let cfg = config.to_str().unwrap();
    let sets = [
        format!("run.name={name}"),
        format!("run.out_dir={r}/runs"),
        format!("data.train_manifest={r}/data/train.manifest"),
    ];
    let mut common = vec!["--config", cfg];
    for s in &sets {
        common.extend(["--set", s.as_str()]);
    }
    let mut stage1 = vec!["train", "--stage", "divergence"];
    stage1.extend(&common);
    divsr(&stage1)?;
    let div_ckpt = format!("{r}/runs/{name}_divergence/ckpt/final.ckpt");
    let mut stage2 = vec!["train", "--stage", "convergence", "--divergence-ckpt", &div_ckpt];
    stage2.extend(&common);
    divsr(&stage2)?;
    let mut files = Vec::new();
    for stage in ["divergence", "convergence"] {
        for f in ["metrics.csv", "ckpt/final.ckpt"] {
            let p = root.join(format!("runs/{name}_{stage}/{f}"));
            let bytes = std::fs::read(&p).map_err(|e| format!("{}: {e}", p.display()))?;
            files.push((PathBuf::from(format!("{stage}/{f}")), bytes));
        }
    }
    Ok(files)
}

fn c12_reproducibility() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_scenes(&root.join("hr"), 4, 64, 50);
    divsr(&[
        "prepare-data",
        "--hr-dir",
        root.join("hr").to_str().unwrap(),
        "--scale",
        "2",
        "--out",
        root.join("data").to_str().unwrap(),
    ])?;
    std::fs::write(
        root.join("toy.toml"),
        "[model]\ntree_depth = 2\nbranching = 2\nresidual_groups = 1\nblocks_per_group = 1\n\
         channels = 8\nscale = 2\nreduction = 4\n\n[train]\nbatch_size = 2\nlr_patch = 12\n\
         initial_lr = 1e-3\nhalve_every = 4\nepochs = 6\n\n[run]\nseed = 7\n",
    )
    .unwrap();
    let a = pipeline(root, "a")?;
    let b = pipeline(root, "b")?;
    let rows = String::from_utf8_lossy(&a[0].1).lines().count() - 1;
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        if x != y {
            return Err(format!("{} differs between runs", name.display()));
        }
    }
    ensure(rows == 24, format!("metrics and final checkpoints byte-identical for both stages ({rows} steps each)"))
}

// ---------------------------------------------------------------------------

fn main() {
    let started = Instant::now();
    let mut results: Vec<(&str, &str, Check, f64)> = Vec::new();
    let mut run = |id: &'static str, name: &'static str, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("[{tag}] {id} {name}: {detail} ({secs:.1}s)");
        results.push((id, name, outcome, secs));
    };

    run("C1", "loss oracle equivalence", &mut c1_loss_oracles);
    run("C2", "gradient check", &mut c2_gradient_check);
    run("C3", "attenuation schedule", &mut c3_beta_schedule);
    run("C4", "tree shape law", &mut c4_tree_shape);
    run("C9", "learning-rate schedule", &mut c9_schedule);
    run("C10", "metric oracles", &mut c10_metric_oracles);

    let mut shared = Shared {
        toy: toy_data(),
        abs_run: None,
        long_run: None,
    };
    run("C5", "divergence emergence", &mut || c5_divergence(&mut shared));
    run("C6", "fusion benefit", &mut || c6_fusion(&mut shared));
    let (c7, c8) = c7_and_c8(&mut shared);
    run("C7", "end-to-end beats bicubic", &mut || c7.clone());
    run("C8", "freeze contract", &mut || c8.clone());
    run("C11", "anti-checkerboard direction", &mut || c11_checkerboard(&mut shared));
    run("C12", "reproducibility", &mut c12_reproducibility);

    let failed: Vec<&str> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "{} passed, {} failed in {:.0}s",
        results.len() - failed.len(),
        failed.len(),
        started.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
