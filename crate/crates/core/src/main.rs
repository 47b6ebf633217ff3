use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use divsr::checkpoint::{Checkpoint, ModelKind};
use divsr::config::RunConfig;
use divsr::data::{generate_bicubic_pairs, load_manifest, load_pairs, synth, ImagePair, Split};
use divsr::evaluation::{
    branch_statistics, checkerboard_energy, export_weight_heatmaps, mean_offdiagonal,
    pairwise_divergence, super_resolve, EvalReport,
};
use divsr::imaging::{load_png, save_png, Image};
use divsr::loss::{residual_map, LossConfig};
use divsr::model::{path_label, ConvergenceModel, DivergenceModel, ModelConfig};
use divsr::training::{
    train_convergence, train_divergence, CheckpointReason, NullObserver, Stage, StepRecord,
    TrainObserver, TrainState,
};
use divsr::{Error, Result};

#[derive(Parser)]
#[command(name = "divsr", version, about = "Divergent-branch super-resolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build LR/HR pairs from a directory of HR PNGs by bicubic downsampling.
    PrepareData {
        #[arg(long)]
        hr_dir: PathBuf,
        #[arg(long)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
    },
    /// Render procedural HR scenes as PNGs (toy corpora for smoke runs).
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 96)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one stage.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Trained tree to freeze; required for the convergence stage.
        #[arg(long)]
        divergence_ckpt: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run of this stage.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Run directory name under `run.out_dir` (default `<run.name>_<stage>`).
        #[arg(long)]
        run_name: Option<String>,
    },
    /// Super-resolve one PNG.
    Infer {
        #[arg(long)]
        ckpt_div: PathBuf,
        #[arg(long)]
        ckpt_conv: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write every branch output to `<out stem>_branches/`.
        #[arg(long)]
        dump_branches: bool,
        /// Also write weight heatmaps to `<out stem>_weights/`.
        #[arg(long)]
        dump_weights: bool,
    },
    /// Score a test manifest on the Y channel.
    Eval {
        #[arg(long)]
        ckpt_div: Option<PathBuf>,
        #[arg(long)]
        ckpt_conv: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Pixels cropped per side (default: the manifest scale).
        #[arg(long)]
        border: Option<usize>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score HR against itself instead of running a model.
        #[arg(long, hide = true)]
        identity: bool,
    },
    /// Branch diagnostics and small retraining sweeps.
    Diagnose {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Trained tree to inspect (not needed for sweeps).
        #[arg(long)]
        ckpt_div: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// `alpha=0,0.1`, `use_abs=true,false` or `grid` (tree depth and
        /// branching over 1..4).
        #[arg(long)]
        sweep: Option<String>,
        /// Optimizer steps per sweep run (overrides `train.max_steps`).
        #[arg(long)]
        steps: Option<u64>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML file with dotted keys such as `model.tree_depth`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Divergence,
    Convergence,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Divergence => Stage::Divergence,
            StageArg::Convergence => Stage::Convergence,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::PrepareData {
            hr_dir,
            scale,
            out,
            split,
        } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let m = generate_bicubic_pairs(&hr_dir, scale, &out, split)?;
            for s in &m.skipped {
                eprintln!("skipped {}: {}", s.identifier, s.reason);
            }
            println!(
                "{} pairs written to {}",
                m.len(),
                out.join(format!("{split}.manifest")).display()
            );
            Ok(())
        }
        Command::SynthCorpus {
            out,
            count,
            size,
            seed,
        } => {
            fs::create_dir_all(&out).map_err(io_err(&out))?;
            for i in 0..count {
                let img = synth::scene(size, size, seed.wrapping_add(i as u64));
                save_png(&img, out.join(format!("scene_{i:04}.png")))?;
            }
            println!("{count} scenes written to {}", out.display());
            Ok(())
        }
        Command::Train {
            cfg,
            stage,
            divergence_ckpt,
            resume,
            run_name,
        } => cmd_train(
            cfg.resolve()?,
            stage.into(),
            divergence_ckpt,
            resume,
            run_name,
        ),
        Command::Infer {
            ckpt_div,
            ckpt_conv,
            input,
            out,
            dump_branches,
            dump_weights,
        } => cmd_infer(&ckpt_div, &ckpt_conv, &input, &out, dump_branches, dump_weights),
        Command::Eval {
            ckpt_div,
            ckpt_conv,
            manifest,
            border,
            out,
            identity,
        } => cmd_eval(ckpt_div, ckpt_conv, &manifest, border, out, identity),
        Command::Diagnose {
            cfg,
            ckpt_div,
            manifest,
            out,
            sweep,
            steps,
        } => cmd_diagnose(cfg.resolve()?, ckpt_div, &manifest, &out, sweep, steps),
    }
}

fn load_training_pairs(cfg: &RunConfig) -> Result<Vec<ImagePair>> {
    let path = cfg
        .train_manifest
        .as_ref()
        .ok_or_else(|| usage("data.train_manifest is not set"))?;
    let manifest = load_manifest(path)?;
    if manifest.scale != cfg.model.scale {
        return Err(usage(format!(
            "{} has scale {}, model.scale is {}",
            path.display(),
            manifest.scale,
            cfg.model.scale
        )));
    }
    let loaded = load_pairs(&manifest);
    for (id, why) in &loaded.rejected {
        eprintln!("rejected {id}: {why}");
    }
    if loaded.pairs.is_empty() {
        return Err(Error::Data(format!("{}: no usable pairs", path.display())));
    }
    Ok(loaded.pairs)
}

/// Streams metrics rows and writes checkpoints into the run directory.
struct RunObserver {
    csv: BufWriter<File>,
    ckpt_dir: PathBuf,
    log_every: u64,
}

impl RunObserver {
    /// Opens `metrics.csv`, keeping only rows up to `keep_through` on resume.
    fn open(dir: &Path, stage: Stage, keep_through: Option<u64>) -> Result<Self> {
        let path = dir.join("metrics.csv");
        let header = StepRecord::csv_header(stage);
        let mut kept = vec![header.to_string()];
        if let Some(last) = keep_through {
            if let Ok(f) = File::open(&path) {
                for line in BufReader::new(f).lines().skip(1) {
                    let line = line.map_err(io_err(&path))?;
                    let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                    if step.is_some_and(|s| s <= last) {
                        kept.push(line);
                    }
                }
            }
        }
        let mut csv = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
        for line in kept {
            writeln!(csv, "{line}").map_err(io_err(&path))?;
        }
        Ok(RunObserver {
            csv,
            ckpt_dir: dir.join("ckpt"),
            log_every: 100,
        })
    }
}

impl TrainObserver for RunObserver {
    fn on_step(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(self.csv, "{}", r.csv_row()).map_err(io_err(&self.ckpt_dir))?;
        if r.step.is_multiple_of(self.log_every) {
            eprintln!(
                "step {} epoch {} lr {:.3e} loss {:.6e}",
                r.step,
                r.epoch,
                r.learning_rate,
                r.loss.total()
            );
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, ck: &Checkpoint, reason: CheckpointReason) -> Result<()> {
        self.csv.flush().map_err(io_err(&self.ckpt_dir))?;
        let name = match reason {
            CheckpointReason::Periodic { epoch } => format!("epoch_{epoch:06}.ckpt"),
            CheckpointReason::Final => "final.ckpt".into(),
            CheckpointReason::Diagnostic => "diagnostic.ckpt".into(),
        };
        let path = self.ckpt_dir.join(name);
        ck.save(&path)?;
        if reason != CheckpointReason::Final {
            eprintln!("checkpoint {}", path.display());
        }
        Ok(())
    }
}

fn cmd_train(
    cfg: RunConfig,
    stage: Stage,
    divergence_ckpt: Option<PathBuf>,
    resume: Option<PathBuf>,
    run_name: Option<String>,
) -> Result<()> {
    if stage == Stage::Convergence && divergence_ckpt.is_none() {
        return Err(usage("--stage convergence requires --divergence-ckpt"));
    }
    let name = run_name.unwrap_or_else(|| format!("{}_{}", cfg.name, stage.as_str()));
    let dir = cfg.out_dir.join(&name);
    fs::create_dir_all(dir.join("ckpt")).map_err(io_err(&dir))?;
    fs::create_dir_all(dir.join("images")).map_err(io_err(&dir))?;
    let mut echo = cfg.echo();
    echo.push_str(&format!("# stage: {}\n", stage.as_str()));
    if let Some(p) = &divergence_ckpt {
        echo.push_str(&format!("# divergence checkpoint: {}\n", p.display()));
    }
    let echo_path = dir.join("config.echo");
    fs::write(&echo_path, echo).map_err(io_err(&echo_path))?;

    let pairs = load_training_pairs(&cfg)?;
    let resumed = resume
        .as_ref()
        .map(|p| Checkpoint::load_expecting(p, &cfg.model))
        .transpose()?;
    let state: Option<TrainState> = match &resumed {
        Some(ck) => Some(ck.train.clone().ok_or_else(|| {
            Error::Structure("resume checkpoint holds no training state".into())
        })?),
        None => None,
    };
    let mut obs = RunObserver::open(&dir, stage, state.as_ref().map(|s| s.step))?;

    let final_path = dir.join("ckpt").join("final.ckpt");
    let summary = match stage {
        Stage::Divergence => {
            let model = match &resumed {
                Some(ck) => ck.divergence_model()?,
                None => DivergenceModel::new(cfg.model, cfg.seed)?,
            };
            let (model, st) = train_divergence(model, &pairs, &cfg.train, state, &mut obs)?;
            save_branch_previews(&model, &pairs[0], &dir.join("images"))?;
            st
        }
        Stage::Convergence => {
            let div_path = divergence_ckpt.expect("checked above");
            let div = Checkpoint::load_expecting(&div_path, &cfg.model)?.divergence_model()?;
            let head = match &resumed {
                Some(ck) => {
                    ck.check_pairing(&div)?;
                    ck.convergence_model()?
                }
                None => ConvergenceModel::new(cfg.model, cfg.seed.wrapping_add(1))?,
            };
            let (head, st) = train_convergence(&div, head, &pairs, &cfg.train, state, &mut obs)?;
            let r = super_resolve(&div, &head, pairs[0].lr())?;
            save_png(&r.sr, dir.join("images").join("sr_preview.png"))?;
            st
        }
    };
    println!(
        "{} steps, {} epochs; checkpoint {}",
        summary.step,
        summary.epoch,
        final_path.display()
    );
    Ok(())
}

fn save_branch_previews(model: &DivergenceModel, pair: &ImagePair, dir: &Path) -> Result<()> {
    let set = model.forward(pair.lr())?;
    for (img, path) in set.predictions().iter().zip(set.leaf_paths()) {
        save_png(img, dir.join(format!("branch_{}.png", path_label(path))))?;
    }
    Ok(())
}

fn load_pair_of_models(div: &Path, conv: &Path) -> Result<(DivergenceModel, ConvergenceModel)> {
    let d = Checkpoint::load(div)?;
    let c = Checkpoint::load(conv)?;
    if d.kind != ModelKind::Divergence || c.kind != ModelKind::Convergence {
        return Err(Error::Structure(
            "expected a divergence checkpoint and a convergence checkpoint".into(),
        ));
    }
    let (dh, ch) = (d.config.hash(), c.config.hash());
    if dh != ch {
        return Err(Error::ConfigHash {
            expected: dh,
            found: ch,
        });
    }
    let dm = d.divergence_model()?;
    c.check_pairing(&dm)?;
    Ok((dm, c.convergence_model()?))
}

fn sibling_dir(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    out.with_file_name(format!("{stem}_{suffix}"))
}

fn cmd_infer(
    ckpt_div: &Path,
    ckpt_conv: &Path,
    input: &Path,
    out: &Path,
    dump_branches: bool,
    dump_weights: bool,
) -> Result<()> {
    let (div, head) = load_pair_of_models(ckpt_div, ckpt_conv)?;
    let lr = load_png(input)?;
    let r = super_resolve(&div, &head, &lr)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    save_png(&r.sr, out)?;
    if dump_branches {
        let dir = sibling_dir(out, "branches");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        for (img, path) in r.predictions.predictions().iter().zip(r.predictions.leaf_paths()) {
            save_png(img, dir.join(format!("branch_{}.png", path_label(path))))?;
        }
    }
    if dump_weights {
        export_weight_heatmaps(&r.weights, sibling_dir(out, "weights"))?;
    }
    let (h, w) = r.sr.dims();
    println!("{}x{} -> {}", h, w, out.display());
    Ok(())
}

fn cmd_eval(
    ckpt_div: Option<PathBuf>,
    ckpt_conv: Option<PathBuf>,
    manifest_path: &Path,
    border: Option<usize>,
    out: Option<PathBuf>,
    identity: bool,
) -> Result<()> {
    let manifest = load_manifest(manifest_path)?;
    if manifest.is_empty() {
        return Err(Error::Data(format!("{}: split is empty", manifest_path.display())));
    }
    let models = if identity {
        None
    } else {
        let (d, c) = match (ckpt_div, ckpt_conv) {
            (Some(d), Some(c)) => (d, c),
            _ => return Err(usage("eval needs --ckpt-div and --ckpt-conv")),
        };
        let (d, c) = load_pair_of_models(&d, &c)?;
        if d.config().scale != manifest.scale {
            return Err(usage(format!(
                "model scale {} does not match manifest scale {}",
                d.config().scale,
                manifest.scale
            )));
        }
        Some((d, c))
    };
    let border = border.unwrap_or(manifest.scale);
    let mut report = EvalReport::new(border, manifest.scale);
    let loaded = load_pairs(&manifest);
    report.skipped.extend(loaded.rejected);
    let mut divergence = Vec::new();
    for pair in &loaded.pairs {
        let sr = match &models {
            None => pair.hr().clone(),
            Some((d, c)) => match super_resolve(d, c, pair.lr()) {
                Ok(r) => {
                    divergence.push(mean_offdiagonal(&pairwise_divergence(&r.predictions)));
                    r.sr
                }
                Err(e) => {
                    report.skipped.push((pair.identifier().to_string(), e.to_string()));
                    continue;
                }
            },
        };
        report.score(pair.identifier(), &sr, pair.hr());
    }
    for (id, why) in &report.skipped {
        eprintln!("skipped {id}: {why}");
    }
    match &out {
        Some(p) => report.write_csv(p)?,
        None => print!("{}", report.to_csv()),
    }
    eprintln!("border={} scale={}", report.border, report.scale);
    if !divergence.is_empty() {
        let m = divergence.iter().sum::<f64>() / divergence.len() as f64;
        eprintln!("mean_branch_divergence={m:e}");
    }
    if report.records.is_empty() {
        return Err(Error::Data("no image could be scored".into()));
    }
    Ok(())
}

enum Sweep {
    Alpha(Vec<f64>),
    UseAbs(Vec<bool>),
    Grid,
}

fn parse_sweep(spec: &str) -> Result<Sweep> {
    if spec == "grid" {
        return Ok(Sweep::Grid);
    }
    let (key, vals) = spec
        .split_once('=')
        .ok_or_else(|| usage(format!("bad --sweep {spec:?}")))?;
    let items: Vec<&str> = vals.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if items.is_empty() {
        return Err(usage(format!("--sweep {key} lists no values")));
    }
    match key {
        "alpha" => items
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| usage(format!("bad alpha {s:?}"))))
            .collect::<Result<_>>()
            .map(Sweep::Alpha),
        "use_abs" => items
            .iter()
            .map(|s| s.parse::<bool>().map_err(|_| usage(format!("bad use_abs {s:?}"))))
            .collect::<Result<_>>()
            .map(Sweep::UseAbs),
        _ => Err(usage(format!("cannot sweep {key:?}"))),
    }
}

fn cmd_diagnose(
    mut cfg: RunConfig,
    ckpt_div: Option<PathBuf>,
    manifest_path: &Path,
    out: &Path,
    sweep: Option<String>,
    steps: Option<u64>,
) -> Result<()> {
    let sweep = sweep.as_deref().map(parse_sweep).transpose()?;
    let manifest = load_manifest(manifest_path)?;
    let loaded = load_pairs(&manifest);
    if loaded.pairs.is_empty() {
        return Err(Error::Data(format!("{}: no usable pairs", manifest_path.display())));
    }
    fs::create_dir_all(out.join("images")).map_err(io_err(out))?;
    let border = cfg.eval_border.unwrap_or(manifest.scale);

    let Some(sweep) = sweep else {
        let path = ckpt_div.ok_or_else(|| usage("diagnose needs --ckpt-div or --sweep"))?;
        let model = Checkpoint::load(&path)?.divergence_model()?;
        return inspect(&model, &loaded.pairs, &cfg.train.loss, out);
    };

    if let Some(s) = steps {
        cfg.train.max_steps = Some(s);
    }
    if cfg.model.scale != manifest.scale {
        return Err(usage(format!(
            "model.scale {} does not match manifest scale {}",
            cfg.model.scale, manifest.scale
        )));
    }
    let train_pairs = load_training_pairs(&cfg)?;
    let mut runs: Vec<(String, ModelConfig, LossConfig)> = Vec::new();
    let base_loss = cfg.train.loss;
    match sweep {
        Sweep::Alpha(v) => {
            for a in v {
                runs.push((format!("alpha={a}"), cfg.model, LossConfig { alpha: a, ..base_loss }));
            }
        }
        Sweep::UseAbs(v) => {
            for b in v {
                runs.push((format!("use_abs={b}"), cfg.model, LossConfig { use_abs: b, ..base_loss }));
            }
        }
        Sweep::Grid => {
            for depth in 1..=4 {
                for branching in 1..=4 {
                    let m = ModelConfig {
                        tree_depth: depth,
                        branching,
                        ..cfg.model
                    };
                    runs.push((format!("L={depth},C={branching}"), m, base_loss));
                }
            }
        }
    }

    let csv_path = out.join("sweep.csv");
    let mut csv = BufWriter::new(File::create(&csv_path).map_err(io_err(&csv_path))?);
    writeln!(
        csv,
        "setting,tree_depth,branching,alpha,use_abs,steps,mean_divergence,mean_checkerboard,psnr_uniform,psnr_worst_branch,psnr_best_branch"
    )
    .map_err(io_err(&csv_path))?;
    for (label, model_cfg, loss) in runs {
        let mut train = cfg.train.clone();
        train.loss = loss;
        let model = DivergenceModel::new(model_cfg, cfg.seed)?;
        let (model, st) = train_divergence(model, &train_pairs, &train, None, &mut NullObserver)?;
        let s = branch_statistics(&model, &loaded.pairs, border)?;
        writeln!(
            csv,
            "\"{label}\",{},{},{},{},{},{:e},{:e},{},{},{}",
            model_cfg.tree_depth,
            model_cfg.branching,
            loss.alpha,
            loss.use_abs,
            st.step,
            s.mean_divergence,
            s.mean_checkerboard,
            s.psnr_uniform,
            s.psnr_worst_branch,
            s.psnr_best_branch
        )
        .map_err(io_err(&csv_path))?;
        csv.flush().map_err(io_err(&csv_path))?;
        eprintln!("{label}: divergence {:e}, checkerboard {:e}", s.mean_divergence, s.mean_checkerboard);
    }
    println!("{}", csv_path.display());
    Ok(())
}

/// Per-image divergence matrices, checkerboard energies, and residual and
/// branch images for a trained tree.
fn inspect(model: &DivergenceModel, pairs: &[ImagePair], loss: &LossConfig, out: &Path) -> Result<()> {
    let labels: Vec<String> = model.leaf_paths().iter().map(|p| path_label(p)).collect();
    let div_path = out.join("divergence.csv");
    let cb_path = out.join("checkerboard.csv");
    let mut div_csv = BufWriter::new(File::create(&div_path).map_err(io_err(&div_path))?);
    let mut cb_csv = BufWriter::new(File::create(&cb_path).map_err(io_err(&cb_path))?);
    writeln!(div_csv, "identifier,branch,{}", labels.join(",")).map_err(io_err(&div_path))?;
    writeln!(cb_csv, "identifier,branch,checkerboard_energy").map_err(io_err(&cb_path))?;
    for pair in pairs {
        let set = model.forward(pair.lr())?;
        let m = pairwise_divergence(&set);
        let id = pair.identifier();
        for (i, row) in m.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(div_csv, "{id},{},{}", labels[i], cells.join(",")).map_err(io_err(&div_path))?;
        }
        let img_dir = out.join("images").join(id);
        fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
        for (k, img) in set.predictions().iter().enumerate() {
            writeln!(cb_csv, "{id},{},{:e}", labels[k], checkerboard_energy(img)?)
                .map_err(io_err(&cb_path))?;
            save_png(img, img_dir.join(format!("branch_{}.png", labels[k])))?;
            let r = residual_map(img, pair.hr(), loss)?;
            save_png(&residual_image(r.data(), r.dims())?, img_dir.join(format!("residual_{}.png", labels[k])))?;
        }
    }
    div_csv.flush().map_err(io_err(&div_path))?;
    cb_csv.flush().map_err(io_err(&cb_path))?;
    println!("{}", out.display());
    Ok(())
}

/// Gray rendering of a residual map scaled by its largest magnitude; signed
/// maps are centred on mid-gray.
fn residual_image(data: &[f64], (h, w): (usize, usize)) -> Result<Image> {
    let peak = data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let signed = data.iter().any(|&v| v < 0.0);
    Ok(Image::from_fn(h, w, |r, c| {
        let v = data[r * w + c] / peak;
        let g = if signed { 0.5 + 0.5 * v } else { v };
        [g; 3]
    }))
}
