//! The `crl` command line: dataset synthesis, training, inference,
//! evaluation and verification.
//!
//! Exit codes: 0 success, 1 verification failure, 2 usage or format error,
//! 3 numerical divergence.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use crl_core::certify::{self, DEFAULT_EPS, DEFAULT_TOLERANCE, OPERATORS};
use crl_core::dataset::{load_dataset, read_disparity, write_manifest, write_sample, DispFormat};
use crl_core::formats::{read_image, write_disparity_pfm, write_kitti_disparity};
use crl_core::metrics::{error_sums, make_report, parse_report_csv, ErrorSums, SampleEval, ThreePixelMode, AGGREGATE_ID};
use crl_core::nn::{checkpoint, CrlModel};
use crl_core::sgm::{run_sgm, SgmParams};
use crl_core::synth::{generate_stereogram, DeskPreset, SceneSpec};
use crl_core::tensor::GradCheckReport;
use crl_core::training::{
    run_phase, screen_sample, split_dataset, validate, DatasetRegistry, StepRecord, TrainConfig,
    TrainLog, SCREEN_FRACTION, SCREEN_THRESHOLD,
};
use crl_core::{DisparityMap, Error, Result, StereoSample, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFICATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Verification(_) => EXIT_VERIFICATION,
        Error::Diverged(_) => EXIT_DIVERGED,
        _ => EXIT_USAGE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "crl", about = "Cascade residual stereo matching at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Pfm,
    Png,
}

impl From<FormatArg> for DispFormat {
    fn from(f: FormatArg) -> DispFormat {
        match f {
            FormatArg::Pfm => DispFormat::Pfm,
            FormatArg::Png => DispFormat::Png,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Method {
    Crl,
    Sgm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Plain,
    Kitti,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic stereo dataset.
    Synth {
        /// Named generator: desk, desk-noisy or tiny.
        #[arg(long, conflicts_with = "spec", required_unless_present = "spec")]
        preset: Option<String>,
        /// Scene file; sample i uses texture seed + i.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "pfm")]
        format: FormatArg,
    },
    /// Run a training schedule from a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Estimate disparity for one pair or a whole dataset.
    Infer {
        #[arg(long, value_enum, default_value = "crl")]
        method: Method,
        #[arg(long, required_if_eq("method", "crl"))]
        ckpt: Option<PathBuf>,
        #[arg(long, requires = "right", required_unless_present = "dataset")]
        left: Option<PathBuf>,
        #[arg(long)]
        right: Option<PathBuf>,
        /// Dataset root; writes `<out>/<id>.<ext>` and `<out>/timing.csv`.
        #[arg(long, conflicts_with_all = ["left", "right", "dump_residual"])]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Which cascade output to write.
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Full-resolution second-stage residual, written as PFM.
        #[arg(long)]
        dump_residual: Option<PathBuf>,
        /// Output format; defaults to the extension of `--out`, or PFM for
        /// dataset runs.
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
        /// SGM disparity range.
        #[arg(long, default_value_t = 64)]
        max_disp: usize,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value = "plain")]
        mode: ModeArg,
        /// Method name in the report.
        #[arg(long, default_value = "pred")]
        method: String,
        /// Write the CSV here and print a table instead.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Certify operator gradients against central differences.
    Gradcheck {
        #[arg(long, value_delimiter = ',')]
        ops: Vec<String>,
        /// Single seed; seeds 0 to 4 when omitted.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tol: f64,
    },
    /// List samples whose ground truth fails the large-disparity screen.
    Screen {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = SCREEN_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = SCREEN_FRACTION)]
        fraction: f64,
    },
    /// Merge evaluation CSVs into one summary.
    Report {
        #[arg(long = "csv", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth { preset, spec, count, seed, out, format } => {
            cmd_synth(preset.as_deref(), spec.as_deref(), count, seed, &out, format.into())
        }
        Command::Train { config } => cmd_train(&config),
        Command::Infer { method, ckpt, left, right, dataset, out, stage, dump_residual, format, max_disp } => {
            let engine = Engine::new(method, ckpt.as_deref(), stage, max_disp)?;
            match dataset {
                Some(root) => infer_dataset(&engine, &root, &out, format.map_or(DispFormat::Pfm, Into::into)),
                None => infer_pair(
                    &engine,
                    left.as_deref().expect("clap requires --left"),
                    right.as_deref().expect("clap requires --right"),
                    &out,
                    format.map(Into::into),
                    dump_residual.as_deref(),
                ),
            }
        }
        Command::Eval { pred, gt, mode, method, out } => {
            let mode = match mode {
                ModeArg::Plain => ThreePixelMode::Plain,
                ModeArg::Kitti => ThreePixelMode::Kitti,
            };
            cmd_eval(&pred, &gt, mode, &method, out.as_deref())
        }
        Command::Gradcheck { ops, seed, eps, tol } => cmd_gradcheck(&ops, seed, eps, tol),
        Command::Screen { gt, threshold, fraction } => cmd_screen(&gt, threshold, fraction),
        Command::Report { inputs, out } => cmd_report(&inputs, out.as_deref()),
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn cmd_synth(
    preset: Option<&str>,
    spec: Option<&Path>,
    count: usize,
    seed: u64,
    out: &Path,
    format: DispFormat,
) -> Result<()> {
    println!("# synth seed={seed} count={count}");
    let samples = match (preset, spec) {
        (Some(name), _) => DeskPreset::by_name(name)
            .ok_or_else(|| Error::Usage(format!("unknown preset {name:?}; known: desk, desk-noisy, tiny")))?
            .generate(count, seed)?,
        (None, Some(path)) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let scene = SceneSpec::parse(&text)?;
            (0..count)
                .map(|i| {
                    let s = SceneSpec { texture_seed: scene.texture_seed.wrapping_add(i as u64), ..scene.clone() };
                    let mut sample = generate_stereogram(&s, seed.wrapping_add(i as u64))?;
                    sample.id = format!("{i:06}");
                    Ok(sample)
                })
                .collect::<Result<Vec<_>>>()?
        }
        (None, None) => return Err(Error::Usage("give --preset or --spec".into())),
    };
    let mut ids = Vec::with_capacity(samples.len());
    for s in &samples {
        write_sample(out, s, format)?;
        ids.push(s.id.clone());
    }
    write_manifest(out, &ids, format)?;
    println!("wrote {} samples to {}", ids.len(), out.display());
    Ok(())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
}

fn short(checksum: &str) -> &str {
    &checksum[..checksum.len().min(16)]
}

fn cmd_train(config_path: &Path) -> Result<()> {
    let text = fs::read_to_string(config_path).map_err(io_err(config_path))?;
    let mut cfg = TrainConfig::parse(&text).map_err(|e| match e {
        Error::Parse { position, message } => {
            Error::Usage(format!("{} line {position}: {message}", config_path.display()))
        }
        other => other,
    })?;
    let base = config_path.parent().unwrap_or(Path::new("."));
    for root in cfg.datasets.values_mut() {
        *root = resolve(base, root);
    }
    cfg.out = resolve(base, &cfg.out);
    let log_path = resolve(base, &cfg.log_path());
    println!("# train seed={} split_seed={} config={}", cfg.seed, cfg.split_seed, config_path.display());

    let used: BTreeSet<char> = cfg.schedule.iter().map(|p| p.dataset).collect();
    let mut registry = DatasetRegistry::new();
    let mut held_out: BTreeMap<char, Vec<StereoSample>> = BTreeMap::new();
    for tag in used {
        let root = &cfg.datasets[&tag];
        let mut samples = load_dataset(root, cfg.format(tag))?;
        let total = samples.len();
        if cfg.screen {
            samples.retain(|s| screen_sample(&s.gt, SCREEN_THRESHOLD, SCREEN_FRACTION));
        }
        let (train, val) = if samples.len() >= 2 {
            split_dataset(&samples, cfg.train_frac, cfg.split_seed)?
        } else {
            (samples, Vec::new())
        };
        println!(
            "dataset {tag}: {total} samples, {} screened out, {} train, {} validation",
            total - train.len() - val.len(),
            train.len(),
            val.len()
        );
        registry.insert(tag, train);
        held_out.insert(tag, val);
    }

    let mut model = CrlModel::new(cfg.model.clone())?;
    model.set_precision(cfg.precision);
    fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    if let Some(dir) = log_path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log = TrainLog::new(BufWriter::new(file)).map_err(io_err(&log_path))?;

    for (i, phase) in cfg.schedule.iter().enumerate() {
        let pc = cfg.phase_config(phase);
        let mut write_row = |r: &StepRecord| log.write(r).map_err(io_err(&log_path));
        let result = run_phase(&model, phase, i, &registry, &pc, &mut write_row);
        log.flush().map_err(io_err(&log_path))?;
        let report = result?;
        let state = |a: &str, b: &str| if a == b { "unchanged" } else { "changed" };
        println!(
            "phase {} {phase}: {} steps ({} skipped), mean loss {:.4}, {:.1}s",
            i + 1,
            report.steps,
            report.skipped_steps,
            report.mean_final_loss,
            report.seconds
        );
        let (b, a) = (&report.checksums_before, &report.checksums_after);
        println!("  stage1 checksum {} -> {} ({})", short(&b.0), short(&a.0), state(&b.0, &a.0));
        println!("  stage2 checksum {} -> {} ({})", short(&b.1), short(&a.1), state(&b.1, &a.1));
        if let Some(val) = held_out.get(&phase.dataset).filter(|v| !v.is_empty()) {
            let v = validate(&model, val, pc.batch, ThreePixelMode::Plain)?;
            let fmt = |s: &ErrorSums| s.epe().map_or("undefined".into(), |e| format!("{e:.4}"));
            println!("  validation EPE stage1 {} stage2 {}", fmt(&v.stage1), fmt(&v.stage2));
        }
        let path = cfg.out.join(format!("phase{}-{phase}.ckpt", i + 1));
        checkpoint::save(&model, &path)?;
        println!("  checkpoint {}", path.display());
    }
    let last = cfg.out.join("final.ckpt");
    checkpoint::save(&model, &last)?;
    println!("final checkpoint {}", last.display());
    Ok(())
}

/// A loaded disparity estimator.
pub enum Engine {
    Crl { model: CrlModel, stage: u8 },
    Sgm(SgmParams),
}

impl Engine {
    pub fn new(method: Method, ckpt: Option<&Path>, stage: u8, max_disp: usize) -> Result<Engine> {
        Ok(match method {
            Method::Crl => {
                let path = ckpt.ok_or_else(|| Error::Usage("--ckpt is required for the crl method".into()))?;
                Engine::Crl { model: checkpoint::load(path)?, stage }
            }
            Method::Sgm => Engine::Sgm(SgmParams { max_disp, ..SgmParams::default() }),
        })
    }

    /// Disparity for one pair and, for the cascade, the second-stage
    /// residual.
    pub fn estimate(&self, left: &Tensor, right: &Tensor) -> Result<(DisparityMap, Option<Tensor>)> {
        if left.shape() != right.shape() {
            return Err(Error::Dimension(format!(
                "left image is {:?} but right image is {:?}",
                left.shape(),
                right.shape()
            )));
        }
        match self {
            Engine::Crl { model, stage } => {
                let (d1, d2, r2) = model.infer(left, right)?;
                let d = if *stage == 1 { d1 } else { d2 };
                Ok((DisparityMap::new(d, 0)?, Some(r2)))
            }
            Engine::Sgm(params) => {
                let [_, _, h, w] = left.shape();
                let sample = StereoSample {
                    id: String::new(),
                    left: left.clone(),
                    right: right.clone(),
                    gt: DisparityMap::new(Tensor::zeros([1, 1, h, w]), 0)?,
                };
                let params = SgmParams { max_disp: params.max_disp.min(w.saturating_sub(1)), ..params.clone() };
                Ok((run_sgm(&sample, &params)?, None))
            }
        }
    }
}

fn write_map(path: &Path, map: &DisparityMap, format: DispFormat) -> Result<()> {
    match format {
        DispFormat::Pfm => write_disparity_pfm(path, map),
        DispFormat::Png => write_kitti_disparity(path, map),
    }
}

fn format_for(path: &Path, explicit: Option<DispFormat>) -> Result<DispFormat> {
    explicit.or_else(|| DispFormat::from_extension(path)).ok_or_else(|| {
        Error::Usage(format!("cannot tell the format of {}; use .pfm, .png or --format", path.display()))
    })
}

fn infer_pair(
    engine: &Engine,
    left: &Path,
    right: &Path,
    out: &Path,
    format: Option<DispFormat>,
    dump_residual: Option<&Path>,
) -> Result<()> {
    let format = format_for(out, format)?;
    if let Some(p) = dump_residual {
        if DispFormat::from_extension(p) != Some(DispFormat::Pfm) {
            return Err(Error::Usage("residuals are signed; --dump-residual needs a .pfm path".into()));
        }
    }
    let (l, r) = (read_image(left)?, read_image(right)?);
    let (map, residual) = engine.estimate(&l, &r)?;
    write_map(out, &map, format)?;
    println!("wrote {}", out.display());
    if let Some(p) = dump_residual {
        let res = residual.ok_or_else(|| Error::Usage("only the crl method has a residual".into()))?;
        write_disparity_pfm(p, &DisparityMap::new(res, 0)?)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn infer_dataset(engine: &Engine, root: &Path, out: &Path, format: DispFormat) -> Result<()> {
    let left_dir = root.join("left");
    let mut ids: Vec<String> = fs::read_dir(&left_dir)
        .map_err(io_err(&left_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .filter_map(|p| p.file_stem().and_then(|s| s.to_str()).map(str::to_string))
        .collect();
    ids.sort();
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut timing = String::from("id,seconds\n");
    for id in &ids {
        let l = read_image(&left_dir.join(format!("{id}.png")))?;
        let r = read_image(&root.join("right").join(format!("{id}.png")))?;
        let start = Instant::now();
        let (map, _) = engine.estimate(&l, &r)?;
        let secs = start.elapsed().as_secs_f64();
        write_map(&out.join(format!("{id}.{}", format.extension())), &map, format)?;
        timing.push_str(&format!("{id},{secs}\n"));
    }
    let tpath = out.join("timing.csv");
    fs::write(&tpath, timing).map_err(io_err(&tpath))?;
    println!("wrote {} predictions to {}", ids.len(), out.display());
    Ok(())
}

/// Disparity files directly under `dir`, keyed by stem.
fn disparity_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if DispFormat::from_extension(&path).is_some() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if out.insert(stem.to_string(), path.clone()).is_some() {
                    return Err(Error::Usage(format!("{} holds two disparity files for {stem}", dir.display())));
                }
            }
        }
    }
    Ok(out)
}

/// The `disp` directory of a dataset root, or the directory itself.
fn ground_truth_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("disp");
    if nested.is_dir() { nested } else { dir.to_path_buf() }
}

fn read_timing(dir: &Path) -> Result<BTreeMap<String, f64>> {
    let path = dir.join("timing.csv");
    let mut out = BTreeMap::new();
    if let Ok(text) = fs::read_to_string(&path) {
        for (i, line) in text.lines().enumerate().skip(1) {
            let parsed = line.split_once(',').and_then(|(id, s)| Some((id.to_string(), s.parse().ok()?)));
            let (id, s) = parsed.ok_or(Error::Parse { position: i + 1, message: format!("bad timing row in {}", path.display()) })?;
            out.insert(id, s);
        }
    }
    Ok(out)
}

fn cmd_eval(pred: &Path, gt: &Path, mode: ThreePixelMode, method: &str, out: Option<&Path>) -> Result<()> {
    let preds = disparity_files(pred)?;
    let gts = disparity_files(&ground_truth_dir(gt))?;
    let unmatched: Vec<String> = preds
        .keys()
        .filter(|k| !gts.contains_key(*k))
        .map(|k| format!("{k} (no ground truth)"))
        .chain(gts.keys().filter(|k| !preds.contains_key(*k)).map(|k| format!("{k} (no prediction)")))
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::MissingSamples(unmatched));
    }
    let timing = read_timing(pred)?;
    let mut rows = Vec::new();
    for (id, p) in &preds {
        let pm = read_disparity(p)?;
        let gm = read_disparity(&gts[id])?;
        if pm.shape() != gm.shape() {
            return Err(Error::Dimension(format!(
                "{id}: prediction {:?} but ground truth {:?}",
                pm.shape(),
                gm.shape()
            )));
        }
        rows.push(SampleEval {
            method: method.to_string(),
            sample: id.clone(),
            sums: error_sums(&pm, &gm, None, mode)?,
            seconds: timing.get(id).copied().unwrap_or(0.0),
        });
    }
    let report = make_report(rows)?;
    match out {
        Some(path) => {
            fs::write(path, report.to_csv()).map_err(io_err(path))?;
            print!("{}", report.to_table());
        }
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn cmd_gradcheck(ops: &[String], seed: Option<u64>, eps: f64, tol: f64) -> Result<()> {
    let ops: Vec<String> = if ops.is_empty() { OPERATORS.iter().map(|s| s.to_string()).collect() } else { ops.to_vec() };
    for op in &ops {
        if !OPERATORS.contains(&op.as_str()) {
            return Err(Error::Usage(format!("unknown operator {op:?}; known: {}", OPERATORS.join(", "))));
        }
    }
    let seeds: Vec<u64> = seed.map_or_else(|| (0..5).collect(), |s| vec![s]);
    println!("# gradcheck eps={eps} tol={tol} seeds={seeds:?}");
    println!("{:<20} {:>4} {:>12}  status", "operator", "seed", "max_rel_err");
    let mut worst: Option<(String, u64, GradCheckReport)> = None;
    for op in &ops {
        for &s in &seeds {
            let rep = certify::check_operator(op, s, eps)?;
            let pass = rep.max_error < tol;
            println!("{op:<20} {s:>4} {:>12.3e}  {}", rep.max_error, if pass { "pass" } else { "FAIL" });
            if worst.as_ref().is_none_or(|(_, _, w)| rep.max_error > w.max_error) {
                worst = Some((op.clone(), s, rep));
            }
        }
    }
    let (op, s, w) = worst.expect("at least one check ran");
    if w.max_error < tol {
        println!("all {} checks passed; worst {:.3e} ({op}, seed {s})", ops.len() * seeds.len(), w.max_error);
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "{op} seed {s}: relative error {:.3e} at input {} index {} (analytic {}, numeric {})",
            w.max_error, w.input, w.index, w.analytic, w.numeric
        )))
    }
}

fn cmd_screen(gt: &Path, threshold: f64, fraction: f64) -> Result<()> {
    let files = disparity_files(&ground_truth_dir(gt))?;
    let mut removed = Vec::new();
    for (id, path) in &files {
        if !screen_sample(&read_disparity(path)?, threshold, fraction) {
            removed.push(id.clone());
        }
    }
    println!("kept {} removed {}", files.len() - removed.len(), removed.len());
    for id in removed {
        println!("removed {id}");
    }
    Ok(())
}

fn cmd_report(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut rows = Vec::new();
    for path in inputs {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        for (method, sample, epe, three, valid, seconds) in parse_report_csv(&text)? {
            if sample == AGGREGATE_ID {
                continue;
            }
            let sums = ErrorSums {
                abs_error: epe.unwrap_or(0.0) * valid as f64,
                bad: (three.unwrap_or(0.0) / 100.0 * valid as f64).round() as usize,
                valid,
            };
            rows.push(SampleEval { method, sample, sums, seconds });
        }
    }
    let report = make_report(rows)?;
    print!("{}", report.to_table());
    if let Some(path) = out {
        fs::write(path, report.to_csv()).map_err(io_err(path))?;
    }
    Ok(())
}
