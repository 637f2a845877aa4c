//! Command-line front end for the complex-valued segmentation engine.
//!
//! Six subcommands cover the whole workflow: `synth` writes a synthetic
//! coherency-matrix scene, `train` fits a model and logs a CSV learning
//! curve, `predict` produces dense label maps from a checkpoint, `eval`
//! scores a predicted map against ground truth, `gradcheck` runs the
//! finite-difference verification suites, and `init-stats` audits the
//! weight-initialization distributions.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! data or file-format errors, 3 for numerical failures (diverged
//! training or a gradient-check threshold breach). The `CVFCN_SEED`
//! environment variable overrides every `--seed` flag, letting sweep
//! scripts reseed without editing argument lists.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

use cvfcn_core::ctensor::CTensor;
use cvfcn_core::data::{load_dataset, save_dataset, synth_scene, SceneSpec};
use cvfcn_core::error::Error;
use cvfcn_core::gradcheck::run_full_gradcheck;
use cvfcn_core::grid::LabelGrid;
use cvfcn_core::init::{
    expected_mean_abs, init_tensor, ks_critical_1pct, ks_rayleigh, phase_chi2, rayleigh_scale,
    sample_stats, InitScheme,
};
use cvfcn_core::loss::LossKind;
use cvfcn_core::metrics::{confusion, metrics_json};
use cvfcn_core::net::NetModel;
use cvfcn_core::optim::AdamHyper;
use cvfcn_core::train::{run_train, TrainOptions};

#[derive(Parser)]
#[command(name = "cvfcn", version, about = "Complex-valued dense pixel classification")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-look coherency scene.
    Synth(SynthArgs),
    /// Train a model on a cube + label-grid dataset.
    Train(Box<TrainArgs>),
    /// Predict a dense label map for a whole cube.
    Predict(PredictArgs),
    /// Score a predicted map against ground truth.
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Sample an initializer and report its distribution statistics.
    InitStats(InitStatsArgs),
}

#[derive(Args)]
#[command(group(ArgGroup::new("source").required(true).args(["spec", "demo"])))]
struct SynthArgs {
    /// Scene description JSON (classes with covariances, layout, looks, seed).
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Use the built-in three-class demonstration scene instead of a spec.
    #[arg(long)]
    demo: bool,
    /// Demo scene height in pixels.
    #[arg(long, default_value_t = 256)]
    height: usize,
    /// Demo scene width in pixels.
    #[arg(long, default_value_t = 256)]
    width: usize,
    /// Demo scene number of looks averaged per pixel.
    #[arg(long, default_value_t = 9)]
    looks: usize,
    /// Demo scene seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path for the complex input cube.
    #[arg(long)]
    out_cube: PathBuf,
    /// Output path for the ground-truth label grid.
    #[arg(long)]
    out_labels: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Input complex cube (CVT).
    #[arg(long)]
    cube: PathBuf,
    /// Ground-truth labels (PGM, maxval = class count).
    #[arg(long)]
    labels: PathBuf,
    /// Where to write the best-validation-loss checkpoint.
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Where to write the per-epoch CSV log.
    #[arg(long)]
    out_log: PathBuf,
    /// Where to write the subsampled training-label mask (PGM).
    #[arg(long)]
    out_train_mask: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 30)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    beta2: f64,
    /// Square patch side; must be a multiple of 32.
    #[arg(long, default_value_t = 128)]
    window: usize,
    /// Sliding-window step between patches.
    #[arg(long, default_value_t = 40)]
    stride: usize,
    /// Channel-width multiplier as a fraction, e.g. 1/4.
    #[arg(long, default_value = "1/1", value_parser = parse_scale)]
    width_scale: (u32, u32),
    /// Dropout keep probability in the bottleneck block.
    #[arg(long, default_value_t = 0.5)]
    keep_prob: f64,
    /// Training loss: ace, cmse, or cmae.
    #[arg(long, default_value = "ace")]
    loss: LossKind,
    /// Weight initialization: rayleigh or uniform.
    #[arg(long, default_value = "rayleigh", value_parser = parse_init)]
    init: InitScheme,
    /// Fixed bound for the uniform initializer (default: derived per fan-in).
    #[arg(long)]
    uniform_bound: Option<f64>,
    /// Fraction of each class's labeled pixels used for training.
    #[arg(long, default_value_t = 1.0)]
    frac_per_class: f64,
    /// Train share of the augmented patch set; the rest validates.
    #[arg(long, default_value_t = 0.9)]
    train_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Disable encoder-to-decoder skip additions.
    #[arg(long)]
    no_skips: bool,
    /// Unpool to window top-left corners instead of recorded argmax positions.
    #[arg(long)]
    no_locmaps: bool,
    /// Stop after this many epochs without validation-loss improvement
    /// (the flag alone means 20).
    #[arg(long, num_args = 0..=1, default_missing_value = "20")]
    patience: Option<usize>,
    /// Memorization mode: train and validate on the first N labeled patches.
    #[arg(long)]
    overfit: Option<usize>,
    /// Stop once validation overall accuracy reaches this value.
    #[arg(long)]
    target_val_oa: Option<f64>,
    /// Log wall_seconds as 0 so reruns produce byte-identical logs.
    #[arg(long)]
    fixed_clock: bool,
    /// Reserved for compatibility; compute is single-threaded.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct PredictArgs {
    /// Trained checkpoint (CVM).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input complex cube (CVT).
    #[arg(long)]
    cube: PathBuf,
    /// Output class-id map (PGM).
    #[arg(long)]
    out_map: PathBuf,
    /// Output colorized map (PPM; default: out-map with .ppm extension).
    #[arg(long)]
    out_color: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted label map (PGM).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth labels (PGM, maxval = class count).
    #[arg(long)]
    truth: PathBuf,
    /// Labeled pixels to exclude, e.g. the training mask (PGM).
    #[arg(long)]
    exclude_mask: Option<PathBuf>,
    /// Also write the metrics JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Channel-width multiplier for the end-to-end check.
    #[arg(long, default_value = "1/12", value_parser = parse_scale)]
    width_scale: (u32, u32),
    /// Sensitivity hook: damage one analytic gradient so the run must fail.
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct InitStatsArgs {
    /// Initialization scheme: rayleigh or uniform.
    #[arg(long, default_value = "rayleigh", value_parser = parse_init)]
    scheme: InitScheme,
    /// Incoming connections per neuron the scheme adapts to.
    #[arg(long)]
    fan_in: usize,
    /// Number of weights to draw.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Fixed bound for the uniform scheme (default: derived from fan-in).
    #[arg(long)]
    bound: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_scale(s: &str) -> Result<(u32, u32), String> {
    let (num, den) = match s.split_once('/') {
        Some((n, d)) => (n, d),
        None => (s, "1"),
    };
    let num: u32 = num.trim().parse().map_err(|_| format!("bad width scale '{s}'"))?;
    let den: u32 = den.trim().parse().map_err(|_| format!("bad width scale '{s}'"))?;
    if num == 0 || den == 0 {
        return Err(format!("width scale '{s}' must have positive parts"));
    }
    Ok((num, den))
}

fn parse_init(s: &str) -> Result<InitScheme, String> {
    match s {
        "rayleigh" => Ok(InitScheme::RayleighPhase),
        "uniform" => Ok(InitScheme::UniformParts { bound: None }),
        other => Err(format!("unknown init scheme '{other}' (rayleigh|uniform)")),
    }
}

/// Apply the `CVFCN_SEED` override to a `--seed` value.
fn effective_seed(flag: u64) -> Result<u64, Error> {
    match std::env::var("CVFCN_SEED") {
        Ok(s) => s
            .parse()
            .map_err(|_| Error::Config(format!("CVFCN_SEED '{s}' is not an unsigned integer"))),
        Err(_) => Ok(flag),
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(&a),
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Predict(a) => cmd_predict(&a),
        Cmd::Eval(a) => cmd_eval(&a),
        Cmd::Gradcheck(a) => cmd_gradcheck(&a),
        Cmd::InitStats(a) => cmd_init_stats(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<ExitCode, Error> {
    let spec = if let Some(path) = &a.spec {
        let text = fs::read_to_string(path)?;
        // A malformed spec is a configuration problem, not a data problem.
        SceneSpec::from_json(&text).map_err(|e| match e {
            Error::Format(m) => Error::Config(m),
            other => other,
        })?
    } else {
        SceneSpec::three_class_demo(a.height, a.width, a.looks, effective_seed(a.seed)?)
    };
    let d = synth_scene::<f32>(&spec)?;
    save_dataset(&d, &a.out_cube, &a.out_labels)?;
    let counts = d.labels.class_counts(d.k);
    for (i, n) in counts.iter().enumerate() {
        println!("class {}: {n} pixels", i + 1);
    }
    println!(
        "wrote {}x{}x6 cube to {} and labels to {}",
        d.height(),
        d.width(),
        a.out_cube.display(),
        a.out_labels.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train_options(a: &TrainArgs) -> Result<TrainOptions, Error> {
    let init = match (a.init, a.uniform_bound) {
        (InitScheme::UniformParts { .. }, bound) => InitScheme::UniformParts { bound },
        (scheme, None) => scheme,
        (_, Some(_)) => {
            return Err(Error::Config(
                "--uniform-bound only applies to --init uniform".into(),
            ))
        }
    };
    Ok(TrainOptions {
        epochs: a.epochs,
        batch: a.batch,
        hyper: AdamHyper { lr: a.lr, beta1: a.beta1, beta2: a.beta2, ..AdamHyper::default() },
        window: a.window,
        stride: a.stride,
        width_num: a.width_scale.0,
        width_den: a.width_scale.1,
        keep_prob: a.keep_prob,
        loss: a.loss,
        init,
        frac_per_class: a.frac_per_class,
        train_frac: a.train_frac,
        seed: effective_seed(a.seed)?,
        enable_skips: !a.no_skips,
        enable_locmaps: !a.no_locmaps,
        patience: a.patience,
        overfit: a.overfit,
        target_val_oa: a.target_val_oa,
    })
}

fn cmd_train(a: &TrainArgs) -> Result<ExitCode, Error> {
    if a.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let opts = train_options(a)?;
    let d = load_dataset::<f32>(&a.cube, &a.labels)?;

    let mut log = fs::File::create(&a.out_log)?;
    writeln!(log, "epoch,train_loss,val_loss,val_oa,wall_seconds")?;
    let fixed_clock = a.fixed_clock;
    let outcome = run_train(&d, &opts, |r| {
        let wall = if fixed_clock { 0.0 } else { r.wall_seconds };
        let line = format!(
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_loss, r.val_oa, wall
        );
        println!("{line}");
        writeln!(log, "{line}").is_ok() && log.flush().is_ok()
    })?;

    outcome.model.save(&a.out_checkpoint)?;
    if let Some(mask_path) = &a.out_train_mask {
        outcome.train_labels.save_pgm(mask_path, d.k as u8)?;
    }
    let best = &outcome.records[outcome.best_epoch - 1];
    println!(
        "best epoch {} val_loss {} val_oa {}; checkpoint {}",
        outcome.best_epoch,
        best.val_loss,
        best.val_oa,
        a.out_checkpoint.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn default_color_path(map: &Path) -> PathBuf {
    map.with_extension("ppm")
}

fn cmd_predict(a: &PredictArgs) -> Result<ExitCode, Error> {
    let model = NetModel::<f32>::load(&a.checkpoint)?;
    let cube = CTensor::<f32>::load_cvt(&a.cube)?;
    let map = model.predict_image(&cube)?;
    let k = model.config().num_classes as u8;
    map.save_pgm(&a.out_map, k)?;
    let color_path = a.out_color.clone().unwrap_or_else(|| default_color_path(&a.out_map));
    map.save_ppm(&color_path)?;
    println!(
        "wrote {}x{} map to {} and {}",
        map.height(),
        map.width(),
        a.out_map.display(),
        color_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: &EvalArgs) -> Result<ExitCode, Error> {
    let (pred, _) = LabelGrid::load_pgm(&a.pred)?;
    let (truth, maxval) = LabelGrid::load_pgm(&a.truth)?;
    let k = usize::from(maxval);
    let mask = match &a.exclude_mask {
        Some(path) => {
            let (excl, _) = LabelGrid::load_pgm(path)?;
            if excl.height() != truth.height() || excl.width() != truth.width() {
                return Err(Error::Shape(format!(
                    "exclusion mask {}x{} does not match truth {}x{}",
                    excl.height(),
                    excl.width(),
                    truth.height(),
                    truth.width()
                )));
            }
            // Evaluate labeled pixels that are not in the excluded set.
            Some(
                truth
                    .data()
                    .iter()
                    .zip(excl.data())
                    .map(|(&t, &e)| t != 0 && e == 0)
                    .collect::<Vec<bool>>(),
            )
        }
        None => None,
    };
    let c = confusion(&pred, &truth, k, mask.as_deref())?;
    let json = metrics_json(&c)?;
    println!("{json}");
    if let Some(out) = &a.out {
        fs::write(out, format!("{json}\n"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<ExitCode, Error> {
    let seed = effective_seed(a.seed)?;
    let outcomes = run_full_gradcheck(seed, a.width_scale.0, a.width_scale.1, a.corrupt)?;
    let mut all_pass = true;
    for o in &outcomes {
        let status = if o.passed() { "pass" } else { "FAIL" };
        println!(
            "{:18} max rel err {:.3e}  (threshold {:.0e}, {} components)  {status}",
            o.name, o.rel_err, o.threshold, o.components
        );
        all_pass &= o.passed();
    }
    if all_pass {
        println!("all {} checks passed", outcomes.len());
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::Numerical("gradient check exceeded its threshold".into()))
    }
}

fn cmd_init_stats(a: &InitStatsArgs) -> Result<ExitCode, Error> {
    if a.samples == 0 {
        return Err(Error::Config("--samples must be at least 1".into()));
    }
    let scheme = match (a.scheme, a.bound) {
        (InitScheme::UniformParts { .. }, bound) => InitScheme::UniformParts { bound },
        (scheme, None) => scheme,
        (_, Some(_)) => {
            return Err(Error::Config("--bound only applies to --scheme uniform".into()))
        }
    };
    let seed = effective_seed(a.seed)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let draws = init_tensor::<f64>(&[a.samples], a.fan_in, scheme, &mut rng)?;
    let stats = sample_stats(draws.data())?;
    let expected_var = 2.0 / a.fan_in as f64;
    let chi2_bins = 16;
    let chi2 = phase_chi2(draws.data(), chi2_bins)?;

    let scheme_name = match scheme {
        InitScheme::RayleighPhase => "rayleigh",
        InitScheme::UniformParts { .. } => "uniform",
    };
    let mut json = format!(
        concat!(
            "{{\"scheme\":\"{}\",\"fan_in\":{},\"n_samples\":{},",
            "\"mean_abs\":{:.6},\"var\":{:.6},\"expected_var\":{:.6},",
            "\"mean_re\":{:.6},\"mean_im\":{:.6},",
            "\"phase_chi2\":{:.3},\"phase_chi2_bins\":{}"
        ),
        scheme_name,
        a.fan_in,
        a.samples,
        stats.mean_abs,
        stats.variance,
        expected_var,
        stats.mean_re,
        stats.mean_im,
        chi2,
        chi2_bins
    );
    if matches!(scheme, InitScheme::RayleighPhase) {
        let ks = ks_rayleigh(draws.data(), rayleigh_scale(a.fan_in)?)?;
        json.push_str(&format!(
            ",\"expected_mean_abs\":{:.6},\"ks\":{:.6},\"ks_critical_1pct\":{:.6}",
            expected_mean_abs(a.fan_in)?,
            ks,
            ks_critical_1pct(a.samples)
        ));
    }
    json.push('}');
    println!("{json}");
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn width_scale_accepts_fractions_and_integers() {
        assert_eq!(parse_scale("1/4").unwrap(), (1, 4));
        assert_eq!(parse_scale(" 3 / 2 ").unwrap(), (3, 2));
        assert_eq!(parse_scale("2").unwrap(), (2, 1));
        assert!(parse_scale("0/4").is_err());
        assert!(parse_scale("a/b").is_err());
        assert!(parse_scale("1/0").is_err());
    }

    #[test]
    fn init_parser_knows_both_schemes() {
        assert_eq!(parse_init("rayleigh").unwrap(), InitScheme::RayleighPhase);
        assert_eq!(parse_init("uniform").unwrap(), InitScheme::UniformParts { bound: None });
        assert!(parse_init("gaussian").is_err());
    }

    #[test]
    fn color_map_path_swaps_extension() {
        assert_eq!(default_color_path(Path::new("/x/map.pgm")), PathBuf::from("/x/map.ppm"));
    }

    #[test]
    fn error_exit_codes() {
        assert_eq!(exit_code_for(&Error::Config("x".into())), 1);
        assert_eq!(exit_code_for(&Error::Domain("x".into())), 1);
        assert_eq!(exit_code_for(&Error::Numerical("x".into())), 3);
        assert_eq!(exit_code_for(&Error::Format("x".into())), 2);
        assert_eq!(exit_code_for(&Error::Shape("x".into())), 2);
    }
}
