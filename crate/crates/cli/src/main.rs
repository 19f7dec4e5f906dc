use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use eqillum::checkpoint;
use eqillum::config::{parse_full, parse_stages, KeyValues};
use eqillum::encoder::LatentCode;
use eqillum::envio::{
    horizontal_panel, load_dataset_dir, read_rgbe, render_skies, sample_skies, save_dataset_dir, with_near_duplicates,
    write_png, write_rgbe,
};
use eqillum::eval::{equivariance_suite, evaluate, interpolate, ldr_from_log, EvalOptions, ImageSpace};
use eqillum::trainer::{fit_latent, load_stages, train_stages, training_strategy, Dataset, TrainState};

/// Output paths that are relative resolve against this directory when set.
const OUT_DIR_ENV: &str = "EQILLUM_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "eqillum",
    version,
    about = "Rotation-equivariant autoencoder for HDR environment maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic sky dataset as Radiance .hdr files.
    Gen(GenArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Encode a map to its latent mean.
    Encode(EncodeArgs),
    /// Render a latent code.
    Decode(DecodeArgs),
    /// Optimize a latent code to reproduce a map with the decoder frozen.
    Fit(FitArgs),
    /// Render a strip of frames interpolating between two codes.
    Interp(InterpArgs),
    /// Reconstruction metrics and latent-space diagnostics.
    Eval(EvalArgs),
    /// Run the equivariance property suite and print worst deviations.
    CheckEquivariance(CheckArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long)]
    seed: u64,
    /// Copies per base sky, the first unchanged and the rest jittered.
    #[arg(long, default_value_t = 1)]
    copies: usize,
    /// Relative jitter of near-duplicate parameters.
    #[arg(long, default_value_t = 0.02)]
    jitter: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory of .hdr files.
    #[arg(long, required_unless_present = "stages")]
    data: Option<PathBuf>,
    /// Curriculum as `dir:steps,dir:steps,...`.
    #[arg(long, conflicts_with = "data")]
    stages: Option<String>,
    #[arg(long)]
    seed: u64,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Key-value config file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Encoder mode.
    #[arg(long, value_parser = ["so2-projections", "full-so2", "full-vn"])]
    ablation: Option<String>,
    #[arg(long, value_parser = ["autodecoder"])]
    baseline: Option<String>,
    #[arg(long, value_parser = ["27", "147", "300"])]
    latent_dim: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// CSV of per-step losses.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    latent: PathBuf,
    /// Radiance .hdr output.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    png: Option<PathBuf>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
}

#[derive(Args)]
struct InterpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    from: PathBuf,
    #[arg(long)]
    to: PathBuf,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..))]
    steps: u64,
    /// PNG strip.
    #[arg(long)]
    out: PathBuf,
    /// Also write each frame as .hdr into this directory.
    #[arg(long)]
    frames: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    uniqueness: bool,
    /// Target images for the uniqueness diagnostic.
    #[arg(long, default_value_t = 5)]
    targets: usize,
    #[arg(long)]
    consistency: bool,
    /// Latent pairs for reconstruction consistency.
    #[arg(long, default_value_t = 1000)]
    pairs: usize,
    /// Image space for the diagnostics: `ldr` or `log-hdr`.
    #[arg(long, default_value = "ldr")]
    space: ImageSpace,
    /// Evaluate at most this many images.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct CheckArgs {
    /// Trained model; an untrained one is built from `--config` otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, conflicts_with = "checkpoint")]
    config: Option<PathBuf>,
    #[arg(long, value_parser = ["so2-projections", "full-so2", "full-vn"], conflicts_with = "checkpoint")]
    ablation: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    skies: usize,
}

fn out_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if p.is_relative() => PathBuf::from(dir).join(p),
        _ => p.to_path_buf(),
    }
}

fn ensure_parent(p: &Path) -> Result<()> {
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    let p = out_path(p);
    ensure_parent(&p)?;
    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
}

fn read_latent(p: &Path) -> Result<LatentCode> {
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    Ok(LatentCode::from_text(&text)?)
}

fn read_map(p: &Path) -> Result<eqillum::EnvironmentMap> {
    let map = read_rgbe(p).with_context(|| format!("reading {}", p.display()))?;
    if !map.is_equirect_aspect() {
        eprintln!(
            "warning: {} is {}x{}, not a 2:1 equirectangular map",
            p.display(),
            map.height(),
            map.width()
        );
    }
    Ok(map)
}

fn load_checkpoint(p: &Path) -> Result<TrainState> {
    checkpoint::load(p).with_context(|| format!("loading checkpoint {}", p.display()))
}

fn gen(a: GenArgs) -> Result<()> {
    if a.copies == 0 {
        bail!("--copies must be at least 1");
    }
    let base = sample_skies(a.count, a.seed);
    let params = with_near_duplicates(&base, a.copies, a.jitter, a.seed);
    let maps = render_skies(&params, a.height, a.width);
    let dir = out_path(&a.out);
    let paths = save_dataset_dir(&dir, &maps)?;
    println!("wrote {} maps to {}", paths.len(), dir.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut kv = match &a.config {
        Some(p) => KeyValues::load(p)?,
        None => KeyValues::default(),
    };
    if let Some(m) = &a.ablation {
        kv.set("encoder", m);
    }
    if let Some(b) = &a.baseline {
        kv.set("strategy", b);
    }
    if let Some(d) = a.latent_dim {
        kv.set("latent_dim", d);
    }
    if let Some(s) = a.steps {
        kv.set("steps", s);
    }
    if let Some(b) = a.batch_size {
        kv.set("batch_size", b);
    }
    if let Some(lr) = a.learning_rate {
        kv.set("learning_rate", lr);
    }
    let (model_cfg, train_cfg) = parse_full(&kv, Some(a.seed))?;

    let stages = match (&a.stages, &a.data) {
        (Some(text), _) => parse_stages(text)?,
        (None, Some(dir)) => vec![eqillum::config::Stage {
            dataset: dir.clone(),
            steps: train_cfg.steps,
        }],
        (None, None) => bail!("either --data or --stages is required"),
    };
    let stages = load_stages(&stages, |s| Dataset::new(load_dataset_dir(&s.dataset)?))?;

    let strategy = training_strategy(&train_cfg.strategy)?;
    let mut state = strategy.init(&model_cfg, &train_cfg)?;
    let total: usize = stages.iter().map(|(_, n)| n).sum();
    let every = (total / 20).max(1) as u64;
    train_stages(strategy.as_ref(), &mut state, &stages, |step, b| {
        if step % every == 0 || step as usize == total {
            eprintln!("step {step}/{total}: loss {:.5}", b.combined);
        }
    })?;

    let out = out_path(&a.out);
    ensure_parent(&out)?;
    checkpoint::save(&state, &out)?;
    if let Some(log) = &a.log {
        let mut csv = String::from("step,mage,scale_inv,cosine,kld,combined\n");
        for (i, b) in state.log.iter().enumerate() {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                i + 1,
                b.mage,
                b.scale_inv,
                b.cosine,
                b.kld,
                b.combined
            ));
        }
        write_text(log, &csv)?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn encode(a: EncodeArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let dist = state.model.encode(&read_map(&a.input)?)?;
    write_text(&a.out, &LatentCode(dist.mu).to_text())
}

fn decode(a: DecodeArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let cfg = state.model.config();
    let (h, w) = (a.height.unwrap_or(cfg.height), a.width.unwrap_or(cfg.width));
    let z = read_latent(&a.latent)?;
    let log = state.model.render(&z, h, w)?;
    let out = out_path(&a.out);
    ensure_parent(&out)?;
    write_rgbe(&eqillum::EnvironmentMap::from_log(&log)?, &out)?;
    if let Some(png) = &a.png {
        let png = out_path(png);
        ensure_parent(&png)?;
        write_png(&ldr_from_log(&log.mapv(|v| v as f64)).view(), &png)?;
    }
    Ok(())
}

fn fit(a: FitArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let mut cfg = state.config.clone();
    if let Some(n) = a.iterations {
        cfg.fit_iterations = n;
    }
    let result = fit_latent(&state.model, &read_map(&a.input)?, &cfg, a.seed)?;
    eprintln!("best loss {:.6}", result.loss);
    write_text(&a.out, &result.code.to_text())
}

fn interp(a: InterpArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let (z1, z2) = (read_latent(&a.from)?, read_latent(&a.to)?);
    let cfg = state.model.config();
    let n = a.steps as usize;
    let mut frames = Vec::with_capacity(n);
    if let Some(dir) = &a.frames {
        std::fs::create_dir_all(out_path(dir))?;
    }
    for i in 0..n {
        let t = i as f64 / (n - 1) as f64;
        let log = state.model.render(&interpolate(&z1, &z2, t), cfg.height, cfg.width)?;
        if let Some(dir) = &a.frames {
            let p = out_path(dir).join(format!("frame_{i:03}.hdr"));
            write_rgbe(&eqillum::EnvironmentMap::from_log(&log)?, &p)?;
        }
        frames.push(ldr_from_log(&log.mapv(|v| v as f64)));
    }
    let out = out_path(&a.out);
    ensure_parent(&out)?;
    write_png(&horizontal_panel(&frames)?.view(), &out)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let state = load_checkpoint(&a.checkpoint)?;
    let mut maps = load_dataset_dir(&a.data)?;
    if let Some(n) = a.limit {
        maps.truncate(n);
    }
    let options = EvalOptions {
        uniqueness_targets: if a.uniqueness { a.targets } else { 0 },
        consistency_pairs: if a.consistency { a.pairs } else { 0 },
        space: a.space,
    };
    let report = evaluate(&state.model, &maps, &state.config, a.seed, &options)?;
    let text = report.to_text();
    write_text(&a.out, &text)?;
    print!(
        "{}",
        text.lines()
            .take_while(|l| !l.starts_with("image."))
            .map(|l| format!("{l}\n"))
            .collect::<String>()
    );
    Ok(())
}

fn check_equivariance(a: CheckArgs) -> Result<bool> {
    let model = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?.model,
        None => {
            let mut kv = match &a.config {
                Some(p) => KeyValues::load(p)?,
                None => KeyValues::default(),
            };
            if let Some(m) = &a.ablation {
                kv.set("encoder", m);
            }
            let (model_cfg, _) = parse_full(&kv, Some(a.seed))?;
            eqillum::model::Model::vae(&model_cfg, a.seed)?
        }
    };
    let checks = equivariance_suite(&model, a.skies, a.seed)?;
    let mut ok = true;
    for c in &checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!("{:<24} {:.3e}  (< {:.0e})  {verdict}", c.name, c.deviation, c.tolerance);
        ok &= c.passed();
    }
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen(a) => gen(a)?,
        Command::Train(a) => train(a)?,
        Command::Encode(a) => encode(a)?,
        Command::Decode(a) => decode(a)?,
        Command::Fit(a) => fit(a)?,
        Command::Interp(a) => interp(a)?,
        Command::Eval(a) => eval(a)?,
        Command::CheckEquivariance(a) => return check_equivariance(a),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
