//! `drbnet`: synthetic defocus datasets, two-stage training, inference,
//! evaluation, gradient verification and PSF probing.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use drbnet_core::config::KvConfig;
use drbnet_core::data::{load_png, save_png};
use drbnet_core::metrics;
use drbnet_core::model::Model;
use drbnet_core::sim::{self, psf, LensSpec, LightFieldSpec, PairDomain};
use drbnet_core::tensor::{write_drbt, GradTape, Tensor};
use drbnet_core::train::{
    self, load_checkpoint, model_config_from_checkpoint, LossKind, RunConfig, StageKind,
};

#[derive(Parser)]
#[command(name = "drbnet", about = "Single-image defocus deblurring pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset.
    GenData(GenDataArgs),
    /// Train from scratch (main or mixed stage).
    Train(TrainArgs),
    /// Fine-tune from an existing checkpoint with the feature loss.
    Finetune(FinetuneArgs),
    /// Restore images with a trained checkpoint.
    Infer(InferArgs),
    /// Compare restored images against ground truth.
    Eval(EvalArgs),
    /// Run the gradient verification suite.
    Gradcheck(GradcheckArgs),
    /// Extract the point spread function of either simulator.
    PsfProbe(PsfProbeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of pairs.
    #[arg(long, default_value_t = 16)]
    count: usize,
    /// Square image size (divisible by 8).
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Blur domain: `lf` (aligned) or `two-shot` (misaligned).
    #[arg(long, default_value = "lf")]
    domain: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainCommon {
    /// Base config file (`key = value`); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Dynamic kernel size (5, 7, 9 or 11).
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Loss selection: l1, feature or mixed.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lambda: Option<f32>,
    #[arg(long)]
    ckpt_every: Option<usize>,
    /// Use the published full-scale settings (patch 320, paper widths,
    /// 200/100 epochs) instead of the desk-scale defaults.
    #[arg(long, default_value_t = false)]
    paper_scale: bool,
    /// Force fully serial data loading.
    #[arg(long, default_value_t = false)]
    deterministic: bool,
    /// Resume an interrupted run from one of its checkpoints.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: TrainCommon,
    /// Training stage: main or mixed.
    #[arg(long, default_value = "main")]
    stage: String,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: TrainCommon,
    /// Checkpoint produced by the main stage.
    #[arg(long)]
    init: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image or directory of PNGs.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Tile size for large / non-divisible images.
    #[arg(long, default_value_t = 256)]
    tile: usize,
    #[arg(long, default_value_t = 32)]
    overlap: usize,
    /// Also dump per-scale DRB intermediates (inputs, residuals, kernels).
    #[arg(long, default_value_t = false)]
    dump_drb: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Window size for the NCC map.
    #[arg(long, default_value_t = 11)]
    ncc_window: usize,
    /// Where to write the per-image CSV (stdout when omitted).
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Directory for per-image NCC heatmap PNGs.
    #[arg(long)]
    heatmaps: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Also run the deliberately-broken backward fixture; the run must
    /// then report a failure (negative control).
    #[arg(long, default_value_t = false)]
    with_negative_control: bool,
}

#[derive(Args)]
struct PsfProbeArgs {
    /// Simulator: `conventional` or `lf`.
    #[arg(long, default_value = "conventional")]
    sim: String,
    /// Probe depth in meters.
    #[arg(long, default_value_t = 4.0)]
    depth: f32,
    /// Probe canvas size in pixels.
    #[arg(long, default_value_t = 65)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

fn init_threads() {
    if let Ok(v) = std::env::var("DRB_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build_global();
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    init_threads();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => {
            let stage = StageKind::parse(&a.stage)?;
            if stage == StageKind::Finetune {
                bail!("use the `finetune` subcommand for the finetune stage");
            }
            let cfg = build_config(stage, &a.common, None)?;
            run_training(&cfg, &a.common)
        }
        Command::Finetune(a) => {
            let cfg = build_config(StageKind::Finetune, &a.common, Some(a.init.clone()))?;
            run_training(&cfg, &a.common)
        }
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::PsfProbe(a) => psf_probe(a),
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let domain = PairDomain::parse(&a.domain)?;
    sim::gen_dataset(a.count, a.size, domain, a.seed, &a.out)
        .with_context(|| format!("generating {} pairs into {}", a.count, a.out.display()))?;
    println!(
        "wrote {} pairs ({}x{}, {}) to {}",
        a.count,
        a.size,
        a.size,
        domain.as_str(),
        a.out.display()
    );
    Ok(())
}

fn build_config(
    stage: StageKind,
    c: &TrainCommon,
    init: Option<PathBuf>,
) -> anyhow::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            let mut kv = KvConfig::parse(&text)?;
            kv.set("stage", stage.as_str());
            RunConfig::from_kv(&kv)?
        }
        None => RunConfig::desk(stage, PathBuf::new(), PathBuf::new()),
    };
    if let Some(d) = &c.data {
        cfg.data_dir = d.clone();
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if init.is_some() {
        cfg.init_checkpoint = init;
    }
    if c.paper_scale {
        cfg.paper_scale = true;
        cfg.patch_size = 320;
        cfg.epochs = match stage {
            StageKind::Finetune => 100,
            _ => 200,
        };
    }
    if let Some(v) = c.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = c.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = c.patch {
        cfg.patch_size = v;
    }
    if let Some(v) = c.width {
        cfg.width = v;
    }
    if let Some(v) = c.kernel {
        cfg.kernel_size = v;
    }
    if let Some(v) = c.lr {
        cfg.lr = Some(v);
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(l) = &c.loss {
        cfg.loss = LossKind::parse(l)?;
    }
    if let Some(v) = c.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = c.ckpt_every {
        cfg.ckpt_every = v;
    }
    if c.deterministic {
        cfg.deterministic = true;
    }
    if cfg.data_dir.as_os_str().is_empty() {
        bail!("--data (or data.dir in the config file) is required");
    }
    if cfg.out_dir.as_os_str().is_empty() {
        bail!("--out (or out.dir in the config file) is required");
    }
    Ok(cfg)
}

fn run_training(cfg: &RunConfig, common: &TrainCommon) -> anyhow::Result<()> {
    let outcome = train::train(cfg, common.resume.as_deref())?;
    println!(
        "trained {} epochs; final val PSNR {:.3} dB, SSIM {:.4}",
        outcome.epochs_run, outcome.final_val_psnr, outcome.final_val_ssim
    );
    println!("checkpoint: {}", outcome.final_checkpoint.display());
    println!("log: {}", outcome.log_path.display());
    Ok(())
}

fn infer(a: InferArgs) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = Model::new(model_config_from_checkpoint(&ckpt)?)?;
    model.load_named(&ckpt.params)?;
    std::fs::create_dir_all(&a.out)?;

    let inputs: Vec<PathBuf> = if a.input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&a.input)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        v.sort();
        v
    } else {
        vec![a.input.clone()]
    };
    if inputs.is_empty() {
        bail!("no PNG inputs in {}", a.input.display());
    }

    for path in inputs {
        let x = load_png(&path)?;
        let s = x.shape();
        let (h, w) = (s[2], s[3]);
        let restored = if h % 8 == 0 && w % 8 == 0 && h <= a.tile && w <= a.tile {
            model.infer(&x)?
        } else {
            model.infer_tiled(&x, a.tile, a.overlap)?
        };
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        save_png(a.out.join(&name), &restored)?;

        if a.dump_drb {
            dump_drb(&model, &x, &a.out, name.trim_end_matches(".png"))?;
        }
    }
    println!("restored images written to {}", a.out.display());
    Ok(())
}

/// Per-scale DRB intermediates as normalized PNGs (min/max in a sidecar)
/// plus the raw kernel volumes as DRBT tensors.
fn dump_drb(model: &Model, x: &Tensor, out: &std::path::Path, stem: &str) -> anyhow::Result<()> {
    let s = x.shape();
    if s[2] % 8 != 0 || s[3] % 8 != 0 {
        log::warn!("skipping DRB dump for non-divisible input {stem}");
        return Ok(());
    }
    let tape = GradTape::disabled();
    let (_, states) = model.forward_with_states(&tape, x)?;
    let mut sidecar = String::from("image\tmin\tmax\n");
    for (i, st) in states.iter().enumerate() {
        let scale = 8 >> i;
        for (tag, t) in [
            ("input", &st.input),
            ("dynres", &st.dynamic_residual),
            ("res", &st.direct_residual),
            ("out", &st.output),
        ] {
            let name = format!("{stem}_drb{scale}_{tag}.png");
            let (lo, hi) = write_normalized_png(out.join(&name), t)?;
            sidecar.push_str(&format!("{name}\t{lo:.8e}\t{hi:.8e}\n"));
        }
        write_drbt(
            out.join(format!("{stem}_drb{scale}_kernels.drbt")),
            &st.kernels,
        )?;
    }
    std::fs::write(out.join(format!("{stem}_drb_ranges.tsv")), sidecar)?;
    Ok(())
}

fn write_normalized_png(
    path: PathBuf,
    t: &Tensor,
) -> anyhow::Result<(f32, f32)> {
    let v = t.to_vec();
    let lo = v.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = v.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = (hi - lo).max(1e-12);
    let norm: Vec<f32> = v.iter().map(|x| (x - lo) / span).collect();
    save_png(&path, &Tensor::from_vec(t.shape(), norm)?)?;
    Ok((lo, hi))
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let (rows, mean) = train::evaluate_dirs(&a.pred, &a.gt, a.ncc_window)?;
    let mut csv = String::from("name,psnr,ssim,mean_ncc\n");
    for r in rows.iter().chain(std::iter::once(&mean)) {
        csv.push_str(&format!(
            "{},{:.4},{:.5},{:.5}\n",
            r.name, r.psnr, r.ssim, r.mean_ncc
        ));
    }
    match &a.csv {
        Some(p) => std::fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    if let Some(dir) = &a.heatmaps {
        std::fs::create_dir_all(dir)?;
        for r in &rows {
            let p = load_png(a.pred.join(&r.name))?;
            let g = load_png(a.gt.join(&r.name))?;
            let map = metrics::ncc_map(&p, &g, a.ncc_window)?;
            let mut rgb = Vec::with_capacity(3 * map.rows * map.cols);
            for _ in 0..3 {
                rgb.extend_from_slice(&map.values);
            }
            let t = Tensor::from_vec(&[1, 3, map.rows, map.cols], rgb)?;
            save_png(dir.join(format!("ncc_{}", r.name)), &t)?;
        }
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let mut reports = drbnet_core::verify::gradcheck_suite(a.seeds)?;
    if a.with_negative_control {
        reports.push(drbnet_core::verify::corrupted_backward_report()?);
    }
    let mut failed = 0;
    println!("{:<40} {:>12}  result", "op", "max rel err");
    for r in &reports {
        println!(
            "{:<40} {:>12.3e}  {}",
            r.op,
            r.max_rel_err,
            if r.pass { "pass" } else { "FAIL" }
        );
        if !r.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} gradient check(s) failed");
    }
    println!("all {} gradient checks passed", reports.len());
    Ok(())
}

fn psf_probe(a: PsfProbeArgs) -> anyhow::Result<()> {
    std::fs::create_dir_all(&a.out)?;
    let image = match a.sim.as_str() {
        "conventional" => psf::probe_conventional(&LensSpec::default(), a.depth, a.size)?,
        "lf" => psf::probe_lightfield(&LightFieldSpec::default(), a.depth, a.size)?,
        other => bail!("unknown simulator '{other}', expected 'conventional' or 'lf'"),
    };

    // Normalized PSF image.
    let peak = image.max().max(1e-12);
    let norm: Vec<f32> = image.data.iter().map(|v| v / peak).collect();
    let mut rgb = Vec::with_capacity(3 * norm.len());
    for _ in 0..3 {
        rgb.extend_from_slice(&norm);
    }
    let t = Tensor::from_vec(&[1, 3, a.size, a.size], rgb)?;
    save_png(a.out.join("psf.png"), &t)?;

    // Center-row profile.
    let mut csv = String::from("x,value\n");
    for (x, v) in image.center_profile().iter().enumerate() {
        csv.push_str(&format!("{x},{v:.8e}\n"));
    }
    std::fs::write(a.out.join("profile.csv"), csv)?;

    println!(
        "{}: {} half-max region(s), {} local maxima; outputs in {}",
        a.sim,
        image.half_max_regions(),
        image.local_maxima(),
        a.out.display()
    );
    Ok(())
}
