//! End-to-end training orchestration: run configuration, the checkpoint
//! container, the epoch loop with per-stage losses, and directory
//! evaluation.
//!
//! All randomness (shuffling, crops, augmentation) derives from
//! per-(seed, epoch, item) streams, so a resumed run retraces exactly the
//! same steps as an uninterrupted one.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::config::KvConfig;
use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::loss::{feature_loss, l1_multiscale, mixed_loss, FeatureExtractor};
use crate::metrics;
use crate::model::{Model, ModelConfig};
use crate::optim::{LrSchedule, RAdam};
use crate::tensor::{read_drbt_from, write_drbt_to, GradTape, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Bit-exact packing helpers: the container stores f32 payloads, so wider
// values ride along as raw bit patterns.

pub fn pack_u64(v: u64) -> Tensor {
    let lo = f32::from_bits((v & 0xffff_ffff) as u32);
    let hi = f32::from_bits((v >> 32) as u32);
    Tensor::from_vec(&[2], vec![lo, hi]).unwrap()
}

pub fn unpack_u64(t: &Tensor) -> Result<u64> {
    let d = t.to_vec();
    if d.len() != 2 {
        return Err(Error::format("u64 field must hold exactly 2 words"));
    }
    Ok(d[0].to_bits() as u64 | ((d[1].to_bits() as u64) << 32))
}

pub fn pack_text(s: &str) -> Tensor {
    let mut bytes = s.as_bytes().to_vec();
    let len = bytes.len();
    while bytes.len() % 4 != 0 {
        bytes.push(0);
    }
    let mut words: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_bits(u32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    words.insert(0, f32::from_bits(len as u32));
    Tensor::from_vec(&[words.len()], words).unwrap()
}

pub fn unpack_text(t: &Tensor) -> Result<String> {
    let d = t.to_vec();
    if d.is_empty() {
        return Err(Error::format("text field is empty"));
    }
    let len = d[0].to_bits() as usize;
    let mut bytes = Vec::with_capacity(d.len().saturating_sub(1) * 4);
    for w in &d[1..] {
        bytes.extend_from_slice(&w.to_bits().to_le_bytes());
    }
    if len > bytes.len() {
        return Err(Error::format("text field length out of range"));
    }
    bytes.truncate(len);
    String::from_utf8(bytes).map_err(|_| Error::format("text field is not UTF-8"))
}

// ---------------------------------------------------------------------------
// Checkpoint container: a sequence of entries, each a u32 LE name length,
// the UTF-8 name, then a DRBT tensor blob.

pub fn write_container(path: impl AsRef<Path>, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (name, tensor) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_drbt_to(&mut w, tensor)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    let mut r = BufReader::new(File::open(path.as_ref())?);
    let mut entries = BTreeMap::new();
    loop {
        let mut lenbuf = [0u8; 4];
        match r.read_exact(&mut lenbuf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(lenbuf) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("container entry name is not UTF-8"))?;
        let tensor = read_drbt_from(&mut r)?;
        entries.insert(name, tensor);
    }
    Ok(entries)
}

/// Deserialized checkpoint contents.
pub struct CheckpointData {
    pub version: u32,
    pub epoch: u64,
    pub seed: u64,
    pub config_text: String,
    pub params: BTreeMap<String, Tensor>,
    pub optim: BTreeMap<String, Tensor>,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Model,
    optim: Option<&RAdam>,
    epoch: u64,
    seed: u64,
    config_text: &str,
) -> Result<()> {
    let mut entries = BTreeMap::new();
    entries.insert("meta.version".to_string(), pack_u64(CHECKPOINT_VERSION as u64));
    entries.insert("meta.epoch".to_string(), pack_u64(epoch));
    entries.insert("meta.seed".to_string(), pack_u64(seed));
    entries.insert("meta.config".to_string(), pack_text(config_text));
    for (name, t) in model.named_parameters() {
        entries.insert(format!("param.{name}"), t.detach());
    }
    if let Some(o) = optim {
        entries.extend(o.state_entries());
    }
    write_container(path, &entries)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointData> {
    let entries = read_container(path.as_ref())?;
    let version = unpack_u64(
        entries
            .get("meta.version")
            .ok_or_else(|| Error::format("checkpoint missing meta.version"))?,
    )? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let epoch = unpack_u64(
        entries
            .get("meta.epoch")
            .ok_or_else(|| Error::format("checkpoint missing meta.epoch"))?,
    )?;
    let seed = unpack_u64(
        entries
            .get("meta.seed")
            .ok_or_else(|| Error::format("checkpoint missing meta.seed"))?,
    )?;
    let config_text = unpack_text(
        entries
            .get("meta.config")
            .ok_or_else(|| Error::format("checkpoint missing meta.config"))?,
    )?;
    let mut params = BTreeMap::new();
    let mut optim = BTreeMap::new();
    for (name, t) in entries {
        if let Some(p) = name.strip_prefix("param.") {
            params.insert(p.to_string(), t);
        } else if name.starts_with("optim.") {
            optim.insert(name, t);
        } else if name.starts_with("meta.") {
            // already consumed
        } else {
            return Err(Error::format(format!(
                "unknown checkpoint entry '{name}'"
            )));
        }
    }
    Ok(CheckpointData {
        version,
        epoch,
        seed,
        config_text,
        params,
        optim,
    })
}

// ---------------------------------------------------------------------------
// Run configuration.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Main,
    Finetune,
    Mixed,
}

impl StageKind {
    pub fn parse(s: &str) -> Result<StageKind> {
        match s {
            "main" => Ok(StageKind::Main),
            "finetune" => Ok(StageKind::Finetune),
            "mixed" => Ok(StageKind::Mixed),
            other => Err(Error::config(format!("unknown stage '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            StageKind::Main => "main",
            StageKind::Finetune => "finetune",
            StageKind::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    L1,
    Feature,
    Mixed,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<LossKind> {
        match s {
            "l1" => Ok(LossKind::L1),
            "feature" => Ok(LossKind::Feature),
            "mixed" => Ok(LossKind::Mixed),
            other => Err(Error::config(format!("unknown loss '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::L1 => "l1",
            LossKind::Feature => "feature",
            LossKind::Mixed => "mixed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub stage: StageKind,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub init_checkpoint: Option<PathBuf>,
    pub width: usize,
    pub kernel_size: usize,
    pub slope: f32,
    pub paper_scale: bool,
    pub loss: LossKind,
    pub lambda: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr: Option<f32>,
    pub ckpt_every: usize,
    pub seed: u64,
    pub deterministic: bool,
}

impl RunConfig {
    /// Desk-scale defaults for a given stage.
    pub fn desk(stage: StageKind, data_dir: PathBuf, out_dir: PathBuf) -> RunConfig {
        RunConfig {
            stage,
            data_dir,
            out_dir,
            init_checkpoint: None,
            width: 16,
            kernel_size: 7,
            slope: 0.2,
            paper_scale: false,
            loss: match stage {
                StageKind::Main => LossKind::L1,
                StageKind::Finetune => LossKind::Feature,
                StageKind::Mixed => LossKind::Mixed,
            },
            lambda: 1e-5,
            epochs: match stage {
                StageKind::Finetune => 15,
                _ => 30,
            },
            batch_size: 8,
            patch_size: 64,
            lr: None,
            ckpt_every: 10,
            seed: 0,
            deterministic: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size % 8 != 0 || self.patch_size == 0 {
            return Err(Error::config(format!(
                "patch size {} must be a positive multiple of 8",
                self.patch_size
            )));
        }
        if self.stage == StageKind::Finetune && self.init_checkpoint.is_none() {
            return Err(Error::config(
                "finetune stage requires an input checkpoint",
            ));
        }
        if self.loss == LossKind::Mixed && self.lambda < 0.0 {
            return Err(Error::config("mixed loss requires lambda >= 0"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch size and epochs must be positive"));
        }
        if self.ckpt_every == 0 {
            return Err(Error::config("checkpoint interval must be positive"));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let mut mc = if self.paper_scale {
            ModelConfig::paper_scale(self.seed)
        } else {
            ModelConfig {
                base_width: self.width,
                seed: self.seed,
                ..ModelConfig::default()
            }
        };
        mc.kernel_size = self.kernel_size;
        mc.slope = self.slope;
        mc
    }

    pub fn base_lr(&self) -> f32 {
        self.lr.unwrap_or(match self.stage {
            StageKind::Finetune => 1e-5,
            _ => 1e-4,
        })
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("stage", self.stage.as_str());
        kv.set("data.dir", self.data_dir.display());
        kv.set("out.dir", self.out_dir.display());
        if let Some(p) = &self.init_checkpoint {
            kv.set("init.checkpoint", p.display());
        }
        kv.set("model.width", self.width);
        kv.set("model.kernel", self.kernel_size);
        kv.set("model.slope", self.slope);
        kv.set("model.paper_scale", self.paper_scale);
        kv.set("loss", self.loss.as_str());
        kv.set("loss.lambda", self.lambda);
        kv.set("train.epochs", self.epochs);
        kv.set("train.batch", self.batch_size);
        kv.set("train.patch", self.patch_size);
        if let Some(lr) = self.lr {
            kv.set("train.lr", lr);
        }
        kv.set("train.ckpt_every", self.ckpt_every);
        kv.set("seed", self.seed);
        kv.set("deterministic", self.deterministic);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<RunConfig> {
        let stage = StageKind::parse(kv.get("stage").unwrap_or("main"))?;
        let mut cfg = RunConfig::desk(
            stage,
            PathBuf::from(kv.get("data.dir").unwrap_or("")),
            PathBuf::from(kv.get("out.dir").unwrap_or("")),
        );
        cfg.init_checkpoint = kv.get("init.checkpoint").map(PathBuf::from);
        cfg.width = kv.get_usize("model.width", cfg.width)?;
        cfg.kernel_size = kv.get_usize("model.kernel", cfg.kernel_size)?;
        cfg.slope = kv.get_f32("model.slope", cfg.slope)?;
        cfg.paper_scale = kv.get_bool("model.paper_scale", cfg.paper_scale)?;
        if let Some(l) = kv.get("loss") {
            cfg.loss = LossKind::parse(l)?;
        }
        cfg.lambda = kv.get_f32("loss.lambda", cfg.lambda)?;
        cfg.epochs = kv.get_usize("train.epochs", cfg.epochs)?;
        cfg.batch_size = kv.get_usize("train.batch", cfg.batch_size)?;
        cfg.patch_size = kv.get_usize("train.patch", cfg.patch_size)?;
        cfg.lr = match kv.get("train.lr") {
            Some(_) => Some(kv.get_f32("train.lr", 0.0)?),
            None => None,
        };
        cfg.ckpt_every = kv.get_usize("train.ckpt_every", cfg.ckpt_every)?;
        cfg.seed = kv.get_u64("seed", cfg.seed)?;
        cfg.deterministic = kv.get_bool("deterministic", cfg.deterministic)?;
        Ok(cfg)
    }
}

/// Model configuration recovered from a checkpoint's embedded config.
pub fn model_config_from_checkpoint(ckpt: &CheckpointData) -> Result<ModelConfig> {
    let kv = KvConfig::parse(&ckpt.config_text)?;
    let cfg = RunConfig::from_kv(&kv)?;
    let mut mc = cfg.model_config();
    mc.seed = ckpt.seed;
    Ok(mc)
}

// ---------------------------------------------------------------------------
// Training loop.

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub epochs_run: usize,
    pub final_val_psnr: f64,
    pub final_val_ssim: f64,
}

fn random_crop(
    x: &Tensor,
    y: &Tensor,
    patch: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    if h < patch || w < patch {
        return Err(Error::config(format!(
            "image {h}x{w} smaller than patch {patch}"
        )));
    }
    if h == patch && w == patch {
        return Ok((x.clone(), y.clone()));
    }
    let oy = rng.gen_range(0..=h - patch);
    let ox = rng.gen_range(0..=w - patch);
    Ok((crop(x, oy, ox, patch)?, crop(y, oy, ox, patch)?))
}

fn crop(t: &Tensor, oy: usize, ox: usize, patch: usize) -> Result<Tensor> {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    let d = t.data();
    let mut out = vec![0.0f32; 3 * patch * patch];
    for c in 0..3 {
        for y in 0..patch {
            let src = c * h * w + (oy + y) * w + ox;
            let dst = c * patch * patch + y * patch;
            out[dst..dst + patch].copy_from_slice(&d[src..src + patch]);
        }
    }
    drop(d);
    Tensor::from_vec(&[1, 3, patch, patch], out)
}

fn stack_batch(items: &[(Tensor, Tensor)]) -> Result<(Tensor, Tensor)> {
    let s = items[0].0.shape();
    let (h, w) = (s[2], s[3]);
    let n = items.len();
    let mut xs = Vec::with_capacity(n * 3 * h * w);
    let mut ys = Vec::with_capacity(n * 3 * h * w);
    for (x, y) in items {
        xs.extend_from_slice(&x.data());
        ys.extend_from_slice(&y.data());
    }
    Ok((
        Tensor::from_vec(&[n, 3, h, w], xs)?,
        Tensor::from_vec(&[n, 3, h, w], ys)?,
    ))
}

/// Splits dataset indices into train and held-out validation: the last 10%
/// of the manifest order, fixed.
pub fn split_indices(n: usize) -> (Vec<usize>, Vec<usize>) {
    let n_val = (n / 10).max(1).min(n.saturating_sub(1));
    let cut = n - n_val;
    ((0..cut).collect(), (cut..n).collect())
}

/// Runs (or resumes) one training stage and returns the final checkpoint.
pub fn train(cfg: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = PairedDataset::scan(&cfg.data_dir)?;
    let (train_idx, val_idx) = split_indices(dataset.len());

    let model = Model::new(cfg.model_config())?;
    let phi = FeatureExtractor::fixed_random();

    if let Some(init) = &cfg.init_checkpoint {
        let ckpt = load_checkpoint(init)?;
        model.load_named(&ckpt.params)?;
    }

    let mut optim = RAdam::new(model.named_parameters());
    let mut start_epoch = 0usize;
    if let Some(path) = resume {
        let ckpt = load_checkpoint(path)?;
        model.load_named(&ckpt.params)?;
        optim.load_state(&ckpt.optim)?;
        start_epoch = ckpt.epoch as usize + 1;
    }

    let schedule = LrSchedule::custom(cfg.base_lr(), cfg.epochs);
    std::fs::create_dir_all(&cfg.out_dir)?;
    let log_path = cfg.out_dir.join("train_log.csv");
    let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;
    let config_text = cfg.to_kv().serialize();
    for line in config_text.lines() {
        writeln!(log, "# {line}")?;
    }
    writeln!(log, "epoch,lr,train_loss,val_psnr,val_ssim")?;

    let mut final_psnr = 0.0;
    let mut final_ssim = 0.0;
    let mut final_ckpt = cfg.out_dir.join("ckpt_final.ckpt");

    for epoch in start_epoch..cfg.epochs {
        let lr = schedule.lr_at(epoch)?;
        let mut order = train_idx.clone();
        order.shuffle(&mut crate::stream_rng(cfg.seed, "shuffle", epoch as u64));

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let load_one = |&idx: &usize| -> Result<(Tensor, Tensor)> {
                let (x, y) = dataset.load(idx)?;
                let mut rng = crate::stream_rng(
                    cfg.seed,
                    "aug",
                    ((epoch as u64) << 32) | idx as u64,
                );
                let (x, y) = random_crop(&x, &y, cfg.patch_size, &mut rng)?;
                crate::sim::augment(&x, &y, &mut rng)
            };
            // Per-item RNG streams make parallel prefetch bit-identical to
            // serial loading; `deterministic` simply forces the serial path.
            let items: Vec<(Tensor, Tensor)> = if cfg.deterministic {
                chunk.iter().map(load_one).collect::<Result<_>>()?
            } else {
                chunk.par_iter().map(load_one).collect::<Result<_>>()?
            };
            let (x, y) = stack_batch(&items)?;

            let tape = GradTape::new();
            let pyramid = model.forward(&tape, &x)?;
            let report = match cfg.loss {
                LossKind::L1 => l1_multiscale(&tape, &pyramid, &y)?,
                LossKind::Feature => feature_loss(&tape, &pyramid, &y, &phi)?,
                LossKind::Mixed => mixed_loss(&tape, &pyramid, &y, &phi, cfg.lambda)?,
            };
            loss_sum += report.value() as f64;
            batches += 1;
            tape.backward(&report.total)?;
            optim.step(lr)?;
            model.zero_grads();
        }
        let train_loss = loss_sum / batches.max(1) as f64;

        let (val_psnr, val_ssim) = validate(&model, &dataset, &val_idx)?;
        final_psnr = val_psnr;
        final_ssim = val_ssim;
        writeln!(
            log,
            "{epoch},{lr:e},{train_loss:.6},{val_psnr:.4},{val_ssim:.5}"
        )?;
        log.flush()?;

        if (epoch + 1) % cfg.ckpt_every == 0 || epoch + 1 == cfg.epochs {
            let path = cfg.out_dir.join(format!("ckpt_e{epoch:04}.ckpt"));
            save_checkpoint(&path, &model, Some(&optim), epoch as u64, cfg.seed, &config_text)?;
            if epoch + 1 == cfg.epochs {
                save_checkpoint(
                    cfg.out_dir.join("ckpt_final.ckpt"),
                    &model,
                    Some(&optim),
                    epoch as u64,
                    cfg.seed,
                    &config_text,
                )?;
                final_ckpt = cfg.out_dir.join("ckpt_final.ckpt");
            }
        }
    }

    Ok(TrainOutcome {
        final_checkpoint: final_ckpt,
        log_path,
        epochs_run: cfg.epochs - start_epoch,
        final_val_psnr: final_psnr,
        final_val_ssim: final_ssim,
    })
}

fn validate(model: &Model, dataset: &PairedDataset, val_idx: &[usize]) -> Result<(f64, f64)> {
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for &i in val_idx {
        let (x, y) = dataset.load(i)?;
        let restored = model.infer(&x)?;
        psnr_sum += metrics::psnr(&restored, &y, 1.0)?;
        ssim_sum += metrics::ssim(&restored, &y)?;
    }
    let n = val_idx.len().max(1) as f64;
    Ok((psnr_sum / n, ssim_sum / n))
}

// ---------------------------------------------------------------------------
// Directory evaluation (the `eval` subcommand).

pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mean_ncc: f64,
}

/// Compares matching PNGs across two directories. Returns per-image rows
/// plus the arithmetic-mean row. Unmatched files are an error listing them.
pub fn evaluate_dirs(
    pred_dir: impl AsRef<Path>,
    gt_dir: impl AsRef<Path>,
    ncc_window: usize,
) -> Result<(Vec<EvalRow>, EvalRow)> {
    let list = |dir: &Path| -> Result<Vec<String>> {
        let mut names = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let name = entry?.file_name().to_string_lossy().into_owned();
            if name.ends_with(".png") {
                names.push(name);
            }
        }
        names.sort();
        Ok(names)
    };
    let (pred_dir, gt_dir) = (pred_dir.as_ref(), gt_dir.as_ref());
    let pred_names = list(pred_dir)?;
    let gt_names = list(gt_dir)?;
    let unmatched: Vec<&String> = pred_names
        .iter()
        .filter(|n| !gt_names.contains(n))
        .chain(gt_names.iter().filter(|n| !pred_names.contains(n)))
        .collect();
    if !unmatched.is_empty() {
        return Err(Error::config(format!(
            "unmatched files between prediction and ground-truth dirs: {unmatched:?}"
        )));
    }
    if pred_names.is_empty() {
        return Err(Error::config("no PNG files to evaluate"));
    }

    let mut rows = Vec::with_capacity(pred_names.len());
    for name in &pred_names {
        let p = crate::data::load_png(pred_dir.join(name))?;
        let g = crate::data::load_png(gt_dir.join(name))?;
        rows.push(EvalRow {
            name: name.clone(),
            psnr: metrics::psnr(&p, &g, 1.0)?,
            ssim: metrics::ssim(&p, &g)?,
            mean_ncc: metrics::ncc_map(&p, &g, ncc_window)?.mean(),
        });
    }
    let n = rows.len() as f64;
    let mean = EvalRow {
        name: "mean".to_string(),
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        mean_ncc: rows.iter().map(|r| r.mean_ncc).sum::<f64>() / n,
    };
    Ok((rows, mean))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u64_and_text_packing_round_trip() {
        for v in [0u64, 1, 0xdead_beef, u64::MAX, 1 << 33] {
            assert_eq!(unpack_u64(&pack_u64(v)).unwrap(), v);
        }
        for s in ["", "a", "key = value\nline two\n", "txt"] {
            assert_eq!(unpack_text(&pack_text(s)).unwrap(), s);
        }
    }

    #[test]
    fn container_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut entries = BTreeMap::new();
        entries.insert(
            "a.weight".to_string(),
            Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 0.5, 0.0]).unwrap(),
        );
        entries.insert("b".to_string(), pack_u64(42));
        write_container(&path, &entries).unwrap();
        let back = read_container(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back["a.weight"].to_vec(), entries["a.weight"].to_vec());
        assert_eq!(unpack_u64(&back["b"]).unwrap(), 42);
    }

    #[test]
    fn run_config_kv_round_trip() {
        let mut cfg = RunConfig::desk(
            StageKind::Finetune,
            PathBuf::from("/tmp/data"),
            PathBuf::from("/tmp/out"),
        );
        cfg.init_checkpoint = Some(PathBuf::from("/tmp/in.ckpt"));
        cfg.lr = Some(3e-4);
        cfg.seed = 7;
        let text = cfg.to_kv().serialize();
        let parsed = RunConfig::from_kv(&KvConfig::parse(&text).unwrap()).unwrap();
        assert_eq!(parsed, cfg);
        // Canonical text survives another round trip verbatim.
        assert_eq!(parsed.to_kv().serialize(), text);
    }

    #[test]
    fn validate_catches_bad_configs() {
        let mut cfg = RunConfig::desk(StageKind::Main, "d".into(), "o".into());
        cfg.patch_size = 63;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let cfg = RunConfig::desk(StageKind::Finetune, "d".into(), "o".into());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = RunConfig::desk(StageKind::Main, "d".into(), "o".into());
        cfg.kernel_size = 6;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn split_is_last_tenth() {
        let (tr, va) = split_indices(200);
        assert_eq!(tr.len(), 180);
        assert_eq!(va, (180..200).collect::<Vec<_>>());
        let (tr, va) = split_indices(5);
        assert_eq!(tr.len(), 4);
        assert_eq!(va, vec![4]);
    }

    #[test]
    fn missing_dataset_fails_before_training() {
        let cfg = RunConfig::desk(
            StageKind::Main,
            PathBuf::from("/nonexistent/nowhere"),
            std::env::temp_dir().join("drbnet-test-never-created"),
        );
        assert!(train(&cfg, None).is_err());
        assert!(!cfg.out_dir.exists(), "no output should appear on startup error");
    }
}
