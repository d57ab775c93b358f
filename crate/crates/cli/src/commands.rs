use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lesionpaint::eval::{summarize, Summary};
use lesionpaint::formats::{read_image, read_mask, read_weights, write_image, write_mask, write_weights};
use lesionpaint::model::{train_with, LossRecord};
use lesionpaint::{
    fill_lesions, fill_report, generate_corpus, synth_report, synthesize_lesions, toy_segment, wm_intersect,
    DenoiserModel, Error, MetricsReport, NoisePredictor, NoiseSchedule, PhantomSpec, TrainSample,
};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const HEALTHY: &str = "healthy.igrd";
pub const LESIONED: &str = "lesioned.igrd";
pub const LESION_MASK: &str = "lesion_mask.pgm";
pub const WM_MASK: &str = "wm_mask.pgm";
pub const MANIFEST: &str = "manifest.json";

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| anyhow!(Error::Config(format!("missing {what} path (flag or paths.{what} in the config)"))))
}

/// `<output>.config.json`
pub fn sidecar_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".config.json");
    PathBuf::from(s)
}

fn with_suffix(output: &Path, suffix: &str) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

pub fn pair_name(i: usize) -> String {
    format!("pair_{i:04}")
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub seed: u64,
    pub lesion_pixels: usize,
    pub files: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: PhantomSpec,
    pub pairs: Vec<ManifestEntry>,
}

pub fn gen_phantoms(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.paths.output, "output")?;
    let corpus = generate_corpus(cfg.corpus.n, cfg.seed, &cfg.phantom)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut pairs = Vec::with_capacity(corpus.len());
    for (i, p) in corpus.iter().enumerate() {
        let name = pair_name(i);
        let dir = out.join(&name);
        fs::create_dir_all(&dir)?;
        write_image(&dir.join(HEALTHY), &p.healthy)?;
        write_image(&dir.join(LESIONED), &p.lesioned)?;
        write_mask(&dir.join(LESION_MASK), &p.lesion_mask)?;
        write_mask(&dir.join(WM_MASK), &p.wm_mask)?;
        pairs.push(ManifestEntry {
            files: [HEALTHY, LESIONED, LESION_MASK, WM_MASK].iter().map(|f| format!("{name}/{f}")).collect(),
            name,
            seed: p.seed,
            lesion_pixels: p.lesion_mask.count(),
        });
    }
    let lesion_free = pairs.iter().filter(|e| e.lesion_pixels == 0).count();
    write_json(&out.join(MANIFEST), &Manifest { seed: cfg.seed, spec: cfg.phantom.clone(), pairs })?;
    fs::write(out.join("config.json"), cfg.to_json())?;
    info!("wrote {} pairs ({} lesion-free) to {}", corpus.len(), lesion_free, out.display());
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| anyhow!(Error::Format(format!("{}: {e}", path.display()))))
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let corpus = required(&cfg.paths.corpus, "corpus")?;
    let out = required(&cfg.paths.output, "output")?;
    cfg.train.validate()?;
    let manifest = read_manifest(corpus)?;
    let mut data = Vec::with_capacity(manifest.pairs.len());
    for e in &manifest.pairs {
        let dir = corpus.join(&e.name);
        data.push(TrainSample {
            image: read_image(&dir.join(LESIONED))?.to_model_space(),
            lesion_mask: read_mask(&dir.join(LESION_MASK))?,
        });
    }
    let sched = cfg.schedule.build()?;
    let steps_per_epoch = data.len().div_ceil(cfg.train.batch_size);
    let trained = train_with(&data, &cfg.train, &sched, |r: &LossRecord| {
        if r.step.is_multiple_of(steps_per_epoch) {
            info!("epoch {} step {} loss {:.5}", r.epoch, r.step, r.loss);
        }
    })?;
    ensure_parent(out)?;
    write_weights(out, &trained.model)?;
    let mut csv = String::from("epoch,step,loss\n");
    for r in &trained.history {
        csv.push_str(&format!("{},{},{}\n", r.epoch, r.step, r.loss));
    }
    fs::write(with_suffix(out, ".loss.csv"), csv)?;
    fs::write(sidecar_path(out), cfg.to_json())?;
    Ok(())
}

fn load_model(cfg: &RunConfig, image_channels: usize) -> Result<(DenoiserModel, NoiseSchedule)> {
    let path = required(&cfg.paths.weights, "weights")?;
    let model = read_weights(path).with_context(|| format!("loading weights {}", path.display()))?;
    if model.channels() != image_channels {
        bail!(Error::Dimension(format!("weights expect {} channels, image has {image_channels}", model.channels())));
    }
    let sched = model.schedule().clone();
    Ok((model, sched))
}

pub fn fill(cfg: &RunConfig) -> Result<()> {
    let image = read_image(required(&cfg.paths.image, "image")?)?;
    let mask = read_mask(required(&cfg.paths.mask, "mask")?)?;
    let out = required(&cfg.paths.output, "output")?;
    image.ensure_mask_fits(&mask, "lesion mask")?;
    let (model, sched) = load_model(cfg, image.channels())?;
    let filled = fill_lesions(&image, &mask, &cfg.sampler, &model, &sched)?;

    let repaint = mask.dilate(cfg.sampler.mask_dilation);
    let wm = match &cfg.paths.wm_mask {
        Some(p) => read_mask(p)?,
        None => repaint.complement(),
    };
    let truth = cfg.paths.truth.as_deref().map(read_image).transpose()?;
    let mut report = fill_report(&filled, truth.as_ref().unwrap_or(&image), &image, &mask, &wm, &repaint)?;
    if truth.is_none() {
        report.mae_in_mask = None;
        report.psnr_in_mask = None;
    }
    ensure_parent(out)?;
    write_image(out, &filled)?;
    write_json(&with_suffix(out, ".report.json"), &report)?;
    fs::write(sidecar_path(out), cfg.to_json())?;
    info!("filled {} lesion pixels ({} repainted)", mask.count(), repaint.count());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SynthReport {
    pub requested_pixels: usize,
    pub effective_pixels: usize,
    #[serde(flatten)]
    pub metrics: Option<MetricsReport>,
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let image = read_image(required(&cfg.paths.image, "image")?)?;
    let requested = read_mask(required(&cfg.paths.mask, "mask")?)?;
    let out = required(&cfg.paths.output, "output")?;
    image.ensure_mask_fits(&requested, "target mask")?;
    let wm = cfg.paths.wm_mask.as_deref().map(read_mask).transpose()?;
    let target = match &wm {
        Some(wm) => wm_intersect(&requested, wm)?,
        None => requested.clone(),
    };
    if target.is_empty() {
        warn!("target mask is empty after white-matter intersection; output equals input");
    }
    let (model, sched) = load_model(cfg, image.channels())?;
    let synthetic = synthesize_lesions(&image, &target, &cfg.sampler, &model, &sched)?;
    let metrics = wm.as_ref().map(|wm| synth_report(&synthetic, &target, wm, &cfg.segment)).transpose()?;
    ensure_parent(out)?;
    write_image(out, &synthetic)?;
    let report = SynthReport { requested_pixels: requested.count(), effective_pixels: target.count(), metrics };
    write_json(&with_suffix(out, ".report.json"), &report)?;
    fs::write(sidecar_path(out), cfg.to_json())?;
    info!("synthesized {} of {} requested pixels", target.count(), requested.count());
    Ok(())
}

fn pair_dirs(root: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(root).with_context(|| format!("listing {}", root.display()))? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.file_type()?.is_dir() && name.starts_with("pair_") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairEval {
    pub name: String,
    pub fill: Option<MetricsReport>,
    pub dice: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub pairs: Vec<PairEval>,
    pub aggregate: BTreeMap<String, Summary>,
}

/// Scores one prediction directory against its ground-truth pair. A predicted
/// `healthy.igrd` is scored as a fill; a predicted lesion mask (or, failing
/// that, the toy segmentation of a predicted `lesioned.igrd`) is scored by
/// Dice against the true lesion mask.
fn eval_pair(cfg: &RunConfig, name: &str, truth: &Path, pred: &Path) -> Result<PairEval> {
    let healthy = read_image(&truth.join(HEALTHY))?;
    let lesioned = read_image(&truth.join(LESIONED))?;
    let lesion = read_mask(&truth.join(LESION_MASK))?;
    let wm = read_mask(&truth.join(WM_MASK))?;
    let fill = if pred.join(HEALTHY).exists() {
        let filled = read_image(&pred.join(HEALTHY))?;
        let repaint = lesion.dilate(cfg.sampler.mask_dilation);
        Some(fill_report(&filled, &healthy, &lesioned, &lesion, &wm, &repaint)?)
    } else {
        None
    };
    let seg = if pred.join(LESION_MASK).exists() {
        Some(read_mask(&pred.join(LESION_MASK))?)
    } else if pred.join(LESIONED).exists() {
        Some(toy_segment(&read_image(&pred.join(LESIONED))?, &wm, &cfg.segment)?)
    } else {
        None
    };
    let dice = seg.map(|s| lesionpaint::dice(&s, &lesion)).transpose()?;
    if fill.is_none() && dice.is_none() {
        bail!(Error::Format(format!("{}: no {HEALTHY}, {LESION_MASK} or {LESIONED} to score", pred.display())));
    }
    Ok(PairEval { name: name.to_string(), fill, dice })
}

pub fn aggregate(pairs: &[PairEval]) -> BTreeMap<String, Summary> {
    let mut cols: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for p in pairs {
        if let Some(d) = p.dice {
            cols.entry("dice".into()).or_default().push(d);
        }
        let Some(f) = &p.fill else { continue };
        for (c, v) in f.mae_in_mask.iter().flatten().enumerate() {
            cols.entry(format!("mae_in_mask_ch{c}")).or_default().push(*v);
        }
        for (c, v) in f.mean_gap_in_pooled_sd().iter().enumerate() {
            cols.entry(format!("mean_gap_pooled_sd_ch{c}")).or_default().push(*v);
        }
        if let Some(v) = f.outside_mask_max_abs_diff {
            cols.entry("outside_mask_max_abs_diff".into()).or_default().push(v);
        }
    }
    cols.into_iter().map(|(k, v)| (k, summarize(&v))).collect()
}

pub fn eval(cfg: &RunConfig) -> Result<()> {
    let truth = required(&cfg.paths.truth, "truth")?;
    let pred = required(&cfg.paths.prediction, "prediction")?;
    let out = required(&cfg.paths.output, "output")?;
    let t = pair_dirs(truth)?;
    let p = pair_dirs(pred)?;
    let missing: Vec<&String> = t.iter().filter(|n| !p.contains(n)).collect();
    let extra: Vec<&String> = p.iter().filter(|n| !t.contains(n)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        bail!(Error::Format(format!(
            "pair sets differ; missing from prediction: {missing:?}; missing from truth: {extra:?}"
        )));
    }
    if t.is_empty() {
        bail!(Error::Format(format!("no pair_* directories under {}", truth.display())));
    }
    let pairs = t.iter().map(|n| eval_pair(cfg, n, &truth.join(n), &pred.join(n))).collect::<Result<Vec<_>>>()?;
    let report = EvalReport { aggregate: aggregate(&pairs), pairs };
    for (k, s) in &report.aggregate {
        info!("{k}: mean {:.4} std {:.4} n {}", s.mean, s.std, s.n);
    }
    ensure_parent(out)?;
    write_json(out, &report)?;
    fs::write(sidecar_path(out), cfg.to_json())?;
    Ok(())
}
