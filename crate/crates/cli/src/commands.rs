use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use randgan::anomaly::{invert_batch, read_scores, write_scores, ScoreRow};
use randgan::data::io::{
    atomic_write, read_image, read_mask, read_tensor_file, write_mask, write_png, write_tensor_file,
};
use randgan::data::{
    load_manifest, preprocess as prep, synth_generate, DatasetManifest, ImageRecord, ImageTensor,
    Label, OutputRange, PreprocessConfig, Split, ValueRange,
};
use randgan::fusion_eval::plot::render_roc_png;
use randgan::fusion_eval::{read_roc, run_protocol, write_roc, ScoreTable};
use randgan::gan::{
    build_pair, freeze_context, history_csv, load_gan, save_gan, tensor_hash, train_gan,
    GanCheckpointMeta, GanModel, Variant,
};
use randgan::segmentation::{
    build_unet, load_unet, pair_hash, postprocess_mask, save_unet, train_seg, transfer_finetune,
    SegCheckpointMeta,
};
use randgan::Tensor;

use crate::config::RunConfig;
use crate::stage::Staging;

type F = f32;

fn manifest_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

/// Stable identifier of a record: its path relative to the manifest.
fn record_id(base: &Path, r: &ImageRecord) -> String {
    r.path
        .strip_prefix(base)
        .unwrap_or(&r.path)
        .to_string_lossy()
        .replace('\\', "/")
}

fn file_name(r: &ImageRecord) -> anyhow::Result<&std::ffi::OsStr> {
    r.path
        .file_name()
        .with_context(|| format!("{} has no file name", r.path.display()))
}

/// Tensor files are read as stored; any other image goes through the
/// configured preprocessing chain.
fn load_input(r: &ImageRecord, cfg: &PreprocessConfig) -> anyhow::Result<ImageTensor<F>> {
    if r.path.extension().is_some_and(|e| e == "tensor") {
        return Ok(read_tensor_file(&r.path)?);
    }
    let img =
        read_image::<F>(&r.path).with_context(|| format!("cannot read {}", r.path.display()))?;
    Ok(prep(&img, None, cfg)?)
}

fn gan_inputs(
    records: &[&ImageRecord],
    cfg: &RunConfig,
    size: usize,
) -> anyhow::Result<Vec<ImageTensor<F>>> {
    let pcfg = PreprocessConfig {
        target_size: size,
        output_range: OutputRange::Symmetric,
        ..cfg.preprocess
    };
    records
        .iter()
        .map(|r| {
            let t = load_input(r, &pcfg)?;
            ensure!(
                t.height() == size && t.width() == size && t.range() == ValueRange::SYMMETRIC,
                "{} is {}x{} in [{}, {}], the model needs {size}x{size} in [-1, 1]",
                r.path.display(),
                t.height(),
                t.width(),
                t.range().lo,
                t.range().hi
            );
            Ok(t)
        })
        .collect()
}

pub fn synth(cfg: &RunConfig, out: &Path) -> anyhow::Result<PathBuf> {
    let st = Staging::begin(out)?;
    let m = synth_generate(&cfg.synth, &st.path(""))?;
    eprintln!("rendered {} images", m.len());
    st.commit(cfg)
}

pub fn preprocess(
    cfg: &RunConfig,
    out: &Path,
    manifest: &Path,
    masks: Option<&Path>,
) -> anyhow::Result<PathBuf> {
    let m = load_manifest(manifest)?;
    let st = Staging::begin(out)?;
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(m.len());
    for r in &m.records {
        let name = file_name(r)?;
        let stem = Path::new(name)
            .file_stem()
            .unwrap_or(name)
            .to_string_lossy()
            .into_owned();
        ensure!(
            seen.insert(stem.clone()),
            "two images share the name `{stem}`"
        );
        let img = read_image::<F>(&r.path)
            .with_context(|| format!("cannot read {}", r.path.display()))?;
        let mask = match masks {
            Some(dir) => Some(
                read_mask(&dir.join(name))
                    .with_context(|| format!("no mask for {}", r.path.display()))?,
            ),
            None => None,
        };
        let t = prep(&img, mask.as_ref(), &cfg.preprocess)?;
        let rel = Path::new("tensors").join(format!("{stem}.tensor"));
        write_tensor_file(&st.path(&rel), &t)?;
        write_png(
            &st.path(Path::new("previews").join(format!("{stem}.png"))),
            &t,
        )?;
        records.push(ImageRecord {
            path: rel,
            ..r.clone()
        });
    }
    atomic_write(
        &st.path("manifest.csv"),
        DatasetManifest::new(records).to_text().as_bytes(),
    )?;
    st.commit(cfg)
}

fn seg_config(cfg: &RunConfig) -> PreprocessConfig {
    PreprocessConfig {
        target_size: cfg.segment.unet.input_size,
        output_range: OutputRange::Unit,
        ..cfg.preprocess
    }
}

pub fn segment_train(
    cfg: &RunConfig,
    out: &Path,
    manifest: &Path,
    masks: &Path,
    init: Option<&Path>,
) -> anyhow::Result<PathBuf> {
    let m = load_manifest(manifest)?;
    let (mut model, spec) = match init {
        Some(p) => {
            let (model, meta) = load_unet::<F>(p)?;
            (model, meta.arch)
        }
        None => (
            build_unet::<F>(&cfg.segment.unet, cfg.seed)?,
            cfg.segment.unet.clone(),
        ),
    };
    let pcfg = PreprocessConfig {
        target_size: spec.input_size,
        ..seg_config(cfg)
    };
    let (mut images, mut targets) = (Vec::new(), Vec::new());
    for r in m.records.iter().filter(|r| r.split == Split::Train) {
        let img = read_image::<F>(&r.path)
            .with_context(|| format!("cannot read {}", r.path.display()))?;
        images.push(prep(&img, None, &pcfg)?);
        let mask = read_mask(&masks.join(file_name(r)?))
            .with_context(|| format!("no mask for {}", r.path.display()))?;
        targets.push(mask.resize_nearest(spec.input_size, spec.input_size)?);
    }
    ensure!(!images.is_empty(), "manifest has no train images");
    let history = match init {
        Some(_) => transfer_finetune(&mut model, &images, &targets, &cfg.segment.train)?,
        None => train_seg(&mut model, &images, &targets, &cfg.segment.train)?,
    };
    let st = Staging::begin(out)?;
    let meta = SegCheckpointMeta {
        arch: spec,
        freeze_fraction: if init.is_some() {
            cfg.segment.train.freeze_fraction
        } else {
            0.0
        },
        seed: model_seed(init, cfg.seed)?,
        train: cfg.segment.train.clone(),
        data_hash: pair_hash(&images, &targets),
    };
    save_unet(&st.path("unet.ckpt"), &model, &meta)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    atomic_write(&st.path("loss.csv"), csv.as_bytes())?;
    st.commit(cfg)
}

// the build seed only matters for parameter layout; a fine-tuned model keeps
// the seed of the checkpoint it started from
fn model_seed(init: Option<&Path>, seed: u64) -> anyhow::Result<u64> {
    Ok(match init {
        Some(p) => randgan::checkpoint::load_meta::<SegCheckpointMeta>(p)?.seed,
        None => seed,
    })
}

pub fn segment_apply(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    manifest: &Path,
) -> anyhow::Result<PathBuf> {
    let (model, meta) = load_unet::<F>(checkpoint)?;
    let m = load_manifest(manifest)?;
    let pcfg = PreprocessConfig {
        target_size: meta.arch.input_size,
        ..seg_config(cfg)
    };
    let st = Staging::begin(out)?;
    for chunk in m.records.chunks(8) {
        let imgs = chunk
            .iter()
            .map(|r| Ok(prep(&read_image::<F>(&r.path)?, None, &pcfg)?))
            .collect::<anyhow::Result<Vec<_>>>()?;
        for (r, soft) in chunk.iter().zip(model.predict_masks(&imgs)?) {
            let mask = postprocess_mask(&soft, &cfg.segment.postprocess)?;
            write_mask(&st.path(Path::new("masks").join(file_name(r)?)), &mask)?;
        }
    }
    st.commit(cfg)
}

pub fn gan_train(
    cfg: &RunConfig,
    out: &Path,
    manifest: &Path,
    label: Label,
    variant: Option<Variant>,
) -> anyhow::Result<PathBuf> {
    if label.is_held_out() {
        bail!("{label} is held out and cannot train a model");
    }
    let mut gcfg = cfg.gan.clone();
    if let Some(v) = variant {
        gcfg.variant = v;
    }
    let m = load_manifest(manifest)?;
    let records: Vec<&ImageRecord> = m
        .records
        .iter()
        .filter(|r| r.label == label && r.split == Split::Train)
        .collect();
    ensure!(!records.is_empty(), "no train images of class {label}");
    let imgs = gan_inputs(&records, cfg, gcfg.arch.image_size)?;
    let train = Tensor::stack(
        &imgs
            .iter()
            .map(ImageTensor::to_tensor)
            .collect::<Vec<_>>()
            .iter()
            .collect::<Vec<_>>(),
    )?;
    let (mut gen, mut disc) = build_pair::<F>(&gcfg)?;
    let history = train_gan(&mut gen, &mut disc, &train, &gcfg)?;
    let context = freeze_context(&gen, &train, gcfg.context_batch, gcfg.seed)?;
    let model = GanModel { gen, disc, context };
    let meta = GanCheckpointMeta::new(&model, &gcfg, Some(label), tensor_hash(&train));
    let st = Staging::begin(out)?;
    save_gan(&st.path("gan.ckpt"), &model, &meta)?;
    atomic_write(&st.path("history.csv"), history_csv(&history).as_bytes())?;
    let mut snapshot = cfg.clone();
    snapshot.gan = gcfg;
    st.commit(&snapshot)
}

/// Inverts `queries` on up to `threads` workers. Every query keeps its own
/// random stream, so the split does not change any result.
fn invert_parallel(
    model: &GanModel<F>,
    queries: &[ImageTensor<F>],
    cfg: &RunConfig,
) -> anyhow::Result<Vec<randgan::anomaly::AnomalyResult<F>>> {
    let indices: Vec<u64> = (0..queries.len() as u64).collect();
    let per = queries.len().div_ceil(cfg.threads.max(1)).max(1);
    let parts = std::thread::scope(|s| {
        let handles: Vec<_> = queries
            .chunks(per)
            .zip(indices.chunks(per))
            .map(|(q, i)| s.spawn(move || invert_batch(model, q, i, &cfg.score)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("inversion worker panicked"))
            .collect::<Vec<_>>()
    });
    let mut out = Vec::with_capacity(queries.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn score(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    manifest: &Path,
    tag: Option<String>,
) -> anyhow::Result<PathBuf> {
    let (model, meta) = load_gan::<F>(checkpoint)?;
    let m = load_manifest(manifest)?;
    let base = manifest_dir(manifest);
    let records: Vec<&ImageRecord> = m
        .records
        .iter()
        .filter(|r| r.split == Split::Test)
        .collect();
    ensure!(!records.is_empty(), "manifest has no test images");
    let queries = gan_inputs(&records, cfg, meta.arch.image_size)?;
    let results = invert_parallel(&model, &queries, cfg)?;
    let tag = tag.unwrap_or_else(|| match meta.label {
        Some(l) => format!("{}-{l}", meta.variant),
        None => meta.variant.to_string(),
    });
    let rows: Vec<ScoreRow> = records
        .iter()
        .zip(results)
        .map(|(r, a)| ScoreRow {
            path: record_id(base, r),
            label: r.label,
            model_tag: tag.clone(),
            residual: a.residual,
            discrimination: a.discrimination,
            score: a.score,
            restarts_used: a.restarts_used,
        })
        .collect();
    let st = Staging::begin(out)?;
    write_scores(&st.path("scores.csv"), &rows)?;
    st.commit(cfg)
}

pub fn evaluate(
    cfg: &RunConfig,
    out: &Path,
    scores_a: &Path,
    scores_b: &Path,
) -> anyhow::Result<PathBuf> {
    let a = read_scores(scores_a)?;
    let b = read_scores(scores_b)?;
    let table = ScoreTable::from_scores(&a, &b, cfg.eval.normalization)?;
    let report = run_protocol(&table, &cfg.eval)?;
    let st = Staging::begin(out)?;
    atomic_write(&st.path("eval_report.json"), report.to_json()?.as_bytes())?;
    write_roc(&st.path("roc.csv"), &report.roc)?;
    eprintln!(
        "mean AUC {:.4} (model A alone {:.4}, model B alone {:.4})",
        report.mean_auc, report.mean_auc_a, report.mean_auc_b
    );
    st.commit(cfg)
}

pub fn plot(cfg: &RunConfig, out: &Path, roc: &[PathBuf], size: u32) -> anyhow::Result<PathBuf> {
    let curves = roc
        .iter()
        .map(|p| read_roc(p))
        .collect::<randgan::Result<Vec<_>>>()?;
    let png = render_roc_png(&curves, size)?;
    let st = Staging::begin(out)?;
    atomic_write(&st.path("roc.png"), &png)?;
    st.commit(cfg)
}
