use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use roadattr_core::dataset::{load_dataset, write_dataset, Dataset, Split};
use roadattr_core::eval::{cooccurrence, evaluate_stream, temporal_diagnostics, EvalReport, TemporalDiagnostics};
use roadattr_core::localmodel::{predict_dataset, GridCache, LocalModel, LocalModelConfig};
use roadattr_core::nncore::checkpoint;
use roadattr_core::pipeline;
use roadattr_core::seqmodel::{SeqEnhancer, SeqEnhancerConfig};
use roadattr_core::stream::{read_stream, write_stream, StreamIndex, StreamRecord};
use roadattr_core::synthgen::Generator;
use roadattr_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{Common, Invalid};

pub const LOCAL_MODEL_FILE: &str = "local_model.json";
pub const LOCAL_CHECKPOINT: &str = "local.ckpt";
pub const LOCAL_STREAM: &str = "local_stream.jsonl";
pub const SEQ_MODEL_FILE: &str = "seq_model.json";
pub const SEQ_STREAM: &str = "seq_stream.jsonl";

fn setup(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = common.threads {
        if t == 0 {
            return Err(Invalid("--threads must be positive".into()).into());
        }
        cfg.threads = t;
    }
    // A pool can only be installed once per process; later calls are no-ops.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    Ok(cfg)
}

fn require_file(path: &Path, what: &str) -> anyhow::Result<()> {
    if !path.is_file() {
        return Err(Invalid(format!("{what} not found: {}", path.display())).into());
    }
    Ok(())
}

fn open_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let manifest = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    require_file(&manifest, "dataset manifest")?;
    Ok(load_dataset(&manifest)?)
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    s.parse::<Split>().map_err(|e| Invalid(format!("--split: {e}")).into())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    require_file(path, "file")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| Invalid(format!("{}: {e}", path.display())).into())
}

fn named_path(spec: &str) -> anyhow::Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(Invalid(format!("expected NAME=PATH, got '{spec}'")).into()),
    }
}

pub fn generate(common: &Common, out: &Path) -> anyhow::Result<()> {
    let cfg = setup(common)?;
    let generator = Generator::new(cfg.generator())?;
    let dataset = generator.generate()?;
    create_dir(out)?;
    let manifest = write_dataset(out, &dataset)?;
    println!(
        "generated {} segments in {} sections -> {}",
        dataset.segments().len(),
        dataset.sections().len(),
        manifest.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    train: &'a TrainConfig,
    best_epoch: usize,
    epochs: &'a [roadattr_core::trainer::EpochRecord],
}

pub fn train_local(
    common: &Common,
    dataset_path: &Path,
    out: &Path,
    loss: Option<&str>,
    frames: Option<&str>,
    epochs: Option<usize>,
) -> anyhow::Result<()> {
    let mut cfg = setup(common)?;
    if let Some(l) = loss {
        cfg.train_local.loss = Some(l.parse()?);
    }
    if let Some(f) = frames {
        cfg.local_model.frames = f.parse()?;
    }
    if let Some(e) = epochs {
        cfg.train_local.epochs = Some(e);
    }
    let dataset = open_dataset(dataset_path)?;
    let store = dataset.features();
    let model_cfg = cfg
        .local_model
        .build(store.height, store.width, store.channels, dataset.attributes().to_vec());
    let train = cfg.train_local();
    let run = pipeline::run_local(&dataset, model_cfg, &train)?;
    create_dir(out)?;
    write_json(&out.join(LOCAL_MODEL_FILE), run.model.config())?;
    checkpoint::save(&run.model, &out.join(LOCAL_CHECKPOINT))?;
    write_text(&out.join("train_local.log"), run.log.text())?;
    write_json(
        &out.join("train_local_summary.json"),
        &TrainSummary {
            train: &train,
            best_epoch: run.best_epoch,
            epochs: &run.log.epochs,
        },
    )?;
    write_stream(&out.join(LOCAL_STREAM), &run.stream)?;
    let best = &run.log.epochs[run.best_epoch - 1];
    println!(
        "local model ({} loss): best epoch {} with val mean macro-F1 {:.2}",
        train.loss_mode.name(),
        run.best_epoch,
        best.val_mean_macro_f1
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SeqModelFile {
    attributes: Vec<(String, SeqEnhancerConfig)>,
}

fn seq_checkpoint(out: &Path, attribute: &str) -> PathBuf {
    out.join("seq").join(format!("{attribute}.ckpt"))
}

pub fn train_seq(
    common: &Common,
    dataset_path: &Path,
    stream: &Path,
    out: &Path,
    loss: Option<&str>,
    epochs: Option<usize>,
) -> anyhow::Result<()> {
    let mut cfg = setup(common)?;
    if let Some(l) = loss {
        cfg.train_seq.loss = Some(l.parse()?);
    }
    if let Some(e) = epochs {
        cfg.train_seq.epochs = Some(e);
    }
    let dataset = open_dataset(dataset_path)?;
    require_file(stream, "local prediction stream")?;
    let local = read_stream(stream)?;
    let train = cfg.train_seq();
    let run = pipeline::run_seq(&dataset, &local, &cfg.seq_model, &train)?;
    create_dir(&out.join("seq"))?;
    let mut log = String::new();
    let mut file = SeqModelFile { attributes: Vec::new() };
    for ((m, l), spec) in run.models.iter().zip(&run.logs).zip(dataset.attributes()) {
        checkpoint::save(m, &seq_checkpoint(out, &spec.name))?;
        file.attributes.push((spec.name.clone(), m.config().clone()));
        log.push_str(l.text());
    }
    write_json(&out.join(SEQ_MODEL_FILE), &file)?;
    write_text(&out.join("train_seq.log"), &log)?;
    write_stream(&out.join(SEQ_STREAM), &run.stream)?;
    for ((spec, l), best) in dataset.attributes().iter().zip(&run.logs).zip(&run.best_epochs) {
        println!(
            "enhancer {}: best epoch {best} with val macro-F1 {:.2}",
            spec.name,
            l.epochs[best - 1].val_mean_macro_f1
        );
    }
    Ok(())
}

fn load_local(dir: &Path) -> anyhow::Result<LocalModel> {
    let cfg: LocalModelConfig = read_json(&dir.join(LOCAL_MODEL_FILE))?;
    let mut model = pipeline::init_local(cfg, 0)?;
    let ckpt = dir.join(LOCAL_CHECKPOINT);
    require_file(&ckpt, "checkpoint")?;
    checkpoint::load_into(&mut model, &ckpt)?;
    Ok(model)
}

fn load_enhancers(dir: &Path, dataset: &Dataset) -> anyhow::Result<Vec<SeqEnhancer>> {
    let file: SeqModelFile = read_json(&dir.join(SEQ_MODEL_FILE))?;
    let by_name: BTreeMap<_, _> = file.attributes.into_iter().collect();
    dataset
        .attributes()
        .iter()
        .map(|spec| {
            let cfg = by_name
                .get(&spec.name)
                .ok_or_else(|| Invalid(format!("no enhancer for attribute '{}'", spec.name)))?;
            let mut m = SeqEnhancer::new(&spec.name, cfg.clone(), &mut roadattr_core::seeded_rng(0, 0))?;
            let ckpt = seq_checkpoint(dir, &spec.name);
            require_file(&ckpt, "checkpoint")?;
            checkpoint::load_into(&mut m, &ckpt)?;
            Ok(m)
        })
        .collect()
}

/// Predictions of a trained run over one split, recomputed from its
/// checkpoints; enhancers are applied when the run has them.
fn predict_run(dir: &Path, dataset: &Dataset, split: Split) -> anyhow::Result<Vec<StreamRecord>> {
    let local = load_local(dir)?;
    let idx = dataset.split_indices(split);
    let grids = GridCache::new(dataset);
    let stream = predict_dataset(&local, dataset, &grids, &idx)?;
    if !dir.join(SEQ_MODEL_FILE).exists() {
        return Ok(stream);
    }
    let enhancers = load_enhancers(dir, dataset)?;
    let index = StreamIndex::new(&stream)?;
    let sections: Vec<&str> = dataset.split_sections(split).map(|s| s.id.as_str()).collect();
    Ok(pipeline::enhance_all(&enhancers, dataset, &index, &sections)?)
}

fn write_cooc(dir: &Path, dataset: &Dataset, truth: &[Vec<Vec<usize>>], pred: &[Vec<Vec<usize>>]) -> anyhow::Result<Vec<TemporalDiagnostics>> {
    create_dir(dir)?;
    let mut out = Vec::new();
    for (a, spec) in dataset.attributes().iter().enumerate() {
        let gt = cooccurrence(spec.num_classes(), truth[a].iter().map(Vec::as_slice))?;
        let pr = cooccurrence(spec.num_classes(), pred[a].iter().map(Vec::as_slice))?;
        write_text(&dir.join(format!("{}.gt.csv", spec.name)), &gt.to_csv(&spec.classes))?;
        write_text(&dir.join(format!("{}.pred.csv", spec.name)), &pr.to_csv(&spec.classes))?;
        out.push(temporal_diagnostics(&gt, &pr, spec)?);
    }
    Ok(out)
}

/// Per attribute, per section label sequences taken from a stream.
fn stream_sequences(dataset: &Dataset, index: &StreamIndex, sections: &[&str]) -> anyhow::Result<Vec<Vec<Vec<usize>>>> {
    dataset
        .attributes()
        .iter()
        .map(|spec| {
            sections
                .iter()
                .map(|s| {
                    let p = index.section(&spec.name, s)?;
                    let len = dataset.section(s).map_or(0, |sp| sp.len);
                    if p.argmax.len() != len {
                        return Err(Invalid(format!(
                            "stream covers {} of {len} segments of section '{s}'",
                            p.argmax.len()
                        ))
                        .into());
                    }
                    Ok(p.argmax.clone())
                })
                .collect()
        })
        .collect()
}

fn truth_sequences(dataset: &Dataset, sections: &[&str]) -> Vec<Vec<Vec<usize>>> {
    (0..dataset.attributes().len())
        .map(|a| {
            sections
                .iter()
                .map(|s| dataset.section_labels(dataset.section(s).expect("known section"), a))
                .collect()
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    common: &Common,
    dataset_path: &Path,
    split: &str,
    streams: &[String],
    checkpoints: &[String],
    exclude: &[String],
    out: &Path,
) -> anyhow::Result<()> {
    setup(common)?;
    let split = parse_split(split)?;
    let dataset = open_dataset(dataset_path)?;
    if streams.is_empty() && checkpoints.is_empty() {
        return Err(Invalid("nothing to evaluate: pass --stream or --checkpoint".into()).into());
    }
    let mut runs: Vec<(String, Vec<StreamRecord>)> = Vec::new();
    for s in streams {
        let (name, path) = named_path(s)?;
        require_file(&path, "prediction stream")?;
        runs.push((name, read_stream(&path)?));
    }
    for c in checkpoints {
        let (name, dir) = named_path(c)?;
        if !dir.is_dir() {
            return Err(Invalid(format!("run directory not found: {}", dir.display())).into());
        }
        runs.push((name, predict_run(&dir, &dataset, split)?));
    }
    let mut names = std::collections::HashSet::new();
    for (n, _) in &runs {
        if !names.insert(n) {
            return Err(Invalid(format!("duplicate run name '{n}'")).into());
        }
    }
    create_dir(out)?;
    let sections: Vec<&str> = dataset.split_sections(split).map(|s| s.id.as_str()).collect();
    let truth = truth_sequences(&dataset, &sections);
    let mut reports: Vec<EvalReport> = Vec::new();
    for (name, records) in &runs {
        let report = evaluate_stream(&dataset, records, split, name, exclude)?;
        write_json(&out.join(format!("{name}.report.json")), &report)?;
        let table = report.to_table();
        write_text(&out.join(format!("{name}.table.txt")), &table)?;
        println!("{table}");
        let pred = stream_sequences(&dataset, &StreamIndex::new(records)?, &sections)?;
        write_cooc(&out.join("cooc").join(name), &dataset, &truth, &pred)?;
        reports.push(report);
    }
    let mut ladder = format!("{:<24}  {:>12}  {:>8}\n", "run", "mean macroF1", "mAP");
    for r in &reports {
        let map = r.mean_ap.map_or("-".into(), |m| format!("{:.2}", 100.0 * m));
        ladder.push_str(&format!("{:<24}  {:>12.2}  {:>8}\n", r.run, r.mean_macro_f1, map));
    }
    write_text(&out.join("ladder.txt"), &ladder)?;
    print!("{ladder}");
    Ok(())
}

pub fn analyze(
    common: &Common,
    dataset_path: &Path,
    pred: &Path,
    gt: Option<&Path>,
    split: Option<&str>,
    out: &Path,
) -> anyhow::Result<()> {
    setup(common)?;
    let dataset = open_dataset(dataset_path)?;
    let split = split.map(parse_split).transpose()?;
    require_file(pred, "prediction stream")?;
    let sections: Vec<&str> = dataset
        .sections()
        .iter()
        .filter(|s| split.is_none_or(|sp| s.split == sp))
        .map(|s| s.id.as_str())
        .collect();
    let pred_seq = stream_sequences(&dataset, &StreamIndex::new(&read_stream(pred)?)?, &sections)?;
    let truth = match gt {
        Some(path) => {
            require_file(path, "reference stream")?;
            stream_sequences(&dataset, &StreamIndex::new(&read_stream(path)?)?, &sections)?
        }
        None => truth_sequences(&dataset, &sections),
    };
    let diags = write_cooc(&out.join("cooc"), &dataset, &truth, &pred_seq)?;
    write_json(&out.join("diagnostics.json"), &diags)?;
    println!("{:<24}  {:>11}  {:>14}  {:>16}", "attribute", "transitions", "duplicated(%)", "spurious_exc(%)");
    for d in &diags {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
        println!(
            "{:<24}  {:>11}  {:>14}  {:>16}",
            d.attribute,
            d.transitions,
            pct(d.duplicated_peak_mass),
            pct(d.spurious_transition_excess)
        );
    }
    Ok(())
}

