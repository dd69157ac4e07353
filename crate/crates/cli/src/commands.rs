//! The nine subcommands. Each reads its inputs, writes artifacts through an
//! [`Output`] and finishes with its resolved config and manifest.

use std::path::{Path, PathBuf};

use piba_core::attribution::AttributionMap;
use piba_core::eval::{
    bbox_ratio, dense_input, ehr, insertion_deletion, roar, roar_curve, sanity_check, sensitivity_n, sensitivity_pct,
    unknown_baseline, Curve, Degenerate, EvalReport,
};
use piba_core::models::{
    accuracy, decode_checkpoint, encode_checkpoint, train_classifier, Batch, Checkpoint, Model, ModelKind, TrainConfig,
};
use piba_core::synthdata::{
    blur_image, decode_dataset, encode_dataset, gen_patch_dataset, gen_token_dataset, Dataset, PatchDataset, Split,
    SplitSizes, Splits,
};
use piba_core::{RngStream, Tensor};

use crate::artifacts::{read_map, sha256_hex, Output, RunManifest, MANIFEST_FILE};
use crate::config::{Command, Config};
use crate::error::{reading, CliError, CliResult};
use crate::methods::{self, Attributor};

pub const DATASET_FILE: &str = "dataset.piba";
pub const MODEL_FILE: &str = "model.pibc";
pub const REPORT_FILE: &str = "report.json";

/// Process-level options that do not change any numeric output.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out: PathBuf,
    pub workers: usize,
}

/// Runs `cfg.command` and returns the manifest it wrote.
pub fn run(cfg: &Config, opts: &RunOptions) -> CliResult<RunManifest> {
    cfg.validate()?;
    let mut out = Output::new(opts.out.clone())?;
    let hash = sha256_hex(cfg.to_text().as_bytes());
    match cfg.command {
        Command::GenData => gen_data(cfg, &mut out)?,
        Command::Train => train(cfg, &mut out)?,
        Command::Attribute => attribute(cfg, opts, &hash, &mut out)?,
        Command::EvalSensn => eval_sensn(cfg, opts, &mut out)?,
        Command::EvalInsdel => eval_insdel(cfg, opts, &mut out)?,
        Command::EvalRoar => eval_roar(cfg, opts, &mut out)?,
        Command::EvalEhr => eval_ehr(cfg, &mut out)?,
        Command::SanityCheck => sanity(cfg, opts, &hash, &mut out)?,
        Command::Report => report(&mut out)?,
    }
    out.write(&config_file(cfg.command), cfg.to_text().as_bytes())?;
    let seeds = match cfg.values().get("seed") {
        Some(_) => vec![cfg.get("seed")?],
        None => vec![],
    };
    let manifest = RunManifest {
        experiment: format!("{}-{}", cfg.command.name(), &hash[..12]),
        command: cfg.command.name().to_string(),
        timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        config: cfg.values().clone(),
        seeds,
        artifacts: out.entries().to_vec(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Other(e.to_string()))?;
    let text = format!("{text}\n");
    crate::artifacts::write_atomic(&opts.out.join(manifest_file(cfg.command)), text.as_bytes())?;
    crate::artifacts::write_atomic(&opts.out.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

/// Several commands may share an output directory, so the resolved config and
/// the manifest are named after the command; `manifest.json` is the latest run.
pub fn config_file(command: Command) -> String {
    format!("config_{}.txt", command.name())
}

pub fn manifest_file(command: Command) -> String {
    format!("manifest_{}.json", command.name())
}

/// `path`, or `path/default` when `path` is a directory.
fn resolve(path: &str, default: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_dir() {
        p.join(default)
    } else {
        p.to_path_buf()
    }
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::artifact(path, e))
}

pub fn load_dataset(cfg: &Config) -> CliResult<Dataset> {
    let path = resolve(cfg.required("data")?, DATASET_FILE);
    reading(&path, decode_dataset(&read_file(&path)?))
}

pub fn load_model(cfg: &Config, ds: &Dataset) -> CliResult<Model> {
    let path = resolve(cfg.required("model")?, MODEL_FILE);
    Ok(reading(&path, decode_checkpoint(&read_file(&path)?, Some(methods::model_kind(ds))))?.model)
}

fn patch(ds: &Dataset, command: &str) -> CliResult<PatchDataset> {
    match ds {
        Dataset::Patch(d) => Ok(d.clone()),
        Dataset::Token(_) => Err(CliError::Config(format!("{command} needs an image dataset"))),
    }
}

fn report_name(cfg: &Config) -> String {
    format!("report_{}.json", cfg.command.name())
}

fn new_report(cfg: &Config) -> EvalReport {
    EvalReport::new(cfg.command.name(), serde_json::to_value(cfg.values()).unwrap_or_default())
}

/// Element-wise mean of curves sharing their x-axis.
fn mean_curve(label: &str, curves: &[Curve]) -> CliResult<Curve> {
    let first = curves
        .first()
        .ok_or_else(|| CliError::Other(format!("no curves to average for {label}")))?;
    let mut ys = vec![0.0; first.ys.len()];
    for c in curves {
        for (y, v) in ys.iter_mut().zip(&c.ys) {
            *y += v / curves.len() as f64;
        }
    }
    Ok(Curve::new(label, first.xs.clone(), ys)?)
}

fn gen_data(cfg: &Config, out: &mut Output) -> CliResult<()> {
    let seed = cfg.get("seed")?;
    let sizes = SplitSizes::new(cfg.get("n_train")?, cfg.get("n_val")?, cfg.get("n_test")?);
    let ds = match cfg.str("kind")? {
        "patch" => Dataset::Patch(gen_patch_dataset(seed, sizes)?),
        _ => Dataset::Token(gen_token_dataset(seed, sizes)?),
    };
    out.write(DATASET_FILE, &encode_dataset(&ds))
}

pub fn train_config(cfg: &Config) -> CliResult<TrainConfig> {
    Ok(TrainConfig {
        epochs: cfg.get("epochs")?,
        lr: cfg.get("lr")?,
        batch_size: cfg.get("batch_size")?,
        seed: cfg.get("seed")?,
    })
}

fn train(cfg: &Config, out: &mut Output) -> CliResult<()> {
    let ds = load_dataset(cfg)?;
    let tc = train_config(cfg)?;
    let (model, hist) = train_classifier(&Model::new(methods::model_kind(&ds), tc.seed), &ds, &tc)?;
    let ck = Checkpoint {
        model,
        seed: tc.seed,
        config: serde_json::to_value(&tc).map_err(|e| CliError::Other(e.to_string()))?,
    };
    out.write(MODEL_FILE, &encode_checkpoint(&ck))?;
    let epochs: Vec<f64> = (0..hist.val_acc.len()).map(|e| e as f64).collect();
    out.write("accuracy.csv", Curve::new("val_accuracy", epochs.clone(), hist.val_acc.clone())?.to_csv().as_bytes())?;
    out.write("train_accuracy.csv", Curve::new("train_accuracy", epochs, hist.train_acc.clone())?.to_csv().as_bytes())?;
    if !hist.loss.is_empty() {
        let xs = (1..=hist.loss.len()).map(|e| e as f64).collect();
        out.write("loss.csv", Curve::new("loss", xs, hist.loss.clone())?.to_csv().as_bytes())?;
    }
    let mut rep = new_report(cfg);
    rep.add_scalar("model", "test_accuracy", &[accuracy(&ck.model, &ds, 2)?])?;
    rep.add_scalar("model", "val_accuracy", &[accuracy(&ck.model, &ds, 1)?])?;
    out.write_json(&report_name(cfg), &rep)
}

/// Sample indices selected by `index` and `count`; a count of 0 means the rest
/// of the split.
fn selection(cfg: &Config, ds: &Dataset) -> CliResult<(Split, Vec<usize>)> {
    let split = methods::parse_split(cfg.str("split")?)?;
    let start: usize = cfg.get("index")?;
    let count: usize = cfg.get("count")?;
    let len = methods::split_len(ds, split);
    let end = if count == 0 { len } else { start + count };
    if start >= len || end > len {
        return Err(CliError::Config(format!(
            "samples {start}..{end} exceed the {} split of {len}",
            methods::split_name(split)
        )));
    }
    Ok((split, (start..end).collect()))
}

pub fn map_file(split: Split, index: usize) -> String {
    format!("{}_{index:05}.pibm", methods::split_name(split))
}

fn attribute(cfg: &Config, opts: &RunOptions, hash: &str, out: &mut Output) -> CliResult<()> {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg, &ds)?;
    let (split, indices) = selection(cfg, &ds)?;
    let scale: usize = cfg.get("heatmap_scale")?;
    let attributor = Attributor::new(&model, &methods::reference(&ds), cfg, hash)?;
    let maps = par_map(opts.workers, indices.len(), |k| {
        let i = indices[k];
        let x = methods::sample(&ds, split, i)?;
        attributor.attribute(&x, methods::label(&ds, split, i), i as u64)
    })?;
    for (&i, map) in indices.iter().zip(&maps) {
        let name = map_file(split, i);
        out.write(&name, &crate::artifacts::encode_map(map))?;
        if map.shape().len() == 2 {
            let pgm = name.replace(".pibm", ".pgm");
            out.write(&pgm, &crate::artifacts::heatmap_pgm(map, scale)?)?;
        }
    }
    Ok(())
}

/// `par_map` over CLI results.
fn par_map<T, F>(workers: usize, n: usize, f: F) -> CliResult<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> CliResult<T> + Sync + Send,
{
    let cell = std::sync::Mutex::new(None);
    let r = piba_core::eval::par_map(workers, n, |i| {
        f(i).map_err(|e| {
            let msg = e.to_string();
            cell.lock().unwrap().get_or_insert(e);
            piba_core::Error::InvalidArgument(msg)
        })
    });
    match r {
        Ok(v) => Ok(v),
        Err(e) => Err(cell.into_inner().unwrap().unwrap_or_else(|| e.into())),
    }
}

/// Maps of `split` in the `maps` directory, by sample index.
fn load_maps(cfg: &Config, split: Split, n: usize) -> CliResult<Vec<(usize, AttributionMap)>> {
    let dir = PathBuf::from(cfg.required("maps")?);
    let prefix = format!("{}_", methods::split_name(split));
    let entries = std::fs::read_dir(&dir).map_err(|e| CliError::artifact(&dir, e))?;
    let mut found = vec![];
    for e in entries {
        let e = e.map_err(|e| CliError::artifact(&dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        let Some(idx) = name.strip_prefix(&prefix).and_then(|r| r.strip_suffix(".pibm")) else {
            continue;
        };
        let idx: usize = idx
            .parse()
            .map_err(|_| CliError::artifact(&e.path(), "map file name has no sample index"))?;
        if idx >= n {
            return Err(CliError::artifact(&e.path(), format!("sample {idx} is outside a split of {n}")));
        }
        found.push((idx, e.path()));
    }
    if found.is_empty() {
        return Err(CliError::artifact(&dir, format!("no {prefix}*.pibm maps")));
    }
    found.sort();
    found.into_iter().map(|(i, p)| Ok((i, read_map(&p)?))).collect()
}

fn method_of(maps: &[(usize, AttributionMap)]) -> CliResult<String> {
    let m = &maps[0].1.provenance.method;
    if maps.iter().any(|(_, x)| &x.provenance.method != m) {
        return Err(CliError::Config("maps directory mixes attribution methods".into()));
    }
    Ok(m.clone())
}

/// The "removed" dense input: zeros for images, the unknown sequence for tokens.
fn removed_baseline(model: &Model, x: &Tensor) -> CliResult<Tensor> {
    Ok(match model.kind() {
        ModelKind::Cnn => Tensor::zeros(x.shape().to_vec()),
        ModelKind::Rnn => unknown_baseline(model)?,
    })
}

fn eval_sensn(cfg: &Config, opts: &RunOptions, out: &mut Output) -> CliResult<()> {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg, &ds)?;
    let split = methods::parse_split(cfg.str("split")?)?;
    let maps = load_maps(cfg, split, methods::split_len(&ds, split))?;
    let method = method_of(&maps)?;
    let seed: u64 = cfg.get("seed")?;
    let k_sets: usize = cfg.get("k_sets")?;
    let ns: Vec<usize> = cfg.list("n_values")?;
    let pcts: Vec<f64> = cfg.list("pct_values")?;
    let results = par_map(opts.workers, maps.len(), |k| {
        let (i, map) = &maps[k];
        let sample = methods::sample(&ds, split, *i)?;
        let x = dense_input(&model, &sample)?;
        let base = removed_baseline(&model, &x)?;
        let target = methods::label(&ds, split, *i);
        let mut stream = RngStream::new(seed, *i as u64);
        let s = match model.kind() {
            ModelKind::Cnn => {
                let ns: Vec<usize> = ns.iter().copied().filter(|&n| n <= map.values.len()).collect();
                sensitivity_n(&model, &x, target, &map.values, &base, &ns, k_sets, Degenerate::Zero, &mut stream)?
            }
            ModelKind::Rnn => {
                sensitivity_pct(&model, &x, target, &map.values, &base, &pcts, k_sets, Degenerate::Zero, &mut stream)?
            }
        };
        Ok(s)
    })?;
    let curves: Vec<Curve> = results.iter().map(|s| s.curve.clone()).collect();
    let curve = mean_curve("sensitivity_n", &curves)?;
    let degenerate: Vec<f64> = results
        .iter()
        .map(|s| s.degenerate.iter().filter(|&&d| d).count() as f64 / s.degenerate.len().max(1) as f64)
        .collect();
    let mut rep = new_report(cfg);
    rep.add_scalar(&method, "sensn_degenerate_fraction", &degenerate)?;
    out.write("sensn.csv", curve.to_csv().as_bytes())?;
    rep.add_curve(&method, "sensitivity_n", curve);
    out.write_json(&report_name(cfg), &rep)
}

fn eval_insdel(cfg: &Config, opts: &RunOptions, out: &mut Output) -> CliResult<()> {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg, &ds)?;
    let split = methods::parse_split(cfg.str("split")?)?;
    let maps = load_maps(cfg, split, methods::split_len(&ds, split))?;
    let method = method_of(&maps)?;
    let batch: usize = cfg.get("batch")?;
    let kernel: usize = cfg.get("blur_kernel")?;
    let sigma: f64 = cfg.get("blur_sigma")?;
    let results = par_map(opts.workers, maps.len(), |k| {
        let (i, map) = &maps[k];
        let sample = methods::sample(&ds, split, *i)?;
        let x = dense_input(&model, &sample)?;
        let removed = removed_baseline(&model, &x)?;
        let start = match model.kind() {
            ModelKind::Cnn => blur_image(&x, kernel, sigma)?,
            ModelKind::Rnn => removed.clone(),
        };
        let target = methods::label(&ds, split, *i);
        Ok(insertion_deletion(&model, &x, target, &map.values, batch, &start, &removed)?)
    })?;
    let ins = mean_curve("insertion", &results.iter().map(|r| r.insertion.clone()).collect::<Vec<_>>())?;
    let del = mean_curve("deletion", &results.iter().map(|r| r.deletion.clone()).collect::<Vec<_>>())?;
    let mut rep = new_report(cfg);
    rep.add_scalar(&method, "insertion_auc", &results.iter().map(|r| r.ins_auc).collect::<Vec<_>>())?;
    rep.add_scalar(&method, "deletion_auc", &results.iter().map(|r| r.del_auc).collect::<Vec<_>>())?;
    out.write("insertion.csv", ins.to_csv().as_bytes())?;
    out.write("deletion.csv", del.to_csv().as_bytes())?;
    rep.add_curve(&method, "insertion", ins);
    rep.add_curve(&method, "deletion", del);
    out.write_json(&report_name(cfg), &rep)
}

fn eval_roar(cfg: &Config, opts: &RunOptions, out: &mut Output) -> CliResult<()> {
    let ds = load_dataset(cfg)?;
    let pd = patch(&ds, "eval-roar")?;
    let mut splits = vec![];
    let mut method = String::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let n = pd.get(split).len();
        let maps = load_maps(cfg, split, n)?;
        if maps.len() != n {
            return Err(CliError::artifact(
                Path::new(cfg.required("maps")?),
                format!("{} of {n} {} maps present", maps.len(), methods::split_name(split)),
            ));
        }
        method = method_of(&maps)?;
        splits.push(maps.into_iter().map(|(_, m)| m.values).collect::<Vec<_>>());
    }
    let test = splits.pop().unwrap_or_default();
    let val = splits.pop().unwrap_or_default();
    let train = splits.pop().unwrap_or_default();
    let rates: Vec<f64> = cfg.list("rates")?;
    let points = roar(&pd, &Splits { train, val, test }, &rates, &train_config(cfg)?, opts.workers)?;
    let curve = roar_curve(&points)?;
    let mut rep = new_report(cfg);
    out.write("roar.csv", curve.to_csv().as_bytes())?;
    out.write_json("roar_points.json", &points)?;
    rep.add_curve(&method, "roar", curve);
    out.write_json(&report_name(cfg), &rep)
}

fn eval_ehr(cfg: &Config, out: &mut Output) -> CliResult<()> {
    let ds = load_dataset(cfg)?;
    let pd = patch(&ds, "eval-ehr")?;
    let split = methods::parse_split(cfg.str("split")?)?;
    let maps = load_maps(cfg, split, pd.get(split).len())?;
    let method = method_of(&maps)?;
    let n_thresholds: usize = cfg.get("n_thresholds")?;
    let mut ehrs = vec![];
    let mut ratios = vec![];
    for (i, map) in &maps {
        let b = pd.get(split).bboxes[*i];
        ehrs.push(ehr(&map.values, &b, n_thresholds)?);
        ratios.push(bbox_ratio(&map.values, &b, None)?);
    }
    let mut rep = new_report(cfg);
    rep.add_scalar(&method, "ehr", &ehrs)?;
    rep.add_scalar(&method, "bbox_ratio", &ratios)?;
    let xs = maps.iter().map(|(i, _)| *i as f64).collect();
    out.write("ehr.csv", Curve::new("ehr", xs, ehrs)?.to_csv().as_bytes())?;
    out.write_json(&report_name(cfg), &rep)
}

fn sanity(cfg: &Config, opts: &RunOptions, hash: &str, out: &mut Output) -> CliResult<()> {
    let ds = load_dataset(cfg)?;
    let model = load_model(cfg, &ds)?;
    let (split, indices) = selection(cfg, &ds)?;
    let reference = methods::reference(&ds);
    let samples: Vec<Batch> = indices
        .iter()
        .map(|&i| methods::sample(&ds, split, i))
        .collect::<CliResult<_>>()?;
    let seed: u64 = cfg.get("seed")?;
    let method = cfg.str("method")?.to_string();
    // Core errors carry no CLI kind, so keep the first one for reporting.
    let failure = std::sync::Mutex::new(None::<CliError>);
    let attributor = |m: &Model, k: usize| -> piba_core::Result<Tensor> {
        let i = indices[k];
        let r = Attributor::new(m, &reference, cfg, hash)
            .and_then(|a| a.attribute(&samples[k], methods::label(&ds, split, i), i as u64));
        r.map(|map| map.values).map_err(|e| {
            let msg = e.to_string();
            failure.lock().unwrap().get_or_insert(e);
            piba_core::Error::InvalidArgument(msg)
        })
    };
    let s = match sanity_check(&model, attributor, indices.len(), seed, opts.workers) {
        Ok(s) => s,
        Err(e) => return Err(failure.into_inner().unwrap().unwrap_or_else(|| e.into())),
    };
    let std_curve = Curve::new("sanity_std", s.curve.xs.clone(), s.std.clone())?;
    let mut rep = new_report(cfg);
    out.write("sanity.csv", s.curve.to_csv().as_bytes())?;
    out.write("sanity_std.csv", std_curve.to_csv().as_bytes())?;
    rep.add_curve(&method, "sanity_ssim", s.curve);
    rep.add_curve(&method, "sanity_std", std_curve);
    out.write_json(&report_name(cfg), &rep)
}

/// Merges every `report_*.json` in the output directory into `report.json`.
fn report(out: &mut Output) -> CliResult<()> {
    let dir = out.dir.clone();
    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|e| CliError::artifact(&dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.starts_with("report_") && n.ends_with(".json"))
        .collect();
    names.sort();
    let mut merged = EvalReport::new("report", serde_json::json!({ "sources": names }));
    for n in &names {
        let p = dir.join(n);
        let text = std::fs::read_to_string(&p).map_err(|e| CliError::artifact(&p, e))?;
        let r: EvalReport = serde_json::from_str(&text).map_err(|e| CliError::artifact(&p, e))?;
        merged.merge(r);
    }
    out.write_json(REPORT_FILE, &merged)
}

