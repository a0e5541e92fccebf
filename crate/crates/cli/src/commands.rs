//! One function per subcommand. Each loads its inputs, calls the library and
//! writes the library's own serialization of the result.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use saekit::autointerp::{
    build_mcq_items, decomposition_examples, generate_explanation, mcq_eval, synthetic_example_text,
    top_activating_examples, write_jsonl, CannedClient, ChatClient, ExampleWindow, ExplanationRecord, HttpChatClient,
    McqSpec, RandomChoiceClient, N_OPTIONS,
};
use saekit::data::{
    gen_compositional, read_activations, write_activations, ActivationBatch, LabelLayout, SyntheticSpec,
};
use saekit::evalsuite::{self, core_metrics, sparse_probe, tpp, EvalReport, NamedProbe};
use saekit::metasae::{decomposition_graph, train_meta, write_graph, MetaSae};
use saekit::sae::Sae;
use saekit::stitching::{build_report, interpolate, write_report, write_trajectory_csv};
use saekit::trainer::{load_checkpoint, read_weights_header, save_checkpoint, write_history, TrainState, Trainer};
use saekit::{Dtype, Error, Scalar};

use crate::config::{ConfigError, DataSection, MockKind, RunConfig};

/// Runs `$f::<f32>` or `$f::<f64>` according to `$dtype`.
macro_rules! with_dtype {
    ($dtype:expr, $f:ident($($arg:expr),* $(,)?)) => {
        match $dtype {
            Dtype::F32 => $f::<f32>($($arg),*),
            Dtype::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn weights_dtype(path: &Path) -> Result<Dtype> {
    let bytes = read_file(path)?;
    let (header, _) = read_weights_header(&bytes).with_context(|| format!("reading {}", path.display()))?;
    Ok(header.dtype)
}

/// The wider of the stored precisions.
fn common_dtype(paths: &[&Path]) -> Result<Dtype> {
    let mut out = Dtype::F32;
    for p in paths {
        if weights_dtype(p)? == Dtype::F64 {
            out = Dtype::F64;
        }
    }
    Ok(out)
}

fn load_sae<T: Scalar>(path: &Path) -> Result<Sae<T>> {
    load_checkpoint(path).with_context(|| format!("loading {}", path.display()))
}

fn load_data<T: Scalar>(path: &Path) -> Result<ActivationBatch<T>> {
    read_activations(path).with_context(|| format!("loading {}", path.display()))
}

/// `model.saew` -> `model.<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

/// Explicit path, else `data.path` from the config.
pub fn data_path(arg: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    arg.or_else(|| cfg.data.path.clone())
        .ok_or_else(|| ConfigError("no activation file: pass --data or set data.path".into()).into())
}

fn file_ref(path: &Path) -> String {
    path.file_name()
        .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn synthetic_spec(d: &DataSection) -> saekit::Result<SyntheticSpec<f64>> {
    let mut spec = SyntheticSpec::new(d.n_dims, d.groups.clone(), d.init, d.seed)?
        .with_coeffs(d.coeff_low, d.coeff_high)
        .with_noise(d.noise_std);
    spec.group_weights = d.group_weights.clone();
    spec.validate()?;
    Ok(spec)
}

pub fn gen(cfg: &RunConfig, out: &Path, count: Option<usize>) -> Result<()> {
    let spec = synthetic_spec(&cfg.data)?;
    let batch = gen_compositional(&spec, count.unwrap_or(cfg.data.count))?;
    write_activations(&batch, out)?;
    println!(
        "wrote {} samples of dimension {} to {}",
        batch.count(),
        batch.n_dims(),
        out.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let dtype = match resume {
        Some(p) => weights_dtype(p)?,
        None => cfg.sae.dtype,
    };
    with_dtype!(dtype, train_as(cfg, data, out, resume))
}

fn train_as<T: Scalar>(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let batch: ActivationBatch<T> = load_data(data)?;
    let (sae, state) = match resume {
        None => {
            let sae_cfg = cfg.sae.to_sae_config(batch.n_dims());
            sae_cfg.validate()?;
            saekit::trainer::train(sae_cfg, cfg.train.clone(), &batch)?
        }
        Some(p) => {
            let sae = load_sae::<T>(p)?;
            let state_path = sibling(p, "state.json");
            let state = TrainState::from_json(&read_file(&state_path)?)?;
            let mut t = Trainer::resume(sae, state, cfg.train.clone(), &batch)?;
            t.run()?;
            t.finish()
        }
    };
    save_checkpoint(&sae, out)?;
    write_history(&state.history, sibling(out, "history.json"))?;
    saekit::io::write_atomic(sibling(out, "state.json"), &state.to_json()?)?;
    let loss = state.history.last().map_or(f64::NAN, |h| h.total);
    println!(
        "trained {} epochs ({} steps), final loss {loss:.6}",
        state.epoch, state.step
    );
    Ok(())
}

pub fn stitch(
    cfg: &RunConfig,
    small: &Path,
    large: &Path,
    data: &Path,
    out: &Path,
    trajectory: Option<&Path>,
) -> Result<()> {
    with_dtype!(
        common_dtype(&[small, large])?,
        stitch_as(cfg, small, large, data, out, trajectory)
    )
}

fn stitch_as<T: Scalar>(
    cfg: &RunConfig,
    small: &Path,
    large: &Path,
    data: &Path,
    out: &Path,
    trajectory: Option<&Path>,
) -> Result<()> {
    let (small, large) = (load_sae::<T>(small)?, load_sae::<T>(large)?);
    let batch: ActivationBatch<T> = load_data(data)?;
    let report = build_report(&small, &large, &batch, cfg.stitch.threshold, cfg.stitch.order_seed)?;
    write_report(&report, out)?;
    if let Some(t) = trajectory {
        write_trajectory_csv(&report.trajectory, t)?;
    }
    let novel = report
        .latents
        .iter()
        .filter(|l| l.label == saekit::stitching::LatentLabel::Novel)
        .count();
    println!(
        "{novel} novel of {} large latents, {} families, mse {:.6} -> {:.6}",
        report.large_m,
        report.families.len(),
        report.small_mse,
        report.large_mse
    );
    Ok(())
}

pub fn interpolate_cmd(cfg: &RunConfig, small: &Path, large: &Path, data: &Path, out: &Path) -> Result<()> {
    with_dtype!(
        common_dtype(&[small, large])?,
        interpolate_as(cfg, small, large, data, out)
    )
}

fn interpolate_as<T: Scalar>(cfg: &RunConfig, small: &Path, large: &Path, data: &Path, out: &Path) -> Result<()> {
    let (small, large) = (load_sae::<T>(small)?, load_sae::<T>(large)?);
    let batch: ActivationBatch<T> = load_data(data)?;
    let points = interpolate(&small, &large, &batch, cfg.stitch.threshold, cfg.stitch.order_seed)?;
    write_trajectory_csv(&points, out)?;
    println!("{} trajectory points", points.len());
    Ok(())
}

pub fn meta(cfg: &RunConfig, base: &Path, out: &Path, weights: Option<&Path>) -> Result<()> {
    with_dtype!(weights_dtype(base)?, meta_as(cfg, base, out, weights))
}

fn meta_as<T: Scalar>(cfg: &RunConfig, base_path: &Path, out: &Path, weights: Option<&Path>) -> Result<()> {
    cfg.meta.validate()?;
    let base = load_sae::<T>(base_path)?;
    let meta = train_meta(&base, &cfg.meta, &file_ref(base_path))?;
    let graph = decomposition_graph(&meta, &base)?;
    write_graph(&graph, out)?;
    if let Some(w) = weights {
        save_checkpoint(&meta.inner, w)?;
    }
    println!(
        "{} meta-latents, variance explained {:.4}, {} edges",
        meta.meta_m(),
        graph.variance_explained,
        graph.edges.len()
    );
    Ok(())
}

pub fn eval(cfg: &RunConfig, sae: &Path, data: &Path, out: &Path) -> Result<()> {
    with_dtype!(weights_dtype(sae)?, eval_as(cfg, sae, data, out))
}

fn feature_name(cfg: &DataSection, g: usize, f: usize) -> String {
    cfg.group_names
        .as_ref()
        .and_then(|n| n.get(g))
        .and_then(|n| n.get(f))
        .cloned()
        .unwrap_or_else(|| format!("g{g}:f{f}"))
}

/// Label layout from `data.groups`, checked against the labels present.
fn checked_layout(cfg: &DataSection, labels: &[u32]) -> Result<LabelLayout> {
    let total: usize = cfg.groups.iter().product();
    if cfg.groups.is_empty() || total == 0 {
        return Err(ConfigError("data.groups must be a nonempty list of positive sizes".into()).into());
    }
    if let Some(&l) = labels.iter().find(|&&l| l as usize >= total) {
        return Err(ConfigError(format!("label {l} does not fit data.groups {:?}", cfg.groups)).into());
    }
    Ok(LabelLayout::new(cfg.groups.clone()))
}

/// Core metrics, plus one-vs-rest sparse probes per labelled feature and
/// TPP over `eval.tpp_group` when the data carries labels.
pub fn build_eval_report<T: Scalar>(cfg: &RunConfig, sae: &Sae<T>, batch: &ActivationBatch<T>) -> Result<EvalReport> {
    let metrics = core_metrics(sae, batch)?;
    let mut probes = Vec::new();
    let mut notices = Vec::new();
    let mut tpp_result = None;
    match batch.labels() {
        None => notices.push("no labels: probing skipped".to_string()),
        Some(labels) => {
            let layout = checked_layout(&cfg.data, labels)?;
            let e = &cfg.eval;
            for (g, &size) in cfg.data.groups.iter().enumerate() {
                let classes = layout.group_classes(labels, g);
                for f in 0..size {
                    let name = feature_name(&cfg.data, g, f);
                    let y: Vec<bool> = classes.iter().map(|&c| c == f).collect();
                    match sparse_probe(sae, batch, &y, e.top_n, e.seed) {
                        Ok(result) => probes.push(NamedProbe { name, result }),
                        Err(Error::SingleClass(m)) => notices.push(format!("probe {name} skipped: {m}")),
                        Err(err) => return Err(err.into()),
                    }
                }
            }
            let Some(&n_classes) = cfg.data.groups.get(e.tpp_group) else {
                return Err(ConfigError(format!(
                    "eval.tpp_group {} out of range for {} groups",
                    e.tpp_group,
                    cfg.data.groups.len()
                ))
                .into());
            };
            let classes = layout.group_classes(labels, e.tpp_group);
            match tpp(sae, batch, &classes, n_classes, e.n_ablate, e.seed) {
                Ok(r) => tpp_result = Some(r),
                Err(Error::SingleClass(m)) => notices.push(format!("tpp skipped: {m}")),
                Err(err) => return Err(err.into()),
            }
        }
    }
    Ok(EvalReport {
        metrics,
        probes,
        tpp: tpp_result,
        notices,
    })
}

fn eval_as<T: Scalar>(cfg: &RunConfig, sae: &Path, data: &Path, out: &Path) -> Result<()> {
    let sae = load_sae::<T>(sae)?;
    let batch: ActivationBatch<T> = load_data(data)?;
    let report = build_eval_report(cfg, &sae, &batch)?;
    evalsuite::write_report(&report, out)?;
    println!(
        "mse {:.6}, fvu {:.4}, mean L0 {:.3}, {} probes",
        report.metrics.mse,
        report.metrics.fvu,
        report.metrics.mean_l0,
        report.probes.len()
    );
    for n in &report.notices {
        eprintln!("note: {n}");
    }
    Ok(())
}

pub struct AutointerpPaths<'a> {
    pub sae: &'a Path,
    pub data: &'a Path,
    pub out: &'a Path,
    /// Meta-SAE weights trained on `sae`'s decoder; enables the MCQ stage.
    pub meta: Option<&'a Path>,
    pub meta_out: PathBuf,
    pub mcq_out: PathBuf,
}

pub fn autointerp(cfg: &RunConfig, paths: &AutointerpPaths<'_>) -> Result<()> {
    let mut files = vec![paths.sae];
    files.extend(paths.meta);
    with_dtype!(common_dtype(&files)?, autointerp_as(cfg, paths))
}

fn make_client(cfg: &RunConfig) -> Box<dyn ChatClient> {
    let a = &cfg.autointerp;
    match &a.mock {
        Some(MockKind::Canned(text)) => Box::new(CannedClient(text.clone())),
        Some(MockKind::Random) => Box::new(RandomChoiceClient::new(a.seed)),
        None => Box::new(HttpChatClient::from_env(&a.base_url, &a.model, &a.token_env)),
    }
}

fn autointerp_as<T: Scalar>(cfg: &RunConfig, paths: &AutointerpPaths<'_>) -> Result<()> {
    let a = &cfg.autointerp;
    let sae = load_sae::<T>(paths.sae)?;
    let batch: ActivationBatch<T> = load_data(paths.data)?;
    let layout = batch.labels().map(|l| checked_layout(&cfg.data, l)).transpose()?;
    let client = make_client(cfg);

    let latents: Vec<usize> = a.latents.clone().unwrap_or_else(|| (0..sae.m()).collect());
    let mut records: Vec<ExplanationRecord> = Vec::new();
    for &l in &latents {
        let top = top_activating_examples(&sae, &batch, l, a.n_examples)?;
        if top.never_active {
            eprintln!("note: latent {l} never fires, skipped");
            continue;
        }
        let windows: Vec<ExampleWindow> = top
            .examples
            .iter()
            .map(|&(sample, activation)| ExampleWindow {
                sample,
                activation,
                text: match (&layout, batch.labels()) {
                    (Some(layout), Some(labels)) => {
                        synthetic_example_text(labels[sample], layout, cfg.data.group_names.as_deref())
                    }
                    _ => format!("sample {sample}"),
                },
            })
            .collect();
        records.push(generate_explanation(client.as_ref(), l, &windows)?);
    }
    write_jsonl(&records, paths.out)?;
    println!("explained {} of {} latents", records.len(), latents.len());

    let Some(meta_path) = paths.meta else {
        return Ok(());
    };
    let meta = MetaSae {
        inner: load_sae::<T>(meta_path)?,
        base_ref: file_ref(paths.sae),
        normalize_rows: cfg.meta.normalize_rows,
    };
    let graph = decomposition_graph(&meta, &sae)?;
    let mut meta_records = Vec::new();
    for j in 0..meta.meta_m() {
        let windows = decomposition_examples(&graph, &records, j, a.n_examples);
        if windows.is_empty() {
            continue;
        }
        meta_records.push(generate_explanation(client.as_ref(), j, &windows)?);
    }
    write_jsonl(&meta_records, &paths.meta_out)?;

    let latent_text: Vec<String> = records.iter().map(|r| r.explanation.clone()).collect();
    let specs: Vec<McqSpec> = records
        .iter()
        .enumerate()
        .filter_map(|(target, r)| {
            let d = graph.decompositions.iter().find(|d| d.latent_index == r.latent)?;
            let meta_explanations: Vec<String> = d
                .components
                .iter()
                .filter_map(|c| meta_records.iter().find(|m| m.latent == c.meta_latent))
                .map(|m| m.explanation.clone())
                .collect();
            (!meta_explanations.is_empty()).then_some(McqSpec {
                item_id: r.latent,
                meta_explanations,
                target,
            })
        })
        .collect();
    if specs.is_empty() || latent_text.len() < N_OPTIONS {
        eprintln!("note: MCQ needs {N_OPTIONS} explained latents and one explained meta-latent, skipped");
        return Ok(());
    }
    let items = build_mcq_items(&specs, &latent_text, a.seed)?;
    // the random mock draws from one shared stream, so keep its order fixed
    let workers = if matches!(a.mock, Some(MockKind::Random)) {
        1
    } else {
        a.concurrency
    };
    let outcome = mcq_eval(client.as_ref(), items, workers)?;
    write_jsonl(&outcome.items, &paths.mcq_out)?;
    println!(
        "mcq accuracy {:.3} over {} items ({} flagged)",
        outcome.accuracy,
        outcome.items.len(),
        outcome.n_flagged
    );
    Ok(())
}
