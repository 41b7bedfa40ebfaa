use std::path::{Path, PathBuf};

use soda_core::behavior::{fit_behavior, load_model, save_mask_cache, save_model};
use soda_core::config::{
    load_behavior_config, load_distance_weights, load_eval_config, load_sim_config,
    load_train_config, parse_quality_kind, BehaviorFitConfig,
};
use soda_core::data_model::{action_components, load_dataset, save_dataset, NUM_ACTIONS};
use soda_core::ope::{collection_probs, evaluate_probs, report_csv, EvalConfig};
use soda_core::policy::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
use soda_core::simulator::simulate_dataset;
use soda_core::training::{
    history_to_csv, symkl_clamped, train, TrainConfig, ValidationHook,
};
use soda_core::{
    AdamState, BehaviorAnnotations, BehaviorModel, CollectionCheckpoint, Dataset, FlatData,
    PolicyCollection,
};

use crate::manifest::RunManifest;
use crate::{config_err, resolve_path, CliError, CliResult};

const LAMBDA_GRID: [f64; 5] = [1.0, 0.4, 0.1, 0.01, 0.001];
const EPSILON_GRID: [f64; 3] = [0.01, 0.03, 0.05];

fn ensure_out_dir(out: &Path) -> CliResult<()> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Other(anyhow::anyhow!("cannot create {}: {e}", out.display())))
}

fn load_data(path: &Path) -> CliResult<(Dataset, PathBuf)> {
    let path = resolve_path(path);
    let ds = load_dataset(&path)
        .map_err(|e| config_err(format!("cannot load dataset {}: {e}", path.display())))?;
    ds.validate()
        .map_err(|e| config_err(format!("invalid dataset {}: {e}", path.display())))?;
    Ok((ds, path))
}

fn load_behavior(path: &Path) -> CliResult<(BehaviorModel, PathBuf)> {
    let path = resolve_path(path);
    let model = load_model(&path)
        .map_err(|e| config_err(format!("cannot load behavior model {}: {e}", path.display())))?;
    Ok((model, path))
}

fn load_ckpt(path: &Path) -> CliResult<(CollectionCheckpoint, PathBuf)> {
    let path = resolve_path(path);
    let ckpt = load_checkpoint(&path)
        .map_err(|e| config_err(format!("cannot load checkpoint {}: {e}", path.display())))?;
    Ok((ckpt, path))
}

fn save_annotations(ann: &BehaviorAnnotations, path: &Path) -> CliResult<()> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), ann)
        .map_err(|e| CliError::Other(e.into()))?;
    Ok(())
}

fn load_annotations(path: &Path) -> CliResult<(BehaviorAnnotations, PathBuf)> {
    let path = resolve_path(path);
    let file = std::fs::File::open(&path)
        .map_err(|e| config_err(format!("cannot open annotations {}: {e}", path.display())))?;
    let ann: BehaviorAnnotations = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| config_err(format!("bad annotations {}: {e}", path.display())))?;
    Ok((ann, path))
}

/// Annotations supplied on the command line are only reusable if their masks
/// were built at the epsilon now in effect; otherwise recompute.
fn annotations_for(
    model: &BehaviorModel,
    dataset: &Dataset,
    epsilon: f64,
    supplied: Option<&Path>,
    manifest: &mut RunManifest,
) -> CliResult<BehaviorAnnotations> {
    if let Some(path) = supplied {
        let (ann, path) = load_annotations(path)?;
        let matches = ann.probs.len() == dataset.transition_count()
            && ann.masks.first().map(|m| m.epsilon) == Some(epsilon);
        if matches {
            manifest.add_input(&path)?;
            return Ok(ann);
        }
        eprintln!(
            "note: annotations {} do not match this dataset/epsilon, recomputing",
            path.display()
        );
    }
    Ok(model.annotate_dataset(dataset, epsilon, false))
}

pub fn cmd_simulate(out: &Path, config: Option<&Path>, n: usize, seed: u64) -> CliResult<()> {
    let sim = match config {
        Some(path) => {
            let path = resolve_path(path);
            load_sim_config(&path)
                .map_err(|e| config_err(format!("config {}: {e}", path.display())))?
        }
        None => Default::default(),
    };
    ensure_out_dir(out)?;
    let mut manifest = RunManifest::new("simulate", Some(seed));
    manifest.add_config("sim", &sim);

    let ds: Dataset =
        simulate_dataset(&sim, n, seed).map_err(|e| config_err(format!("config: {e}")))?;
    let data_path = out.join("dataset.jsonl");
    save_dataset(&ds, &data_path).map_err(|e| CliError::Other(e.into()))?;
    manifest.add_output(&data_path)?;
    manifest.write(out)?;
    println!(
        "simulate: wrote {} trajectories ({} transitions) to {}",
        ds.trajectories.len(),
        ds.transition_count(),
        data_path.display()
    );
    Ok(())
}

pub fn cmd_fit_behavior(
    out: &Path,
    config: Option<&Path>,
    data: &Path,
    exclude_self: bool,
) -> CliResult<()> {
    let cfg = match config {
        Some(path) => {
            let path = resolve_path(path);
            load_behavior_config(&path)
                .map_err(|e| config_err(format!("config {}: {e}", path.display())))?
        }
        None => BehaviorFitConfig::default(),
    };
    let (ds, data_path) = load_data(data)?;
    let weights = match &cfg.weights_file {
        Some(file) => {
            let path = resolve_path(Path::new(file));
            Some(
                load_distance_weights(&path, &ds.schema)
                    .map_err(|e| config_err(format!("weights {}: {e}", path.display())))?,
            )
        }
        None => None,
    };

    ensure_out_dir(out)?;
    let mut manifest = RunManifest::new("fit-behavior", None);
    manifest.add_config("behavior", &cfg);
    manifest.add_input(&data_path)?;

    let model = fit_behavior(&ds, cfg.k, weights.as_deref())
        .map_err(|e| config_err(format!("fit: {e}")))?;
    let annotations = model.annotate_dataset(&ds, cfg.epsilon, exclude_self);

    let model_path = out.join("behavior.json");
    save_model(&model, &model_path).map_err(|e| CliError::Other(e.into()))?;
    let ann_path = out.join("annotations.json");
    save_annotations(&annotations, &ann_path)?;
    let mask_path = out.join("masks.jsonl");
    save_mask_cache(&annotations.masks, &mask_path).map_err(|e| CliError::Other(e.into()))?;

    manifest.add_output(&model_path)?;
    manifest.add_output(&ann_path)?;
    manifest.add_output(&mask_path)?;
    manifest.write(out)?;
    println!(
        "fit-behavior: k={} epsilon={} over {} transitions -> {}",
        cfg.k,
        cfg.epsilon,
        ds.transition_count(),
        model_path.display()
    );
    Ok(())
}

pub struct TrainArgs {
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub behavior: PathBuf,
    pub annotations: Option<PathBuf>,
    pub val_data: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub sweep: bool,
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub epsilon: Option<f64>,
    pub epochs: Option<usize>,
    pub quality: Option<String>,
    pub no_safety: bool,
    pub no_diversity: bool,
}

fn effective_train_config(args: &TrainArgs) -> CliResult<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let path = resolve_path(path);
            load_train_config(&path)
                .map_err(|e| config_err(format!("config {}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(l) = args.lambda {
        cfg.lambda = l;
    }
    if let Some(e) = args.epsilon {
        cfg.epsilon = e;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(q) = &args.quality {
        cfg.quality_kind =
            parse_quality_kind(q).ok_or_else(|| config_err(format!("unknown quality '{q}'")))?;
    }
    if args.no_safety {
        cfg.use_safety = false;
    }
    if args.no_diversity {
        cfg.use_diversity = false;
        cfg.lambda = 0.0;
    }
    cfg.validate()
        .map_err(|e| config_err(format!("config: {e}")))?;
    Ok(cfg)
}

fn run_one_training(
    out: &Path,
    cfg: &TrainConfig,
    ds: &Dataset,
    model: &BehaviorModel,
    supplied_annotations: Option<&Path>,
    val: Option<&(Dataset, PathBuf)>,
    resume: Option<&Path>,
    manifest: &mut RunManifest,
) -> CliResult<()> {
    let annotations = annotations_for(model, ds, cfg.epsilon, supplied_annotations, manifest)?;
    // network inputs reuse the behavior model's standardization so that
    // training and later evaluation see identical features
    let data = FlatData::standardized(ds, &annotations, cfg.use_safety, &model.means, &model.scales);

    let val_bundle = match val {
        Some((vds, _)) => {
            let vann = model.annotate_dataset(vds, cfg.epsilon, false);
            Some(FlatData::standardized(
                vds,
                &vann,
                cfg.use_safety,
                &model.means,
                &model.scales,
            ))
        }
        None => None,
    };
    let eval_cfg = EvalConfig::default();
    let use_safety = cfg.use_safety;
    let hook = val_bundle.as_ref().map(|vdata| {
        move |collection: &PolicyCollection| -> Vec<(f64, f64)> {
            let probs = collection_probs(collection, vdata, use_safety);
            probs
                .iter()
                .map(|p| {
                    let r = evaluate_probs(p, vdata, &eval_cfg);
                    (r.ess, r.value)
                })
                .collect()
        }
    });
    let hook_ref: Option<&ValidationHook<'_, f64>> = hook
        .as_ref()
        .map(|h| h as &dyn Fn(&PolicyCollection) -> Vec<(f64, f64)>);

    let resumed = match resume {
        Some(dir) => {
            let dir = resolve_path(dir);
            let (ckpt, _) = load_ckpt(&dir.join("checkpoint.json"))?;
            let adam_path = dir.join("adam.json");
            let file = std::fs::File::open(&adam_path).map_err(|e| {
                config_err(format!("cannot open {}: {e}", adam_path.display()))
            })?;
            let adam: AdamState = serde_json::from_reader(std::io::BufReader::new(file))
                .map_err(|e| config_err(format!("bad optimizer state: {e}")))?;
            Some((ckpt.collection, adam, ckpt.epochs_done))
        }
        None => None,
    };

    let output =
        train(&data, cfg, resumed, hook_ref).map_err(|e| CliError::Other(anyhow::anyhow!(e)))?;

    let ckpt = CollectionCheckpoint {
        version: CHECKPOINT_VERSION,
        seed: cfg.seed,
        use_safety: cfg.use_safety,
        epsilon: cfg.epsilon,
        epochs_done: cfg.epochs,
        collection: output.collection,
    };
    let ckpt_path = out.join("checkpoint.json");
    save_checkpoint(&ckpt, &ckpt_path).map_err(|e| CliError::Other(e.into()))?;
    let adam_path = out.join("adam.json");
    let file = std::fs::File::create(&adam_path)?;
    serde_json::to_writer(std::io::BufWriter::new(file), &output.adam)
        .map_err(|e| CliError::Other(e.into()))?;
    let hist_path = out.join("history.csv");
    std::fs::write(&hist_path, history_to_csv(&output.history, cfg.k_policies))?;

    manifest.add_output(&ckpt_path)?;
    manifest.add_output(&adam_path)?;
    manifest.add_output(&hist_path)?;
    if let Some(last) = output.history.last() {
        println!(
            "train: lambda={} epsilon={} quality={:?} epochs={} final total loss {:.6}",
            cfg.lambda, cfg.epsilon, cfg.quality_kind, cfg.epochs, last.total
        );
    }
    Ok(())
}

pub fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let base_cfg = effective_train_config(&args)?;
    let (ds, data_path) = load_data(&args.data)?;
    let (model, model_path) = load_behavior(&args.behavior)?;
    let val = match &args.val_data {
        Some(p) => Some(load_data(p)?),
        None => None,
    };
    ensure_out_dir(&args.out)?;
    let mut manifest = RunManifest::new("train", Some(base_cfg.seed));
    manifest.add_config("train", &base_cfg);
    manifest.add_input(&data_path)?;
    manifest.add_input(&model_path)?;
    if let Some((_, vp)) = &val {
        manifest.add_input(vp)?;
    }

    if args.sweep {
        if args.resume.is_some() {
            return Err(config_err("--resume cannot be combined with --sweep"));
        }
        for lambda in LAMBDA_GRID {
            for epsilon in EPSILON_GRID {
                let mut cfg = base_cfg.clone();
                cfg.lambda = lambda;
                cfg.epsilon = epsilon;
                let sub = args
                    .out
                    .join("sweep")
                    .join(format!("lambda-{lambda}_epsilon-{epsilon}"));
                ensure_out_dir(&sub)?;
                run_one_training(
                    &sub,
                    &cfg,
                    &ds,
                    &model,
                    args.annotations.as_deref(),
                    val.as_ref(),
                    None,
                    &mut manifest,
                )?;
            }
        }
    } else {
        run_one_training(
            &args.out,
            &base_cfg,
            &ds,
            &model,
            args.annotations.as_deref(),
            val.as_ref(),
            args.resume.as_deref(),
            &mut manifest,
        )?;
    }
    manifest.write(&args.out)?;
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn cmd_evaluate(
    out: &Path,
    config: Option<&Path>,
    data: &Path,
    behavior: &Path,
    checkpoint: &Path,
    annotations: Option<&Path>,
) -> CliResult<()> {
    let eval_cfg = match config {
        Some(path) => {
            let path = resolve_path(path);
            load_eval_config(&path)
                .map_err(|e| config_err(format!("config {}: {e}", path.display())))?
        }
        None => EvalConfig::default(),
    };
    let (ds, data_path) = load_data(data)?;
    let (model, model_path) = load_behavior(behavior)?;
    let (ckpt, ckpt_path) = load_ckpt(checkpoint)?;
    ensure_out_dir(out)?;
    let mut manifest = RunManifest::new("evaluate", Some(ckpt.seed));
    manifest.add_config("eval", &eval_cfg);
    manifest.add_input(&data_path)?;
    manifest.add_input(&model_path)?;
    manifest.add_input(&ckpt_path)?;

    let ann = annotations_for(&model, &ds, ckpt.epsilon, annotations, &mut manifest)?;
    let data_flat =
        FlatData::standardized(&ds, &ann, ckpt.use_safety, &model.means, &model.scales);
    let eval = soda_core::ope::evaluate_collection(
        &ckpt.collection,
        &data_flat,
        &eval_cfg,
        ckpt.use_safety,
    );

    let mut csv = report_csv(&eval);
    let kept: Vec<usize> = (0..eval.results.len())
        .filter(|&i| eval.results[i].kept)
        .collect();
    let col = |f: &dyn Fn(usize) -> f64| -> (f64, f64) {
        mean_std(&kept.iter().map(|&i| f(i)).collect::<Vec<f64>>())
    };
    let (vm, vs) = col(&|i| eval.results[i].value);
    let (cm, cs) = col(&|i| eval.results[i].ce_vs_behavior);
    let (sm, ss) = col(&|i| eval.results[i].symkl_vs_behavior);
    let (em, es) = col(&|i| eval.results[i].ess);
    let (pm, ps) = mean_std(
        &kept
            .iter()
            .filter_map(|&i| eval.mean_pairwise(i))
            .collect::<Vec<f64>>(),
    );
    let (um, us) = col(&|i| eval.results[i].unseen_action_count as f64);
    csv.push_str(&format!(
        "mean,{vm},{cm},{sm},{em},{pm},{um},{} kept\n",
        kept.len()
    ));
    csv.push_str(&format!("std,{vs},{cs},{ss},{es},{ps},{us},\n"));

    let csv_path = out.join("evaluation.csv");
    std::fs::write(&csv_path, &csv)?;
    let json_path = out.join("evaluation.json");
    let file = std::fs::File::create(&json_path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &eval)
        .map_err(|e| CliError::Other(e.into()))?;

    manifest.add_output(&csv_path)?;
    manifest.add_output(&json_path)?;
    manifest.write(out)?;
    println!(
        "evaluate: {} of {} agents kept (ESS >= {}), results in {}",
        kept.len(),
        eval.results.len(),
        eval_cfg.ess_threshold,
        csv_path.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Filter {
    All,
    FluidTaken,
    VasoTaken,
    LactateGt2,
    MapLt55,
}

impl Filter {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "all" => Some(Filter::All),
            "fluid-taken" => Some(Filter::FluidTaken),
            "vaso-taken" => Some(Filter::VasoTaken),
            "lactate>2" => Some(Filter::LactateGt2),
            "MAP<55" | "map<55" => Some(Filter::MapLt55),
            _ => None,
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            Filter::All => "all",
            Filter::FluidTaken => "fluid_taken",
            Filter::VasoTaken => "vaso_taken",
            Filter::LactateGt2 => "lactate_gt_2",
            Filter::MapLt55 => "map_lt_55",
        }
    }
}

fn feature_index(ds: &Dataset, name: &str) -> CliResult<usize> {
    ds.schema
        .iter()
        .position(|f| f.name == name)
        .ok_or_else(|| config_err(format!("dataset schema has no '{name}' feature")))
}

fn avg_row(probs: &[Vec<f64>], idxs: &[usize]) -> Vec<f64> {
    let mut row = vec![0.0; NUM_ACTIONS];
    for &i in idxs {
        for (r, p) in row.iter_mut().zip(&probs[i]) {
            *r += p;
        }
    }
    let n = idxs.len().max(1) as f64;
    for r in &mut row {
        *r /= n;
    }
    row
}

fn push_csv_row(out: &mut String, label: &str, row: &[f64]) {
    out.push_str(label);
    for v in row {
        out.push_str(&format!(",{v}"));
    }
    out.push('\n');
}

pub fn cmd_report(
    out: &Path,
    data: &Path,
    behavior: &Path,
    checkpoint: &Path,
    annotations: Option<&Path>,
    filter_names: &[String],
    top: usize,
) -> CliResult<()> {
    let filters: Vec<Filter> = if filter_names.is_empty() {
        vec![
            Filter::All,
            Filter::FluidTaken,
            Filter::VasoTaken,
            Filter::LactateGt2,
            Filter::MapLt55,
        ]
    } else {
        filter_names
            .iter()
            .map(|n| Filter::parse(n).ok_or_else(|| config_err(format!("unknown filter '{n}'"))))
            .collect::<CliResult<Vec<Filter>>>()?
    };

    let (ds, data_path) = load_data(data)?;
    let (model, model_path) = load_behavior(behavior)?;
    let (ckpt, ckpt_path) = load_ckpt(checkpoint)?;
    ensure_out_dir(out)?;
    let mut manifest = RunManifest::new("report", Some(ckpt.seed));
    manifest.add_input(&data_path)?;
    manifest.add_input(&model_path)?;
    manifest.add_input(&ckpt_path)?;

    let ann = annotations_for(&model, &ds, ckpt.epsilon, annotations, &mut manifest)?;
    // raw copy for the value filters, standardized copy for the networks
    let flat = FlatData::new(&ds, &ann, ckpt.use_safety);
    let flat_std =
        FlatData::standardized(&ds, &ann, ckpt.use_safety, &model.means, &model.scales);
    let agent_probs = collection_probs(&ckpt.collection, &flat_std, ckpt.use_safety);
    let beh_probs = &ann.probs;
    let k = ckpt.collection.k();

    for filter in &filters {
        let idxs: Vec<usize> = (0..flat.n)
            .filter(|&i| match filter {
                Filter::All => true,
                Filter::FluidTaken => {
                    let (_, f) = action_components(flat.actions[i]).unwrap();
                    f > 0
                }
                Filter::VasoTaken => {
                    let (v, _) = action_components(flat.actions[i]).unwrap();
                    v > 0
                }
                Filter::LactateGt2 => false,
                Filter::MapLt55 => false,
            })
            .collect();
        // value filters need a schema lookup, done outside the closure so a
        // missing feature is a clean config error
        let idxs = match filter {
            Filter::LactateGt2 => {
                let fi = feature_index(&ds, "lactate")?;
                (0..flat.n).filter(|&i| flat.state(i)[fi] > 2.0).collect()
            }
            Filter::MapLt55 => {
                let fi = feature_index(&ds, "map")?;
                (0..flat.n).filter(|&i| flat.state(i)[fi] < 55.0).collect()
            }
            _ => idxs,
        };

        let mut csv = String::from("row");
        for a in 0..NUM_ACTIONS {
            csv.push_str(&format!(",p{a}"));
        }
        csv.push('\n');
        push_csv_row(&mut csv, "behavior", &avg_row(beh_probs, &idxs));
        for (i, probs) in agent_probs.iter().enumerate() {
            push_csv_row(&mut csv, &format!("agent_{i}"), &avg_row(probs, &idxs));
        }
        let path = out.join(format!("report_{}.csv", filter.file_stem()));
        std::fs::write(&path, &csv)?;
        manifest.add_output(&path)?;
        println!(
            "report: filter {} matched {} of {} transitions -> {}",
            filter.file_stem(),
            idxs.len(),
            flat.n,
            path.display()
        );
    }

    // states where the agents disagree most: mean pairwise symKL over the
    // collection, full per-agent distributions dumped for the top entries
    let mut scored: Vec<(f64, usize)> = (0..flat.n)
        .map(|i| {
            let mask = &flat.masks[i];
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for a in 0..k {
                for b in (a + 1)..k {
                    sum += symkl_clamped(&agent_probs[a][i], &agent_probs[b][i], mask);
                    pairs += 1;
                }
            }
            (if pairs > 0 { sum / pairs as f64 } else { 0.0 }, i)
        })
        .collect();
    scored.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(std::cmp::Ordering::Equal).then(x.1.cmp(&y.1)));
    scored.truncate(top);

    let mut csv = String::from("rank,transition,pairwise_symkl,row");
    for a in 0..NUM_ACTIONS {
        csv.push_str(&format!(",p{a}"));
    }
    csv.push('\n');
    for (rank, (score, i)) in scored.iter().enumerate() {
        push_csv_row(
            &mut csv,
            &format!("{rank},{i},{score},behavior"),
            &beh_probs[*i],
        );
        for (a, probs) in agent_probs.iter().enumerate() {
            push_csv_row(
                &mut csv,
                &format!("{rank},{i},{score},agent_{a}"),
                &probs[*i],
            );
        }
    }
    let top_path = out.join("top_diversity.csv");
    std::fs::write(&top_path, &csv)?;
    manifest.add_output(&top_path)?;
    manifest.write(out)?;
    Ok(())
}
