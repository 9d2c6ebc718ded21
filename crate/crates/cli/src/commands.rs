use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use protoexplain::attribution::attribution_cascade;
use protoexplain::encoder_explainer::{explain_record, predict_counts};
use protoexplain::eval_report::{accuracy, emit_projection_csv, ProjectionBank};
use protoexplain::pipeline::{
    evaluate, fit_banks, predict_dataset, Banks, FitConfig,
    SamplePrediction,
};
use protoexplain::render::{
    find_gallery_sources, load_rgb, overlay_attribution, overlay_explanation,
    present_prototypes, render_gallery, render_names, save_png,
};
use protoexplain::sem_core::{avg_pool_grid, classify};
use protoexplain::synthetic::{generate, SyntheticConfig};
use protoexplain::tensor_store::{write_tensor, Dataset, Split, TensorBlob};
use protoexplain::Error;

use crate::{FitArgs, RenderArgs, RunArgs, SplitArg, SynthArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Missing(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Missing(_) => 3,
            CliError::Usage(_) => 2,
            CliError::Core(Error::Io { .. } | Error::Image { .. }) => 4,
            CliError::Core(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn out_dir(root: &Path, sub: &str) -> Result<PathBuf> {
    let dir = root.join(sub);
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| {
        CliError::Core(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn open_dataset(manifest: &Path) -> Result<Dataset> {
    if !manifest.exists() {
        return Err(CliError::Missing(format!(
            "manifest {} not found; export activations first",
            manifest.display()
        )));
    }
    Ok(Dataset::open(manifest)?)
}

fn load_banks(out: &Path) -> Result<Banks> {
    let dir = out.join("banks");
    for stem in ["classifier", "kmex"] {
        if !dir.join(format!("{stem}.npy")).exists() {
            return Err(CliError::Missing(format!(
                "no fitted banks in {}; run `protoexplain fit` first",
                dir.display()
            )));
        }
    }
    Ok(Banks::load(&dir)?)
}

fn resolve_depth(banks: &Banks, out: &Path, depth: Option<u32>) -> Result<u32> {
    let depth = match depth {
        Some(d) => d,
        None => *banks.composite.keys().next().ok_or_else(|| {
            CliError::Missing("no composite banks fitted; run `protoexplain fit` first".into())
        })?,
    };
    if !banks.composite.contains_key(&depth) {
        return Err(CliError::Missing(format!(
            "no composite bank from block {depth} in {}; run `protoexplain fit --depth-from {depth}`",
            out.join("banks").display()
        )));
    }
    Ok(depth)
}

fn split_of(arg: Option<SplitArg>) -> Option<Split> {
    arg.map(|s| match s {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    })
}

fn select_samples(dataset: &Dataset, args: &RunArgs) -> Result<Vec<usize>> {
    if args.samples.is_empty() {
        return Ok(dataset.sample_ids(split_of(args.split)));
    }
    if let Some(&bad) = args.samples.iter().find(|&&id| id >= dataset.num_samples()) {
        return Err(CliError::Usage(format!(
            "sample {bad} out of range for {} samples",
            dataset.num_samples()
        )));
    }
    let mut ids = args.samples.clone();
    ids.sort_unstable();
    ids.dedup();
    Ok(ids)
}

pub fn fit(args: &FitArgs) -> Result<()> {
    let dataset = open_dataset(&args.common.manifest)?;
    let manifest = dataset.manifest();
    let depth_from = args.depth_from.unwrap_or(manifest.blocks[0].id);
    manifest.blocks_from(depth_from)?;
    if args.k_per_class == 0 {
        return Err(CliError::Usage("--k-per-class must be at least 1".into()));
    }
    let mut cfg = FitConfig::new(depth_from, args.k_per_class, args.seed);
    if let Some(n) = args.n_init {
        cfg.n_init = n;
    }
    if let Some(cap) = args.row_cap {
        cfg.row_cap = cap;
    }
    let banks = fit_banks(&dataset, &cfg)?;
    let dir = out_dir(&args.common.out, "banks")?;
    banks.save(&dir)?;
    log::info!("wrote {} banks to {}", 2 + banks.composite.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct PredictionSummary<'a> {
    dataset: &'a str,
    columns: Vec<String>,
    accuracy: BTreeMap<String, BTreeMap<&'static str, f64>>,
    predictions: &'a [SamplePrediction],
}

pub fn predict(args: &RunArgs) -> Result<()> {
    let dataset = open_dataset(&args.common.manifest)?;
    let banks = load_banks(&args.common.out)?;
    let split = split_of(args.split);
    let mut predictions = predict_dataset(&dataset, &banks, split)?;
    if !args.samples.is_empty() {
        let wanted = select_samples(&dataset, args)?;
        predictions.retain(|p| wanted.binary_search(&p.sample_id).is_ok());
    }
    let models: Vec<String> = predictions
        .first()
        .map(|p| p.composite.keys().cloned().collect())
        .unwrap_or_default();
    let mut columns: Vec<String> = ["sample_id", "label", "split", "cnn", "kmex"]
        .map(String::from)
        .to_vec();
    columns.extend(models.iter().cloned());

    let mut table = Array2::<i64>::zeros((predictions.len(), columns.len()));
    for (mut row, p) in table.outer_iter_mut().zip(&predictions) {
        let mut values = vec![
            p.sample_id as i64,
            p.label as i64,
            p.split.code(),
            p.cnn as i64,
            p.kmex as i64,
        ];
        values.extend(models.iter().map(|m| p.composite[m] as i64));
        row.assign(&ndarray::ArrayView1::from(&values));
    }

    let mut acc: BTreeMap<String, BTreeMap<&'static str, f64>> = BTreeMap::new();
    for s in [Split::Train, Split::Test] {
        let subset: Vec<&SamplePrediction> = predictions.iter().filter(|p| p.split == s).collect();
        if subset.is_empty() {
            continue;
        }
        let labels: Vec<usize> = subset.iter().map(|p| p.label).collect();
        let mut put = |model: &str, predicted: Vec<usize>| -> Result<()> {
            acc.entry(model.to_string())
                .or_default()
                .insert(s.as_str(), accuracy(&predicted, &labels)?);
            Ok(())
        };
        put("cnn", subset.iter().map(|p| p.cnn).collect())?;
        put("kmex", subset.iter().map(|p| p.kmex).collect())?;
        for m in &models {
            put(m, subset.iter().map(|p| p.composite[m]).collect())?;
        }
    }

    let stem = match split {
        Some(s) => format!("predictions_{s}"),
        None => "predictions_all".to_string(),
    };
    let dir = out_dir(&args.common.out, "reports")?;
    if !predictions.is_empty() {
        write_tensor(&TensorBlob::from_i64_array(&table)?, dir.join(format!("{stem}.npy")))?;
    }
    write_json(
        &dir.join(format!("{stem}.json")),
        &PredictionSummary {
            dataset: &dataset.manifest().dataset,
            columns,
            accuracy: acc,
            predictions: &predictions,
        },
    )
}

#[derive(Serialize)]
struct OutputIndex {
    command: &'static str,
    depth_from: u32,
    files: Vec<String>,
}

fn relative(path: &Path, root: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .into_owned()
}

pub fn explain(args: &RunArgs) -> Result<()> {
    let dataset = open_dataset(&args.common.manifest)?;
    let banks = load_banks(&args.common.out)?;
    let depth = resolve_depth(&banks, &args.common.out, args.depth_from)?;
    let bank = banks.composite_bank(depth)?;
    let ids = select_samples(&dataset, args)?;
    let dir = out_dir(&args.common.out, "maps")?;
    let bank_path = relative(&Banks::composite_path(args.common.out.join("banks"), depth), &args.common.out);
    let files: Vec<String> = ids
        .par_iter()
        .map(|&id| -> Result<Vec<String>> {
            let record = dataset.record(id, depth)?;
            let map = explain_record(&record, bank)?;
            let stem = format!("sample_{id}_d{depth}");
            let npy = map.save(&dir, &stem, &bank_path)?;
            let counts = predict_counts(&map)?;
            let pred_path = dir.join(format!("{stem}_counts.json"));
            write_json(
                &pred_path,
                &serde_json::json!({
                    "sample_id": id,
                    "label": record.label,
                    "class": counts.class,
                    "class_by_mean": counts.class_by_mean,
                    "winning_cluster": counts.winning_cluster,
                    "y": counts.y,
                    "histogram": counts.histogram,
                }),
            )?;
            Ok(vec![relative(&npy, &args.common.out), relative(&pred_path, &args.common.out)])
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    write_json(
        &dir.join(format!("index_d{depth}.json")),
        &OutputIndex {
            command: "explain",
            depth_from: depth,
            files,
        },
    )
}

fn cnn_class(dataset: &Dataset, record: &protoexplain::tensor_store::ActivationRecord) -> Result<usize> {
    let (_, h) = record.encoder_output().expect("at least one block");
    let logits = classify(avg_pool_grid(h.view())?.view(), dataset.classifier())?;
    Ok(logits
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
        .0)
}

fn check_class(dataset: &Dataset, class: Option<usize>) -> Result<()> {
    match class {
        Some(c) if c >= dataset.num_classes() => Err(CliError::Usage(format!(
            "--class {c} outside [0, {})",
            dataset.num_classes()
        ))),
        _ => Ok(()),
    }
}

pub fn attribute(args: &RunArgs) -> Result<()> {
    let dataset = open_dataset(&args.common.manifest)?;
    check_class(&dataset, args.class)?;
    let banks = load_banks(&args.common.out)?;
    let depth = resolve_depth(&banks, &args.common.out, args.depth_from)?;
    let ids = select_samples(&dataset, args)?;
    let dir = out_dir(&args.common.out, "attr")?;
    let files: Vec<String> = ids
        .par_iter()
        .map(|&id| -> Result<Vec<String>> {
            let record = dataset.record(id, depth)?;
            let class = match args.class {
                Some(c) => c,
                None => cnn_class(&dataset, &record)?,
            };
            let maps = attribution_cascade(&record, dataset.classifier(), &banks.composite, class, depth)?;
            maps.iter()
                .map(|m| {
                    let npy = m.save(&dir, &format!("sample_{id}_d{}", m.depth))?;
                    Ok(relative(&npy, &args.common.out))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    write_json(
        &dir.join(format!("index_d{depth}.json")),
        &OutputIndex {
            command: "attribute",
            depth_from: depth,
            files,
        },
    )
}

pub fn eval(args: &RunArgs) -> Result<()> {
    let dataset = open_dataset(&args.common.manifest)?;
    let banks = load_banks(&args.common.out)?;
    let predictions = predict_dataset(&dataset, &banks, split_of(args.split))?;
    let report = evaluate(&dataset, &banks, &predictions)?;
    let dir = out_dir(&args.common.out, "reports")?;
    report.save(&dir, "eval")?;
    emit_projection_csv(
        dir.join("projection.csv"),
        dataset.embeddings().view(),
        dataset.labels(),
        Some(dataset.splits()),
        &[
            ProjectionBank {
                model: "cnn",
                bank: &banks.classifier,
                rescale_to_class_norm: true,
            },
            ProjectionBank {
                model: "kmex",
                bank: &banks.kmex,
                rescale_to_class_norm: false,
            },
        ],
    )?;
    print!("{}", report.to_text());
    Ok(())
}

pub fn render(args: &RenderArgs) -> Result<()> {
    let run = &args.run;
    if !(0.0..=1.0).contains(&args.alpha) {
        return Err(CliError::Usage(format!("--alpha {} outside [0, 1]", args.alpha)));
    }
    let dataset = open_dataset(&run.common.manifest)?;
    check_class(&dataset, run.class)?;
    if dataset.manifest().images.is_none() {
        return Err(CliError::Missing(
            "manifest lists no images; re-export with input images to render".into(),
        ));
    }
    let banks = load_banks(&run.common.out)?;
    let depth = resolve_depth(&banks, &run.common.out, run.depth_from)?;
    let bank = banks.composite_bank(depth)?;
    let ids = select_samples(&dataset, run)?;
    let dir = out_dir(&run.common.out, "render")?;
    let grid = {
        let b = &dataset.manifest().blocks_from(depth)?[0];
        (b.h, b.w)
    };
    let image_of = |id: usize| {
        let path = dataset.image_path(id).expect("images listed");
        load_rgb(path)
    };

    let sources = find_gallery_sources(bank, dataset.iter_records(Some(Split::Train), depth)?)?;
    let files: Vec<String> = ids
        .par_iter()
        .map(|&id| -> Result<Vec<String>> {
            let record = dataset.record(id, depth)?;
            let image = image_of(id)?;
            let map = explain_record(&record, bank)?;
            let class = match run.class {
                Some(c) => c,
                None => cnn_class(&dataset, &record)?,
            };
            let maps = attribution_cascade(&record, dataset.classifier(), &banks.composite, class, depth)?;
            let attribution = maps.last().expect("cascade is non-empty");
            let gallery_sources: Vec<_> = present_prototypes(&map)
                .into_iter()
                .filter_map(|k| sources[k])
                .collect();
            let gallery = render_gallery(&gallery_sources, grid, image_of)?;
            let [e, a, g] = render_names(id);
            let written = [
                save_png(&overlay_explanation(&image, &map, args.alpha), dir.join(e))?,
                save_png(&overlay_attribution(&image, attribution, args.alpha), dir.join(a))?,
                save_png(&gallery, dir.join(g))?,
            ];
            Ok(written.iter().map(|p| relative(p, &run.common.out)).collect())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    write_json(
        &dir.join(format!("index_d{depth}.json")),
        &OutputIndex {
            command: "render",
            depth_from: depth,
            files,
        },
    )
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        num_classes: args.classes,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
        seed: args.seed,
        image_size: (args.image_size > 0).then_some(args.image_size),
        ..SyntheticConfig::default()
    };
    generate(&args.out, &cfg)?;
    println!("{}", args.out.join("manifest.json").display());
    Ok(())
}
