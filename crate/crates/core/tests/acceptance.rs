//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if any
//! criterion fails.

mod common;

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use protoexplain::attribution::{att_score, refine, AttributionMap};
use protoexplain::encoder_explainer::{explain, predict_counts, CompositeFeature, ExplanationMap};
use protoexplain::kmeans::{derive_seed, fit, KMeansConfig};
use protoexplain::kmex::KmexModel;
use protoexplain::pipeline::{composite_model_name, fit_banks, predict_dataset, FitConfig};
use protoexplain::sem_core::{
    avg_pool, classify, sem_forward, BankLocation, BankMeta, LinearClassifier, PrototypeBank,
};
use protoexplain::tensor_store::{
    decode, encode, read_tensor, write_tensor, Dataset, Split, TensorBlob,
};

type Outcome = Result<String, String>;

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel)
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect()
}

fn commutativity() -> Outcome {
    const PAIRS: usize = 10_000;
    let start = Instant::now();
    let worst = (0..PAIRS)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0xC0, i));
            let hs = 10f32.powf(rng.random_range(-1.0..1.0));
            let cs = 10f32.powf(rng.random_range(-1.0..1.0));
            let h = Array2::from_shape_vec((49, 512), uniform_vec(&mut rng, 49 * 512, hs)).unwrap();
            let w = Array2::from_shape_vec((512, 10), uniform_vec(&mut rng, 512 * 10, cs)).unwrap();
            let clf = LinearClassifier::new(w.clone()).unwrap();
            let a = sem_forward(h.view(), &clf).unwrap();
            let b = classify(avg_pool(h.view()).unwrap().view(), &clf).unwrap();
            let dev = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max) as f64;
            let h_inf = h.iter().fold(0f32, |m, v| m.max(v.abs())) as f64;
            let c_inf = w.iter().fold(0f32, |m, v| m.max(v.abs())) as f64;
            (dev / (h_inf * c_inf).max(1.0), dev)
        })
        .reduce(|| (0.0, 0.0), |a, b| (a.0.max(b.0), a.1.max(b.1)));
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{PAIRS} pairs, max deviation/scale {:.3e}, max abs {:.3e}, {secs:.2}s",
        worst.0, worst.1
    );
    if worst.0 < 1e-5 && secs < 10.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn kmeans_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4B);
    let mut worst = 1.0f64;
    for inst in 0..100 {
        let n = rng.random_range(3..=10);
        let k = rng.random_range(1..=3usize);
        let d = rng.random_range(1..=2);
        let pts: Vec<f32> = (0..n * d).map(|_| rng.random_range(-5.0f32..5.0)).collect();
        let points = Array2::from_shape_vec((n, d), pts.clone()).unwrap();
        let rows: Vec<Vec<f64>> = pts.chunks(d).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let optimum = common::exhaustive_kmeans_optimum(&rows, k);
        let res = fit(points.view(), &KMeansConfig::new(k, inst)).map_err(|e| e.to_string())?;
        if res.inertia_history.windows(2).any(|w| w[1] > w[0]) {
            return Err(format!("instance {inst}: inertia rose: {:?}", res.inertia_history));
        }
        let ratio = if optimum > 0.0 { res.inertia / optimum } else { 1.0 + res.inertia };
        if ratio > 1.05 {
            return Err(format!(
                "instance {inst} (n={n}, k={k}, d={d}): inertia {} vs optimum {optimum}",
                res.inertia
            ));
        }
        worst = worst.max(ratio);
    }
    Ok(format!("100 instances, worst inertia/optimum {worst:.6}, histories monotone"))
}

fn kmex_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x3E);
    let (c, kpc, d) = (10, 3, 16);
    let protos: Vec<Vec<f32>> = (0..c * kpc).map(|_| uniform_vec(&mut rng, d, 3.0)).collect();
    let flat = Array2::from_shape_vec((c * kpc, d), protos.concat()).unwrap();
    let bank = PrototypeBank::new(flat, c, kpc, BankLocation::Embedding, BankMeta::default())
        .map_err(|e| e.to_string())?;
    let model = KmexModel::new(bank).map_err(|e| e.to_string())?;
    let (mut checked, mut underflow, mut disagreements) = (0, 0, 0);
    while checked < 10_000 {
        // mix of points near a prototype and far-away points where exp(-d²) underflows
        let z: Vec<f32> = if rng.random_bool(0.5) {
            let base = &protos[rng.random_range(0..protos.len())];
            let spread = 10f32.powf(rng.random_range(-2.0..0.5));
            base.iter().map(|&v| v + rng.random_range(-1.0f32..1.0) * spread).collect()
        } else {
            uniform_vec(&mut rng, d, 40.0)
        };
        let mut dists: Vec<f64> = protos
            .iter()
            .map(|p| p.iter().zip(&z).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum())
            .collect();
        dists.sort_by(f64::total_cmp);
        if dists[1] - dists[0] <= 1e-9 * dists[1].max(1.0) {
            continue;
        }
        if (-dists[0]).exp() == 0.0 {
            underflow += 1;
        }
        let expected = common::brute_nearest(&z, &protos);
        let got = model.predict(&z).map_err(|e| e.to_string())?;
        if got.winning_prototype != expected || got.class != expected / kpc {
            disagreements += 1;
        }
        checked += 1;
    }
    let detail = format!("{checked} embeddings, {disagreements} disagreements ({underflow} with underflowed similarity)");
    if disagreements == 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn synthetic_end_to_end() -> Outcome {
    let dataset = Dataset::open(fixture("synthetic/manifest.json")).map_err(|e| e.to_string())?;
    let manifest = dataset.manifest();
    let shallowest = manifest.blocks[0].id;
    let deepest = manifest.deepest_block().id;
    let cfg = FitConfig::new(shallowest, 5, 0);
    let banks = fit_banks(&dataset, &cfg).map_err(|e| e.to_string())?;
    let preds = predict_dataset(&dataset, &banks, Some(Split::Test)).map_err(|e| e.to_string())?;
    let n = preds.len() as f64;
    let pct = |f: &dyn Fn(&protoexplain::pipeline::SamplePrediction) -> usize| {
        100.0 * preds.iter().filter(|p| f(p) == p.label).count() as f64 / n
    };
    let b4 = composite_model_name(manifest, deepest).map_err(|e| e.to_string())?;
    let b234 = composite_model_name(manifest, shallowest).map_err(|e| e.to_string())?;
    let cnn = pct(&|p| p.cnn);
    let kmex = pct(&|p| p.kmex);
    let acc_b4 = pct(&|p| p.composite[&b4]);
    let acc_b234 = pct(&|p| p.composite[&b234]);
    let detail = format!(
        "{} test samples: cnn {cnn:.2}%, kmex {kmex:.2}%, {b4} {acc_b4:.2}%, {b234} {acc_b234:.2}%",
        preds.len()
    );
    if cnn == 100.0 && kmex == 100.0 && acc_b4 == 100.0 && acc_b234 >= 99.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn attribution_base() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA7);
    for t in 0..100 {
        let d = rng.random_range(1..64);
        let c = rng.random_range(1..12);
        let scale = 10f32.powf(rng.random_range(-3.0..3.0));
        let w = Array2::from_shape_vec((d, c), uniform_vec(&mut rng, d * c, scale)).unwrap();
        let Ok(clf) = LinearClassifier::new(w) else { continue };
        for j in 0..c {
            let s = att_score(clf.column(j), &clf, j).map_err(|e| e.to_string())?;
            if s != 1.0 || ((s as f32) - 1.0).abs() > 1e-6 {
                return Err(format!("trial {t}: att(c_{j}, c_{j}) = {s:e}"));
            }
        }
    }

    let mut worst = 0f64;
    let mut worst_mean = 0f64;
    for t in 0..100 {
        let (h, w) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let (th, tw) = (h * rng.random_range(1..=4), w * rng.random_range(1..=4));
        let k = rng.random_range(1..=8);
        let values = Array2::from_shape_vec((h, w), uniform_vec(&mut rng, h * w, 2.0)).unwrap();
        let ids: Vec<usize> = (0..th * tw).map(|_| rng.random_range(0..k)).collect();
        let deeper = AttributionMap { values: values.clone(), depth: 4, class: 0, discrete: false };
        let segments = ExplanationMap {
            height: th,
            width: tw,
            ids: ids.clone(),
            depth_from: 3,
            num_prototypes: k,
            num_classes: 1,
            k_per_class: k,
        };
        let got = refine(&deeper, &segments).map_err(|e| e.to_string())?;
        let src: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let up = common::bilinear_reference(&src, h, w, th, tw);
        let want = common::group_mean(&up, &ids);
        let mut first: HashMap<usize, f32> = HashMap::new();
        for ((&g, &e), &id) in got.values.iter().zip(&want).zip(&ids) {
            worst = worst.max((g as f64 - e).abs());
            if *first.entry(id).or_insert(g) != g {
                return Err(format!("pair {t}: refined map not constant on segment {id}"));
            }
        }
        let mean_got = got.values.iter().map(|&v| v as f64).sum::<f64>() / (th * tw) as f64;
        let mean_up = up.iter().sum::<f64>() / (th * tw) as f64;
        worst_mean = worst_mean.max((mean_got - mean_up).abs());
    }
    let detail = format!(
        "att(c_j, c_j) = 1 exactly on 100 classifiers; refine vs oracle max error {worst:.2e}, mean drift {worst_mean:.2e} over 100 pairs"
    );
    if worst < 1e-6 && worst_mean < 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Per-class windowed averages written out directly from the definition.
fn windowed_average(hist: &[usize], c: usize, kpc: usize) -> Vec<f64> {
    let mut y = vec![0.0; c];
    for class in 0..c {
        let mut sum = 0usize;
        for k in class * kpc..class * kpc + kpc {
            sum += hist[k];
        }
        y[class] = sum as f64 / kpc as f64;
    }
    y
}

fn map_from_histogram(hist: &[usize], c: usize, kpc: usize, width: usize) -> ExplanationMap {
    let ids: Vec<usize> = hist.iter().enumerate().flat_map(|(k, &n)| std::iter::repeat_n(k, n)).collect();
    ExplanationMap {
        height: ids.len() / width,
        width,
        ids,
        depth_from: 2,
        num_prototypes: c * kpc,
        num_classes: c,
        k_per_class: kpc,
    }
}

fn totality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x70);
    let mut maps = 0;
    for t in 0..200 {
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let (c, kpc, d) = (rng.random_range(1..=6), rng.random_range(1..=4), rng.random_range(1..=24));
        let rows = Array2::from_shape_vec((h * w, d), uniform_vec(&mut rng, h * w * d, 1.0)).unwrap();
        let composite = CompositeFeature {
            rows,
            height: h,
            width: w,
            depth_from: 2,
            slices: Vec::new(),
            zero_norm_blocks: Vec::new(),
        };
        let protos = Array2::from_shape_vec((c * kpc, d), uniform_vec(&mut rng, c * kpc * d, 1.0)).unwrap();
        let bank = PrototypeBank::new(protos, c, kpc, BankLocation::Composite { depth_from: 2 }, BankMeta::default())
            .map_err(|e| e.to_string())?;
        let map = explain(&composite, &bank).map_err(|e| e.to_string())?;
        let total: usize = map.histogram().iter().sum();
        if total != h * w {
            return Err(format!("map {t}: histogram sums to {total}, expected {}", h * w));
        }
        maps += 1;
    }

    // literal cases: (histogram, C, K/C, y, class)
    let literal: [(&[usize], usize, usize, &[f64], usize); 4] = [
        (&[3, 1, 0, 0], 2, 2, &[2.0, 0.0], 0),
        (&[0, 0, 2, 2, 1, 3], 3, 2, &[0.0, 2.0, 2.0], 2),
        (&[1, 1, 1, 1], 4, 1, &[1.0, 1.0, 1.0, 1.0], 0),
        (&[5, 0, 0, 2, 2, 2], 2, 3, &[5.0 / 3.0, 2.0], 0),
    ];
    let mut cases = 0;
    for (hist, c, kpc, y, class) in literal {
        let p = predict_counts(&map_from_histogram(hist, c, kpc, 1)).map_err(|e| e.to_string())?;
        if p.y != y || p.class != class || p.histogram != hist {
            return Err(format!("histogram {hist:?}: got y {:?} class {}", p.y, p.class));
        }
        cases += 1;
    }
    while cases < 20 {
        let (c, kpc) = (rng.random_range(1..=5), rng.random_range(1..=4));
        let hist: Vec<usize> = (0..c * kpc).map(|_| rng.random_range(0..6)).collect();
        if hist.iter().sum::<usize>() == 0 {
            continue;
        }
        let total: usize = hist.iter().sum();
        let p = predict_counts(&map_from_histogram(&hist, c, kpc, 1)).map_err(|e| e.to_string())?;
        let want = windowed_average(&hist, c, kpc);
        let top = hist.iter().copied().max().unwrap();
        let want_class = hist.iter().position(|&n| n == top).unwrap() / kpc;
        if p.y != want || p.class != want_class || p.histogram.iter().sum::<usize>() != total {
            return Err(format!("histogram {hist:?} (C={c}, K/C={kpc}): got {:?}, want {want:?}", p.y));
        }
        cases += 1;
    }
    Ok(format!("{maps} explanation maps sum to R'; {cases} crafted histograms match"))
}

fn random_blob(rng: &mut ChaCha8Rng) -> TensorBlob {
    let rank = rng.random_range(1..=4);
    let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=7)).collect();
    let n: usize = shape.iter().product();
    if rng.random_bool(0.5) {
        let specials = [0.0f32, -0.0, f32::INFINITY, f32::NEG_INFINITY, f32::NAN, f32::MIN_POSITIVE / 4.0, f32::MAX];
        let data = (0..n)
            .map(|_| {
                if rng.random_bool(0.1) {
                    specials[rng.random_range(0..specials.len())]
                } else {
                    f32::from_bits(rng.random())
                }
            })
            .collect();
        TensorBlob::from_f32(shape, data).unwrap()
    } else {
        TensorBlob::from_i64(shape, (0..n).map(|_| rng.random()).collect()).unwrap()
    }
}

fn corrupt(dir: &Path, case: usize, rng: &mut ChaCha8Rng) -> String {
    let manifest_path = dir.join("manifest.json");
    let mut json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    let n = read_tensor(dir.join("labels.npy")).unwrap().shape()[0];
    let victim = rng.random_range(0..n);
    let what = match case {
        0 => {
            std::fs::remove_file(dir.join("labels.npy")).unwrap();
            "labels file removed".to_string()
        }
        1 => {
            let mut labels = read_tensor(dir.join("labels.npy")).unwrap().as_i64().unwrap().to_vec();
            labels[victim] = json["num_classes"].as_i64().unwrap();
            write_tensor(&TensorBlob::from_i64(vec![n], labels).unwrap(), dir.join("labels.npy")).unwrap();
            format!("label of sample {victim} out of range")
        }
        2 => {
            let mut split = read_tensor(dir.join("split.npy")).unwrap().as_i64().unwrap().to_vec();
            split[victim] = 2;
            write_tensor(&TensorBlob::from_i64(vec![n], split).unwrap(), dir.join("split.npy")).unwrap();
            format!("split code 2 at sample {victim}")
        }
        3 => {
            let emb = read_tensor(dir.join("embeddings.npy")).unwrap();
            let mut data = emb.as_f32().unwrap().to_vec();
            let d = emb.shape()[1];
            data[victim * d + rng.random_range(0..d)] = f32::NAN;
            write_tensor(&TensorBlob::from_f32(emb.shape().to_vec(), data).unwrap(), dir.join("embeddings.npy")).unwrap();
            format!("NaN in embedding {victim}")
        }
        4 => {
            let emb = read_tensor(dir.join("embeddings.npy")).unwrap();
            let d = emb.shape()[1];
            let data = emb.as_f32().unwrap()[..n * (d - 1)].to_vec();
            write_tensor(&TensorBlob::from_f32(vec![n, d - 1], data).unwrap(), dir.join("embeddings.npy")).unwrap();
            "embeddings one column short".to_string()
        }
        5 => {
            let clf = read_tensor(dir.join("classifier.npy")).unwrap();
            let s = clf.shape();
            let t = TensorBlob::from_f32(vec![s[1], s[0]], clf.as_f32().unwrap().to_vec()).unwrap();
            write_tensor(&t, dir.join("classifier.npy")).unwrap();
            "classifier stored transposed".to_string()
        }
        6 => {
            let b = rng.random_range(0..json["blocks"].as_array().unwrap().len());
            let path = dir.join(json["blocks"][b]["path"].as_str().unwrap());
            let bytes = std::fs::read(&path).unwrap();
            let cut = rng.random_range(1..bytes.len() / 2);
            std::fs::write(&path, &bytes[..bytes.len() - cut]).unwrap();
            format!("block file {} truncated by {cut} bytes", path.display())
        }
        7 => {
            json["blocks"].as_array_mut().unwrap().swap(0, 1);
            std::fs::write(&manifest_path, json.to_string()).unwrap();
            "block order swapped".to_string()
        }
        8 => {
            json["embedding_dim"] = serde_json::json!(json["embedding_dim"].as_u64().unwrap() + 1);
            std::fs::write(&manifest_path, json.to_string()).unwrap();
            "embedding_dim disagrees with the deepest block".to_string()
        }
        9 => {
            let b = rng.random_range(0..json["blocks"].as_array().unwrap().len());
            let path = dir.join(json["blocks"][b]["path"].as_str().unwrap());
            let blob = read_tensor(&path).unwrap();
            let mut shape = blob.shape().to_vec();
            shape[0] -= 1;
            let row: usize = shape[1..].iter().product();
            let data = blob.as_f32().unwrap()[..shape[0] * row].to_vec();
            write_tensor(&TensorBlob::from_f32(shape, data).unwrap(), &path).unwrap();
            format!("block file {} missing its last sample", path.display())
        }
        _ => unreachable!(),
    };
    what
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            std::fs::copy(entry.path(), to.join(entry.file_name())).unwrap();
        }
    }
}

fn format() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF0);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut corpus = 0;
    for i in 0..300 {
        let blob = random_blob(&mut rng);
        let path = tmp.path().join(format!("t{i}.npy"));
        write_tensor(&blob, &path).map_err(|e| e.to_string())?;
        let back = read_tensor(&path).map_err(|e| e.to_string())?;
        let bytes = std::fs::read(&path).unwrap();
        if !back.bitwise_eq(&blob) || encode(&back) != bytes {
            return Err(format!("random tensor {i} {:?} did not round-trip", blob.shape()));
        }
        corpus += 1;
    }
    for entry in std::fs::read_dir(fixture("npy")).unwrap() {
        let path = entry.unwrap().path();
        let bytes = std::fs::read(&path).unwrap();
        if let Ok(blob) = decode(&bytes) {
            if encode(&blob) != bytes {
                return Err(format!("{} not reproduced byte for byte", path.display()));
            }
            corpus += 1;
        }
    }

    let clean = tmp.path().join("clean");
    copy_dir(&fixture("synthetic"), &clean);
    Dataset::open(clean.join("manifest.json")).map_err(|e| format!("clean copy rejected: {e}"))?;
    for case in 0..10 {
        let dir = tmp.path().join(format!("corrupt{case}"));
        copy_dir(&clean, &dir);
        let what = corrupt(&dir, case, &mut rng);
        if Dataset::open(dir.join("manifest.json")).is_ok() {
            return Err(format!("corruption {case} ({what}) was accepted"));
        }
    }
    Ok(format!("{corpus} tensors round-trip bit for bit; 10/10 manifest corruptions rejected"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("commutativity", commutativity),
        ("kmeans oracle", kmeans_oracle),
        ("kmex equivalence", kmex_equivalence),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("attribution base", attribution_base),
        ("explanation-map totality", totality),
        ("format", format),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
