//! Per-seed experiment pipeline: data construction, partitioning, federation,
//! artifact emission and the content-hash manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use serde_json::json;
use sha2::{Digest, Sha256};

use fedssd_core::data::{self, LabeledDataset};
use fedssd_core::fed::{self, FederationData};
use fedssd_core::{metrics, seeds};

use crate::config::{DatasetSpec, ExperimentConfig, PartitionSpec};

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn build_datasets(
    config: &ExperimentConfig,
    master_seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    match &config.dataset {
        DatasetSpec::Synthetic {
            classes,
            dims,
            n_per_class,
            separation,
            test_per_class,
        } => {
            // Train and test must share the class clusters, so draw one pool
            // and split it per class.
            let data_seed = seeds::derive(master_seed, seeds::DOMAIN_DATA, 0);
            let total = n_per_class + test_per_class;
            let pool = data::generate_synthetic(*classes, *dims, total, *separation, data_seed)?;
            let mut train_idx = Vec::with_capacity(classes * n_per_class);
            let mut test_idx = Vec::with_capacity(classes * test_per_class);
            for k in 0..*classes {
                let start = k * total;
                train_idx.extend(start..start + n_per_class);
                test_idx.extend(start + n_per_class..start + total);
            }
            let train = pool.subset(&train_idx, format!("{}-train", pool.name));
            let test = pool.subset(&test_idx, format!("{}-test", pool.name));
            Ok((train, test))
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => {
            let train = data::load_idx(train_images, train_labels)?;
            let test = data::load_idx(test_images, test_labels)?;
            Ok((train, test))
        }
    }
}

/// Runs one seed end to end and returns the artifact file names it produced.
pub fn run_seed(config: &ExperimentConfig, master_seed: u64, out_dir: &Path) -> Result<Vec<String>> {
    let (train, test) = build_datasets(config, master_seed)?;
    let fed_config = config.federation_config(master_seed);

    // The auxiliary set is carved out before partitioning so it is disjoint
    // from every client's data, for every algorithm alike.
    let aux_seed = seeds::derive(master_seed, seeds::DOMAIN_AUXILIARY, 0);
    let (aux, aux_indices) = data::sample_auxiliary(&train, config.auxiliary_per_class, aux_seed)?;
    let mut taken = vec![false; train.len()];
    for &i in &aux_indices {
        taken[i] = true;
    }
    let pool_indices: Vec<usize> = (0..train.len()).filter(|&i| !taken[i]).collect();
    let pool = train.subset(&pool_indices, format!("{}-pool", train.name));

    let plan = match &config.partition {
        PartitionSpec::Dirichlet { delta } => {
            data::partition_dirichlet(&pool, config.clients, *delta, fed_config.seeds.partition)?
        }
        PartitionSpec::Quantity { labels_per_client } => data::partition_quantity(
            &pool,
            config.clients,
            *labels_per_client,
            fed_config.seeds.partition,
        )?,
    };
    let client_datasets: Vec<LabeledDataset> = plan
        .client_indices
        .iter()
        .enumerate()
        .map(|(i, idx)| pool.subset(idx, format!("client-{i}")))
        .collect();

    let fed_data = FederationData {
        client_datasets,
        auxiliary: Some(aux),
        test,
    };
    let (records, final_model) = fed::run_federation(&fed_config, &fed_data)?;

    let config_echo = json!({
        "experiment": config,
        "master_seed": master_seed,
        "derived_seeds": fed_config.seeds,
        "partition_plan_sizes": plan.client_sizes(),
    });

    let csv_name = format!("metrics_seed{master_seed}.csv");
    let json_name = format!("results_seed{master_seed}.json");
    let ckpt_name = format!("model_seed{master_seed}.fssd");
    metrics::emit_csv(&records, &out_dir.join(&csv_name))?;
    metrics::emit_json(&records, &config_echo, &out_dir.join(&json_name))?;
    fed::save_checkpoint(&final_model, &out_dir.join(&ckpt_name))?;
    Ok(vec![csv_name, json_name, ckpt_name])
}

/// Runs every seed, writes the manifest, and reports per-seed failures.
/// Returns an error (exit code 2) if any seed failed.
pub fn run_experiment(config: &ExperimentConfig, out_root: Option<&Path>) -> Result<PathBuf> {
    let out_dir = match out_root {
        Some(root) if config.output_dir.is_relative() => root.join(&config.output_dir),
        _ => config.output_dir.clone(),
    };
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let mut artifacts: Vec<String> = Vec::new();
    let mut failures: Vec<String> = Vec::new();
    for &seed in &config.seed_list {
        match run_seed(config, seed, &out_dir) {
            Ok(files) => artifacts.extend(files),
            Err(e) => {
                eprintln!("seed {seed} failed: {e:#}");
                failures.push(format!("seed {seed}: {e:#}"));
            }
        }
    }

    artifacts.sort();
    let mut manifest_entries = Vec::new();
    for name in &artifacts {
        manifest_entries.push(json!({
            "file": name,
            "sha256": sha256_file(&out_dir.join(name))?,
        }));
    }
    let manifest = json!({
        "schema_version": 1,
        "artifacts": manifest_entries,
        "failed_seeds": failures,
    });
    let manifest_path = out_dir.join("manifest.json");
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(&manifest_path, bytes)
        .with_context(|| format!("writing {}", manifest_path.display()))?;

    if !failures.is_empty() {
        return Err(anyhow!(
            "{} of {} seeds failed; see stderr and manifest.json",
            failures.len(),
            config.seed_list.len()
        ));
    }
    println!("wrote {} artifacts to {}", artifacts.len() + 1, out_dir.display());
    Ok(out_dir)
}

/// Mean per-round global accuracy across a run directory's seed CSVs.
pub fn load_accuracy_series(run_dir: &Path) -> Result<Vec<f64>> {
    let mut csvs: Vec<PathBuf> = fs::read_dir(run_dir)
        .with_context(|| format!("reading {}", run_dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("metrics_seed") && n.ends_with(".csv"))
                .unwrap_or(false)
        })
        .collect();
    csvs.sort();
    if csvs.is_empty() {
        return Err(anyhow!("no metrics_seed*.csv in {}", run_dir.display()));
    }
    let mut sum: Vec<f64> = Vec::new();
    for path in &csvs {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| anyhow!("empty CSV {}", path.display()))?;
        let acc_col = header
            .split(',')
            .position(|c| c == "acc_global")
            .ok_or_else(|| anyhow!("no acc_global column in {}", path.display()))?;
        let series: Vec<f64> = lines
            .map(|l| {
                l.split(',')
                    .nth(acc_col)
                    .ok_or_else(|| anyhow!("short row in {}", path.display()))
                    .and_then(|v| v.parse().map_err(|e| anyhow!("bad float: {e}")))
            })
            .collect::<Result<_>>()?;
        if sum.is_empty() {
            sum = series;
        } else {
            if sum.len() != series.len() {
                return Err(anyhow!(
                    "round count mismatch between seed CSVs in {}",
                    run_dir.display()
                ));
            }
            for (a, b) in sum.iter_mut().zip(series) {
                *a += b;
            }
        }
    }
    let n = csvs.len() as f64;
    Ok(sum.into_iter().map(|v| v / n).collect())
}

pub struct CompareRow {
    pub name: String,
    pub final_acc: f64,
    pub best_acc: f64,
    pub rounds_to_target: Option<usize>,
}

/// Compares completed runs: final accuracy, best accuracy, and rounds to
/// reach the first run's final accuracy.
pub fn compare(run_dirs: &[PathBuf]) -> Result<Vec<CompareRow>> {
    if run_dirs.len() < 2 {
        return Err(anyhow!("compare needs at least two run directories"));
    }
    let series: Vec<(String, Vec<f64>)> = run_dirs
        .iter()
        .map(|d| Ok((d.display().to_string(), load_accuracy_series(d)?)))
        .collect::<Result<_>>()?;
    let rounds = series[0].1.len();
    for (name, s) in &series {
        if s.len() != rounds {
            return Err(anyhow!(
                "round count mismatch: {} has {} rounds, {} has {}",
                series[0].0,
                rounds,
                name,
                s.len()
            ));
        }
    }
    let target = *series[0]
        .1
        .last()
        .ok_or_else(|| anyhow!("runs have zero rounds"))?;
    Ok(series
        .into_iter()
        .map(|(name, s)| CompareRow {
            final_acc: *s.last().unwrap(),
            best_acc: s.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            rounds_to_target: metrics::rounds_to_target(&s, target),
            name,
        })
        .collect())
}

/// Prints a human summary of a run directory from its JSON documents.
pub fn inspect(run_dir: &Path) -> Result<()> {
    let mut jsons: Vec<PathBuf> = fs::read_dir(run_dir)
        .with_context(|| format!("reading {}", run_dir.display()))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("results_seed") && n.ends_with(".json"))
                .unwrap_or(false)
        })
        .collect();
    jsons.sort();
    if jsons.is_empty() {
        return Err(anyhow!("no results_seed*.json in {}", run_dir.display()));
    }
    for path in &jsons {
        let doc = metrics::load_json(path)?;
        println!("== {}", path.display());
        println!("config: {}", serde_json::to_string(&doc.config)?);
        if let Some(last) = doc.rounds.last() {
            println!(
                "rounds: {}  final acc_global: {:.4}  final gap: {:+.4}",
                doc.rounds.len(),
                last.metrics.acc_global,
                last.metrics.forgetting_gap
            );
            if let Some(cred) = &last.credibility {
                println!("final credibility matrix (round {}):", cred.round);
                for row in &cred.rows {
                    let cells: Vec<String> = row.iter().map(|v| format!("{v:.3}")).collect();
                    println!("  [{}]", cells.join(", "));
                }
            }
        } else {
            println!("rounds: 0");
        }
    }
    Ok(())
}
