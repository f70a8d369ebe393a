//! Dataset construction, non-IID partitioning and auxiliary-set sampling.
//!
//! All operations are deterministic given their inputs and seed. Partition
//! plans always cover the parent index set exactly once.

use std::fs::File;
use std::io::Read as _;
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::seeds;

const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// Feature vectors with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub name: String,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.first().map(|f| f.len()).unwrap_or(0)
    }

    /// Indices of each class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.classes];
        for (i, &label) in self.labels.iter().enumerate() {
            by_class[label].push(i);
        }
        by_class
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> LabeledDataset {
        LabeledDataset {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            name: name.into(),
        }
    }
}

/// How a dataset was split among clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PartitionStrategy {
    /// Each client holds (about) `labels_per_client` distinct labels.
    Quantity { labels_per_client: usize },
    /// Per-class Dirichlet proportions with concentration `delta`.
    Dirichlet { delta: f64 },
}

/// Per-client index subsets of a parent dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub client_indices: Vec<Vec<usize>>,
    pub strategy: PartitionStrategy,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn client_sizes(&self) -> Vec<usize> {
        self.client_indices.iter().map(|c| c.len()).collect()
    }
}

/// Seeded Gaussian blobs: one unit-variance cluster per class, class means at
/// distance `separation` from the origin along seeded random directions.
pub fn generate_synthetic(
    classes: usize,
    dims: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(CoreError::InvalidArgument("need at least 2 classes".into()));
    }
    if dims < 2 {
        return Err(CoreError::InvalidArgument(
            "need at least 2 dimensions".into(),
        ));
    }
    if n_per_class < 1 {
        return Err(CoreError::InvalidArgument(
            "n_per_class must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means = Vec::with_capacity(classes);
    for _ in 0..classes {
        let dir: Vec<f64> = (0..dims).map(|_| rng.sample(StandardNormal)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        means.push(dir.iter().map(|v| v / norm * separation).collect::<Vec<_>>());
    }
    let mut features = Vec::with_capacity(classes * n_per_class);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..n_per_class {
            let row: Vec<f64> = mean
                .iter()
                .map(|&m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            features.push(row);
            labels.push(k);
        }
    }
    Ok(LabeledDataset {
        features,
        labels,
        classes,
        name: format!("synthetic-k{classes}-d{dims}-s{seed}"),
    })
}

fn read_u32(file: &mut File, path: &str, what: &str) -> Result<u32> {
    file.read_u32::<BigEndian>().map_err(|_| CoreError::IdxTruncated {
        path: path.to_string(),
        detail: format!("missing {what}"),
    })
}

/// Loads an IDX image/label file pair (big-endian dims, unsigned bytes).
/// Pixels are scaled to [0, 1] and images flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img_str = images_path.display().to_string();
    let lbl_str = labels_path.display().to_string();

    let mut img_file = File::open(images_path).map_err(|e| CoreError::io(&img_str, e))?;
    let magic = read_u32(&mut img_file, &img_str, "magic")?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(CoreError::IdxBadMagic {
            path: img_str,
            expected: IDX_MAGIC_IMAGES,
            actual: magic,
        });
    }
    let count = read_u32(&mut img_file, &img_str, "image count")? as usize;
    let rows = read_u32(&mut img_file, &img_str, "row count")? as usize;
    let cols = read_u32(&mut img_file, &img_str, "column count")? as usize;
    let dims = rows * cols;
    let mut pixels = vec![0u8; count * dims];
    img_file
        .read_exact(&mut pixels)
        .map_err(|_| CoreError::IdxTruncated {
            path: img_str.clone(),
            detail: format!("expected {} pixel bytes", count * dims),
        })?;

    let mut lbl_file = File::open(labels_path).map_err(|e| CoreError::io(&lbl_str, e))?;
    let magic = read_u32(&mut lbl_file, &lbl_str, "magic")?;
    if magic != IDX_MAGIC_LABELS {
        return Err(CoreError::IdxBadMagic {
            path: lbl_str,
            expected: IDX_MAGIC_LABELS,
            actual: magic,
        });
    }
    let label_count = read_u32(&mut lbl_file, &lbl_str, "label count")? as usize;
    if label_count != count {
        return Err(CoreError::IdxCountMismatch {
            images: count,
            labels: label_count,
        });
    }
    let mut raw_labels = vec![0u8; label_count];
    lbl_file
        .read_exact(&mut raw_labels)
        .map_err(|_| CoreError::IdxTruncated {
            path: lbl_str.clone(),
            detail: format!("expected {label_count} label bytes"),
        })?;

    let features: Vec<Vec<f64>> = pixels
        .chunks(dims)
        .map(|img| img.iter().map(|&p| p as f64 / 255.0).collect())
        .collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().copied().max().map(|m| m + 1).unwrap_or(0);
    Ok(LabeledDataset {
        features,
        labels,
        classes,
        name: img_str,
    })
}

/// Draws a Dirichlet(delta * 1_n) vector via normalized Gamma variates.
fn dirichlet_draw(rng: &mut ChaCha8Rng, n: usize, delta: f64) -> Vec<f64> {
    let gamma = Gamma::new(delta, 1.0).expect("delta > 0 checked by caller");
    let mut draws: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum <= 0.0 {
        // All variates underflowed; fall back to a single random winner.
        let winner = rng.gen_range(0..n);
        draws = vec![0.0; n];
        draws[winner] = 1.0;
        return draws;
    }
    draws.iter().map(|&d| d / sum).collect()
}

fn dirichlet_attempt(
    ds: &LabeledDataset,
    clients: usize,
    delta: f64,
    seed: u64,
) -> Vec<Vec<usize>> {
    let mut client_indices = vec![Vec::new(); clients];
    for (class, mut indices) in ds.indices_by_class().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "dirichlet-class", class as u64));
        indices.shuffle(&mut rng);
        let shares = dirichlet_draw(&mut rng, clients, delta);
        let n_k = indices.len();
        let mut sizes: Vec<usize> = shares.iter().map(|&p| (p * n_k as f64).round() as usize).collect();
        // Remainder (either sign) lands on the largest-share client.
        let argmax = shares
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        let assigned: usize = sizes.iter().sum();
        if assigned < n_k {
            sizes[argmax] += n_k - assigned;
        } else if assigned > n_k {
            let excess = assigned - n_k;
            sizes[argmax] = sizes[argmax].saturating_sub(excess);
            // If the argmax client could not absorb it, trim remaining excess
            // from the end.
            let mut still: isize = sizes.iter().sum::<usize>() as isize - n_k as isize;
            for s in sizes.iter_mut().rev() {
                if still <= 0 {
                    break;
                }
                let take = (*s).min(still as usize);
                *s -= take;
                still -= take as isize;
            }
        }
        let mut cursor = 0;
        for (client, &size) in sizes.iter().enumerate() {
            client_indices[client].extend_from_slice(&indices[cursor..cursor + size]);
            cursor += size;
        }
    }
    client_indices
}

/// Splits the dataset by drawing, for each class independently, client
/// proportions from Dirichlet(delta). An attempt that leaves some client
/// completely empty is reshuffled with a derived seed, up to 20 attempts.
pub fn partition_dirichlet(
    ds: &LabeledDataset,
    clients: usize,
    delta: f64,
    seed: u64,
) -> Result<PartitionPlan> {
    if clients < 1 {
        return Err(CoreError::InvalidArgument(
            "need at least one client".into(),
        ));
    }
    if delta <= 0.0 {
        return Err(CoreError::InvalidArgument(
            "dirichlet concentration must be positive".into(),
        ));
    }
    const MAX_ATTEMPTS: usize = 20;
    for attempt in 0..MAX_ATTEMPTS {
        let attempt_seed = seeds::derive(seed, "dirichlet-attempt", attempt as u64);
        let client_indices = dirichlet_attempt(ds, clients, delta, attempt_seed);
        if client_indices.iter().all(|c| !c.is_empty()) {
            return Ok(PartitionPlan {
                client_indices,
                strategy: PartitionStrategy::Dirichlet { delta },
                seed,
            });
        }
    }
    let empty = dirichlet_attempt(
        ds,
        clients,
        delta,
        seeds::derive(seed, "dirichlet-attempt", 0),
    )
    .iter()
    .position(|c| c.is_empty())
    .unwrap_or(0);
    Err(CoreError::EmptyClient {
        client: empty,
        attempts: MAX_ATTEMPTS,
    })
}

/// Assigns each client `labels_per_client` distinct classes via a balanced
/// class-to-client assignment, then splits each class's samples evenly among
/// its holders.
pub fn partition_quantity(
    ds: &LabeledDataset,
    clients: usize,
    labels_per_client: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    let k = labels_per_client;
    let classes = ds.classes;
    if clients < 1 {
        return Err(CoreError::InvalidArgument(
            "need at least one client".into(),
        ));
    }
    if k < 1 || k > classes {
        return Err(CoreError::PartitionInfeasible(format!(
            "labels_per_client {k} not in [1, {classes}]"
        )));
    }
    if clients * k < classes {
        eprintln!(
            "warning: {clients} clients x {k} labels cannot cover {classes} classes; \
             some clients will hold extra labels"
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_perm: Vec<usize> = (0..classes).collect();
    class_perm.shuffle(&mut rng);
    let mut client_perm: Vec<usize> = (0..clients).collect();
    client_perm.shuffle(&mut rng);

    // Rotational assignment: client slot i takes classes (i + t) mod K for
    // t = 0..k, guaranteeing k distinct labels per client and a balanced
    // holder count per class. Extra rotations cover classes a small
    // federation would otherwise miss.
    let rotations = if clients * k < classes {
        classes.div_ceil(clients).max(k)
    } else {
        k
    };
    let mut holders: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for slot in 0..clients {
        for t in 0..rotations {
            let class = class_perm[(slot + t) % classes];
            let client = client_perm[slot];
            if !holders[class].contains(&client) {
                holders[class].push(client);
            }
        }
    }

    let mut client_indices = vec![Vec::new(); clients];
    for (class, mut indices) in ds.indices_by_class().into_iter().enumerate() {
        let mut class_rng =
            ChaCha8Rng::seed_from_u64(seeds::derive(seed, "quantity-class", class as u64));
        indices.shuffle(&mut class_rng);
        let mut class_holders = holders[class].clone();
        if class_holders.is_empty() {
            // Unreachable with the rotation above, but a dataset class with
            // zero holders must still be conserved somewhere.
            class_holders.push(class % clients);
        }
        class_holders.sort_unstable();
        let h = class_holders.len();
        let base = indices.len() / h;
        let extra = indices.len() % h;
        let mut cursor = 0;
        for (j, &client) in class_holders.iter().enumerate() {
            let size = base + usize::from(j < extra);
            client_indices[client].extend_from_slice(&indices[cursor..cursor + size]);
            cursor += size;
        }
    }

    Ok(PartitionPlan {
        client_indices,
        strategy: PartitionStrategy::Quantity {
            labels_per_client: k,
        },
        seed,
    })
}

/// Samples `per_class` samples of every class without replacement. Returns the
/// auxiliary dataset and the chosen parent indices so the caller can exclude
/// them from client partitions.
pub fn sample_auxiliary(
    ds: &LabeledDataset,
    per_class: usize,
    seed: u64,
) -> Result<(LabeledDataset, Vec<usize>)> {
    let by_class = ds.indices_by_class();
    for (class, indices) in by_class.iter().enumerate() {
        if indices.len() < per_class {
            return Err(CoreError::InsufficientClassSamples {
                class,
                available: indices.len(),
                needed: per_class,
            });
        }
    }
    let mut chosen = Vec::with_capacity(per_class * ds.classes);
    for (class, mut indices) in by_class.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "auxiliary-class", class as u64));
        indices.shuffle(&mut rng);
        chosen.extend_from_slice(&indices[..per_class]);
    }
    let aux = ds.subset(&chosen, format!("{}-aux", ds.name));
    Ok((aux, chosen))
}
