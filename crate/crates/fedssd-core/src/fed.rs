//! The server loop: per-round credibility evaluation, client sampling, local
//! training with the composite loss, and sample-count-weighted aggregation.
//!
//! Client updates within a round are mutually independent and run in
//! parallel; each client's RNG stream is derived from (training seed, round,
//! client id) and results merge in ascending client-id order, so the outcome
//! is identical with 1 or many workers.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabeledDataset;
use crate::distill::{self, CompositeLossSpec, CredibilityMatrix, LossMode};
use crate::error::{CoreError, Result};
use crate::metrics::{self, ClientLoss, RoundMetrics};
use crate::nn::{self, Batch, Layer, ModelParams, OptimizerState};
use crate::seeds;

const CHECKPOINT_MAGIC: &[u8; 5] = b"FSSD1";

/// Which local objective the federation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum AlgorithmMode {
    FedAvg,
    Ssd { m_max: f64 },
    Kl { alpha: f64, tau: f64 },
    Mse { alpha: f64 },
    Prox { mu: f64 },
}

impl AlgorithmMode {
    pub fn needs_credibility(&self) -> bool {
        matches!(self, AlgorithmMode::Ssd { .. })
    }
}

/// Independent seed streams for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedSet {
    pub partition: u64,
    pub sampling: u64,
    pub training: u64,
    pub init: u64,
}

impl SeedSet {
    /// Expands a master seed into the per-purpose streams.
    pub fn from_master(master: u64) -> Self {
        SeedSet {
            partition: seeds::derive(master, seeds::DOMAIN_PARTITION, 0),
            sampling: seeds::derive(master, seeds::DOMAIN_SAMPLING, 0),
            training: seeds::derive(master, seeds::DOMAIN_TRAINING, 0),
            init: seeds::derive(master, seeds::DOMAIN_INIT, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    /// Total client count N.
    pub clients: usize,
    /// Participation ratio C in (0, 1].
    pub participation: f64,
    /// Communication rounds T.
    pub rounds: usize,
    /// Local epochs E per round.
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Hidden-layer widths of the MLP.
    pub hidden: Vec<usize>,
    pub algorithm: AlgorithmMode,
    pub seeds: SeedSet,
}

impl FederationConfig {
    pub fn participants_per_round(&self) -> usize {
        ((self.participation * self.clients as f64).ceil() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(CoreError::InvalidArgument("clients must be positive".into()));
        }
        if !(0.0 < self.participation && self.participation <= 1.0) {
            return Err(CoreError::InvalidArgument(
                "participation must be in (0, 1]".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidArgument(
                "batch size must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(CoreError::InvalidArgument(
                "learning rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(CoreError::InvalidArgument(
                "momentum must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Everything recorded about one communication round.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub credibility: Option<CredibilityMatrix>,
    /// SHA-256 of the aggregated model's checkpoint bytes.
    pub params_digest: String,
    pub metrics: RoundMetrics,
}

/// Uniform sample without replacement of `ceil(C*N)` client ids, sorted
/// ascending; deterministic per (seed, round).
pub fn sample_clients(clients: usize, participation: f64, sampling_seed: u64, round: usize) -> Vec<usize> {
    let m = ((participation * clients as f64).ceil() as usize)
        .max(1)
        .min(clients);
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(
        sampling_seed,
        seeds::DOMAIN_SAMPLING,
        round as u64,
    ));
    let mut ids: Vec<usize> = (0..clients).collect();
    ids.shuffle(&mut rng);
    let mut picked: Vec<usize> = ids.into_iter().take(m).collect();
    picked.sort_unstable();
    picked
}

fn make_batch(local: &LabeledDataset, indices: &[usize]) -> Result<Batch> {
    Batch::new(
        indices.iter().map(|&i| local.features[i].clone()).collect(),
        indices.iter().map(|&i| local.labels[i]).collect(),
        local.classes,
    )
}

/// Local training for one client: initializes from the global snapshot, runs
/// `E` epochs of seeded-shuffled minibatch SGD on the composite loss, and
/// returns the updated parameters plus mean losses over all batches. The
/// momentum buffer starts at zero; the global parameters are not modified.
pub fn client_update(
    global: &ModelParams,
    credibility: Option<&CredibilityMatrix>,
    local: &LabeledDataset,
    config: &FederationConfig,
    client_seed: u64,
) -> Result<(ModelParams, f64, f64)> {
    if local.is_empty() {
        return Err(CoreError::InvalidArgument("empty local dataset".into()));
    }
    let mode = match &config.algorithm {
        AlgorithmMode::FedAvg => LossMode::CeOnly,
        AlgorithmMode::Ssd { m_max } => {
            let matrix = credibility.ok_or_else(|| {
                CoreError::InvalidArgument("ssd mode requires a credibility matrix".into())
            })?;
            LossMode::Ssd {
                m_max: *m_max,
                m_class: distill::class_weights(matrix),
            }
        }
        AlgorithmMode::Kl { alpha, tau } => LossMode::KlConst {
            alpha: *alpha,
            tau: *tau,
        },
        AlgorithmMode::Mse { alpha } => LossMode::MseConst { alpha: *alpha },
        AlgorithmMode::Prox { mu } => LossMode::Prox { mu: *mu },
    };
    let teacher = match mode {
        LossMode::CeOnly => None,
        _ => Some(global),
    };
    let spec = CompositeLossSpec { mode, teacher };

    let mut params = global.clone();
    let mut state = OptimizerState::new(&params, config.learning_rate, config.momentum)?;
    let mut rng = ChaCha8Rng::seed_from_u64(client_seed);
    let mut indices: Vec<usize> = (0..local.len()).collect();
    let mut ce_sum = 0.0;
    let mut distill_sum = 0.0;
    let mut batches = 0usize;
    for _ in 0..config.local_epochs {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(config.batch_size) {
            let batch = make_batch(local, chunk)?;
            let (values, grads) = nn::backward(&params, &batch, &spec)?;
            let (next_params, next_state) = nn::sgd_step(&params, &grads, &state)?;
            params = next_params;
            state = next_state;
            ce_sum += values.ce;
            distill_sum += values.distill;
            batches += 1;
        }
    }
    let n = batches.max(1) as f64;
    Ok((params, ce_sum / n, distill_sum / n))
}

/// Coordinate-wise weighted mean with weights `sizes[i] / sum(sizes)`.
/// Summation order follows the input order.
pub fn aggregate(models: &[ModelParams], sizes: &[usize]) -> Result<ModelParams> {
    if models.is_empty() {
        return Err(CoreError::InvalidArgument("no models to aggregate".into()));
    }
    if models.len() != sizes.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} models vs {} sizes",
            models.len(),
            sizes.len()
        )));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(CoreError::InvalidArgument("zero total sample count".into()));
    }
    for m in &models[1..] {
        if !m.same_shape(&models[0]) {
            return Err(CoreError::ShapeMismatch(
                "aggregated models must share a shape".into(),
            ));
        }
    }
    let mut out = models[0].zeros_like();
    for (model, &size) in models.iter().zip(sizes) {
        let weight = size as f64 / total as f64;
        for (acc, v) in out.iter_flat_mut().zip(model.iter_flat()) {
            *acc += weight * v;
        }
    }
    // Clamp every coordinate to the convex hull of the inputs; this also makes
    // aggregation of identical models an exact fixed point despite rounding.
    let flats: Vec<Vec<f64>> = models.iter().map(|m| m.iter_flat().collect()).collect();
    for (idx, acc) in out.iter_flat_mut().enumerate() {
        let lo = flats.iter().map(|f| f[idx]).fold(f64::INFINITY, f64::min);
        let hi = flats.iter().map(|f| f[idx]).fold(f64::NEG_INFINITY, f64::max);
        *acc = acc.clamp(lo, hi);
    }
    Ok(out)
}

/// The data a federation runs over: per-client training sets, the server's
/// auxiliary set, and the uniform test set.
#[derive(Debug, Clone)]
pub struct FederationData {
    pub client_datasets: Vec<LabeledDataset>,
    pub auxiliary: Option<LabeledDataset>,
    pub test: LabeledDataset,
}

/// Runs the full server loop for `config.rounds` rounds and returns the
/// per-round records plus the final global model.
pub fn run_federation(
    config: &FederationConfig,
    data: &FederationData,
) -> Result<(Vec<RoundRecord>, ModelParams)> {
    config.validate()?;
    if data.client_datasets.len() != config.clients {
        return Err(CoreError::InvalidArgument(format!(
            "{} client datasets for {} clients",
            data.client_datasets.len(),
            config.clients
        )));
    }
    let input_dim = data.test.dims();
    let classes = data.test.classes;
    let mut dims = vec![input_dim];
    dims.extend_from_slice(&config.hidden);
    dims.push(classes);
    let mut global = ModelParams::init(&dims, config.seeds.init)?;

    let mut records = Vec::with_capacity(config.rounds);
    for round in 0..config.rounds {
        let credibility = if config.algorithm.needs_credibility() {
            let aux = data.auxiliary.as_ref().ok_or_else(|| {
                CoreError::InvalidArgument("ssd mode requires an auxiliary dataset".into())
            })?;
            Some(distill::credibility_matrix(&global, aux, round)?)
        } else {
            None
        };

        let participants = sample_clients(
            config.clients,
            config.participation,
            config.seeds.sampling,
            round,
        );

        // Parallel local updates; `participants` is sorted ascending and
        // par_iter preserves order, so aggregation order is fixed.
        let results: Vec<(usize, ModelParams, f64, f64, f64)> = participants
            .par_iter()
            .filter_map(|&client| {
                let local = &data.client_datasets[client];
                if local.is_empty() {
                    eprintln!("round {round}: skipping client {client} with empty dataset");
                    return None;
                }
                let client_seed = seeds::derive2(
                    config.seeds.training,
                    seeds::DOMAIN_TRAINING,
                    round as u64,
                    client as u64,
                );
                let out = client_update(&global, credibility.as_ref(), local, config, client_seed)
                    .and_then(|(params, ce, distill_loss)| {
                        let acc = metrics::evaluate(&params, &data.test)?.accuracy;
                        Ok((client, params, ce, distill_loss, acc))
                    })
                    .map_err(|e| e.with_client(round, client));
                Some(out)
            })
            .collect::<Result<_>>()?;
        if results.is_empty() {
            return Err(CoreError::InvalidArgument(format!(
                "round {round}: every sampled client was empty"
            )));
        }

        let models: Vec<&ModelParams> = results.iter().map(|r| &r.1).collect();
        let sizes: Vec<usize> = results
            .iter()
            .map(|r| data.client_datasets[r.0].len())
            .collect();
        let owned: Vec<ModelParams> = models.iter().map(|m| (*m).clone()).collect();
        let aggregated = aggregate(&owned, &sizes)?;

        let eval_start = metrics::evaluate(&global, &data.test)?;
        let eval_post = metrics::evaluate(&aggregated, &data.test)?;
        let acc_local: Vec<f64> = results.iter().map(|r| r.4).collect();
        let acc_local_mean = acc_local.iter().sum::<f64>() / acc_local.len() as f64;
        let client_losses: Vec<ClientLoss> = results
            .iter()
            .map(|r| ClientLoss {
                client: r.0,
                ce: r.2,
                distill: r.3,
            })
            .collect();
        let round_metrics = RoundMetrics {
            acc_global: eval_post.accuracy,
            acc_global_start: eval_start.accuracy,
            acc_local_mean,
            forgetting_gap: metrics::forgetting_gap(eval_start.accuracy, acc_local_mean),
            forgetting_gap_post: metrics::forgetting_gap(eval_post.accuracy, acc_local_mean),
            acc_local,
            class_accuracy: eval_post.class_accuracy,
            confusion: eval_post.confusion,
            client_losses,
        };
        records.push(RoundRecord {
            round,
            participants,
            credibility,
            params_digest: params_digest(&aggregated),
            metrics: round_metrics,
        });
        global = aggregated;
    }
    Ok((records, global))
}

/// Serializes parameters to the versioned checkpoint layout: magic `FSSD1`,
/// layer count, per-layer dims, then little-endian f64 weights and biases.
pub fn params_to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.write_u32::<LittleEndian>(params.layers.len() as u32)
        .unwrap();
    for layer in &params.layers {
        out.write_u32::<LittleEndian>(layer.fan_in as u32).unwrap();
        out.write_u32::<LittleEndian>(layer.fan_out as u32).unwrap();
    }
    for layer in &params.layers {
        for &w in &layer.weights {
            out.write_f64::<LittleEndian>(w).unwrap();
        }
        for &b in &layer.bias {
            out.write_f64::<LittleEndian>(b).unwrap();
        }
    }
    out
}

pub fn params_digest(params: &ModelParams) -> String {
    let mut hasher = Sha256::new();
    hasher.update(params_to_bytes(params));
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut file =
        fs::File::create(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    file.write_all(&params_to_bytes(params))
        .map_err(|e| CoreError::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut file =
        fs::File::open(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut magic = [0u8; 5];
    file.read_exact(&mut magic)
        .map_err(|_| CoreError::Checkpoint("missing magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CoreError::Checkpoint(format!(
            "bad magic {magic:?}, expected FSSD1"
        )));
    }
    let n_layers = file
        .read_u32::<LittleEndian>()
        .map_err(|_| CoreError::Checkpoint("missing layer count".into()))? as usize;
    let mut shapes = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let fan_in = file
            .read_u32::<LittleEndian>()
            .map_err(|_| CoreError::Checkpoint("missing fan_in".into()))? as usize;
        let fan_out = file
            .read_u32::<LittleEndian>()
            .map_err(|_| CoreError::Checkpoint("missing fan_out".into()))? as usize;
        shapes.push((fan_in, fan_out));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for (fan_in, fan_out) in shapes {
        let mut layer = Layer::zeros(fan_in, fan_out);
        for w in layer.weights.iter_mut() {
            *w = file
                .read_f64::<LittleEndian>()
                .map_err(|_| CoreError::Checkpoint("truncated weights".into()))?;
        }
        for b in layer.bias.iter_mut() {
            *b = file
                .read_f64::<LittleEndian>()
                .map_err(|_| CoreError::Checkpoint("truncated bias".into()))?;
        }
        layers.push(layer);
    }
    let params = ModelParams { layers };
    params.validate()?;
    Ok(params)
}
