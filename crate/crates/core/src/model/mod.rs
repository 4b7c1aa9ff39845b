//! The convolutional fusion classifier and its training harness.

mod adam;
mod layers;
mod network;

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::embed::TokenEmbeddingMatrix;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::selection::{EngineeredChannel, EngineeredMatrix};

use adam::Adam;
pub use network::FusionNetwork;
use network::Mode;

/// A text representation fed to the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Bert,
    Sngram,
    Psych,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::Bert => "bert",
            Channel::Sngram => "sngram",
            Channel::Psych => "psych",
        }
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "bert" => Ok(Channel::Bert),
            "sngram" => Ok(Channel::Sngram),
            "psych" => Ok(Channel::Psych),
            other => Err(Error::Config(format!("unknown channel {other:?}"))),
        }
    }
}

impl EngineeredChannel {
    pub fn name(self) -> &'static str {
        match self {
            EngineeredChannel::Sngram => "sngram",
            EngineeredChannel::Psych => "psych",
        }
    }
}

/// Which paths the model graph wires up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Plain-embedder baseline: pooled embedding into a softmax head.
    PlainEmbedding,
    /// The fusion graph restricted to the named channels.
    Fusion {
        bert: bool,
        sngram: bool,
        psych: bool,
    },
}

impl Variant {
    /// Wire a model for exactly the named channels.
    pub fn from_channels(channels: &BTreeSet<Channel>) -> Result<Variant> {
        if channels.is_empty() {
            return Err(Error::Config("channel set must be non-empty".into()));
        }
        Ok(Variant::Fusion {
            bert: channels.contains(&Channel::Bert),
            sngram: channels.contains(&Channel::Sngram),
            psych: channels.contains(&Channel::Psych),
        })
    }

    pub fn name(&self) -> String {
        match self {
            Variant::PlainEmbedding => "baseline".into(),
            Variant::Fusion {
                bert,
                sngram,
                psych,
            } => {
                let mut parts = Vec::new();
                if *bert {
                    parts.push("bert");
                }
                if *sngram {
                    parts.push("sngram");
                }
                if *psych {
                    parts.push("psych");
                }
                parts.join("+")
            }
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        if s.trim().eq_ignore_ascii_case("baseline") {
            return Err(Error::Config(
                "use Variant::PlainEmbedding for the baseline".into(),
            ));
        }
        let channels: BTreeSet<Channel> = s
            .split('+')
            .map(str::parse)
            .collect::<Result<BTreeSet<_>>>()?;
        Variant::from_channels(&channels)
    }

    /// The eight comparison variants: the plain-embedder baseline plus every
    /// non-empty channel combination.
    pub fn standard_eight() -> Vec<Variant> {
        let f = |bert, sngram, psych| Variant::Fusion {
            bert,
            sngram,
            psych,
        };
        vec![
            Variant::PlainEmbedding,
            f(true, false, false),
            f(false, true, false),
            f(false, false, true),
            f(false, true, true),
            f(true, true, false),
            f(true, false, true),
            f(true, true, true),
        ]
    }

    pub fn uses_embedding(&self) -> bool {
        matches!(
            self,
            Variant::PlainEmbedding | Variant::Fusion { bert: true, .. }
        )
    }

    /// Engineered channels this variant consumes, sngram before psych.
    pub fn engineered_channels(&self) -> Vec<EngineeredChannel> {
        match self {
            Variant::PlainEmbedding => vec![],
            Variant::Fusion { sngram, psych, .. } => {
                let mut channels = Vec::new();
                if *sngram {
                    channels.push(EngineeredChannel::Sngram);
                }
                if *psych {
                    channels.push(EngineeredChannel::Psych);
                }
                channels
            }
        }
    }

    /// Single-channel variants this fused variant is built from.
    pub fn single_channel_components(&self) -> Vec<Variant> {
        match self {
            Variant::PlainEmbedding => vec![],
            Variant::Fusion {
                bert,
                sngram,
                psych,
            } => {
                let mut parts = Vec::new();
                if *bert {
                    parts.push(Variant::Fusion { bert: true, sngram: false, psych: false });
                }
                if *sngram {
                    parts.push(Variant::Fusion { bert: false, sngram: true, psych: false });
                }
                if *psych {
                    parts.push(Variant::Fusion { bert: false, sngram: false, psych: true });
                }
                if parts.len() > 1 {
                    parts
                } else {
                    vec![]
                }
            }
        }
    }
}

/// Hyperparameters and wiring of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Exactly five kernel widths, one per convolution.
    pub conv_branch_widths: Vec<usize>,
    pub filters_per_branch: usize,
    pub engineered_projection_units: usize,
    /// Fixed at 0.5.
    pub dropout: f64,
    /// 2 or 3.
    pub classes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub variant: Variant,
    /// Chain the five convolutions instead of running them in parallel.
    #[serde(default)]
    pub stacked_conv: bool,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
}

fn default_bn_momentum() -> f64 {
    0.9
}

fn default_bn_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    pub fn new(classes: usize, variant: Variant, seed: u64) -> ModelConfig {
        ModelConfig {
            conv_branch_widths: vec![2, 3, 4, 5, 6],
            filters_per_branch: 128,
            engineered_projection_units: 128,
            dropout: 0.5,
            classes,
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed,
            variant,
            stacked_conv: false,
            bn_momentum: default_bn_momentum(),
            bn_eps: default_bn_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_branch_widths.len() != 5 {
            return Err(Error::Config(format!(
                "exactly 5 convolution widths required, got {}",
                self.conv_branch_widths.len()
            )));
        }
        if self.conv_branch_widths.contains(&0) {
            return Err(Error::Config("convolution widths must be positive".into()));
        }
        if self.dropout != 0.5 {
            return Err(Error::Config(format!(
                "dropout is fixed at 0.5, got {}",
                self.dropout
            )));
        }
        if !(self.classes == 2 || self.classes == 3) {
            return Err(Error::Config(format!(
                "classes must be 2 or 3, got {}",
                self.classes
            )));
        }
        if self.filters_per_branch == 0 || self.engineered_projection_units == 0 {
            return Err(Error::Config("filter/projection counts must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.bn_momentum >= 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::Config("bn_momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Rewire a configuration to use exactly the given channels.
pub fn ablate(config: &ModelConfig, channels: &BTreeSet<Channel>) -> Result<ModelConfig> {
    let mut ablated = config.clone();
    ablated.variant = Variant::from_channels(channels)?;
    Ok(ablated)
}

/// Input shape contract the network is built against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDims {
    pub max_len: usize,
    pub embed_dim: usize,
    pub sngram_dim: usize,
    pub psych_dim: usize,
}

impl InputDims {
    pub fn channel_dim(&self, channel: EngineeredChannel) -> usize {
        match channel {
            EngineeredChannel::Sngram => self.sngram_dim,
            EngineeredChannel::Psych => self.psych_dim,
        }
    }
}

/// Build an untrained network for a configuration and input dimensions.
pub fn build(config: &ModelConfig, dims: &InputDims) -> Result<FusionNetwork> {
    FusionNetwork::build(config, dims)
}

/// Per-document class probabilities and the argmax label index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub argmax: usize,
}

/// Linkage between a trained model and the fitted artifacts it depends on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub embedder_snapshot: Option<String>,
    pub selector_id: Option<String>,
    pub standardizer_id: Option<String>,
}

/// A fitted model: weights, configuration, per-epoch loss history and the
/// manifest linking it to its feature pipeline.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub network: FusionNetwork,
    pub history: Vec<f64>,
    pub manifest: ModelManifest,
}

impl TrainedModel {
    pub fn config(&self) -> &ModelConfig {
        self.network.config()
    }

    pub fn dims(&self) -> &InputDims {
        self.network.dims()
    }
}

/// Minimize cross-entropy for `config.epochs` epochs with seeded shuffling,
/// dropout and initialization. Training twice with one seed is bitwise
/// reproducible.
pub fn train(
    mut network: FusionNetwork,
    embeddings: Option<&[TokenEmbeddingMatrix]>,
    engineered: Option<&EngineeredMatrix>,
    y: &[usize],
) -> Result<TrainedModel> {
    let n = y.len();
    if n == 0 {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let config = network.config().clone();
    if let Some(&bad) = y.iter().find(|&&label| label >= config.classes) {
        return Err(Error::Data(format!(
            "label index {bad} out of range for {} classes",
            config.classes
        )));
    }
    network.check_embeddings(embeddings, n)?;
    let engineered_rows = network.engineered_input(engineered)?;
    if let Some(rows) = &engineered_rows {
        if rows.nrows() != n {
            return Err(Error::Data(format!(
                "engineered matrix has {} rows for {} labels",
                rows.nrows(),
                n
            )));
        }
    }

    let mut shuffle_rng = substream(config.seed, "train.shuffle");
    let mut dropout_rng = substream(config.seed, "train.dropout");
    let mut optimizer = Adam::new(config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs);
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        indices.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch_idx in indices.chunks(config.batch_size) {
            let emb_batch: Option<Vec<&TokenEmbeddingMatrix>> =
                embeddings.map(|all| batch_idx.iter().map(|&i| &all[i]).collect());
            let eng_batch: Option<Array2<f64>> = engineered_rows
                .as_ref()
                .map(|rows| rows.select(Axis(0), batch_idx));
            let y_batch: Vec<usize> = batch_idx.iter().map(|&i| y[i]).collect();

            let (probs, tape) = network.forward(
                emb_batch.as_deref(),
                eng_batch.as_ref().map(|m| m.view()),
                Mode::TRAIN,
                Some(&mut dropout_rng),
            )?;
            let loss = FusionNetwork::loss(&probs, &y_batch);
            if !loss.is_finite() {
                return Err(Error::Model(format!(
                    "non-finite training loss at epoch {epoch}; \
                     try a lower learning_rate than {}",
                    config.learning_rate
                )));
            }
            epoch_loss += loss * y_batch.len() as f64;

            network.zero_grads();
            network.backward(&tape, &probs, &y_batch, emb_batch.as_deref());
            network.update_running_stats(&tape);
            optimizer.begin_step();
            let mut index = 0;
            network.for_each_param(&mut |_, param, grad| {
                optimizer.update_tensor(index, param, grad);
                index += 1;
            });
        }
        history.push(epoch_loss / n as f64);
    }

    Ok(TrainedModel {
        network,
        history,
        manifest: ModelManifest::default(),
    })
}

/// Deterministic inference: running batch-norm statistics, no dropout.
pub fn predict(
    model: &TrainedModel,
    embeddings: Option<&[TokenEmbeddingMatrix]>,
    engineered: Option<&EngineeredMatrix>,
) -> Result<Vec<Prediction>> {
    let network = &model.network;
    let n = embeddings
        .map(|e| e.len())
        .or_else(|| engineered.map(|m| m.n_rows()))
        .ok_or_else(|| Error::Model("predict received no inputs".into()))?;
    network.check_embeddings(embeddings, n)?;
    let engineered_rows = network.engineered_input(engineered)?;
    if let Some(rows) = &engineered_rows {
        if rows.nrows() != n {
            return Err(Error::Model(format!(
                "engineered matrix has {} rows, embeddings imply {n}",
                rows.nrows()
            )));
        }
    }

    let mut predictions = Vec::with_capacity(n);
    const CHUNK: usize = 256;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let emb_batch: Option<Vec<&TokenEmbeddingMatrix>> =
            embeddings.map(|all| idx.iter().map(|&i| &all[i]).collect());
        let eng_batch: Option<Array2<f64>> = engineered_rows
            .as_ref()
            .map(|rows| rows.select(Axis(0), &idx));
        let (probs, _) = network.forward(
            emb_batch.as_deref(),
            eng_batch.as_ref().map(|m| m.view()),
            Mode::INFER,
            None,
        )?;
        for row in probs.rows() {
            let mut argmax = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[argmax] {
                    argmax = j;
                }
            }
            predictions.push(Prediction {
                probabilities: row.to_vec(),
                argmax,
            });
        }
        start = end;
    }
    Ok(predictions)
}

/// Compare analytic gradients against central finite differences over every
/// parameter, with dropout disabled and batch norm on running statistics.
/// Returns the worst relative error.
pub fn finite_difference_check(
    network: &mut FusionNetwork,
    embeddings: Option<&[TokenEmbeddingMatrix]>,
    engineered: Option<&EngineeredMatrix>,
    y: &[usize],
) -> Result<f64> {
    let emb_refs: Option<Vec<&TokenEmbeddingMatrix>> =
        embeddings.map(|all| all.iter().collect());
    let engineered_rows = network.engineered_input(engineered)?;
    let engineered_view = engineered_rows.as_ref().map(|m| m.view());

    let loss_of = |net: &FusionNetwork| -> Result<f64> {
        let (probs, _) = net.forward(emb_refs.as_deref(), engineered_view, Mode::CHECK, None)?;
        Ok(FusionNetwork::loss(&probs, y))
    };

    // Analytic pass.
    let (probs, tape) = network.forward(emb_refs.as_deref(), engineered_view, Mode::CHECK, None)?;
    network.zero_grads();
    network.backward(&tape, &probs, y, emb_refs.as_deref());
    let mut analytic: Vec<(String, Array2<f64>)> = Vec::new();
    network.for_each_param(&mut |name, _, grad| {
        analytic.push((name.to_owned(), grad.clone()));
    });

    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for (tensor_idx, (name, grads)) in analytic.iter().enumerate() {
        for elem in 0..grads.len() {
            let bump = |net: &mut FusionNetwork, delta: f64| {
                let mut i = 0;
                net.for_each_param(&mut |_, param, _| {
                    if i == tensor_idx {
                        param.as_slice_mut().expect("standard layout")[elem] += delta;
                    }
                    i += 1;
                });
            };
            bump(network, h);
            let up = loss_of(network)?;
            bump(network, -2.0 * h);
            let down = loss_of(network)?;
            bump(network, h);
            let numeric = (up - down) / (2.0 * h);
            let a = grads.as_slice().expect("standard layout")[elem];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
            if rel > 1e-3 {
                return Err(Error::Model(format!(
                    "gradient mismatch at {name}[{elem}]: analytic {a}, numeric {numeric}"
                )));
            }
        }
    }
    Ok(worst)
}

const WEIGHTS_MAGIC: &[u8; 4] = b"PFWT";
const WEIGHTS_VERSION: u32 = 1;
const MANIFEST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestFile {
    version: u32,
    dims: InputDims,
    history: Vec<f64>,
    #[serde(flatten)]
    linkage: ModelManifest,
}

impl TrainedModel {
    /// Persist as a model artifact directory: `weights.bin`, `config.json`
    /// and `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let config_path = dir.join("config.json");
        let config_json = serde_json::to_string_pretty(self.network.config())
            .map_err(|e| Error::json(&config_path, e))?;
        std::fs::write(&config_path, config_json).map_err(|e| Error::io(&config_path, e))?;

        let manifest_path = dir.join("manifest.json");
        let manifest = ManifestFile {
            version: MANIFEST_VERSION,
            dims: self.network.dims().clone(),
            history: self.history.clone(),
            linkage: self.manifest.clone(),
        };
        let manifest_json =
            serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
        std::fs::write(&manifest_path, manifest_json)
            .map_err(|e| Error::io(&manifest_path, e))?;

        let weights_path = dir.join("weights.bin");
        let mut tensors: Vec<(String, Array2<f64>)> = Vec::new();
        let mut network = self.network.clone();
        network.for_each_state(&mut |name, tensor| {
            tensors.push((name.to_owned(), tensor.clone()));
        });
        let mut out = std::io::BufWriter::new(
            std::fs::File::create(&weights_path).map_err(|e| Error::io(&weights_path, e))?,
        );
        let io = |e| Error::io(&weights_path, e);
        out.write_all(WEIGHTS_MAGIC).map_err(io)?;
        out.write_u32::<LittleEndian>(WEIGHTS_VERSION).map_err(io)?;
        out.write_u64::<LittleEndian>(tensors.len() as u64).map_err(io)?;
        for (name, tensor) in &tensors {
            out.write_u32::<LittleEndian>(name.len() as u32).map_err(io)?;
            out.write_all(name.as_bytes()).map_err(io)?;
            out.write_u64::<LittleEndian>(tensor.nrows() as u64).map_err(io)?;
            out.write_u64::<LittleEndian>(tensor.ncols() as u64).map_err(io)?;
            for &v in tensor.iter() {
                out.write_f64::<LittleEndian>(v).map_err(io)?;
            }
        }
        Ok(())
    }

    /// Load a model artifact directory saved by [`TrainedModel::save`].
    pub fn load(dir: &Path) -> Result<TrainedModel> {
        let config_path = dir.join("config.json");
        let config: ModelConfig = serde_json::from_str(
            &std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?,
        )
        .map_err(|e| Error::json(&config_path, e))?;
        let manifest_path = dir.join("manifest.json");
        let manifest: ManifestFile = serde_json::from_str(
            &std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
        )
        .map_err(|e| Error::json(&manifest_path, e))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::Data(format!(
                "unsupported model manifest version {}",
                manifest.version
            )));
        }

        let mut network = FusionNetwork::build(&config, &manifest.dims)?;
        let weights_path = dir.join("weights.bin");
        let mut file = std::io::BufReader::new(
            std::fs::File::open(&weights_path).map_err(|e| Error::io(&weights_path, e))?,
        );
        let io = |e| Error::io(&weights_path, e);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic).map_err(io)?;
        if &magic != WEIGHTS_MAGIC {
            return Err(Error::Data("not a model weights file".into()));
        }
        let version = file.read_u32::<LittleEndian>().map_err(io)?;
        if version != WEIGHTS_VERSION {
            return Err(Error::Data(format!("unsupported weights version {version}")));
        }
        let count = file.read_u64::<LittleEndian>().map_err(io)? as usize;
        let mut loaded: std::collections::BTreeMap<String, Array2<f64>> = Default::default();
        for _ in 0..count {
            let name_len = file.read_u32::<LittleEndian>().map_err(io)? as usize;
            let mut name = vec![0u8; name_len];
            file.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Data("invalid tensor name".into()))?;
            let rows = file.read_u64::<LittleEndian>().map_err(io)? as usize;
            let cols = file.read_u64::<LittleEndian>().map_err(io)? as usize;
            let mut tensor = Array2::zeros((rows, cols));
            for v in tensor.iter_mut() {
                *v = file.read_f64::<LittleEndian>().map_err(io)?;
            }
            loaded.insert(name, tensor);
        }
        let mut missing = Vec::new();
        network.for_each_state(&mut |name, tensor| {
            match loaded.get(name) {
                Some(saved) if saved.dim() == tensor.dim() => tensor.assign(saved),
                _ => missing.push(name.to_owned()),
            }
        });
        if !missing.is_empty() {
            return Err(Error::Data(format!(
                "weights file is missing tensors: {missing:?}"
            )));
        }
        Ok(TrainedModel {
            network,
            history: manifest.history,
            manifest: manifest.linkage,
        })
    }
}

#[cfg(test)]
mod tests;
