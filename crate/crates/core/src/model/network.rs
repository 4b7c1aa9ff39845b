//! The fusion network graph: parameter storage, forward and backward passes.
//!
//! Embedding path (parallel mode): five 1-D convolutions over the token
//! axis, each followed by batch normalization and global max pooling; the
//! branch outputs are concatenated and dropped out. Engineered path: a
//! width-1 convolution over the feature vector (a dense projection, since
//! the vector is one position with D channels) followed by batch
//! normalization and identity pooling. Both paths are concatenated, dropped
//! out and fed to a dense softmax head. A stacked-convolution mode chains
//! the five convolutions sequentially with one batch norm and pool at the
//! end, kept behind a config flag for comparison.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use crate::embed::TokenEmbeddingMatrix;
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::selection::EngineeredMatrix;

use super::layers::{
    col2im_stacked, cross_entropy, cross_entropy_backward, dropout_mask, global_max_pool,
    global_max_pool_backward, im2col, im2col_stacked, softmax_rows, BatchNorm, BnCache, Dense,
};
use super::{InputDims, ModelConfig, Variant};

/// Forward-pass mode: batch statistics and dropout are training-only.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Mode {
    pub batch_stats: bool,
    pub train_dropout: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        batch_stats: true,
        train_dropout: true,
    };
    pub const INFER: Mode = Mode {
        batch_stats: false,
        train_dropout: false,
    };
    /// Gradient-check mode: no dropout, batch norm on running statistics.
    pub const CHECK: Mode = Mode {
        batch_stats: false,
        train_dropout: false,
    };
}

#[derive(Debug, Clone)]
struct EmbedBranch {
    width: usize,
    conv: Dense,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
struct StackedConvs {
    widths: Vec<usize>,
    convs: Vec<Dense>,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
struct EngineeredPath {
    proj: Dense,
    bn: BatchNorm,
}

#[derive(Debug, Clone)]
enum EmbedPath {
    /// Multi-width parallel branches (the standard wiring).
    Parallel(Vec<EmbedBranch>),
    /// Sequential Conv1..Conv5 with a single norm/pool at the end.
    Stacked(StackedConvs),
    /// Plain-embedder baseline: masked mean pooling straight to the head.
    Pooled,
    /// Engineered-only variants carry no embedding path.
    None,
}

#[derive(Debug, Clone)]
pub struct FusionNetwork {
    pub(crate) config: ModelConfig,
    pub(crate) dims: InputDims,
    embed_path: EmbedPath,
    engineered: Option<EngineeredPath>,
    head: Dense,
}

pub(crate) struct BranchTape {
    bn_cache: BnCache,
    argmax: Array2<usize>,
    positions: usize,
}

pub(crate) struct StackedTape {
    /// Input activations of each conv, shape (batch * t_i, c_i).
    inputs: Vec<Array2<f64>>,
    bn_cache: BnCache,
    argmax: Array2<usize>,
    positions: usize,
}

pub(crate) struct EngineeredTape {
    input: Array2<f64>,
    bn_cache: BnCache,
}

/// Intermediates of one forward pass, consumed by `backward`.
pub(crate) struct Tape {
    batch: usize,
    branches: Vec<BranchTape>,
    stacked: Option<StackedTape>,
    pooled_input: Option<Array2<f64>>,
    engineered: Option<EngineeredTape>,
    drop_embed: Option<Array2<f64>>,
    drop_concat: Option<Array2<f64>>,
    head_input: Array2<f64>,
    embed_width: usize,
}

impl FusionNetwork {
    pub fn build(config: &ModelConfig, dims: &InputDims) -> Result<FusionNetwork> {
        config.validate()?;
        let mut rng = substream(config.seed, "model.init");
        let filters = config.filters_per_branch;
        let mut embed_out = 0usize;
        let embed_path = match (&config.variant, config.stacked_conv) {
            (Variant::PlainEmbedding, _) => {
                validate_embed_dims(dims, 1)?;
                embed_out = dims.embed_dim;
                EmbedPath::Pooled
            }
            (Variant::Fusion { bert: false, .. }, _) => EmbedPath::None,
            (Variant::Fusion { bert: true, .. }, false) => {
                let max_width = *config.conv_branch_widths.iter().max().expect("5 widths");
                validate_embed_dims(dims, max_width)?;
                let branches = config
                    .conv_branch_widths
                    .iter()
                    .map(|&width| EmbedBranch {
                        width,
                        conv: Dense::init(filters, width * dims.embed_dim, 1.0, &mut rng),
                        bn: BatchNorm::new(filters, config.bn_momentum, config.bn_eps),
                    })
                    .collect();
                embed_out = config.conv_branch_widths.len() * filters;
                EmbedPath::Parallel(branches)
            }
            (Variant::Fusion { bert: true, .. }, true) => {
                let needed: usize =
                    config.conv_branch_widths.iter().map(|w| w - 1).sum::<usize>() + 1;
                validate_embed_dims(dims, needed)?;
                let mut convs = Vec::new();
                let mut in_dim = dims.embed_dim;
                for &width in &config.conv_branch_widths {
                    convs.push(Dense::init(filters, width * in_dim, 1.0, &mut rng));
                    in_dim = filters;
                }
                embed_out = filters;
                EmbedPath::Stacked(StackedConvs {
                    widths: config.conv_branch_widths.clone(),
                    convs,
                    bn: BatchNorm::new(filters, config.bn_momentum, config.bn_eps),
                })
            }
        };

        let engineered_channels = config.variant.engineered_channels();
        let engineered_dim: usize = engineered_channels
            .iter()
            .map(|ch| dims.channel_dim(*ch))
            .sum();
        let engineered = if engineered_channels.is_empty() {
            None
        } else {
            for ch in &engineered_channels {
                if dims.channel_dim(*ch) == 0 {
                    return Err(Error::Model(format!(
                        "variant {} uses the {} channel but its dimensionality is 0",
                        config.variant.name(),
                        ch.name()
                    )));
                }
            }
            Some(EngineeredPath {
                proj: Dense::init(
                    config.engineered_projection_units,
                    engineered_dim,
                    1.0,
                    &mut rng,
                ),
                bn: BatchNorm::new(
                    config.engineered_projection_units,
                    config.bn_momentum,
                    config.bn_eps,
                ),
            })
        };
        let engineered_out = engineered
            .as_ref()
            .map_or(0, |_| config.engineered_projection_units);

        let head_in = embed_out + engineered_out;
        if head_in == 0 {
            return Err(Error::Model(
                "model graph has no inputs wired to the head".into(),
            ));
        }
        // Small head init keeps untrained predictions near uniform.
        let head = Dense::init(config.classes, head_in, 0.05, &mut rng);
        Ok(FusionNetwork {
            config: config.clone(),
            dims: dims.clone(),
            embed_path,
            engineered,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dims(&self) -> &InputDims {
        &self.dims
    }

    pub fn head_input_dim(&self) -> usize {
        self.head.w.ncols()
    }

    /// Validate embedding inputs against the build-time contract.
    pub(crate) fn check_embeddings(
        &self,
        embeddings: Option<&[TokenEmbeddingMatrix]>,
        n_rows: usize,
    ) -> Result<()> {
        if !self.uses_embedding() {
            return Ok(());
        }
        let embeddings = embeddings.ok_or_else(|| {
            Error::Model(format!(
                "embedding channel: variant {} requires token embeddings",
                self.config.variant.name()
            ))
        })?;
        if embeddings.len() != n_rows {
            return Err(Error::Model(format!(
                "embedding channel: {} matrices for {} rows",
                embeddings.len(),
                n_rows
            )));
        }
        for m in embeddings {
            if m.max_len() != self.dims.max_len || m.embed_dim() != self.dims.embed_dim {
                return Err(Error::Model(format!(
                    "embedding channel: expected shape ({}, {}), got ({}, {})",
                    self.dims.max_len,
                    self.dims.embed_dim,
                    m.max_len(),
                    m.embed_dim()
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn uses_embedding(&self) -> bool {
        !matches!(self.embed_path, EmbedPath::None)
    }

    /// Extract this variant's engineered columns (sngram first, then psych),
    /// validating per-channel widths against the build-time dimensions.
    pub(crate) fn engineered_input(
        &self,
        matrix: Option<&EngineeredMatrix>,
    ) -> Result<Option<Array2<f64>>> {
        let channels = self.config.variant.engineered_channels();
        if channels.is_empty() {
            return Ok(None);
        }
        let matrix = matrix.ok_or_else(|| {
            Error::Model(format!(
                "engineered channels: variant {} requires an engineered matrix",
                self.config.variant.name()
            ))
        })?;
        let mut cols = Vec::new();
        for ch in &channels {
            let channel_cols = matrix.channel_columns(*ch);
            let want = self.dims.channel_dim(*ch);
            if channel_cols.len() != want {
                return Err(Error::Model(format!(
                    "{} channel: expected {} columns, got {}",
                    ch.name(),
                    want,
                    channel_cols.len()
                )));
            }
            cols.extend(channel_cols);
        }
        Ok(Some(matrix.data.select(Axis(1), &cols)))
    }

    pub(crate) fn forward(
        &self,
        embeddings: Option<&[&TokenEmbeddingMatrix]>,
        engineered: Option<ArrayView2<'_, f64>>,
        mode: Mode,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Array2<f64>, Tape)> {
        let batch = embeddings
            .map(|e| e.len())
            .or_else(|| engineered.map(|m| m.nrows()))
            .ok_or_else(|| Error::Model("forward pass received no inputs".into()))?;
        if batch == 0 {
            return Err(Error::Model("empty batch".into()));
        }

        let mut branches = Vec::new();
        let mut stacked = None;
        let mut pooled_input = None;
        let mut embed_out: Option<Array2<f64>> = None;
        match &self.embed_path {
            EmbedPath::Parallel(parallel) => {
                let samples = embeddings.expect("validated");
                let mut parts = Vec::new();
                for branch in parallel {
                    let u = im2col(samples, branch.width);
                    let c = branch.conv.forward(u.view());
                    let (normed, bn_cache) = branch.bn.forward(c.view(), mode.batch_stats);
                    let positions = normed.nrows() / batch;
                    let (g, argmax) = global_max_pool(normed.view(), batch);
                    parts.push(g);
                    branches.push(BranchTape {
                        bn_cache,
                        argmax,
                        positions,
                    });
                }
                embed_out = Some(hconcat(&parts));
            }
            EmbedPath::Stacked(stack) => {
                let samples = embeddings.expect("validated");
                let mut x = stack_embeddings(samples);
                let mut inputs = Vec::new();
                for (conv, &width) in stack.convs.iter().zip(&stack.widths) {
                    let u = im2col_stacked(x.view(), batch, width);
                    inputs.push(x);
                    x = conv.forward(u.view());
                }
                let (normed, bn_cache) = stack.bn.forward(x.view(), mode.batch_stats);
                let positions = normed.nrows() / batch;
                let (g, argmax) = global_max_pool(normed.view(), batch);
                embed_out = Some(g);
                stacked = Some(StackedTape {
                    inputs,
                    bn_cache,
                    argmax,
                    positions,
                });
            }
            EmbedPath::Pooled => {
                let samples = embeddings.expect("validated");
                let pooled = masked_mean_pool(samples);
                pooled_input = Some(pooled.clone());
                embed_out = Some(pooled);
            }
            EmbedPath::None => {}
        }

        let mut drop_embed = None;
        if let (Some(h), EmbedPath::Parallel(_) | EmbedPath::Stacked(_)) =
            (&mut embed_out, &self.embed_path)
        {
            if mode.train_dropout {
                let rng = rng.as_deref_mut().expect("dropout requires an rng");
                let mask = dropout_mask(h.dim(), self.config.dropout, rng);
                *h *= &mask;
                drop_embed = Some(mask);
            }
        }

        let mut engineered_tape = None;
        let engineered_out = match (&self.engineered, engineered) {
            (Some(path), Some(v)) => {
                let z = path.proj.forward(v);
                let (normed, bn_cache) = path.bn.forward(z.view(), mode.batch_stats);
                engineered_tape = Some(EngineeredTape {
                    input: v.to_owned(),
                    bn_cache,
                });
                Some(normed)
            }
            (None, _) => None,
            (Some(_), None) => {
                return Err(Error::Model(
                    "engineered path is wired but no engineered input was given".into(),
                ))
            }
        };

        let embed_width = embed_out.as_ref().map_or(0, |h| h.ncols());
        let mut concat = match (embed_out, engineered_out) {
            (Some(h), Some(e)) => hconcat(&[h, e]),
            (Some(h), None) => h,
            (None, Some(e)) => e,
            (None, None) => unreachable!("build() rejects headless graphs"),
        };

        let mut drop_concat = None;
        if mode.train_dropout && !matches!(self.embed_path, EmbedPath::Pooled) {
            let rng = rng.as_deref_mut().expect("dropout requires an rng");
            let mask = dropout_mask(concat.dim(), self.config.dropout, rng);
            concat *= &mask;
            drop_concat = Some(mask);
        }

        let logits = self.head.forward(concat.view());
        let probs = softmax_rows(logits.view());
        Ok((
            probs,
            Tape {
                batch,
                branches,
                stacked,
                pooled_input,
                engineered: engineered_tape,
                drop_embed,
                drop_concat,
                head_input: concat,
                embed_width,
            },
        ))
    }

    pub(crate) fn loss(probs: &Array2<f64>, y: &[usize]) -> f64 {
        cross_entropy(probs.view(), y)
    }

    /// Accumulate gradients for one batch. `embeddings` must be the same
    /// slice the forward pass saw (convolution inputs are re-unfolded here
    /// instead of being stored on the tape).
    pub(crate) fn backward(
        &mut self,
        tape: &Tape,
        probs: &Array2<f64>,
        y: &[usize],
        embeddings: Option<&[&TokenEmbeddingMatrix]>,
    ) {
        let dlogits = cross_entropy_backward(probs, y);
        let mut dconcat = self
            .head
            .backward(tape.head_input.view(), dlogits.view(), true)
            .expect("requested dx");
        if let Some(mask) = &tape.drop_concat {
            dconcat *= mask;
        }
        let (dembed, dengineered) = if tape.embed_width > 0 {
            let de = dconcat.slice(s![.., tape.embed_width..]).to_owned();
            let dh = dconcat.slice(s![.., ..tape.embed_width]).to_owned();
            (Some(dh), Some(de))
        } else {
            (None, Some(dconcat))
        };

        if let (Some(path), Some(tape_e)) = (&mut self.engineered, &tape.engineered) {
            if let Some(de) = dengineered {
                if de.ncols() == path.bn.gamma.ncols() {
                    let dz = path.bn.backward(&tape_e.bn_cache, de.view());
                    path.proj.backward(tape_e.input.view(), dz.view(), false);
                }
            }
        }

        if let Some(mut dh) = dembed {
            if let Some(mask) = &tape.drop_embed {
                dh *= mask;
            }
            match &mut self.embed_path {
                EmbedPath::Parallel(parallel) => {
                    let samples = embeddings.expect("embedding path needs inputs");
                    let filters = self.config.filters_per_branch;
                    for (b, (branch, bt)) in parallel.iter_mut().zip(&tape.branches).enumerate() {
                        let dg = dh.slice(s![.., b * filters..(b + 1) * filters]);
                        let dnormed = global_max_pool_backward(dg, &bt.argmax, bt.positions);
                        let dc = branch.bn.backward(&bt.bn_cache, dnormed.view());
                        let u = im2col(samples, branch.width);
                        branch.conv.backward(u.view(), dc.view(), false);
                    }
                }
                EmbedPath::Stacked(stack) => {
                    let st = tape.stacked.as_ref().expect("stacked tape");
                    let dnormed = global_max_pool_backward(dh.view(), &st.argmax, st.positions);
                    let mut dcurrent = stack.bn.backward(&st.bn_cache, dnormed.view());
                    for i in (0..stack.convs.len()).rev() {
                        let input = &st.inputs[i];
                        let width = stack.widths[i];
                        let u = im2col_stacked(input.view(), tape.batch, width);
                        let du = stack.convs[i]
                            .backward(u.view(), dcurrent.view(), i > 0)
                            .map(|du| {
                                let t = input.nrows() / tape.batch;
                                col2im_stacked(du.view(), tape.batch, t, input.ncols(), width)
                            });
                        match du {
                            Some(dx) => dcurrent = dx,
                            None => break,
                        }
                    }
                }
                EmbedPath::Pooled => {
                    // Head backward already consumed the pooled input; the
                    // pooling itself has no parameters.
                    let _ = &tape.pooled_input;
                }
                EmbedPath::None => {}
            }
        }
    }

    pub(crate) fn update_running_stats(&mut self, tape: &Tape) {
        match &mut self.embed_path {
            EmbedPath::Parallel(parallel) => {
                for (branch, bt) in parallel.iter_mut().zip(&tape.branches) {
                    branch.bn.update_running(&bt.bn_cache);
                }
            }
            EmbedPath::Stacked(stack) => {
                if let Some(st) = &tape.stacked {
                    stack.bn.update_running(&st.bn_cache);
                }
            }
            _ => {}
        }
        if let (Some(path), Some(te)) = (&mut self.engineered, &tape.engineered) {
            path.bn.update_running(&te.bn_cache);
        }
    }

    pub(crate) fn zero_grads(&mut self) {
        match &mut self.embed_path {
            EmbedPath::Parallel(parallel) => {
                for b in parallel {
                    b.conv.zero_grads();
                    b.bn.zero_grads();
                }
            }
            EmbedPath::Stacked(stack) => {
                for c in &mut stack.convs {
                    c.zero_grads();
                }
                stack.bn.zero_grads();
            }
            _ => {}
        }
        if let Some(path) = &mut self.engineered {
            path.proj.zero_grads();
            path.bn.zero_grads();
        }
        self.head.zero_grads();
    }

    /// Visit every trainable parameter with its gradient, in a fixed order.
    pub(crate) fn for_each_param(
        &mut self,
        f: &mut dyn FnMut(&str, &mut Array2<f64>, &Array2<f64>),
    ) {
        match &mut self.embed_path {
            EmbedPath::Parallel(parallel) => {
                for (i, b) in parallel.iter_mut().enumerate() {
                    f(&format!("branch{i}.conv.w"), &mut b.conv.w, &b.conv.gw);
                    f(&format!("branch{i}.conv.b"), &mut b.conv.b, &b.conv.gb);
                    f(&format!("branch{i}.bn.gamma"), &mut b.bn.gamma, &b.bn.g_gamma);
                    f(&format!("branch{i}.bn.beta"), &mut b.bn.beta, &b.bn.g_beta);
                }
            }
            EmbedPath::Stacked(stack) => {
                for (i, c) in stack.convs.iter_mut().enumerate() {
                    f(&format!("stack{i}.conv.w"), &mut c.w, &c.gw);
                    f(&format!("stack{i}.conv.b"), &mut c.b, &c.gb);
                }
                f("stack.bn.gamma", &mut stack.bn.gamma, &stack.bn.g_gamma);
                f("stack.bn.beta", &mut stack.bn.beta, &stack.bn.g_beta);
            }
            _ => {}
        }
        if let Some(path) = &mut self.engineered {
            f("engineered.proj.w", &mut path.proj.w, &path.proj.gw);
            f("engineered.proj.b", &mut path.proj.b, &path.proj.gb);
            f("engineered.bn.gamma", &mut path.bn.gamma, &path.bn.g_gamma);
            f("engineered.bn.beta", &mut path.bn.beta, &path.bn.g_beta);
        }
        f("head.w", &mut self.head.w, &self.head.gw);
        f("head.b", &mut self.head.b, &self.head.gb);
    }

    /// Snapshot of all state tensors (parameters plus batch-norm running
    /// statistics) by name.
    pub fn state_tensors(&self) -> Vec<(String, Array2<f64>)> {
        let mut out = Vec::new();
        let mut copy = self.clone();
        copy.for_each_state(&mut |name, tensor| out.push((name.to_owned(), tensor.clone())));
        out
    }

    /// Visit all state tensors (parameters plus batch-norm running
    /// statistics) for persistence.
    pub(crate) fn for_each_state(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        match &mut self.embed_path {
            EmbedPath::Parallel(parallel) => {
                for (i, b) in parallel.iter_mut().enumerate() {
                    f(&format!("branch{i}.conv.w"), &mut b.conv.w);
                    f(&format!("branch{i}.conv.b"), &mut b.conv.b);
                    f(&format!("branch{i}.bn.gamma"), &mut b.bn.gamma);
                    f(&format!("branch{i}.bn.beta"), &mut b.bn.beta);
                    f(&format!("branch{i}.bn.running_mean"), &mut b.bn.running_mean);
                    f(&format!("branch{i}.bn.running_var"), &mut b.bn.running_var);
                }
            }
            EmbedPath::Stacked(stack) => {
                for (i, c) in stack.convs.iter_mut().enumerate() {
                    f(&format!("stack{i}.conv.w"), &mut c.w);
                    f(&format!("stack{i}.conv.b"), &mut c.b);
                }
                f("stack.bn.gamma", &mut stack.bn.gamma);
                f("stack.bn.beta", &mut stack.bn.beta);
                f("stack.bn.running_mean", &mut stack.bn.running_mean);
                f("stack.bn.running_var", &mut stack.bn.running_var);
            }
            _ => {}
        }
        if let Some(path) = &mut self.engineered {
            f("engineered.proj.w", &mut path.proj.w);
            f("engineered.proj.b", &mut path.proj.b);
            f("engineered.bn.gamma", &mut path.bn.gamma);
            f("engineered.bn.beta", &mut path.bn.beta);
            f("engineered.bn.running_mean", &mut path.bn.running_mean);
            f("engineered.bn.running_var", &mut path.bn.running_var);
        }
        f("head.w", &mut self.head.w);
        f("head.b", &mut self.head.b);
    }
}

fn validate_embed_dims(dims: &InputDims, min_len: usize) -> Result<()> {
    if dims.embed_dim == 0 {
        return Err(Error::Model("embedding channel: embed_dim must be positive".into()));
    }
    if dims.max_len < min_len {
        return Err(Error::Model(format!(
            "embedding channel: max_len {} is shorter than the receptive field {}",
            dims.max_len, min_len
        )));
    }
    Ok(())
}

fn hconcat(parts: &[Array2<f64>]) -> Array2<f64> {
    let rows = parts[0].nrows();
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = Array2::zeros((rows, cols));
    let mut offset = 0;
    for p in parts {
        out.slice_mut(s![.., offset..offset + p.ncols()]).assign(p);
        offset += p.ncols();
    }
    out
}

fn stack_embeddings(samples: &[&TokenEmbeddingMatrix]) -> Array2<f64> {
    let t = samples[0].max_len();
    let e = samples[0].embed_dim();
    let mut x = Array2::zeros((samples.len() * t, e));
    for (i, m) in samples.iter().enumerate() {
        x.slice_mut(s![i * t..(i + 1) * t, ..]).assign(&m.values);
    }
    x
}

fn masked_mean_pool(samples: &[&TokenEmbeddingMatrix]) -> Array2<f64> {
    let e = samples[0].embed_dim();
    let mut out = Array2::zeros((samples.len(), e));
    for (i, m) in samples.iter().enumerate() {
        let mut count = 0.0;
        for (pos, &real) in m.mask.iter().enumerate() {
            if real {
                let row = m.values.row(pos);
                for j in 0..e {
                    out[[i, j]] += row[j];
                }
                count += 1.0;
            }
        }
        if count > 0.0 {
            for j in 0..e {
                out[[i, j]] /= count;
            }
        }
    }
    out
}
