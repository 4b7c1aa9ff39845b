use std::collections::BTreeSet;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embed::{EmbedderSpec, Embedder, StubEmbedder, TokenEmbeddingMatrix};
use crate::preprocess::shape_tokens;
use crate::selection::{EngineeredChannel, EngineeredMatrix, FeatureName};

use super::*;

fn channels(list: &[Channel]) -> BTreeSet<Channel> {
    list.iter().copied().collect()
}

fn tiny_config(variant: Variant, classes: usize, seed: u64) -> ModelConfig {
    let mut config = ModelConfig::new(classes, variant, seed);
    config.filters_per_branch = 4;
    config.engineered_projection_units = 4;
    config.epochs = 5;
    config.batch_size = 4;
    config
}

fn tiny_dims() -> InputDims {
    InputDims {
        max_len: 10,
        embed_dim: 8,
        sngram_dim: 4,
        psych_dim: 2,
    }
}

fn random_embedding(max_len: usize, dim: usize, seed: u64) -> TokenEmbeddingMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Array2::zeros((max_len, dim));
    for v in values.iter_mut() {
        *v = rng.random::<f64>() * 2.0 - 1.0;
    }
    TokenEmbeddingMatrix {
        values,
        mask: vec![true; max_len],
    }
}

fn random_engineered(n: usize, sngram_dim: usize, psych_dim: usize, seed: u64) -> EngineeredMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Array2::zeros((n, sngram_dim + psych_dim));
    for v in data.iter_mut() {
        *v = rng.random::<f64>() * 2.0 - 1.0;
    }
    let columns = (0..sngram_dim)
        .map(|i| FeatureName {
            channel: EngineeredChannel::Sngram,
            name: format!("s{i}"),
        })
        .chain((0..psych_dim).map(|i| FeatureName {
            channel: EngineeredChannel::Psych,
            name: format!("p{i}"),
        }))
        .collect();
    EngineeredMatrix::new(data, columns).unwrap()
}

fn full_variant() -> Variant {
    Variant::Fusion {
        bert: true,
        sngram: true,
        psych: true,
    }
}

#[test]
fn default_binary_config_outputs_two_probabilities() {
    let config = tiny_config(full_variant(), 2, 1);
    let dims = tiny_dims();
    let network = build(&config, &dims).unwrap();
    let model = TrainedModel {
        network,
        history: vec![],
        manifest: ModelManifest::default(),
    };
    let embeddings = vec![random_embedding(10, 8, 0)];
    let engineered = random_engineered(1, 4, 2, 0);
    let preds = predict(&model, Some(&embeddings), Some(&engineered)).unwrap();
    assert_eq!(preds[0].probabilities.len(), 2);
}

#[test]
fn ternary_config_outputs_three_probabilities() {
    let config = tiny_config(full_variant(), 3, 1);
    let network = build(&config, &tiny_dims()).unwrap();
    let model = TrainedModel {
        network,
        history: vec![],
        manifest: ModelManifest::default(),
    };
    let embeddings = vec![random_embedding(10, 8, 0)];
    let engineered = random_engineered(1, 4, 2, 0);
    let preds = predict(&model, Some(&embeddings), Some(&engineered)).unwrap();
    assert_eq!(preds[0].probabilities.len(), 3);
}

#[test]
fn branch_weight_shapes_match_architecture() {
    let config = tiny_config(full_variant(), 2, 1);
    let dims = tiny_dims();
    let mut network = build(&config, &dims).unwrap();
    let mut shapes = std::collections::BTreeMap::new();
    network.for_each_state(&mut |name, tensor| {
        shapes.insert(name.to_owned(), tensor.dim());
    });
    for (i, &w) in config.conv_branch_widths.iter().enumerate() {
        assert_eq!(
            shapes[&format!("branch{i}.conv.w")],
            (config.filters_per_branch, w * dims.embed_dim)
        );
    }
    assert_eq!(
        shapes["engineered.proj.w"],
        (config.engineered_projection_units, dims.sngram_dim + dims.psych_dim)
    );
    assert_eq!(
        shapes["head.w"],
        (
            2,
            5 * config.filters_per_branch + config.engineered_projection_units
        )
    );
}

#[test]
fn forward_on_zero_inputs_is_a_probability_vector() {
    let config = tiny_config(full_variant(), 2, 3);
    let network = build(&config, &tiny_dims()).unwrap();
    let model = TrainedModel {
        network,
        history: vec![],
        manifest: ModelManifest::default(),
    };
    let zero_embedding = TokenEmbeddingMatrix {
        values: Array2::zeros((10, 8)),
        mask: vec![true; 10],
    };
    let engineered = EngineeredMatrix::new(
        Array2::zeros((1, 6)),
        random_engineered(1, 4, 2, 0).columns,
    )
    .unwrap();
    let preds = predict(&model, Some(&[zero_embedding]), Some(&engineered)).unwrap();
    let sum: f64 = preds[0].probabilities.iter().sum();
    assert!((sum - 1.0).abs() < 1e-6);
    assert!(preds[0].probabilities.iter().all(|&p| p >= 0.0));
}

#[test]
fn softmax_sums_to_one_on_random_inputs() {
    let config = tiny_config(full_variant(), 3, 7);
    let network = build(&config, &tiny_dims()).unwrap();
    let model = TrainedModel {
        network,
        history: vec![],
        manifest: ModelManifest::default(),
    };
    let n = 50;
    let embeddings: Vec<TokenEmbeddingMatrix> =
        (0..n).map(|i| random_embedding(10, 8, i as u64)).collect();
    let engineered = random_engineered(n, 4, 2, 99);
    let preds = predict(&model, Some(&embeddings), Some(&engineered)).unwrap();
    for p in preds {
        let sum: f64 = p.probabilities.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
}

#[test]
fn gradient_check_full_variant() {
    let config = tiny_config(full_variant(), 2, 11);
    let mut network = build(&config, &tiny_dims()).unwrap();
    let embeddings: Vec<TokenEmbeddingMatrix> =
        (0..4).map(|i| random_embedding(10, 8, 100 + i as u64)).collect();
    let engineered = random_engineered(4, 4, 2, 17);
    let y = vec![0, 1, 1, 0];
    let worst =
        finite_difference_check(&mut network, Some(&embeddings), Some(&engineered), &y).unwrap();
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn gradient_check_engineered_only() {
    let config = tiny_config(
        Variant::from_channels(&channels(&[Channel::Sngram, Channel::Psych])).unwrap(),
        3,
        13,
    );
    let mut network = build(&config, &tiny_dims()).unwrap();
    let engineered = random_engineered(5, 4, 2, 23);
    let y = vec![0, 1, 2, 1, 0];
    let worst = finite_difference_check(&mut network, None, Some(&engineered), &y).unwrap();
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn gradient_check_baseline() {
    let config = tiny_config(Variant::PlainEmbedding, 2, 19);
    let mut network = build(&config, &tiny_dims()).unwrap();
    let embeddings: Vec<TokenEmbeddingMatrix> =
        (0..4).map(|i| random_embedding(10, 8, 31 + i as u64)).collect();
    let y = vec![0, 1, 0, 1];
    let worst = finite_difference_check(&mut network, Some(&embeddings), None, &y).unwrap();
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn gradient_check_stacked_mode() {
    let mut config = tiny_config(full_variant(), 2, 23);
    config.stacked_conv = true;
    let dims = InputDims {
        max_len: 18,
        embed_dim: 8,
        sngram_dim: 4,
        psych_dim: 2,
    };
    let mut network = build(&config, &dims).unwrap();
    let embeddings: Vec<TokenEmbeddingMatrix> =
        (0..3).map(|i| random_embedding(18, 8, 41 + i as u64)).collect();
    let engineered = random_engineered(3, 4, 2, 29);
    let y = vec![1, 0, 1];
    let worst =
        finite_difference_check(&mut network, Some(&embeddings), Some(&engineered), &y).unwrap();
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

fn separable_inputs(
    n_per_class: usize,
    max_len: usize,
    dim: usize,
) -> (Vec<TokenEmbeddingMatrix>, EngineeredMatrix, Vec<usize>) {
    let embedder = StubEmbedder::new(EmbedderSpec::stub(dim), 7);
    let mut embeddings = Vec::new();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for i in 0..(2 * n_per_class) {
        let class = i % 2;
        let marker = if class == 0 { "alphaword" } else { "betaword" };
        let text = format!("filler{} {marker} tail{}", i % 5, i % 3);
        let seq = shape_tokens(text.split_whitespace(), max_len).unwrap();
        embeddings.push(embedder.embed(&seq).unwrap());
        rows.push(vec![
            class as f64,
            0.5,
            if class == 0 { -1.0 } else { 1.0 },
            0.25,
            class as f64 * 2.0 - 1.0,
            0.0,
        ]);
        y.push(class);
    }
    let data = Array2::from_shape_vec(
        (2 * n_per_class, 6),
        rows.into_iter().flatten().collect(),
    )
    .unwrap();
    let columns = (0..4)
        .map(|i| FeatureName {
            channel: EngineeredChannel::Sngram,
            name: format!("s{i}"),
        })
        .chain((0..2).map(|i| FeatureName {
            channel: EngineeredChannel::Psych,
            name: format!("p{i}"),
        }))
        .collect();
    (embeddings, EngineeredMatrix::new(data, columns).unwrap(), y)
}

#[test]
fn training_fits_a_separable_set() {
    let (embeddings, engineered, y) = separable_inputs(40, 8, 16);
    let mut config = tiny_config(full_variant(), 2, 5);
    config.filters_per_branch = 8;
    config.engineered_projection_units = 8;
    config.epochs = 30;
    config.batch_size = 16;
    config.learning_rate = 3e-3;
    let dims = InputDims {
        max_len: 8,
        embed_dim: 16,
        sngram_dim: 4,
        psych_dim: 2,
    };
    let network = build(&config, &dims).unwrap();
    let model = train(network, Some(&embeddings), Some(&engineered), &y).unwrap();
    assert_eq!(model.history.len(), 30);
    let preds = predict(&model, Some(&embeddings), Some(&engineered)).unwrap();
    let correct = preds
        .iter()
        .zip(&y)
        .filter(|(p, &label)| p.argmax == label)
        .count();
    let accuracy = correct as f64 / y.len() as f64;
    assert!(accuracy >= 0.95, "training accuracy {accuracy}");
}

#[test]
fn zero_epochs_predicts_near_uniform() {
    let (embeddings, engineered, y) = separable_inputs(10, 8, 16);
    let mut config = tiny_config(full_variant(), 2, 5);
    config.epochs = 0;
    let dims = InputDims {
        max_len: 8,
        embed_dim: 16,
        sngram_dim: 4,
        psych_dim: 2,
    };
    let network = build(&config, &dims).unwrap();
    let model = train(network, Some(&embeddings), Some(&engineered), &y).unwrap();
    assert!(model.history.is_empty());
    let preds = predict(&model, Some(&embeddings), Some(&engineered)).unwrap();
    for p in preds {
        for &prob in &p.probabilities {
            assert!((prob - 0.5).abs() < 0.1, "untrained probability {prob}");
        }
    }
}

#[test]
fn fixed_seed_training_is_bit_reproducible() {
    let (embeddings, engineered, y) = separable_inputs(10, 8, 16);
    let mut config = tiny_config(full_variant(), 2, 21);
    config.epochs = 3;
    let dims = InputDims {
        max_len: 8,
        embed_dim: 16,
        sngram_dim: 4,
        psych_dim: 2,
    };
    let run = || {
        let network = build(&config, &dims).unwrap();
        train(network, Some(&embeddings), Some(&engineered), &y).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.history.len(), b.history.len());
    for (x, z) in a.history.iter().zip(&b.history) {
        assert_eq!(x.to_bits(), z.to_bits(), "history diverged");
    }
    let collect = |m: &TrainedModel| {
        let mut tensors = Vec::new();
        let mut network = m.network.clone();
        network.for_each_state(&mut |name, t| tensors.push((name.to_owned(), t.clone())));
        tensors
    };
    for ((name_a, ta), (_, tb)) in collect(&a).iter().zip(collect(&b).iter()) {
        for (va, vb) in ta.iter().zip(tb.iter()) {
            assert_eq!(va.to_bits(), vb.to_bits(), "weight diverged in {name_a}");
        }
    }
}

#[test]
fn duplicate_rows_get_identical_predictions() {
    let config = tiny_config(full_variant(), 2, 2);
    let network = build(&config, &tiny_dims()).unwrap();
    let model = TrainedModel {
        network,
        history: vec![],
        manifest: ModelManifest::default(),
    };
    let e = random_embedding(10, 8, 5);
    let embeddings = vec![e.clone(), e];
    let mut engineered = random_engineered(2, 4, 2, 5);
    let row0: Vec<f64> = engineered.data.row(0).to_vec();
    for (j, v) in row0.into_iter().enumerate() {
        engineered.data[[1, j]] = v;
    }
    let preds = predict(&model, Some(&embeddings), Some(&engineered)).unwrap();
    assert_eq!(preds[0], preds[1]);
}

#[test]
fn width_one_convolutions_are_permutation_invariant() {
    let mut config = tiny_config(
        Variant::from_channels(&channels(&[Channel::Bert])).unwrap(),
        2,
        31,
    );
    config.conv_branch_widths = vec![1, 1, 1, 1, 1];
    let dims = InputDims {
        max_len: 6,
        embed_dim: 8,
        sngram_dim: 0,
        psych_dim: 0,
    };
    let network = build(&config, &dims).unwrap();
    let model = TrainedModel {
        network,
        history: vec![],
        manifest: ModelManifest::default(),
    };
    let original = random_embedding(6, 8, 77);
    let mut permuted = original.clone();
    // Reverse the token order.
    for i in 0..6 {
        for j in 0..8 {
            permuted.values[[i, j]] = original.values[[5 - i, j]];
        }
    }
    let a = predict(&model, Some(&[original]), None).unwrap();
    let b = predict(&model, Some(&[permuted]), None).unwrap();
    for (pa, pb) in a[0].probabilities.iter().zip(&b[0].probabilities) {
        assert!((pa - pb).abs() < 1e-12, "{pa} vs {pb}");
    }
}

#[test]
fn wider_convolutions_are_permutation_sensitive() {
    let mut config = tiny_config(
        Variant::from_channels(&channels(&[Channel::Bert])).unwrap(),
        2,
        31,
    );
    config.conv_branch_widths = vec![2, 2, 2, 2, 2];
    let dims = InputDims {
        max_len: 6,
        embed_dim: 8,
        sngram_dim: 0,
        psych_dim: 0,
    };
    let network = build(&config, &dims).unwrap();
    let model = TrainedModel {
        network,
        history: vec![],
        manifest: ModelManifest::default(),
    };
    let original = random_embedding(6, 8, 78);
    let mut permuted = original.clone();
    // Swap the first two tokens, which breaks every bigram window spanning
    // position 0..2.
    for j in 0..8 {
        permuted.values[[0, j]] = original.values[[1, j]];
        permuted.values[[1, j]] = original.values[[0, j]];
    }
    let a = predict(&model, Some(&[original]), None).unwrap();
    let b = predict(&model, Some(&[permuted]), None).unwrap();
    let diff: f64 = a[0]
        .probabilities
        .iter()
        .zip(&b[0].probabilities)
        .map(|(x, z)| (x - z).abs())
        .sum();
    assert!(diff > 1e-9, "permutation left the output unchanged");
}

#[test]
fn ablate_wires_expected_inputs() {
    let base = tiny_config(full_variant(), 2, 1);
    // bert only: no engineered input required.
    let bert_only = ablate(&base, &channels(&[Channel::Bert])).unwrap();
    let network = build(&bert_only, &tiny_dims()).unwrap();
    let model = TrainedModel {
        network,
        history: vec![],
        manifest: ModelManifest::default(),
    };
    let embeddings = vec![random_embedding(10, 8, 1)];
    assert!(predict(&model, Some(&embeddings), None).is_ok());

    // engineered only: no embeddings required.
    let engineered_only = ablate(&base, &channels(&[Channel::Sngram, Channel::Psych])).unwrap();
    let network = build(&engineered_only, &tiny_dims()).unwrap();
    let model = TrainedModel {
        network,
        history: vec![],
        manifest: ModelManifest::default(),
    };
    let engineered = random_engineered(2, 4, 2, 3);
    assert!(predict(&model, None, Some(&engineered)).is_ok());

    // empty set rejected.
    assert!(ablate(&base, &BTreeSet::new()).is_err());

    // full set wires both paths.
    let full = ablate(&base, &channels(&[Channel::Bert, Channel::Sngram, Channel::Psych])).unwrap();
    assert_eq!(full.variant.name(), "bert+sngram+psych");
}

#[test]
fn dimension_mismatch_errors_name_the_channel() {
    let config = tiny_config(full_variant(), 2, 1);
    let network = build(&config, &tiny_dims()).unwrap();
    let model = TrainedModel {
        network,
        history: vec![],
        manifest: ModelManifest::default(),
    };
    // Wrong embedding shape.
    let embeddings = vec![random_embedding(9, 8, 1)];
    let engineered = random_engineered(1, 4, 2, 1);
    let err = predict(&model, Some(&embeddings), Some(&engineered))
        .err()
        .unwrap();
    assert!(err.to_string().contains("embedding channel"), "{err}");
    // Wrong sngram width.
    let embeddings = vec![random_embedding(10, 8, 1)];
    let engineered = random_engineered(1, 3, 2, 1);
    let err = predict(&model, Some(&embeddings), Some(&engineered))
        .err()
        .unwrap();
    assert!(err.to_string().contains("sngram channel"), "{err}");
}

#[test]
fn save_load_roundtrip_preserves_predictions() {
    let (embeddings, engineered, y) = separable_inputs(8, 8, 16);
    let mut config = tiny_config(full_variant(), 2, 77);
    config.epochs = 2;
    let dims = InputDims {
        max_len: 8,
        embed_dim: 16,
        sngram_dim: 4,
        psych_dim: 2,
    };
    let network = build(&config, &dims).unwrap();
    let mut model = train(network, Some(&embeddings), Some(&engineered), &y).unwrap();
    model.manifest.embedder_snapshot = Some("stub-test".into());
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let loaded = TrainedModel::load(dir.path()).unwrap();
    assert_eq!(loaded.manifest.embedder_snapshot.as_deref(), Some("stub-test"));
    assert_eq!(loaded.history, model.history);
    let a = predict(&model, Some(&embeddings), Some(&engineered)).unwrap();
    let b = predict(&loaded, Some(&embeddings), Some(&engineered)).unwrap();
    for (pa, pb) in a.iter().zip(&b) {
        for (x, z) in pa.probabilities.iter().zip(&pb.probabilities) {
            assert_eq!(x.to_bits(), z.to_bits());
        }
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let config = tiny_config(
        Variant::from_channels(&channels(&[Channel::Sngram, Channel::Psych])).unwrap(),
        2,
        3,
    );
    let network = build(&config, &tiny_dims()).unwrap();
    let mut engineered = random_engineered(8, 4, 2, 1);
    engineered.data[[0, 0]] = f64::INFINITY;
    let y: Vec<usize> = (0..8).map(|i| i % 2).collect();
    let err = train(network, None, Some(&engineered), &y).err().unwrap();
    let message = err.to_string();
    assert!(message.contains("non-finite"), "{message}");
    assert!(message.contains("learning_rate"), "{message}");
}

#[test]
fn config_validation_rules() {
    let mut config = tiny_config(full_variant(), 2, 1);
    config.conv_branch_widths = vec![2, 3, 4];
    assert!(config.validate().is_err());
    let mut config = tiny_config(full_variant(), 2, 1);
    config.dropout = 0.4;
    assert!(config.validate().is_err());
    let mut config = tiny_config(full_variant(), 4, 1);
    assert!(config.validate().is_err());
    config.classes = 2;
    assert!(config.validate().is_ok());
}

#[test]
fn variant_names_and_standard_eight() {
    let names: Vec<String> = Variant::standard_eight()
        .iter()
        .map(|v| v.name())
        .collect();
    assert_eq!(
        names,
        vec![
            "baseline",
            "bert",
            "sngram",
            "psych",
            "sngram+psych",
            "bert+sngram",
            "bert+psych",
            "bert+sngram+psych"
        ]
    );
    assert_eq!(
        Variant::parse("bert+sngram").unwrap().name(),
        "bert+sngram"
    );
    let comps = Variant::parse("bert+sngram").unwrap().single_channel_components();
    assert_eq!(comps.len(), 2);
}
