use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::grad_check;

fn tiny(input_dim: usize) -> EncoderConfig {
    EncoderConfig::tiny(input_dim)
}

fn features(t: usize, f: usize, seed: u64, amp: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[t, f], |_| rng.random_range(-amp..amp))
}

fn run_cnn(params: &EncoderParams<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let h = cnn_forward(&mut tape, &params.config, &p, xv)?;
    Ok(tape.value(h).clone())
}

fn run_transformer(params: &EncoderParams<f64>, h: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let hv = tape.constant(h.clone());
    let y = transformer_forward(&mut tape, &params.config, &p, hv, &mut Mode::Eval).unwrap();
    tape.value(y).clone()
}

#[test]
fn init_is_deterministic_in_seed() {
    let cfg = EncoderConfig::desk(8);
    let a = EncoderParams::<f32>::init(&cfg, 42).unwrap();
    let b = EncoderParams::<f32>::init(&cfg, 42).unwrap();
    let c = EncoderParams::<f32>::init(&cfg, 43).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    a.validate().unwrap();
}

#[test]
fn full_preset_dimensions() {
    let cfg = EncoderConfig::full();
    assert_eq!(cfg.attention_dim, 512);
    assert_eq!(cfg.ffn_dim, 2048);
    assert_eq!(cfg.projector_hidden_dim, 2048);
    assert_eq!(cfg.projector_output_dim, 256);
    assert_eq!(cfg.transformer_blocks, 12);
    assert_eq!(cfg.cnn_channels.len(), 2);
    cfg.validate().unwrap();
}

#[test]
fn desk_preset_parameter_count_matches_hand_count() {
    // F=8, one CNN block with 4 channels, two blocks of width 32, ffn 64,
    // projector 32 -> 64 -> 32.
    let cnn = (4 * 1 * 9 + 4) + (4 * 4 * 9 + 4); // 188
    let input = 32 * 32 + 32; // 4 channels x 8 bins in
    let block = 2 * 32 // ln1
        + 4 * (32 * 32 + 32) // q, k, v, o
        + 2 * 32 // ln2
        + (32 * 64 + 64) + (64 * 32 + 32); // ffn
    let final_ln = 2 * 32;
    let projector = (32 * 64 + 64) + 2 * 64 + (64 * 32 + 32);
    let hand = cnn + input + 2 * block + final_ln + projector;
    assert_eq!(hand, 22716);

    let cfg = EncoderConfig::desk(8);
    assert_eq!(cfg.param_count(), hand);
    let params = EncoderParams::<f32>::init(&cfg, 0).unwrap();
    assert_eq!(params.param_count(), hand);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = EncoderConfig::desk(8);
    cfg.attention_heads = 5;
    assert!(matches!(
        EncoderParams::<f32>::init(&cfg, 0),
        Err(Error::Config(_))
    ));
    let mut cfg = EncoderConfig::desk(8);
    cfg.downsample_factor = 4;
    assert!(cfg.validate().is_err());
    let mut cfg = EncoderConfig::desk(8);
    cfg.projector_output_dim = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn cnn_halves_time_with_floor() {
    let params = EncoderParams::<f64>::init(&EncoderConfig::desk(8), 1).unwrap();
    assert_eq!(
        run_cnn(&params, &features(16, 8, 0, 1.0)).unwrap().rows(),
        8
    );
    assert_eq!(
        run_cnn(&params, &features(17, 8, 0, 1.0)).unwrap().rows(),
        8
    );
    assert!(matches!(
        run_cnn(&params, &features(1, 8, 0, 1.0)),
        Err(Error::InputTooShort(_))
    ));
}

#[test]
fn cnn_on_zero_input_is_the_bias_path() {
    let mut params = EncoderParams::<f64>::init(&EncoderConfig::desk(8), 1).unwrap();
    let zeros = Tensor::zeros(&[10, 8]);
    let out = run_cnn(&params, &zeros).unwrap();
    assert!(out.is_finite());
    // With zero biases the whole path is zero.
    assert!(out.data().iter().all(|&v| v == 0.0));
    // With positive conv2 biases and zero conv1 output, every frame is relu(bias2).
    let b2 = Tensor::from_fn(&[4], |i| 0.1 * (i + 1) as f64);
    params.params.insert("cnn.0.conv2.bias".into(), b2);
    let out = run_cnn(&params, &zeros).unwrap();
    for r in 0..out.rows() {
        for c in 0..out.cols() {
            assert_eq!(out.at(r, c), 0.1 * (c / 8 + 1) as f64);
        }
    }
}

#[test]
fn transformer_output_shape_and_eval_determinism() {
    let params = EncoderParams::<f64>::init(&EncoderConfig::desk(8), 3).unwrap();
    let h = features(7, 32, 5, 1.0);
    let a = run_transformer(&params, &h);
    assert_eq!(a.shape(), &[7, 32]);
    let b = run_transformer(&params, &h);
    assert_eq!(a, b);
}

#[test]
fn transformer_without_positions_is_permutation_equivariant() {
    let mut cfg = EncoderConfig::desk(8);
    cfg.positional_encoding = false;
    let params = EncoderParams::<f64>::init(&cfg, 4).unwrap();
    let h = features(6, 32, 9, 1.0);
    let perm = [3, 0, 5, 1, 4, 2];
    let permuted =
        Tensor::from_rows(&perm.iter().map(|&i| h.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
    let y = run_transformer(&params, &h);
    let yp = run_transformer(&params, &permuted);
    for (k, &i) in perm.iter().enumerate() {
        for (a, b) in yp.row(k).iter().zip(y.row(i)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn projector_train_mode_normalizes_hidden_frames() {
    let params = EncoderParams::<f64>::init(&EncoderConfig::desk(8), 5).unwrap();
    let mut tape = Tape::new();
    let p = params.bind(&mut tape, false);
    let h = tape.constant(features(40, 32, 6, 2.0));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = projector_forward(&mut tape, &params, &p, h, &Mode::Train(&mut rng)).unwrap();
    assert_eq!(tape.shape(out.embeddings), &[40, 32]);
    let (mean, var, n) = out.bn_stats.unwrap();
    assert_eq!((mean.len(), var.len(), n), (64, 64, 40));
    // gamma = 1 and beta = 0 at init, so the hidden layer is x̂ itself.
    let hidden = tape.value(out.hidden);
    for c in 0..hidden.cols() {
        let col: Vec<f64> = (0..40).map(|r| hidden.at(r, c)).collect();
        let m = col.iter().sum::<f64>() / 40.0;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 40.0;
        assert!(m.abs() < 1e-4, "mean {m}");
        assert!((v - 1.0).abs() < 1e-4, "var {v}");
    }
}

#[test]
fn projector_eval_mode_depends_only_on_input_and_running_stats() {
    let mut params = EncoderParams::<f64>::init(&EncoderConfig::desk(8), 5).unwrap();
    let x = features(12, 8, 1, 1.0);
    let seq = FeatureSequence::new("u", x.clone(), 0).unwrap();
    let a = encode(&params, &seq, &mut Mode::Eval).unwrap();
    let b = encode(&params, &seq, &mut Mode::Eval).unwrap();
    assert_eq!(a, b);
    params.update_running_stats(&[0.5; 64], &[2.0; 64], 100);
    let c = encode(&params, &seq, &mut Mode::Eval).unwrap();
    assert_ne!(a, c);
}

#[test]
fn running_stats_use_momentum() {
    let mut params = EncoderParams::<f64>::init(&EncoderConfig::desk(8), 5).unwrap();
    params.update_running_stats(&[1.0; 64], &[3.0; 64], 4);
    let rm = params.buffers[BN_RUNNING_MEAN].data()[0];
    let rv = params.buffers[BN_RUNNING_VAR].data()[0];
    assert!((rm - 0.01).abs() < 1e-15);
    assert!((rv - (0.99 + 0.01 * 3.0 * 4.0 / 3.0)).abs() < 1e-15);
}

#[test]
fn encode_desk_shape() {
    let params = EncoderParams::<f32>::init(&EncoderConfig::desk(8), 0).unwrap();
    let seq = FeatureSequence::new("u", features(20, 8, 2, 1.0).cast(), 0).unwrap();
    let e = encode(&params, &seq, &mut Mode::Eval).unwrap();
    assert_eq!(e.frames.shape(), &[10, 32]);
    assert_eq!(e.frame_stride, 2);
}

#[test]
fn train_mode_dropout_is_seeded() {
    let params = EncoderParams::<f32>::init(&EncoderConfig::desk(8), 0).unwrap();
    let seq = FeatureSequence::new("u", features(20, 8, 2, 1.0).cast(), 0).unwrap();
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        encode(&params, &seq, &mut Mode::Train(&mut rng)).unwrap()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn batched_forward_matches_per_utterance_in_eval_mode() {
    let params = EncoderParams::<f64>::init(&EncoderConfig::desk(8), 8).unwrap();
    let xs = [features(12, 8, 1, 1.0), features(17, 8, 2, 1.0)];
    let (stacked, spans) = embed_batch(&params, &[&xs[0], &xs[1]], &mut Mode::Eval).unwrap();
    assert_eq!(spans, vec![0..6, 6..14]);
    for (x, span) in xs.iter().zip(&spans) {
        let (single, _) = embed_batch(&params, &[x], &mut Mode::Eval).unwrap();
        assert_eq!(
            single.data(),
            stacked.slice_rows(span.start, span.end).unwrap().data()
        );
    }
}

#[test]
fn mean_embedding_gradient_wrt_input_matches_finite_differences() {
    let params = EncoderParams::<f64>::init(&tiny(6), 11).unwrap();
    let x = features(8, 6, 12, 1.0);
    let err = grad_check(
        |tape, xv| {
            let p = params.bind(tape, false);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let out = forward_batch(tape, &params, &p, &[xv], &mut Mode::Train(&mut rng))?;
            Ok(tape.mean(out.frames))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max rel err {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn shape_law_and_finiteness_under_stress(seed in any::<u64>(), t in 2usize..40) {
        let params = EncoderParams::<f32>::init(&EncoderConfig::desk(8), seed).unwrap();
        let seq = FeatureSequence::new("u", features(t, 8, seed ^ 1, 10.0).cast(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for mode in [Mode::Eval, Mode::Train(&mut rng)] {
            let mut mode = mode;
            let e = encode(&params, &seq, &mut mode).unwrap();
            prop_assert_eq!(e.frames.shape(), &[t / 2, 32]);
            prop_assert!(e.frames.is_finite());
        }
    }
}
