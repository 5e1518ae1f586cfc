//! Laplacian pyramid against a straight-line f64 oracle, plus encoder
//! training mechanics (frozen generator, validation curves, resume).

use gvr_core::rng::seeded_stream;
use gvr_pipeline::autoencoder::{
    batch_mse, default_levels, encode, laplacian_loss, laplacian_pyramid, load_encoder,
    mean_image_baseline, reconstruct, reconstruct_from_pyramid, train_autoencoder, train_val_split,
    EncoderConfig, EncoderPaths, EncoderState, PyramidLossConfig,
};
use gvr_pipeline::data::ImageBatch;
use gvr_pipeline::gan::{GanConfig, Generator};
use ndarray::{Array2, Array4};
use proptest::prelude::*;
use rand::RngExt;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

// ---- straight-line f64 oracle (independent of the production code) ----

const B5: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];

/// Border-renormalized stride-2 binomial blur, nested loops in f64.
fn down_oracle(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array2::zeros((oh, ow));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            let mut mass = 0.0;
            for ky in 0..5 {
                for kx in 0..5 {
                    let iy = 2 * oy as isize + ky as isize - 2;
                    let ix = 2 * ox as isize + kx as isize - 2;
                    let wgt = B5[ky] * B5[kx] / 256.0;
                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                        acc += img[[iy as usize, ix as usize]] * wgt;
                        mass += wgt;
                    }
                }
            }
            out[[oy, ox]] = acc / mass;
        }
    }
    out
}

/// Border-renormalized zero-stuffing upsample (transpose of the blur, times
/// 4), nested scatter loops in f64.
fn up_oracle(small: &Array2<f64>, out_side: usize) -> Array2<f64> {
    let (sh, sw) = small.dim();
    let mut acc = Array2::<f64>::zeros((out_side, out_side));
    let mut mass = Array2::<f64>::zeros((out_side, out_side));
    for oy in 0..sh {
        for ox in 0..sw {
            for ky in 0..5 {
                for kx in 0..5 {
                    let y = 2 * oy as isize + ky as isize - 2;
                    let x = 2 * ox as isize + kx as isize - 2;
                    if y >= 0 && y < out_side as isize && x >= 0 && x < out_side as isize {
                        let wgt = 4.0 * B5[ky] * B5[kx] / 256.0;
                        acc[[y as usize, x as usize]] += small[[oy, ox]] * wgt;
                        mass[[y as usize, x as usize]] += wgt;
                    }
                }
            }
        }
    }
    &acc / &mass
}

fn pyramid_oracle(img: &Array2<f64>, levels: usize) -> Vec<Array2<f64>> {
    let mut bands = Vec::new();
    let mut cur = img.clone();
    for _ in 0..levels - 1 {
        let down = down_oracle(&cur);
        let up = up_oracle(&down, cur.nrows());
        bands.push(&cur - &up);
        cur = down;
    }
    bands.push(cur);
    bands
}

/// Straight-line weighted loss: both pyramids built separately, band-wise
/// mean absolute difference, weighted sum.
fn loss_oracle(a: &[Array2<f64>], b: &[Array2<f64>], weights: &[f32]) -> f64 {
    let mut total = 0.0;
    for j in 0..a.len() {
        let pa = pyramid_oracle(&a[j], weights.len());
        let pb = pyramid_oracle(&b[j], weights.len());
        for (lv, w) in weights.iter().enumerate() {
            let diff_sum: f64 = pa[lv]
                .iter()
                .zip(pb[lv].iter())
                .map(|(x, y)| (x - y).abs())
                .sum();
            // mean over every element of the band across the whole batch
            total += (*w as f64) * diff_sum / (pa[lv].len() * a.len()) as f64;
        }
    }
    total
}

fn random_image(rng: &mut ChaCha20Rng, side: usize) -> Array2<f32> {
    Array2::from_shape_fn((side, side), |_| rng.random_range(-1.0f32..1.0))
}

fn to_f64(a: &Array2<f32>) -> Array2<f64> {
    a.mapv(|v| v as f64)
}

fn batch_of(images: &[Array2<f32>]) -> ImageBatch {
    let side = images[0].nrows();
    let mut pixels = Array4::zeros((images.len(), 1, side, side));
    for (i, img) in images.iter().enumerate() {
        pixels
            .index_axis_mut(ndarray::Axis(0), i)
            .index_axis_move(ndarray::Axis(0), 0)
            .assign(img);
    }
    ImageBatch::new(pixels, (0..images.len()).map(|i| format!("img-{i}")).collect())
}

// ---- pyramid tests ----

#[test]
fn constant_image_has_zero_difference_bands_and_constant_lowpass() {
    let img = Array2::from_elem((16, 16), 0.37f32);
    let bands = laplacian_pyramid(&img, 3).unwrap();
    assert_eq!(bands.len(), 3);
    assert_eq!(bands[0].dim(), (16, 16));
    assert_eq!(bands[1].dim(), (8, 8));
    assert_eq!(bands[2].dim(), (4, 4));
    for band in &bands[..2] {
        for &v in band.iter() {
            assert!(v.abs() < 1e-6, "difference band value {v} not zero");
        }
    }
    for &v in bands[2].iter() {
        assert!((v - 0.37).abs() < 1e-6, "low-pass {v} drifted from constant");
    }
}

#[test]
fn single_level_pyramid_is_the_identity() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let img = random_image(&mut rng, 8);
    let bands = laplacian_pyramid(&img, 1).unwrap();
    assert_eq!(bands.len(), 1);
    assert_eq!(bands[0], img);
}

#[test]
fn pyramid_bands_match_straight_line_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    for &side in &[8usize, 12, 16, 20, 32] {
        let levels = if side % 4 == 0 { 3 } else { 2 };
        let img = random_image(&mut rng, side);
        let got = laplacian_pyramid(&img, levels).unwrap();
        let want = pyramid_oracle(&to_f64(&img), levels);
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.dim(), w.dim());
            for (a, b) in g.iter().zip(w.iter()) {
                assert!(
                    ((*a as f64) - b).abs() < 1e-5,
                    "band value {a} vs oracle {b} (side {side})"
                );
            }
        }
    }
}

#[test]
fn pyramid_reconstructs_the_input() {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    for &(side, levels) in &[(8usize, 2usize), (8, 3), (16, 3), (32, 3), (12, 2)] {
        let img = random_image(&mut rng, side);
        let bands = laplacian_pyramid(&img, levels).unwrap();
        let recon = reconstruct_from_pyramid(&bands);
        let max_err = img
            .iter()
            .zip(recon.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(
            max_err < 1e-6,
            "reconstruction error {max_err} at side {side}, levels {levels}"
        );
    }
}

#[test]
fn pyramid_rejects_indivisible_sides() {
    let img = Array2::<f32>::zeros((10, 10));
    assert!(laplacian_pyramid(&img, 3).is_err()); // 10 % 4 != 0
    assert!(laplacian_pyramid(&img, 0).is_err());
    let rect = Array2::<f32>::zeros((8, 12));
    assert!(laplacian_pyramid(&rect, 2).is_err());
}

#[test]
fn laplacian_loss_matches_straight_line_oracle_on_random_pairs() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    for trial in 0..25 {
        let side = [8usize, 12, 16, 24, 32][trial % 5];
        let levels = if side % 4 == 0 { 3 } else { 2 };
        let cfg = PyramidLossConfig {
            levels,
            level_weights: (0..levels).map(|j| 4f32.powi(j as i32)).collect(),
        };
        let n = 1 + trial % 3;
        let a: Vec<Array2<f32>> = (0..n).map(|_| random_image(&mut rng, side)).collect();
        let b: Vec<Array2<f32>> = (0..n).map(|_| random_image(&mut rng, side)).collect();
        let got = laplacian_loss(&batch_of(&a), &batch_of(&b), &cfg).unwrap();
        let a64: Vec<Array2<f64>> = a.iter().map(to_f64).collect();
        let b64: Vec<Array2<f64>> = b.iter().map(to_f64).collect();
        let want = loss_oracle(&a64, &b64, &cfg.level_weights);
        assert!(
            (got - want).abs() <= 1e-6 * (1.0 + want.abs()),
            "loss {got} vs oracle {want} (side {side}, n {n})"
        );
    }
}

#[test]
fn laplacian_loss_identity_symmetry_and_positivity() {
    let mut rng = ChaCha20Rng::seed_from_u64(13);
    let cfg = PyramidLossConfig::for_side(16);
    let a = batch_of(&[random_image(&mut rng, 16)]);
    let b = batch_of(&[random_image(&mut rng, 16)]);
    assert_eq!(laplacian_loss(&a, &a, &cfg).unwrap(), 0.0);
    let ab = laplacian_loss(&a, &b, &cfg).unwrap();
    let ba = laplacian_loss(&b, &a, &cfg).unwrap();
    assert!(ab > 0.0);
    assert_eq!(ab, ba, "L1 band distance must be symmetric");
    // Shape mismatch is a contract error.
    let small = batch_of(&[random_image(&mut rng, 8)]);
    assert!(laplacian_loss(&a, &small, &cfg).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn prop_loss_agrees_with_oracle(seed in 0u64..5000, side_pick in 0usize..3) {
        let side = [8usize, 16, 24][side_pick];
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let cfg = PyramidLossConfig { levels: 2, level_weights: vec![1.0, 4.0] };
        let a = random_image(&mut rng, side);
        let b = random_image(&mut rng, side);
        let got = laplacian_loss(&batch_of(&[a.clone()]), &batch_of(&[b.clone()]), &cfg).unwrap();
        let want = loss_oracle(&[to_f64(&a)], &[to_f64(&b)], &cfg.level_weights);
        prop_assert!((got - want).abs() <= 1e-6 * (1.0 + want.abs()), "{got} vs {want}");
    }
}

#[test]
fn default_levels_match_documented_sides() {
    assert_eq!(default_levels(32), 3);
    assert_eq!(default_levels(128), 4);
    assert_eq!(default_levels(8), 2);
    let cfg32 = PyramidLossConfig::for_side(32);
    assert_eq!(cfg32.level_weights, vec![1.0, 4.0, 16.0]);
    assert!(cfg32.validate(32).is_ok());
    assert!(cfg32.validate(10).is_err());
    let bad = PyramidLossConfig { levels: 2, level_weights: vec![1.0] };
    assert!(bad.validate(8).is_err());
}

// ---- encoder tests ----

fn tiny_gan_cfg() -> GanConfig {
    GanConfig {
        image_side: 8,
        latent_dim: 4,
        top_width: 16,
        start_side: 2,
        seed: 21,
        ..GanConfig::default()
    }
}

fn blob_data(n: usize, side: usize) -> ImageBatch {
    let mut pixels = Array4::zeros((n, 1, side, side));
    for i in 0..n {
        let cx = (i * 5 % side) as f32;
        let cy = (i * 2 % side) as f32;
        for y in 0..side {
            for x in 0..side {
                let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                pixels[[i, 0, y, x]] = (-d2 / 5.0).exp() * 2.0 - 1.0;
            }
        }
    }
    ImageBatch::new(pixels, (0..n).map(|i| format!("blob-{i}")).collect())
}

fn enc_cfg(side: usize, epochs: usize) -> EncoderConfig {
    EncoderConfig {
        epochs,
        batch_size: 8,
        lr: 1e-3,
        val_fraction: 0.25,
        seed: 33,
        ..EncoderConfig::for_side(side)
    }
}

#[test]
fn encoding_has_no_cross_item_coupling() {
    let gan_cfg = tiny_gan_cfg();
    let mut rng = seeded_stream(1, 0);
    let generator = Generator::init(&gan_cfg, &mut rng);
    let state = EncoderState::init(&generator, &enc_cfg(8, 1));
    let data = blob_data(6, 8);

    let all = encode(&state.encoder, &data);
    let single = encode(&state.encoder, &data.select(&[3]));
    assert_eq!(all.row(3), single.row(0), "batch coupling detected");

    // Permuting the batch permutes the codes identically.
    let perm = [5usize, 0, 3, 1, 4, 2];
    let permuted = encode(&state.encoder, &data.select(&perm));
    for (r, &src) in perm.iter().enumerate() {
        assert_eq!(permuted.row(r), all.row(src));
    }
}

#[test]
fn reconstruct_is_generator_of_encoder_codes() {
    let gan_cfg = tiny_gan_cfg();
    let mut rng = seeded_stream(2, 0);
    let generator = Generator::init(&gan_cfg, &mut rng);
    let state = EncoderState::init(&generator, &enc_cfg(8, 1));
    let data = blob_data(3, 8);
    let recon = reconstruct(&state.encoder, &generator, &data);
    assert_eq!(recon.pixels.dim(), data.pixels.dim());
    assert_eq!(recon.source_ids, data.source_ids);
    let codes = encode(&state.encoder, &data);
    let direct = generator.generate(&codes);
    assert_eq!(recon.pixels, direct);
    assert!(recon.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn training_freezes_the_generator_and_beats_mean_image_baseline() {
    let gan_cfg = tiny_gan_cfg();
    // Corpus drawn from the generator itself, so it is exactly representable
    // and the encoder's task is pure inversion. Weights are amplified so the
    // outputs vary enough that the mean image is a poor predictor.
    let mut rng = seeded_stream(77, 0);
    let mut generator = Generator::init(&gan_cfg, &mut rng);
    let ids: Vec<_> = generator.params.ids().collect();
    for id in ids {
        generator.params.get_mut(id).mapv_inplace(|v| v * 2.5);
    }
    let z = gvr_pipeline::gan::sample_prior(&mut rng, 40, gan_cfg.latent_dim);
    let data = ImageBatch::new(
        generator.generate(&z),
        (0..40).map(|i| format!("gen-{i}")).collect(),
    );
    let dir = tempfile::tempdir().unwrap();

    let before = generator.params.content_hash();
    let cfg = enc_cfg(8, 30);
    let paths = EncoderPaths {
        checkpoint: dir.path().join("enc.ckpt"),
        log_csv: dir.path().join("enc.csv"),
    };
    let state = train_autoencoder(&data, &generator, &cfg, [4u8; 32], &paths, false).unwrap();
    assert_eq!(
        generator.params.content_hash(),
        before,
        "generator parameters changed during encoder training"
    );
    assert_eq!(state.completed_epochs, 30);

    // Validation curves: header plus one row per epoch, finite values.
    let text = std::fs::read_to_string(&paths.log_csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "epoch,mse,laplacian");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 30);
    let last: Vec<f64> = rows
        .last()
        .unwrap()
        .split(',')
        .map(|f| f.parse().unwrap())
        .collect();
    assert!(last[1].is_finite() && last[2].is_finite());

    // The trained encoder beats predicting the mean image, on validation.
    let (train_idx, val_idx) = train_val_split(data.len(), cfg.val_fraction, cfg.seed);
    let train = data.select(&train_idx);
    let val = data.select(&val_idx);
    let (_, baseline_lap) = mean_image_baseline(&train, &val, &cfg.pyramid).unwrap();
    let recon = reconstruct(&state.encoder, &generator, &val);
    let val_lap = laplacian_loss(&recon, &val, &cfg.pyramid).unwrap();
    assert!(
        val_lap < baseline_lap,
        "encoder {val_lap} did not beat mean-image baseline {baseline_lap}"
    );
    // The logged final-epoch metrics agree with a fresh evaluation (up to
    // f32 batch-blocking noise: the log evaluates in training-batch chunks).
    assert!(
        (last[2] - val_lap).abs() < 1e-4 * (1.0 + val_lap),
        "logged laplacian {} vs fresh {val_lap}",
        last[2]
    );
    let mse_check = batch_mse(&recon, &val);
    assert!(
        (last[1] - mse_check).abs() < 1e-4 * (1.0 + mse_check),
        "logged mse {} vs fresh {mse_check}",
        last[1]
    );
}

#[test]
fn encoder_resume_is_bit_exact() {
    let gan_cfg = tiny_gan_cfg();
    let mut rng = seeded_stream(9, 0);
    let generator = Generator::init(&gan_cfg, &mut rng);
    let data = blob_data(20, 8);
    let cfg = enc_cfg(8, 6);

    let dir_a = tempfile::tempdir().unwrap();
    let paths_a = EncoderPaths {
        checkpoint: dir_a.path().join("enc.ckpt"),
        log_csv: dir_a.path().join("enc.csv"),
    };
    let straight = train_autoencoder(&data, &generator, &cfg, [5u8; 32], &paths_a, false).unwrap();

    let dir_b = tempfile::tempdir().unwrap();
    let paths_b = EncoderPaths {
        checkpoint: dir_b.path().join("enc.ckpt"),
        log_csv: dir_b.path().join("enc.csv"),
    };
    let mut first = cfg.clone();
    first.epochs = 3;
    train_autoencoder(&data, &generator, &first, [5u8; 32], &paths_b, false).unwrap();
    let resumed = train_autoencoder(&data, &generator, &cfg, [5u8; 32], &paths_b, true).unwrap();

    for ((na, a), (nb, b)) in straight
        .encoder
        .params
        .iter()
        .zip(resumed.encoder.params.iter())
    {
        assert_eq!(na, nb);
        assert_eq!(a, b, "encoder param {na} differs after resume");
    }
    assert_eq!(
        std::fs::read_to_string(&paths_a.log_csv).unwrap(),
        std::fs::read_to_string(&paths_b.log_csv).unwrap()
    );
}

#[test]
fn encoder_checkpoint_roundtrips_via_loader() {
    let gan_cfg = tiny_gan_cfg();
    let mut rng = seeded_stream(14, 0);
    let generator = Generator::init(&gan_cfg, &mut rng);
    let cfg = enc_cfg(8, 1);
    let state = EncoderState::init(&generator, &cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.ckpt");
    state.save(&path, [9u8; 32]).unwrap();

    let (loaded, hash) = load_encoder(&path).unwrap();
    assert_eq!(hash, [9u8; 32]);
    let data = blob_data(4, 8);
    assert_eq!(encode(&loaded, &data), encode(&state.encoder, &data));

    // Wrong config hash on stateful resume is rejected.
    assert!(EncoderState::load(&path, &cfg, [10u8; 32]).is_err());
}

#[test]
fn training_rejects_side_mismatch() {
    let gan_cfg = tiny_gan_cfg();
    let mut rng = seeded_stream(15, 0);
    let generator = Generator::init(&gan_cfg, &mut rng);
    let data = blob_data(8, 16);
    let dir = tempfile::tempdir().unwrap();
    let paths = EncoderPaths {
        checkpoint: dir.path().join("enc.ckpt"),
        log_csv: dir.path().join("enc.csv"),
    };
    assert!(train_autoencoder(&data, &generator, &enc_cfg(16, 1), [0u8; 32], &paths, false).is_err());
}

#[test]
fn train_val_split_is_deterministic_and_disjoint() {
    let (tr, va) = train_val_split(20, 0.25, 7);
    let (tr2, va2) = train_val_split(20, 0.25, 7);
    assert_eq!(tr, tr2);
    assert_eq!(va, va2);
    assert_eq!(va.len(), 5);
    assert_eq!(tr.len(), 15);
    let mut all: Vec<usize> = tr.iter().chain(va.iter()).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..20).collect::<Vec<_>>());
    let (tr3, _) = train_val_split(20, 0.25, 8);
    assert!(tr3 != tr, "different seed should shuffle differently");
}
