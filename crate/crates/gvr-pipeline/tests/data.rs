//! Ingestion/preprocessing tests: IDX byte-level round trips, letterbox
//! geometry, translation against an index-remap oracle, grouped splits and
//! target scaling.

use gvr_core::rng::seeded_stream;
use gvr_pipeline::data::{
    grouped_split, idx_image_bytes, letterbox, load_idx_images, load_idx_labels, load_mnist_images,
    load_png_gray, random_translate, read_manifest, sample_indices,
    scale_regression_target, shuffled_indices, translate, translate_batch, ImageBatch,
    LabeledRecord, SplitSpec, TargetKind, IDX_MAGIC_IMAGES, IDX_MAGIC_LABELS, PAD_VALUE,
};
use ndarray::{Array2, Array4};
use proptest::prelude::*;

fn tempdir() -> tempfile::TempDir {
    tempfile::tempdir().expect("tempdir")
}

fn write_idx_images(dir: &std::path::Path, name: &str, n: u32, h: u32, w: u32, payload: &[u8]) -> std::path::PathBuf {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
    bytes.extend_from_slice(&n.to_be_bytes());
    bytes.extend_from_slice(&h.to_be_bytes());
    bytes.extend_from_slice(&w.to_be_bytes());
    bytes.extend_from_slice(payload);
    let path = dir.join(name);
    std::fs::write(&path, bytes).unwrap();
    path
}

#[test]
fn idx_images_scale_and_round_trip() {
    let dir = tempdir();
    // Two 2x3 images with every interesting byte: 0 -> -1, 255 -> +1, 51 -> -0.6.
    let payload: Vec<u8> = vec![0, 255, 51, 128, 1, 254, 10, 20, 30, 40, 50, 60];
    let path = write_idx_images(dir.path(), "imgs.idx", 2, 2, 3, &payload);

    let batch = load_idx_images(&path).unwrap();
    assert_eq!(batch.pixels.dim(), (2, 1, 2, 3));
    assert_eq!(batch.len(), 2);
    let px = &batch.pixels;
    assert!((px[[0, 0, 0, 0]] - (-1.0)).abs() < 1e-7, "byte 0 -> -1");
    assert!((px[[0, 0, 0, 1]] - 1.0).abs() < 1e-7, "byte 255 -> +1");
    assert!((px[[0, 0, 0, 2]] - (-0.6)).abs() < 1e-6, "byte 51 -> -0.6");
    assert!(px.iter().all(|&v| (-1.0..=1.0).contains(&v)));

    // Re-serialization is byte-identical, header and payload.
    let round = idx_image_bytes(&batch);
    let original = std::fs::read(&path).unwrap();
    assert_eq!(round, original, "IDX round trip must be byte-identical");
}

#[test]
fn idx_rejects_bad_magic_and_truncation() {
    let dir = tempdir();
    let path = dir.path().join("bad.idx");
    std::fs::write(&path, 0x0000_0999u32.to_be_bytes()).unwrap();
    let err = load_idx_images(&path).unwrap_err();
    assert!(err.to_string().contains("magic"), "got: {err}");

    // Header promises more bytes than present.
    let short = write_idx_images(dir.path(), "short.idx", 10, 28, 28, &[0u8; 5]);
    let err = load_idx_images(&short).unwrap_err();
    assert!(err.to_string().contains("shorter"), "got: {err}");

    // Labels reader rejects the image magic.
    let imgs = write_idx_images(dir.path(), "im.idx", 1, 1, 1, &[7]);
    let err = load_idx_labels(&imgs).unwrap_err();
    assert!(err.to_string().contains("magic"), "got: {err}");
}

#[test]
fn idx_labels_load() {
    let dir = tempdir();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
    bytes.extend_from_slice(&4u32.to_be_bytes());
    bytes.extend_from_slice(&[9, 4, 0, 7]);
    let path = dir.path().join("labels.idx");
    std::fs::write(&path, bytes).unwrap();
    assert_eq!(load_idx_labels(&path).unwrap(), vec![9, 4, 0, 7]);
}

#[test]
fn letterbox_square_and_rectangular() {
    // Square input: no padding rows at all.
    let sq = Array2::from_elem((256, 256), 0.5f32);
    let out = letterbox(&sq.view(), 128, PAD_VALUE);
    assert_eq!(out.dim(), (128, 128));
    assert!(out.iter().all(|&v| (v - 0.5).abs() < 1e-6), "square stays unpadded");

    // 200x100 (tall): content becomes 128x64 with 32 pad columns each side.
    let tall = Array2::from_elem((200, 100), 0.25f32);
    let out = letterbox(&tall.view(), 128, PAD_VALUE);
    for y in 0..128 {
        for x in 0..32 {
            assert_eq!(out[[y, x]], PAD_VALUE, "left pad at ({y},{x})");
            assert_eq!(out[[y, 127 - x]], PAD_VALUE, "right pad");
        }
        for x in 32..96 {
            assert!((out[[y, x]] - 0.25).abs() < 1e-6, "content at ({y},{x})");
        }
    }

    // 100x200 (wide): transpose symmetry, 32 pad rows each side.
    let wide = Array2::from_elem((100, 200), 0.25f32);
    let out = letterbox(&wide.view(), 128, PAD_VALUE);
    for x in 0..128 {
        for y in 0..32 {
            assert_eq!(out[[y, x]], PAD_VALUE);
            assert_eq!(out[[127 - y, x]], PAD_VALUE);
        }
    }
}

#[test]
fn letterbox_odd_padding_goes_bottom_right() {
    // 3x1 at side 3: content width 1, pad 2 -> 1 left, 1 right; but width
    // round((1*3+1)/3) = 1, side-1 = 2 pads, left = 1, right = 1. Use a case
    // with odd slack: 4x3 at side 4 -> content 4x3, 1 pad column: left 0, right 1.
    let im = Array2::from_elem((4, 3), 0.5f32);
    let out = letterbox(&im.view(), 4, PAD_VALUE);
    assert_eq!(out.dim(), (4, 4));
    for y in 0..4 {
        assert!((out[[y, 0]] - 0.5).abs() < 1e-6, "content starts at column 0");
        assert_eq!(out[[y, 3]], PAD_VALUE, "odd pad column goes to the right");
    }
}

#[test]
fn translate_matches_index_remap_oracle() {
    // 4x4 identity-diagonal image shifted one column right.
    let mut im = Array2::from_elem((4, 4), 0.0f32);
    for i in 0..4 {
        im[[i, i]] = 1.0;
    }
    let out = translate(&im.view(), 0, 1, PAD_VALUE);
    for y in 0..4 {
        for x in 0..4 {
            let want = if x == 0 {
                PAD_VALUE
            } else if y == x - 1 {
                1.0
            } else {
                0.0
            };
            assert_eq!(out[[y, x]], want, "diagonal shifted right, at ({y},{x})");
        }
    }

    // Brute-force remap oracle over a batch of random shifts.
    let mut rng = seeded_stream(3, 0);
    let src = gvr_core::rng::standard_normal(&mut rng, &[6, 6])
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    for (dy, dx) in [(2isize, -1isize), (-3, 3), (0, 0), (6, 6), (-6, 2)] {
        let got = translate(&src.view(), dy, dx, PAD_VALUE);
        for y in 0..6i64 {
            for x in 0..6i64 {
                let sy = y - dy as i64;
                let sx = x - dx as i64;
                let want = if (0..6).contains(&sy) && (0..6).contains(&sx) {
                    src[[sy as usize, sx as usize]]
                } else {
                    PAD_VALUE
                };
                assert_eq!(got[[y as usize, x as usize]], want, "shift ({dy},{dx}) at ({y},{x})");
            }
        }
    }
}

#[test]
fn random_translate_identity_cases() {
    let mut rng = seeded_stream(4, 0);
    let im = Array2::from_shape_fn((5, 5), |(y, x)| (y * 5 + x) as f32 / 12.0 - 1.0);
    let out = random_translate(&im.view(), 0, PAD_VALUE, &mut rng);
    assert_eq!(out, im, "max_shift 0 is the identity");

    let constant = Array2::from_elem((5, 5), 0.3f32);
    for _ in 0..10 {
        let out = random_translate(&constant.view(), 2, 0.3, &mut rng);
        assert_eq!(out, constant, "constant image with matching fill is unchanged");
    }

    // Determinism: same rng state, same draw.
    let mut a = seeded_stream(9, 7);
    let mut b = seeded_stream(9, 7);
    let ta = random_translate(&im.view(), 3, PAD_VALUE, &mut a);
    let tb = random_translate(&im.view(), 3, PAD_VALUE, &mut b);
    assert_eq!(ta, tb);
}

#[test]
fn scale_target_examples_and_round_trip() {
    assert_eq!(scale_regression_target(1.0).unwrap(), 0.0);
    let v = scale_regression_target(100.0).unwrap();
    assert!((v - 0.460517).abs() < 1e-6, "ln(100)/10 = {v}");
    // e^10 is the design ceiling of the scaled axis.
    let ceiling = scale_regression_target(10.0f64.exp()).unwrap();
    assert!((ceiling - 1.0).abs() < 1e-12);

    assert!(scale_regression_target(0.0).is_err());
    assert!(scale_regression_target(-5.0).is_err());

    for raw in [0.001f64, 0.5, 1.0, 42.0, 100.0, 1e6] {
        let back = (10.0 * scale_regression_target(raw).unwrap()).exp();
        assert!(
            ((back - raw) / raw).abs() < 1e-9,
            "round trip {raw} -> {back}"
        );
    }
}

fn record(group: &str, raw: f64) -> LabeledRecord {
    LabeledRecord {
        group_id: group.to_string(),
        image_ref: format!("{group}.png"),
        raw_value: raw,
        scaled_target: raw.ln() / 10.0,
    }
}

#[test]
fn grouped_split_ratio_examples() {
    // 16 groups at 15:1 -> 15 train groups, 1 held-out group.
    let records: Vec<LabeledRecord> = (0..16).map(|g| record(&format!("p{g}"), 50.0)).collect();
    let (train, held) = grouped_split(
        &records,
        &SplitSpec { ratio: (15, 1), seed: 0 },
    )
    .unwrap();
    assert_eq!(train.len(), 15);
    assert_eq!(held.len(), 1);

    // 5 groups at 4:1 -> 4 and 1.
    let records: Vec<LabeledRecord> = (0..5).map(|g| record(&format!("p{g}"), 50.0)).collect();
    let (train, held) = grouped_split(&records, &SplitSpec { ratio: (4, 1), seed: 3 }).unwrap();
    assert_eq!(train.len(), 4);
    assert_eq!(held.len(), 1);

    // Determinism.
    let (t2, h2) = grouped_split(&records, &SplitSpec { ratio: (4, 1), seed: 3 }).unwrap();
    assert_eq!(train, t2);
    assert_eq!(held, h2);

    // Too few groups.
    let one: Vec<LabeledRecord> = (0..3).map(|_| record("same", 10.0)).collect();
    assert!(grouped_split(&one, &SplitSpec { ratio: (4, 1), seed: 0 }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn grouped_split_is_group_disjoint(
        assignment in proptest::collection::vec(0u8..12, 4..60),
        seed in 0u64..500,
        a in 1u32..20, b in 1u32..20,
    ) {
        let records: Vec<LabeledRecord> = assignment
            .iter()
            .enumerate()
            .map(|(i, g)| LabeledRecord {
                group_id: format!("g{g}"),
                image_ref: format!("im{i}"),
                raw_value: 10.0,
                scaled_target: 0.23,
            })
            .collect();
        let distinct: std::collections::HashSet<&str> =
            records.iter().map(|r| r.group_id.as_str()).collect();
        prop_assume!(distinct.len() >= 2);

        let (train, held) = grouped_split(&records, &SplitSpec { ratio: (a, b), seed }).unwrap();
        prop_assert_eq!(train.len() + held.len(), records.len());
        prop_assert!(!train.is_empty() && !held.is_empty());
        let train_groups: std::collections::HashSet<&str> =
            train.iter().map(|r| r.group_id.as_str()).collect();
        let held_groups: std::collections::HashSet<&str> =
            held.iter().map(|r| r.group_id.as_str()).collect();
        prop_assert!(train_groups.is_disjoint(&held_groups), "groups leak across the split");
    }

    #[test]
    fn letterbox_pads_exactly_outside_content(h in 1usize..40, w in 1usize..40, side in 8usize..48) {
        let im = Array2::from_elem((h, w), 0.77f32);
        let out = letterbox(&im.view(), side, PAD_VALUE);
        prop_assert_eq!(out.dim(), (side, side));
        // Every pixel is either the pad value or blended content; content
        // pixels of a constant image keep the constant.
        for &v in out.iter() {
            prop_assert!(v == PAD_VALUE || (v - 0.77).abs() < 1e-5);
        }
        // The larger dimension is fully covered by content (no all-pad rows
        // when the input is taller than wide, and vice versa).
        if h >= w {
            for y in 0..side {
                prop_assert!((0..side).any(|x| (out[[y, x]] - 0.77).abs() < 1e-5));
            }
        } else {
            for x in 0..side {
                prop_assert!((0..side).any(|y| (out[[y, x]] - 0.77).abs() < 1e-5));
            }
        }
    }
}

#[test]
fn manifest_reads_and_validates() {
    let dir = tempdir();
    let path = dir.path().join("manifest.csv");
    std::fs::write(
        &path,
        "group_id,image_path,raw_value\np1,a.png,100.0\np1,b.png,55.5\np2,c.png,1.0\n",
    )
    .unwrap();
    let records = read_manifest(&path, TargetKind::Regression).unwrap();
    assert_eq!(records.len(), 3);
    assert_eq!(records[0].group_id, "p1");
    assert_eq!(records[0].image_ref, "a.png");
    assert!((records[0].scaled_target - 0.460517).abs() < 1e-6);
    assert_eq!(records[2].scaled_target, 0.0);

    // Bad header.
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "patient,file,value\np1,a.png,100\n").unwrap();
    let err = read_manifest(&bad, TargetKind::Regression).unwrap_err();
    assert!(err.to_string().contains("header"), "got: {err}");

    // Non-numeric value names its line.
    let nn = dir.path().join("nn.csv");
    std::fs::write(&nn, "group_id,image_path,raw_value\np1,a.png,abc\n").unwrap();
    let err = read_manifest(&nn, TargetKind::Regression).unwrap_err();
    assert!(err.to_string().contains("line 2"), "got: {err}");

    // Classification bounds.
    let cls = dir.path().join("cls.csv");
    std::fs::write(&cls, "group_id,image_path,raw_value\np1,a.png,9\np2,b.png,10\n").unwrap();
    let err = read_manifest(&cls, TargetKind::Classification { num_classes: 10 }).unwrap_err();
    assert!(err.to_string().contains("line 3"), "got: {err}");
}

#[test]
fn png_gray_loads_8_bit() {
    let dir = tempdir();
    let path = dir.path().join("g.png");
    let im = image::GrayImage::from_fn(4, 3, |x, y| image::Luma([(x * 60 + y * 10) as u8]));
    im.save(&path).unwrap();
    let arr = load_png_gray(&path).unwrap();
    assert_eq!(arr.dim(), (3, 4));
    assert!((arr[[0, 0]] - (-1.0)).abs() < 1e-6);
    assert!((arr[[1, 2]] - (130.0 / 127.5 - 1.0)).abs() < 1e-6);
}

#[test]
fn mnist_padding_centers_without_resampling() {
    let dir = tempdir();
    // One 28x28 "digit": a bright pixel at (0,0) and (27,27).
    let mut payload = vec![0u8; 28 * 28];
    payload[0] = 255;
    payload[28 * 28 - 1] = 255;
    let path = write_idx_images(dir.path(), "mnist.idx", 1, 28, 28, &payload);
    let batch = load_mnist_images(&path, 32).unwrap();
    assert_eq!(batch.pixels.dim(), (1, 1, 32, 32));
    assert_eq!(batch.pixels[[0, 0, 2, 2]], 1.0, "corner lands at (2,2) after centering");
    assert_eq!(batch.pixels[[0, 0, 29, 29]], 1.0);
    assert_eq!(batch.pixels[[0, 0, 0, 0]], PAD_VALUE);
    // All original background is raw byte 0 = -1.
    assert_eq!(batch.pixels[[0, 0, 16, 16]], -1.0);
}

#[test]
fn batch_utilities() {
    let pixels = Array4::from_shape_fn((3, 1, 2, 2), |(n, _, y, x)| {
        (n as f32) * 0.3 + (y as f32) * 0.1 + (x as f32) * 0.01 - 0.5
    });
    let batch = ImageBatch::new(pixels, vec!["a".into(), "b".into(), "c".into()]);
    let sel = batch.select(&[2, 0, 2]);
    assert_eq!(sel.len(), 3);
    assert_eq!(sel.source_ids, vec!["c", "a", "c"]);
    assert_eq!(sel.image(0), batch.image(2));

    let mean = batch.mean_image();
    assert!((mean[[0, 0]] - (-0.2)).abs() < 1e-6, "mean of -0.5, -0.2, 0.1");

    // Shuffles and draws are deterministic per stream.
    let mut r1 = seeded_stream(1, 1);
    let mut r2 = seeded_stream(1, 1);
    assert_eq!(shuffled_indices(10, &mut r1), shuffled_indices(10, &mut r2));
    assert_eq!(sample_indices(10, 4, &mut r1), sample_indices(10, 4, &mut r2));

    let mut sorted = shuffled_indices(10, &mut r1);
    sorted.sort_unstable();
    assert_eq!(sorted, (0..10).collect::<Vec<_>>(), "shuffle is a permutation");

    // translate_batch applies a fresh draw per item but keeps ids.
    let mut rng = seeded_stream(2, 2);
    let t = translate_batch(&batch, 1, PAD_VALUE, &mut rng);
    assert_eq!(t.source_ids, batch.source_ids);
    assert_eq!(t.pixels.dim(), batch.pixels.dim());
}
