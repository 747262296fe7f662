use proptest::prelude::*;

use s4mt::attribution::{
    export_heatmap, metadata_path, read_csv, sharpness, source_attribution, target_attribution, target_changes,
    AttributionMap, AttributionMode, HeatmapFormat, HeatmapMetadata,
};
use s4mt::data::{TokenGrid, PAD, RESERVED};
use s4mt::model::{build_model, DecoderKind, EncoderKind, ModelConfig};

fn tiny(enc: EncoderKind, dec: DecoderKind) -> ModelConfig {
    ModelConfig::new(enc, dec, 12 + RESERVED)
        .layers(if enc == EncoderKind::None { 0 } else { 1 }, 2)
        .blocks(1)
        .width(16, 32, 2)
        .state(4)
}

const ARCHS: [(EncoderKind, DecoderKind); 5] = [
    (EncoderKind::None, DecoderKind::S4),
    (EncoderKind::S4, DecoderKind::S4),
    (EncoderKind::Transformer, DecoderKind::Transformer),
    (EncoderKind::Transformer, DecoderKind::S4a),
    (EncoderKind::S4bi, DecoderKind::S4),
];

fn toks(v: &[usize]) -> Vec<u32> {
    v.iter().map(|&i| (RESERVED + i) as u32).collect()
}

fn map(rows: usize, cols: usize, values: Vec<f64>) -> AttributionMap {
    AttributionMap {
        rows,
        cols,
        values,
        row_labels: (0..rows).map(|i| format!("r{i}")).collect(),
        col_labels: (0..cols).map(|i| format!("c{i}")).collect(),
        mode: AttributionMode::Source,
        normalized: false,
        flagged_rows: Vec::new(),
    }
}

#[test]
fn source_maps_are_non_negative_and_shaped() {
    let (src, tgt) = (toks(&[1, 2, 3, 4]), toks(&[5, 6, 7]));
    for (e, d) in ARCHS {
        let model = build_model(&tiny(e, d), 2).unwrap();
        let m = source_attribution(&model, &src, &tgt, 1, None).unwrap();
        assert_eq!((m.rows, m.cols), (3, 4));
        assert!(m.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(m.values.iter().any(|&v| v > 0.0), "{e:?}-{d:?}");
        assert!(m.flagged_rows.is_empty());
        assert_eq!(m.col_labels[0], src[0].to_string());
    }
}

#[test]
fn masking_padding_is_a_no_op() {
    let src = vec![RESERVED as u32 + 1, PAD, RESERVED as u32 + 3];
    let tgt = toks(&[4, 5]);
    for (e, d) in ARCHS {
        let model = build_model(&tiny(e, d), 3).unwrap();
        let m = source_attribution(&model, &src, &tgt, 1, None).unwrap();
        assert!((0..m.rows).all(|r| m.get(r, 1) == 0.0), "{e:?}-{d:?}");
    }
}

#[test]
fn target_maps_are_causal() {
    let (src, tgt) = (toks(&[1, 2, 3]), toks(&[4, 5, 6, 7]));
    for (e, d) in ARCHS {
        let model = build_model(&tiny(e, d), 4).unwrap();
        let (raw, _) = target_changes(&model, &src, &tgt, 1).unwrap();
        let m = tgt.len();
        for r in 0..m {
            for c in r + 1..m {
                assert!(raw[r * m + c] < 1e-6, "{e:?}-{d:?} ({r},{c}) = {}", raw[r * m + c]);
            }
        }
        let map = target_attribution(&model, &src, &tgt, 1, None).unwrap();
        assert_eq!(map.cols, m);
        assert_eq!(map.row(0)[1..], vec![0.0; m - 1][..]);
        assert!(map.get(0, 0) > 0.0);
        for r in 0..m {
            for c in r + 1..m {
                assert_eq!(map.get(r, c), 0.0);
            }
        }
    }
}

#[test]
fn unidirectional_encoder_flows_left_to_right() {
    let model = build_model(&tiny(EncoderKind::S4, DecoderKind::S4), 5).unwrap();
    let src = toks(&[1, 2, 3, 4, 5, 6]);
    let base = model.encoder_states(&TokenGrid::from_rows(&[src.clone()])).unwrap();
    let d = model.config().d_model;
    for j in 0..src.len() {
        let mut masked = src.clone();
        masked[j] = PAD;
        let h = model.encoder_states(&TokenGrid::from_rows(&[masked])).unwrap();
        for i in 0..j {
            let diff = (0..d).map(|k| (base.data()[i * d + k] - h.data()[i * d + k]).abs()).fold(0.0, f32::max);
            assert!(diff < 1e-6, "masking {j} moved position {i} by {diff}");
        }
    }
}

#[test]
fn reversed_sources_keep_original_column_order() {
    let mut cfg = tiny(EncoderKind::None, DecoderKind::S4);
    let (src, tgt) = (toks(&[1, 2, 3, 4]), toks(&[5, 6]));
    let plain = build_model(&cfg, 6).unwrap();
    cfg.reverse_source = true;
    let reversed = s4mt::model::Model::from_params(&cfg, plain.params()).unwrap();
    let rev_src: Vec<u32> = src.iter().rev().copied().collect();
    let a = source_attribution(&reversed, &src, &tgt, 1, None).unwrap();
    let b = source_attribution(&plain, &rev_src, &tgt, 1, None).unwrap();
    for r in 0..a.rows {
        for c in 0..a.cols {
            assert_eq!(a.get(r, c), b.get(r, a.cols - 1 - c));
        }
    }
}

#[test]
fn results_ignore_thread_count() {
    let model = build_model(&tiny(EncoderKind::Transformer, DecoderKind::S4a), 7).unwrap();
    let src = toks(&(0..40).map(|i| i % 12).collect::<Vec<_>>());
    let tgt = toks(&[1, 2, 3, 4, 5]);
    let a = source_attribution(&model, &src, &tgt, 1, None).unwrap();
    let b = source_attribution(&model, &src, &tgt, 4, None).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_baseline_rows_are_flagged() {
    let mut model = build_model(&tiny(EncoderKind::None, DecoderKind::S4), 8).unwrap();
    let names = model.params().names().to_vec();
    for (name, t) in names.iter().zip(model.params_mut().tensors_mut()) {
        if name.ends_with("norm.g") || name.ends_with("norm.b") {
            t.data_mut().fill(0.0);
        }
    }
    let m = source_attribution(&model, &toks(&[1, 2]), &toks(&[3, 4]), 1, None).unwrap();
    assert_eq!(m.flagged_rows, vec![0, 1]);
    assert!(m.values.iter().all(|&v| v == 0.0));
}

#[test]
fn normalisation_and_sharpness_oracles() {
    let onehot = map(3, 3, vec![0.0, 2.0, 0.0, 0.0, 0.0, 5.0, 1.0, 0.0, 0.0]);
    let s = sharpness(&onehot.normalize(), None).unwrap();
    assert_eq!(s.mean_entropy, 0.0);
    assert_eq!(s.max_over_mean, 3.0);

    let uniform = map(2, 4, vec![0.5; 8]);
    let s = sharpness(&uniform.normalize(), None).unwrap();
    assert!((s.mean_entropy - 4f64.ln()).abs() < 1e-12);
    assert!((s.max_over_mean - 1.0).abs() < 1e-12);

    let with_zero = map(2, 2, vec![1.0, 3.0, 0.0, 0.0]).normalize();
    assert_eq!(with_zero.row(0), &[0.25, 0.75]);
    assert_eq!(with_zero.flagged_rows, vec![1]);
    let s = sharpness(&with_zero, None).unwrap();
    assert_eq!((s.rows_used, s.zero_rows), (1, 1));

    let diag = map(4, 4, vec![1.0, 0.0, 0.0, 0.0, 0.1, 0.9, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.9, 0.0, 0.0, 0.1]);
    let s = sharpness(&diag, Some(&[0, 1, 2, 3])).unwrap();
    assert_eq!(s.exact_alignment_rate, Some(0.5));
    assert_eq!(s.alignment_rate, Some(0.75));
    assert!(sharpness(&diag, Some(&[0, 1])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalised_rows_sum_to_one(rows in 1usize..5, cols in 1usize..6, seed in prop::collection::vec(0.0f64..3.0, 30)) {
        let values: Vec<f64> = (0..rows * cols).map(|i| if seed[i] < 0.5 { 0.0 } else { seed[i] }).collect();
        let m = map(rows, cols, values).normalize();
        for r in 0..rows {
            let s: f64 = m.row(r).iter().sum();
            prop_assert!(m.flagged_rows.contains(&r) == (s == 0.0));
            if s != 0.0 {
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let st = sharpness(&m, None).unwrap();
        prop_assert!(st.mean_entropy >= 0.0 && st.mean_entropy <= (cols as f64).ln() + 1e-12);
    }

    #[test]
    fn csv_round_trip_is_exact(values in prop::collection::vec(0.0f64..1e6, 6), tiny in 1e-300f64..1e-200) {
        let mut v = values;
        v[0] = tiny;
        v[1] = 1.0 / 3.0;
        let m = map(2, 3, v);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        export_heatmap(&m, HeatmapFormat::Csv, &path, &HeatmapMetadata::of(&m)).unwrap();
        let back = read_csv(&path, AttributionMode::Source).unwrap();
        prop_assert_eq!(back.values, m.values);
        prop_assert_eq!(back.row_labels, m.row_labels);
        prop_assert_eq!(back.col_labels, m.col_labels);
    }
}

#[test]
fn csv_quotes_awkward_labels() {
    let mut m = map(1, 2, vec![0.5, 0.25]);
    m.col_labels = vec!["a,b".into(), "say \"hi\"".into()];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.csv");
    export_heatmap(&m, HeatmapFormat::Csv, &path, &HeatmapMetadata::of(&m)).unwrap();
    assert_eq!(read_csv(&path, AttributionMode::Source).unwrap().col_labels, m.col_labels);
}

#[test]
fn pgm_scaling_and_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("i.pgm");
    let eye = map(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
    export_heatmap(&eye, HeatmapFormat::Pgm, &path, &HeatmapMetadata::of(&eye)).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let header = b"P5\n2 2\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(&bytes[header.len()..], &[255, 0, 0, 255]);

    let wide = map(2, 3, vec![2.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    export_heatmap(&wide, HeatmapFormat::Pgm, &path, &HeatmapMetadata::of(&wide)).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
    assert_eq!(&bytes[bytes.len() - 6..], &[255, 128, 0, 0, 0, 0]);
}

#[test]
fn svg_and_metadata_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.svg");
    let mut m = map(2, 2, vec![1.0, 0.5, 0.0, 1.0]);
    m.row_labels[0] = "<b>".into();
    let mut meta = HeatmapMetadata::of(&m);
    meta.extra.insert("checkpoint".into(), "model.ckpt".into());
    export_heatmap(&m, HeatmapFormat::Svg, &path, &meta).unwrap();
    let svg = std::fs::read_to_string(&path).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches("<rect").count(), 4);
    assert!(svg.contains("&lt;b&gt;"));
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(metadata_path(&path)).unwrap()).unwrap();
    assert_eq!(side["mode"], "source");
    assert_eq!(side["normalized"], false);
    assert!(side["measure"].as_str().unwrap().contains("l2"));
    assert_eq!(side["extra"]["checkpoint"], "model.ckpt");
}

#[test]
fn unwritable_path_is_an_io_error() {
    let m = map(1, 1, vec![1.0]);
    let err = export_heatmap(&m, HeatmapFormat::Csv, std::path::Path::new("/nonexistent/dir/x.csv"), &HeatmapMetadata::of(&m));
    assert!(matches!(err, Err(s4mt::Error::Io(_))));
}
