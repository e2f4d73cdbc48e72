mod common;

use effmod::model::{BuildOptions, Model};
use effmod::viz::{context_map, Image};
use effmod::{Error, Tensor};

#[test]
fn zero_image_on_bias_free_model_gives_zero_map() {
    let opts = BuildOptions { bias: false, ..BuildOptions::default() };
    let model = Model::from_preset("micro", &opts).unwrap();
    let map = context_map(&model, &Tensor::zeros([1, 3, 64, 64]), 2, 1).unwrap();
    assert_eq!((map.height, map.width), (8, 8));
    assert!(map.values.iter().all(|&v| v == 0));
}

#[test]
fn preset_s_stage_three_map_is_fourteen_square() {
    let model = Model::from_preset("s", &BuildOptions::default()).unwrap();
    let x = Tensor::uniform([1, 3, 224, 224], 0.0, 1.0, &mut common::rng(1));
    let map = context_map(&model, &x, 3, 2).unwrap();
    assert_eq!((map.height, map.width, map.values.len()), (14, 14, 196));
    // min-max scaling spans the full range on a non-constant map
    assert_eq!(map.values.iter().min(), Some(&0));
    assert_eq!(map.values.iter().max(), Some(&255));
}

#[test]
fn non_modulation_blocks_are_rejected() {
    let model = Model::from_preset("xxs", &BuildOptions::default()).unwrap();
    let x = Tensor::zeros([1, 3, 64, 64]);
    // stage 3 holds six modulation blocks followed by one attention block
    assert!(context_map(&model, &x, 3, 6).is_ok());
    for (stage, block) in [(3, 7), (3, 8), (5, 1), (0, 1), (1, 0)] {
        assert!(matches!(context_map(&model, &x, stage, block), Err(Error::Config(_))), "{stage},{block}");
    }
}

#[test]
fn pnm_round_trip_and_header_comments() {
    let img = Image {
        width: 3,
        height: 2,
        channels: 3,
        pixels: (0..18).map(|i| i * 14).collect(),
    };
    assert_eq!(Image::decode(&img.encode()).unwrap(), img);
    let bytes = b"P5\n# made by hand\n2 2 # trailing\n15\n\x00\x0f\x05\x0a";
    let gray = Image::decode(bytes).unwrap();
    assert_eq!((gray.channels, gray.pixels.clone()), (1, vec![0, 255, 85, 170]));
    let t = gray.to_tensor();
    assert_eq!(t.shape(), [1, 3, 2, 2]);
    assert_eq!((t.at(0, 0, 0, 1), t.at(0, 2, 0, 1)), (1.0, 1.0));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ppm");
    img.save(&path).unwrap();
    assert_eq!(Image::load(&path).unwrap(), img);
}

#[test]
fn malformed_pnm_is_parse_error() {
    for bytes in [&b"P3\n1 1\n255\n0 0 0"[..], b"P5\n2 2\n255\n\x00", b"P5\n2 2\n65535\n", b"P5\nx 2\n255\n"] {
        assert!(matches!(Image::decode(bytes), Err(Error::Parse { .. })), "{:?}", String::from_utf8_lossy(bytes));
    }
}
