use eit_core::data::{read_image, synth_generate};
use eit_core::explain::*;
use eit_core::model::{ModelConfig, Preset, TransformerModel, Variant};
use eit_core::rng::seeded;
use eit_core::tensor::Tensor;
use eit_core::{Error, Model};

fn desk(variant: Variant) -> Model {
    TransformerModel::new(ModelConfig::new(variant, Preset::Desk).with_depth(2), &mut seeded(5)).unwrap()
}

fn image() -> (Vec<u8>, Tensor<f32>) {
    let s = synth_generate(1, 3).unwrap().remove(4).sample;
    let t = s.to_tensor();
    (s.pixels, t)
}

#[test]
fn maps_are_normalized_and_shift_invariant() {
    let (_, x) = image();
    for v in Variant::ALL {
        let m = desk(v);
        let a = grad_cam(&m, &x, 4).unwrap();
        assert_eq!(a.grid.len(), 16);
        assert_eq!(a.upsampled.len(), 64 * 64);
        for vals in [&a.grid, &a.upsampled] {
            assert!(vals.iter().all(|&p| (0.0..=1.0).contains(&p)), "{v}");
            let max = vals.iter().cloned().fold(0.0, f64::max);
            assert!(max == 0.0 || (max - 1.0).abs() < 1e-12);
        }
        let b = grad_cam_with_shift(&m, &x, 4, 7.5).unwrap();
        for (p, q) in a.upsampled.iter().zip(&b.upsampled) {
            assert!((p - q).abs() <= 1e-5, "{v}");
        }
    }
}

#[test]
fn paper_geometry_gives_four_by_four_grid_on_256_pixels() {
    let m: Model = TransformerModel::new(ModelConfig::new(Variant::Vit, Preset::Paper).with_depth(1), &mut seeded(1)).unwrap();
    let x = Tensor::full([256, 256, 3], 0.5f32);
    let map = grad_cam(&m, &x, 0).unwrap();
    assert_eq!((map.grid_side, map.side), (4, 256));
    assert_eq!(map.upsampled.len(), 256 * 256);
}

#[test]
fn zero_gradients_give_zero_map() {
    let mut m = desk(Variant::Vit);
    // zero classifier output layer: the target score no longer depends on A
    let ids: Vec<_> = m.params.iter().filter(|(_, n, _)| n.starts_with("head.out")).map(|(id, _, _)| id).collect();
    for id in ids {
        let shape = m.params.get(id).shape().to_vec();
        m.params.set(id, Tensor::zeros(shape)).unwrap();
    }
    let (_, x) = image();
    let map = grad_cam(&m, &x, 2).unwrap();
    assert!(map.grid.iter().chain(&map.upsampled).all(|&v| v == 0.0));
}

#[test]
fn invalid_class_is_contract_error() {
    let (_, x) = image();
    assert!(matches!(grad_cam(&desk(Variant::Vit), &x, 5), Err(Error::Contract(_))));
}

#[test]
fn overlay_blends_half_and_half() {
    let (pixels, x) = image();
    let map = grad_cam(&desk(Variant::Deit), &x, 1).unwrap();
    let out = overlay_pixels(&pixels, &map).unwrap();
    for (i, &v) in map.upsampled.iter().enumerate() {
        let c = JET[(v * 255.0).round() as usize];
        for k in 0..3 {
            let expected = (0.5 * pixels[3 * i + k] as f64 + 0.5 * c[k] as f64).round() as u8;
            assert_eq!(out[3 * i + k], expected);
        }
    }
}

#[test]
fn overlay_png_round_trips_and_is_deterministic() {
    let (pixels, x) = image();
    let map = grad_cam(&desk(Variant::Cait), &x, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.png");
    let b = dir.path().join("b.png");
    overlay_png(&pixels, &map, &a).unwrap();
    overlay_png(&pixels, &map, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let (w, h, back) = read_image(&a).unwrap();
    assert_eq!((w, h), (64, 64));
    assert_eq!(back, overlay_pixels(&pixels, &map).unwrap());
    let bad = dir.path().join("missing").join("x.png");
    assert!(overlay_png(&pixels, &map, &bad).is_err());
}
