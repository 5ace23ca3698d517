use lensformer::detector::{build, Checkpoint, DetectorModel, ModelConfig, CHECKPOINT_MAGIC};
use lensformer::{Error, Parallelism, Tensor};

fn model() -> DetectorModel {
    build(&ModelConfig::desk(), 11).unwrap()
}

fn images() -> Vec<Tensor<f32>> {
    (0..3).map(|k| Tensor::from_fn(&[4, 32, 32], |i| ((i * 7 + k * 13) % 29) as f32 / 29.0)).collect()
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    let m = model();
    m.to_checkpoint(7).save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded.epoch, 7);
    assert_eq!(loaded.seed, 11);
    assert_eq!(&loaded.config, m.config());
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn reloaded_model_predicts_identically() {
    let m = model();
    let back = DetectorModel::<f32>::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint(0).to_bytes().unwrap()).unwrap()).unwrap();
    let x = images();
    assert_eq!(m.predict(&x, Parallelism::Parallel).unwrap(), back.predict(&x, Parallelism::Sequential).unwrap());
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let bytes = model().to_checkpoint(0).to_bytes().unwrap();
    assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
    let mut bad = bytes.clone();
    bad[0] ^= 1;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format(_))));
}

#[test]
fn parameter_counts_of_the_small_models() {
    let desk = ModelConfig::desk();
    let enc = build::<f32>(&desk, 0).unwrap().parameter_count();
    let cnn = build::<f32>(&desk.cnn_only(), 0).unwrap().parameter_count();
    // conv 4->8 and 8->16, flattened 8x8x16 head with one hidden layer of 32.
    let cnn_expect = (4 * 9 * 8 + 8) + (8 * 9 * 16 + 16) + (64 * 16 * 32 + 32) + (32 + 1);
    assert_eq!(cnn, cnn_expect);
    // One encoder of width 16: four projections, two norms, a 32-wide FFN.
    let encoder = 4 * (16 * 16 + 16) + 2 * 2 * 16 + (16 * 32 + 32) + (32 * 16 + 16);
    assert_eq!(enc, cnn_expect + encoder);
}
