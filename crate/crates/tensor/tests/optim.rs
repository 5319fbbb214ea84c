use proptest::prelude::*;
use vsd_tensor::{load_checkpoint, read_checkpoint, save_checkpoint, Adam, ParamStore, Tape, Tensor, TensorError};

fn store_with(values: Vec<f64>) -> (ParamStore<f64>, vsd_tensor::ParamId) {
    let mut store = ParamStore::new();
    let n = values.len();
    let id = store.add("p", Tensor::from_vec(values, &[n]).unwrap());
    (store, id)
}

fn fill_grad(store: &mut ParamStore<f64>, id: vsd_tensor::ParamId, coeffs: &[f64]) {
    // loss = sum(p * c) so that dL/dp = c
    let tape = Tape::new();
    let p = tape.param(store, id);
    let c = tape.constant(Tensor::from_vec(coeffs.to_vec(), &[coeffs.len()]).unwrap());
    let g = tape.backward(p.mul(c).unwrap().sum()).unwrap();
    store.accumulate(&g);
}

#[test]
fn zero_gradient_leaves_parameter_unchanged() {
    let (mut store, id) = store_with(vec![1.0, -2.0]);
    fill_grad(&mut store, id, &[0.0, 0.0]);
    let mut adam = Adam::new(0.1);
    adam.step(&mut store).unwrap();
    assert_eq!(store.value(id).data(), &[1.0, -2.0]);
}

#[test]
fn first_step_moves_by_lr_times_sign() {
    let (mut store, id) = store_with(vec![1.0, 1.0]);
    fill_grad(&mut store, id, &[3.0, -0.5]);
    let mut adam = Adam::new(0.01);
    adam.step(&mut store).unwrap();
    // bias-corrected first step: m̂ = g, v̂ = g², update = lr·g/(|g|+eps)
    let v = store.value(id).data();
    assert!((v[0] - (1.0 - 0.01)).abs() < 1e-8, "{v:?}");
    assert!((v[1] - (1.0 + 0.01)).abs() < 1e-8, "{v:?}");
}

#[test]
fn step_count_increments() {
    let (mut store, id) = store_with(vec![0.0]);
    let mut adam = Adam::new(0.01);
    for _ in 0..2 {
        fill_grad(&mut store, id, &[1.0]);
        adam.step(&mut store).unwrap();
    }
    assert_eq!(adam.state.step_count, 2);
}

#[test]
fn missing_gradient_is_an_error() {
    let (mut store, _) = store_with(vec![0.0]);
    let mut adam = Adam::new(0.01);
    assert!(matches!(adam.step(&mut store), Err(TensorError::MissingGrad(_))));
    assert_eq!(adam.state.step_count, 0);
}

#[test]
fn frozen_parameters_are_skipped() {
    let (mut store, id) = store_with(vec![5.0]);
    store.set_requires_grad(id, false);
    let mut adam = Adam::new(0.01);
    adam.step(&mut store).unwrap();
    assert_eq!(store.value(id).data(), &[5.0]);
}

#[test]
fn checkpoint_round_trip_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    let mut store = ParamStore::<f32>::new();
    let mut rng = rand::rng();
    store.add("a.weight", Tensor::randn(&[3, 4], 1.0, &mut rng));
    store.add("a.bias", Tensor::randn(&[4], 1.0, &mut rng));
    save_checkpoint(&path, &store).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"VSD1");
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
    assert_eq!(header["a.weight"]["shape"], serde_json::json!([3, 4]));
    assert_eq!(header["a.weight"]["dtype"], "f32");
    assert_eq!(bytes.len(), 12 + hlen + 16 * 4);

    let mut restored = store.clone();
    for id in restored.ids().collect::<Vec<_>>() {
        let shape = restored.value(id).shape().to_vec();
        restored.set_value(id, Tensor::zeros(&shape)).unwrap();
    }
    load_checkpoint(&path, &mut restored).unwrap();
    assert!(restored.values_equal(&store));

    // f32 payload widens losslessly into f64.
    let wide = read_checkpoint::<f64, _>(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(wide["a.bias"].data()[0] as f32, store.value(store.find("a.bias").unwrap()).data()[0]);
}

#[test]
fn checkpoint_rejects_bad_magic_and_shape() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    std::fs::write(&path, b"NOPE\0\0\0\0\0\0\0\0").unwrap();
    let mut store = ParamStore::<f32>::new();
    store.add("x", Tensor::zeros(&[2]));
    assert!(load_checkpoint(&path, &mut store).is_err());

    let mut other = ParamStore::<f32>::new();
    other.add("x", Tensor::zeros(&[3]));
    save_checkpoint(&path, &other).unwrap();
    assert!(load_checkpoint(&path, &mut store).is_err());
}

proptest! {
    #[test]
    fn adam_step_is_bounded_by_lr(g in prop::collection::vec(-10.0f64..10.0, 1..8), lr in 1e-4f64..1e-1) {
        let n = g.len();
        let (mut store, id) = store_with(vec![0.0; n]);
        fill_grad(&mut store, id, &g);
        let mut adam = Adam::new(lr);
        adam.step(&mut store).unwrap();
        for &v in store.value(id).data() {
            prop_assert!(v.abs() <= lr * (1.0 + 1e-9));
        }
    }
}
