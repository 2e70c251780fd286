//! Property tests for the checkpoint format: save → load is bit-exact for
//! arbitrary shapes and payloads, including awkward floats.

use caspl_autodiff::checkpoint;
use caspl_autodiff::tensor::Tensor;
use proptest::prelude::*;

fn arb_tensor() -> impl Strategy<Value = Tensor> {
    // Ranks 1..=3 with small dims; payload mixes ordinary and edge values.
    prop::collection::vec(1usize..4, 1..4).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(
            prop_oneof![
                -1e6f64..1e6,
                Just(0.0),
                Just(-0.0),
                Just(f64::MIN_POSITIVE),
                Just(1e300),
                Just(-1e-300),
            ],
            n..=n,
        )
        .prop_map(move |data| Tensor::new(shape.clone(), data))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn save_load_round_trip_is_bit_exact(tensors in prop::collection::vec(arb_tensor(), 1..5)) {
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("ckpt.bin");
        let man = dir.path().join("ckpt.json");
        let named: Vec<(String, Tensor)> = tensors
            .into_iter()
            .enumerate()
            .map(|(i, t)| (format!("tensor.{i}"), t))
            .collect();
        checkpoint::save(
            &bin,
            &man,
            named.iter().map(|(n, t)| (n.as_str(), t)),
            serde_json::Value::Null,
        )
        .unwrap();

        let manifest = checkpoint::load_manifest(&man).unwrap();
        let loaded = checkpoint::load_all::<f64>(&bin, &manifest).unwrap();
        prop_assert_eq!(loaded.len(), named.len());
        for (name, original) in &named {
            prop_assert!(loaded[name].bit_eq(original), "tensor {} altered by round trip", name);
        }
    }
}

#[test]
fn manifest_offsets_address_individual_records() {
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("ckpt.bin");
    let man = dir.path().join("ckpt.json");
    let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let b = Tensor::new(vec![3], vec![-1.0, 0.5, 9.0]);
    checkpoint::save(&bin, &man, [("a", &a), ("b", &b)], serde_json::Value::Null).unwrap();

    let manifest = checkpoint::load_manifest(&man).unwrap();
    // Load b alone, straight from its offset.
    let entry = &manifest.tensors["b"];
    let loaded = checkpoint::load_tensor::<f64>(&bin, entry.offset).unwrap();
    assert!(loaded.bit_eq(&b));
    // Record header: magic(4) + version(4) + rank(4) + dims(8*rank) + payload.
    assert_eq!(entry.offset, (4 + 4 + 4 + 8 * 2 + 8 * 4) as u64);
}

#[test]
fn truncated_payload_is_an_io_error_not_a_panic() {
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("ckpt.bin");
    let man = dir.path().join("ckpt.json");
    let a = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
    checkpoint::save(&bin, &man, [("a", &a)], serde_json::Value::Null).unwrap();
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 9]).unwrap();
    assert!(checkpoint::load_tensor::<f64>(&bin, 0).is_err());
}
