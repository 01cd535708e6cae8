use lamda_core::container::{Container, DType, Entry, TensorData};
use lamda_core::error::Error;
use proptest::prelude::*;

fn entry() -> impl Strategy<Value = Entry> {
    (proptest::collection::vec(1usize..5, 0..4), any::<bool>()).prop_flat_map(|(shape, wide)| {
        let n: usize = shape.iter().product();
        let data = if wide {
            proptest::collection::vec(any::<u64>(), n).prop_map(|v| TensorData::F64(v.into_iter().map(f64::from_bits).collect())).boxed()
        } else {
            proptest::collection::vec(any::<u32>(), n).prop_map(|v| TensorData::F32(v.into_iter().map(f32::from_bits).collect())).boxed()
        };
        data.prop_map(move |data| Entry { name: String::new(), shape: shape.clone(), data })
    })
}

proptest! {
    #[test]
    fn round_trip_is_bitwise(entries in proptest::collection::vec(entry(), 0..6)) {
        let mut c = Container::new();
        for (i, mut e) in entries.into_iter().enumerate() {
            e.name = format!("t{i}.ü");
            c.push(e).unwrap();
        }
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        prop_assert!(c.bits_eq(&back));
        prop_assert_eq!(back.to_bytes().unwrap(), bytes.clone());
        for cut in 0..bytes.len() {
            prop_assert!(matches!(Container::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ldwt");
    let mut c = Container::new();
    c.push_tensor("layers.0.q.weight", &lamda_core::Tensor::eye(3), DType::F32).unwrap();
    c.save(&path).unwrap();
    assert!(Container::load(&path).unwrap().bits_eq(&c));
}

#[test]
fn duplicate_names_in_file_rejected() {
    let mut c = Container::new();
    c.push_tensor("a", &lamda_core::Tensor::eye(1), DType::F64).unwrap();
    c.push_tensor("b", &lamda_core::Tensor::eye(1), DType::F64).unwrap();
    let mut bytes = c.to_bytes().unwrap();
    // rename "b" to "a" in place
    let pos = bytes.iter().rposition(|&x| x == b'b').unwrap();
    bytes[pos] = b'a';
    assert!(Container::from_bytes(&bytes).is_err());
}
