use arcvq::checkpoint::{decode, encode};
use arcvq::config::TrainConfig;
use arcvq::data::{encode_idx_images, encode_idx_labels, load_idx, parse_idx, write_idx, Dataset};
use arcvq::tensor::Tensor;
use proptest::prelude::*;

fn dataset() -> impl Strategy<Value = Dataset> {
    (1usize..6, 1usize..9).prop_flat_map(|(m, side)| {
        (
            prop::collection::vec(any::<u8>(), m * side * side),
            prop::option::of(prop::collection::vec(any::<u8>(), m)),
        )
            .prop_map(move |(px, labels)| Dataset {
                images: Tensor::new(
                    vec![m, side, side],
                    px.iter().map(|&b| f64::from(b) / 255.0).collect(),
                )
                .unwrap(),
                labels,
                side,
            })
    })
}

fn named_tensors() -> impl Strategy<Value = Vec<(String, Tensor)>> {
    let one = ("[a-z.]{1,12}", prop::collection::vec(1usize..4, 1..3)).prop_flat_map(|(name, dims)| {
        let n = dims.iter().product::<usize>();
        prop::collection::vec(any::<f64>(), n)
            .prop_map(move |data| (name.clone(), Tensor::new(dims.clone(), data).unwrap()))
    });
    prop::collection::vec(one, 0..5)
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn idx_round_trip_in_memory(ds in dataset()) {
        let img = encode_idx_images(&ds);
        let lab = ds.labels.as_ref().map(|l| encode_idx_labels(l));
        let back = parse_idx(&img, lab.as_deref()).unwrap();
        prop_assert_eq!(bits(&back.images), bits(&ds.images));
        prop_assert_eq!(back.labels, ds.labels);
        prop_assert!(back.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn checkpoint_round_trip(t in named_tensors()) {
        let back = decode(&encode(&t)).unwrap();
        prop_assert_eq!(back.len(), t.len());
        for ((n0, t0), (n1, t1)) in t.iter().zip(&back) {
            prop_assert_eq!(n0, n1);
            prop_assert_eq!(t0.dims(), t1.dims());
            prop_assert_eq!(bits(t0), bits(t1));
        }
    }

    #[test]
    fn truncated_checkpoint_never_decodes(t in named_tensors(), cut in 1usize..64) {
        let bytes = encode(&t);
        let cut = cut.min(bytes.len());
        prop_assert!(decode(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn config_text_round_trip(seed in any::<u64>(), k in 2usize..1024, m in 0.0..2.0f64, lr in 1e-6..1e-1f64) {
        let mut cfg = TrainConfig { seed, codebook_size: k, learning_rate: lr, ..TrainConfig::default() };
        cfg.margin = m;
        prop_assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}

#[test]
fn idx_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ds = arcvq::data::synth_dataset(20, 12, 3, 9).unwrap();
    let (ip, lp) = (dir.path().join("x.idx3-ubyte"), dir.path().join("y.idx1-ubyte"));
    write_idx(&ds, &ip, Some(&lp)).unwrap();
    let back = load_idx(&ip, Some(&lp)).unwrap();
    let again = dir.path().join("z.idx3-ubyte");
    write_idx(&back, &again, None).unwrap();
    assert_eq!(std::fs::read(&ip).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(back.side, 12);
    assert_eq!(back.len(), 20);
}
