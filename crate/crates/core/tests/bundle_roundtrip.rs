use proptest::prelude::*;
use standda::network::{load_bundle, save_bundle, Layer, ModelBundle, PiecewiseLinearNetwork};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn save_then_load_is_bit_exact(seed in any::<u64>(), hidden in 1usize..6, feat in 1usize..4) {
        let random = ModelBundle::random(&[5, hidden, feat], &[feat, 2, feat], seed).unwrap();
        // Push the weights through awkward magnitudes.
        let layers = random
            .extractor
            .layers()
            .iter()
            .map(|l| match l {
                Layer::Affine { weight, bias } => Layer::Affine {
                    weight: weight.mapv(|w| w * 1e-7 + w.powi(3) * 1e5),
                    bias: bias.mapv(|c| c / 3.0),
                },
                Layer::Relu => Layer::Relu,
            })
            .collect();
        let extractor = PiecewiseLinearNetwork::new(layers, 5).unwrap();
        let mut bundle = ModelBundle::new(extractor, random.autoencoder).unwrap();
        bundle.metadata = random.metadata;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.json");
        save_bundle(&bundle, &path).unwrap();
        let back = load_bundle(&path).unwrap();
        prop_assert_eq!(back, bundle);
    }
}
