use tpo_core::hsi::DatasetDescriptor;
use tpo_core::models::{ModelSpec, TpoNet, Variant};

#[test]
fn pavia_chain_for_both_variants() {
    for variant in [Variant::TpoCnn1, Variant::TpoCnn2] {
        let (net, store) = TpoNet::build::<f32>(ModelSpec::pavia(variant, 5), 0).unwrap();
        let trace = net.shape_trace(&store).unwrap();
        assert_eq!(
            trace,
            vec![
                vec![9, 103, 5, 5],
                vec![9, 96, 5, 5],
                vec![9, 81, 5, 5],
                vec![9, 50, 5, 5],
                vec![450, 5, 5]
            ]
        );
    }
}

#[test]
fn indian_pines_chain_after_water_bands() {
    let desc = DatasetDescriptor::indian_pines();
    let bands = 220 - desc.discarded_bands.len();
    assert_eq!(bands, 200);
    let spec = ModelSpec::indian_pines(Variant::TpoCnn2, 7, 16);
    assert_eq!(spec.input_bands, bands);
    assert_eq!(spec.spectral_chain(), [200, 169, 113, 50]);
    let (net, store) = TpoNet::build::<f32>(spec, 0).unwrap();
    let trace = net.shape_trace(&store).unwrap();
    assert_eq!(trace.last().unwrap(), &vec![450, 7, 7]);
}

#[test]
fn single_view_chain_keeps_bands() {
    let spec = ModelSpec {
        views: 1,
        ..ModelSpec::pavia(Variant::TpoCnn1, 3)
    };
    let (net, store) = TpoNet::build::<f32>(spec, 0).unwrap();
    assert_eq!(net.shape_trace(&store).unwrap().last().unwrap(), &vec![50, 3, 3]);
}

#[test]
fn kernels_that_exhaust_the_bands_are_rejected() {
    let spec = ModelSpec {
        input_bands: 50,
        ..ModelSpec::pavia(Variant::TpoCnn1, 5)
    };
    assert!(TpoNet::build::<f32>(spec, 0).is_err());
}
