use tpo_core::hsi::{
    load_cube, load_labels, make_split, save_cube, save_labels, DatasetDescriptor, HsiCube, SplitSpec, SyntheticSpec,
};
use tpo_core::models::{ModelSpec, TpoNet, Variant};
use tpo_core::nn::{load_checkpoint, save_checkpoint};

#[test]
fn cube_and_labels_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (cube, labels) = SyntheticSpec::blocks(8, 6, 5, 3).generate(2).unwrap();
    save_cube(&cube, &dir.path().join("c.cube")).unwrap();
    save_labels(&labels, &dir.path().join("l.lbl")).unwrap();
    assert_eq!(load_cube(&dir.path().join("c.cube")).unwrap(), cube);
    assert_eq!(load_labels(&dir.path().join("l.lbl")).unwrap(), labels);
    assert!(load_cube(&dir.path().join("missing.cube")).is_err());
}

#[test]
fn split_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (_, labels) = SyntheticSpec::blocks(12, 12, 4, 3).generate(0).unwrap();
    let split = make_split(&labels, 5, 9).unwrap();
    let path = dir.path().join("split.txt");
    split.save(&path).unwrap();
    let back = SplitSpec::load(&path).unwrap();
    assert_eq!(back, split);
    back.validate(&labels).unwrap();
}

#[test]
fn descriptor_toml_round_trip() {
    let desc = DatasetDescriptor::indian_pines();
    assert_eq!(DatasetDescriptor::from_toml(&desc.to_toml()).unwrap(), desc);
}

#[test]
fn checkpoint_restores_every_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ModelSpec {
        input_bands: 12,
        p: 3,
        q: 3,
        r: 3,
        classes: 4,
        branch_channels: 4,
        ..ModelSpec::pavia(Variant::TpoCnn2, 3)
    };
    let (_, a) = TpoNet::build::<f32>(spec.clone(), 1).unwrap();
    let (_, mut b) = TpoNet::build::<f32>(spec.clone(), 2).unwrap();
    assert_ne!(a, b);
    let path = dir.path().join("m.tpow");
    save_checkpoint(&a, "config_hash=x\n", &path).unwrap();
    assert_eq!(load_checkpoint(&mut b, &path).unwrap(), "config_hash=x\n");
    assert_eq!(a, b);
    let (_, mut other) = TpoNet::build::<f32>(ModelSpec { classes: 5, ..spec }, 0).unwrap();
    assert!(load_checkpoint(&mut other, &path).is_err());
}

#[test]
fn non_finite_cube_is_rejected() {
    assert!(HsiCube::new(1, 1, 2, vec![0.0, f32::NAN]).is_err());
}
