use tpo_core::fixtures::{block_experiment, block_scene};
use tpo_core::models::Variant;
use tpo_core::nn::write_checkpoint;
use tpo_core::sampler::TpoExtractor;
use tpo_core::train::{classify_scene, run_experiment, Experiment, RunOutput};

fn short(variant: Variant) -> Experiment {
    let mut exp = block_experiment(variant);
    exp.train.epochs = 4;
    exp
}

fn run(variant: Variant, seed: u64, threads: usize) -> (Vec<u8>, String, Vec<usize>) {
    let data = block_scene().unwrap();
    let mut exp = short(variant);
    exp.threads = threads;
    let RunOutput { net, store, report, .. } = run_experiment(&data, &exp, seed, "abc").unwrap();
    let mut ckpt = Vec::new();
    write_checkpoint(&store, "", &mut ckpt).unwrap();
    let ex = TpoExtractor::new(&data.cube, exp.sampler).unwrap();
    let map = classify_scene(&net, &store, &ex, 64, threads).unwrap();
    (ckpt, report.to_text(), map)
}

#[test]
fn same_seed_gives_identical_artifacts() {
    for variant in [Variant::TpoCnn1, Variant::TpoCnn2] {
        let a = run(variant, 7, 1);
        let b = run(variant, 7, 1);
        assert_eq!(a.0, b.0, "{variant} checkpoint");
        assert_eq!(a.1, b.1, "{variant} report");
        assert_eq!(a.2, b.2, "{variant} map");
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let a = run(Variant::TpoCnn1, 3, 1);
    let b = run(Variant::TpoCnn1, 3, 4);
    assert_eq!(a, b);
}

#[test]
fn different_seeds_differ() {
    let a = run(Variant::TpoCnn1, 1, 1);
    let b = run(Variant::TpoCnn1, 2, 1);
    assert_ne!(a.0, b.0);
}
