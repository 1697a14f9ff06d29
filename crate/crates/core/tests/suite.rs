use std::fs;
use std::path::PathBuf;

use vpn_core::data::{load_idx_files, select_test_suite};
use vpn_core::{Network, SuiteOptions};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

#[test]
fn seed_seven_selects_the_same_members() {
    let net = Network::load(fs::File::open(fixture("poisoned_small.json")).unwrap()).unwrap();
    let data = load_idx_files(
        fixture("digits28-heldout-images.idx"),
        fixture("digits28-heldout-labels.idx"),
    )
    .unwrap();
    let opts = SuiteOptions {
        size: 16,
        seed: 7,
        stratify: true,
        k_hint: Some(0),
    };
    let a = select_test_suite(&net, &data, opts).unwrap();
    let b = select_test_suite(&net, &data, opts).unwrap();
    assert_eq!(a.source_indices(), b.source_indices());
    assert!(a.recheck(&net).unwrap());

    let mut idx = a.source_indices();
    idx.sort_unstable();
    idx.dedup();
    assert_eq!(idx.len(), 16);

    // Sixteen members over ten classes: counts differ by at most one.
    let mut counts = [0usize; 10];
    for m in &a.members {
        counts[m.label] += 1;
    }
    assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);

    let other = select_test_suite(&net, &data, SuiteOptions { seed: 8, ..opts }).unwrap();
    assert_ne!(other.source_indices(), a.source_indices());
}
