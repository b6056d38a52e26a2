mod support;

use jitterlab::dataset::generate_synthetic;

#[test]
fn contract_holds_across_levels_and_seeds() {
    let corpus = generate_synthetic(3, 10_000, 0.3);
    for x in [0.0, 0.1, 0.25, 0.5, 1.0] {
        for seed in [1, 2] {
            if let Err(e) = support::check_noise_contract(&corpus, x, seed) {
                panic!("X={x} seed={seed}: {e}");
            }
        }
    }
}

#[test]
fn small_corpora_round_the_budget() {
    let corpus = generate_synthetic(9, 7, 0.3);
    for x in [0.05, 0.15, 0.5, 0.95] {
        support::check_noise_contract(&corpus, x, 4).unwrap_or_else(|e| panic!("X={x}: {e}"));
    }
}
