mod common;

use common::*;
use layerfuse::merge::reverse_prune;

// mka against reverse pruning at the same retained depth on planted models
#[test]
fn mka_beats_reverse_on_planted_models() {
    let data = capture_data();
    let mut wins = 0;
    for (seed, base) in paired_trials() {
        let (planted, _) = plant(&base, seed, 1);
        let target = base.n_layers();
        let (merged, _) = compress(&planted, &data, target, true);
        let pruned = reverse_prune(&planted, target).unwrap();
        if cross_entropy(&merged) <= cross_entropy(&pruned) {
            wins += 1;
        }
    }
    assert!(wins >= 80, "mka matched or beat reverse in {wins}/100 trials");
}
