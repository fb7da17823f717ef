mod support;

use support::gradcheck::{check_scene, REL_TOL};

#[test]
fn full_chain_matches_finite_differences() {
    for seed in [11, 12, 13] {
        let tally = check_scene(seed);
        assert!(tally.failures.is_empty(), "{:#?}", &tally.failures[..tally.failures.len().min(10)]);
        assert!(tally.worst() < REL_TOL);
        assert!(tally.skipped() * 100 < tally.checked(), "too many non-smooth checks: {:?}", tally.families);
    }
}
