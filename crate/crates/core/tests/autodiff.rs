mod support;

use support::gradcheck::{max_relative_error, op_catalog, random_composite, REL_TOL};

#[test]
fn every_op_matches_finite_differences() {
    for seed in [3, 17] {
        for case in op_catalog(seed) {
            let err = max_relative_error(&case.inputs, case.build.as_ref());
            assert!(err < REL_TOL, "{} (seed {seed}): relative error {err:e}", case.name);
        }
    }
}

#[test]
fn random_composites_match_finite_differences() {
    for seed in 0..100u64 {
        let (inputs, build) = random_composite(seed);
        let err = max_relative_error(&inputs, build.as_ref());
        assert!(err < REL_TOL, "composite seed {seed}: relative error {err:e}");
    }
}
