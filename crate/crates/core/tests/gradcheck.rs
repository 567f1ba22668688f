mod common;

use common::grad_cases::gradient_cases;

#[test]
fn every_kernel_and_loss_matches_central_differences() {
    for seed in [0, 1, 2] {
        let cases = gradient_cases(seed);
        assert!(cases.len() > 40);
        for (name, err) in cases {
            assert!(err <= 1e-4, "{name} (seed {seed}): relative error {err:e}");
        }
    }
}
