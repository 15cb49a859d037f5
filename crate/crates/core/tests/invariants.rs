#[path = "support/criteria.rs"]
mod criteria;
#[path = "support/oracles.rs"]
mod oracles;

use criteria::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn graph_models_keep_their_structural_invariants(seed in any::<u64>()) {
        if let Err(e) = model_invariants(seed) {
            return Err(TestCaseError::fail(e));
        }
    }

    #[test]
    fn metrics_keep_their_invariants(seed in any::<u64>()) {
        if let Err(e) = metric_invariants(seed) {
            return Err(TestCaseError::fail(e));
        }
    }
}
