#[path = "support/criteria.rs"]
mod criteria;
#[path = "support/oracles.rs"]
mod oracles;

use criteria::learned_graph_export;
use epihybrid::data::{Prepared, SplitSpec};
use epihybrid::harness::ModelConfig;
use epihybrid::hybridgnn::HybridConfig;
use epihybrid::synthetic::{generate, SyntheticSpec};

#[test]
fn trained_hybrid_graph_decomposes_and_is_denser_than_geography() {
    let (ds, adj) = generate(&SyntheticSpec { regions: 6, length: 200, ..SyntheticSpec::default() });
    let data = Prepared::new(ds, adj, SplitSpec::default(), 12, 2).unwrap();
    let config = ModelConfig::Hybrid(HybridConfig { window: 12, hidden: 8, risk_dim: 8, attention_dim: 8, ..HybridConfig::default() });
    let line = learned_graph_export(&data, config, 20).unwrap();
    eprintln!("{line}");
}
