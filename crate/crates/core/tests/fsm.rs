mod common;

use common::scenarios::SCENARIOS;

#[test]
fn every_adversarial_scenario_ends_in_abort() {
    let failed: Vec<String> = SCENARIOS
        .iter()
        .filter_map(|(name, run)| run().err().map(|e| format!("{name}: {e}")))
        .collect();
    assert!(failed.is_empty(), "{failed:#?}");
}
