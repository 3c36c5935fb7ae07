#![no_main]

use libfuzzer_sys::fuzz_target;
use segcal::runner::ExperimentConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(config) = ExperimentConfig::from_json_bytes(data) {
        // accepted configs are valid and survive a serialize/parse cycle
        config.validate().expect("accepted config validates");
        let json = serde_json::to_vec(&config).expect("config serializes");
        let back = ExperimentConfig::from_json_bytes(&json).expect("round trip parses");
        assert_eq!(back, config);
    }
});
