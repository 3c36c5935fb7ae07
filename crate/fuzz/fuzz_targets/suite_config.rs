#![no_main]

use libfuzzer_sys::fuzz_target;
use segcal::runner::SuiteConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(config) = SuiteConfig::from_json_bytes(data) {
        config.validate().expect("accepted config validates");
        let json = serde_json::to_vec(&config).expect("config serializes");
        let back = SuiteConfig::from_json_bytes(&json).expect("round trip parses");
        assert_eq!(back, config);
    }
});
