#![no_main]

use libfuzzer_sys::fuzz_target;
use segcal::synthdata::DatasetManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(manifest) = DatasetManifest::from_json_bytes(data) {
        manifest.validate().expect("accepted manifest validates");
        assert_eq!(manifest.splits.len(), 3);
    }
});
