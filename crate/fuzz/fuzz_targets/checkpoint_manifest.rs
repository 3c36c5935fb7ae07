#![no_main]

use libfuzzer_sys::fuzz_target;
use segcal::model::CheckpointManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(manifest) = CheckpointManifest::from_json_bytes(data) {
        // accepted manifests carry only bare file names and coherent shapes
        manifest.validate().expect("accepted manifest validates");
        for entry in &manifest.layers {
            assert!(!entry.weight_file.contains(".."));
            assert!(!entry.bias_file.contains('/'));
        }
    }
});
