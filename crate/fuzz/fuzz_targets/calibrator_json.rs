#![no_main]

use libfuzzer_sys::fuzz_target;
use segcal::posthoc::IsotonicModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = IsotonicModel::from_json_bytes(data) {
        // the validated invariants make lookup total and monotone
        let lo = model.lookup(f64::NEG_INFINITY);
        let hi = model.lookup(f64::INFINITY);
        assert!(lo <= hi);
        let mut prev = model.lookup(-1e300);
        for i in 0..=50 {
            let s = -2.0 + 4.0 * i as f64 / 50.0;
            let v = model.lookup(s);
            assert!((0.0..=1.0).contains(&v));
            assert!(v >= prev, "lookup must be monotone");
            prev = v;
        }
    }
});
