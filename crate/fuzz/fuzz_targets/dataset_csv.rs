#![no_main]
use libfuzzer_sys::fuzz_target;
use nm_supernet::harness::{parse_csv, CsvSchema};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let schema = CsvSchema {
        features: 4,
        num_classes: 3,
        max_value: 255.0,
    };
    if let Ok(d) = parse_csv(text, &schema) {
        assert!(d.labels().iter().all(|&l| l < 3));
        assert!(d.features().as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }
});
