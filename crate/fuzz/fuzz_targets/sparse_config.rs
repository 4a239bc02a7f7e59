#![no_main]
use libfuzzer_sys::fuzz_target;
use nm_supernet::nm::SparsityLevel;
use nm_supernet::sampling::ChoiceProbabilityTable;
use nm_supernet::space::SparseConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(level) = text.parse::<SparsityLevel>() {
        assert_eq!(level.to_string().parse::<SparsityLevel>().unwrap(), level);
    }
    let _ = serde_json::from_str::<SparseConfig>(text);
    if let Ok(table) = serde_json::from_str::<ChoiceProbabilityTable>(text) {
        let json = serde_json::to_string(&table).unwrap();
        assert_eq!(serde_json::from_str::<ChoiceProbabilityTable>(&json).unwrap(), table);
    }
});
