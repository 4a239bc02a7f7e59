#![no_main]
use libfuzzer_sys::fuzz_target;
use nm_supernet::model::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let again = Checkpoint::from_bytes(&ckpt.to_bytes()).expect("re-encoded checkpoint parses");
        assert_eq!(again.model.arch, ckpt.model.arch);
    }
});
