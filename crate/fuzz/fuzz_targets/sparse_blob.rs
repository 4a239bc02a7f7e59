#![no_main]
use libfuzzer_sys::fuzz_target;
use nm_supernet::encoding::{decode_sparse, SparseEncoding};

fuzz_target!(|data: &[u8]| {
    if let Ok(enc) = SparseEncoding::<f32>::from_bytes(data) {
        // anything accepted must decode and re-serialize to the same bytes
        let dense = decode_sparse(&enc).expect("accepted blob decodes");
        assert_eq!(dense.shape(), enc.shape);
        assert_eq!(enc.to_bytes(), data);
    }
});
