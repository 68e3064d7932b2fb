#![no_main]

use geoproto::geometry::pgm::Greymap;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = Greymap::decode(data) {
        let again = Greymap::decode(&img.encode()).expect("re-decode");
        assert_eq!(again, img);
    }
});
