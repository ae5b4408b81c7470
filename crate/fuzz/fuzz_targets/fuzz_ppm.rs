#![no_main]

use farnet::data::Image;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(img) = Image::from_ppm(data) else {
        return;
    };
    // Anything accepted must re-encode to something that decodes identically.
    let again = Image::from_ppm(&img.to_ppm()).expect("re-encoded image must decode");
    assert_eq!(again, img);
});
