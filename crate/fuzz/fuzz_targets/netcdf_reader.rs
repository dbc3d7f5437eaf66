#![no_main]

use libfuzzer_sys::fuzz_target;
use physode::datasets::era5::parse_time_units;
use physode::io::netcdf::NcFile;

fuzz_target!(|data: &[u8]| {
    if let Ok(file) = NcFile::from_bytes(data.to_vec()) {
        for var in file.variables.values() {
            if let Some(units) = var.text_attr("units") {
                let _ = parse_time_units(units);
            }
        }
    }
});
