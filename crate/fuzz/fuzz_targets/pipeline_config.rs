#![no_main]
use hdpgp_cli::pipeline::PipelineConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&flag, rest)) = data.split_first() else {
        return;
    };
    let Ok(text) = std::str::from_utf8(rest) else {
        return;
    };
    if let Ok(cfg) = PipelineConfig::parse(text, flag & 1 == 1) {
        let _ = cfg.validate();
    }
});
