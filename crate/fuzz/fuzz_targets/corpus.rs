#![no_main]
use hdpgp::codebook::{Corpus, CorpusReader};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let whole = Corpus::read_from(data, "fuzz");
    let Ok(mut reader) = CorpusReader::new(data, "fuzz") else {
        assert!(whole.is_err());
        return;
    };
    let mut streamed = Vec::new();
    loop {
        match reader.next_clip() {
            Ok(Some(clip)) => streamed.push(clip),
            Ok(None) => break,
            Err(_) => {
                assert!(whole.is_err());
                return;
            }
        }
    }
    if let Ok(corpus) = whole {
        assert_eq!(corpus.clips.len(), streamed.len());
    }
});
