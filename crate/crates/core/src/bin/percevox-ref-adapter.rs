//! Reference backend for the JSON-lines adapter protocol, answering each
//! request with the built-in vowel transcription and MFCC embedding.
//!
//! `--fail-on SUFFIX` exits with status 1 on the first id ending with
//! `SUFFIX` (used to exercise error handling).

use std::io::{BufRead, Write};

use percevox::dsp::load_wav;
use percevox::eval::{MfccEmbedder, VowelTranscriber};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let fail_on = args
        .iter()
        .position(|a| a == "--fail-on")
        .and_then(|i| args.get(i + 1).cloned());
    let transcriber = VowelTranscriber::default();
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line.expect("readable stdin");
        if line.trim().is_empty() {
            continue;
        }
        let req: serde_json::Value = match serde_json::from_str(&line) {
            Ok(v) => v,
            Err(e) => {
                eprintln!("bad request: {e}");
                std::process::exit(1);
            }
        };
        let id = req["id"].as_str().unwrap_or_default().to_string();
        if fail_on.as_deref().is_some_and(|s| id.ends_with(s)) {
            eprintln!("refusing {id}");
            std::process::exit(1);
        }
        let path = req["audio_path"].as_str().unwrap_or_default();
        let reply = match load_wav(path) {
            Ok(audio) => {
                let text = transcriber.transcribe(&audio).ok();
                let embedding = MfccEmbedder.embed(&audio).ok();
                serde_json::json!({"id": id, "text": text, "embedding": embedding})
            }
            Err(e) => {
                eprintln!("{path}: {e}");
                std::process::exit(1);
            }
        };
        writeln!(stdout, "{reply}").expect("writable stdout");
    }
}
