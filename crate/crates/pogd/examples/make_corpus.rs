//! Generate a synthetic corpus and its ontology as JSON files.
//!
//! Usage:
//!
//! ```text
//! cargo run -p pogd --example make_corpus -- <n_dialogues> <corpus.json> <ontology.json> [implicit_rate] [seed]
//! ```

use std::process::ExitCode;

use pogd::corpus::{serialize_corpus, serialize_ontology};
use pogd::synth;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.len() < 3 || args.len() > 5 {
        eprintln!(
            "usage: make_corpus <n_dialogues> <corpus.json> <ontology.json> [implicit_rate] [seed]"
        );
        return ExitCode::FAILURE;
    }
    let n: usize = match args[0].parse() {
        Ok(n) => n,
        Err(e) => {
            eprintln!("bad dialogue count '{}': {e}", args[0]);
            return ExitCode::FAILURE;
        }
    };
    let implicit_rate: f64 = match args.get(3).map(|s| s.parse()) {
        None => 0.15,
        Some(Ok(r)) => r,
        Some(Err(e)) => {
            eprintln!("bad implicit rate '{}': {e}", args[3]);
            return ExitCode::FAILURE;
        }
    };
    let seed: u64 = match args.get(4).map(|s| s.parse()) {
        None => 42,
        Some(Ok(s)) => s,
        Some(Err(e)) => {
            eprintln!("bad seed '{}': {e}", args[4]);
            return ExitCode::FAILURE;
        }
    };

    let corpus = synth::generate(n, implicit_rate, seed);
    if let Err(e) = std::fs::write(&args[1], serialize_corpus(&corpus.dialogues)) {
        eprintln!("writing {}: {e}", args[1]);
        return ExitCode::FAILURE;
    }
    if let Err(e) = std::fs::write(&args[2], serialize_ontology(&corpus.ontology)) {
        eprintln!("writing {}: {e}", args[2]);
        return ExitCode::FAILURE;
    }
    println!(
        "wrote {n} dialogues to {} and the ontology to {}",
        args[1], args[2]
    );
    ExitCode::SUCCESS
}
