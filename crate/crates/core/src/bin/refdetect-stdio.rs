//! Serves the reference detector over the external detector protocol on
//! stdin/stdout.

use std::io::{self, BufWriter};
use std::process::ExitCode;

use bootseg::detector::protocol::serve;
use bootseg::refdetect::RefDetectorParams;

fn main() -> ExitCode {
    let stdin = io::stdin().lock();
    let stdout = BufWriter::new(io::stdout().lock());
    match serve(stdin, stdout, RefDetectorParams::default()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("refdetect-stdio: {e}");
            ExitCode::FAILURE
        }
    }
}
