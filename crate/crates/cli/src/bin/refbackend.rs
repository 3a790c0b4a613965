//! The reference detector behind the external-backend protocol.

use std::io;

use semidet::backend::serve;
use semidet::pipeline::ReferenceBackend;

fn main() {
    let stdin = io::stdin();
    if let Err(e) = serve(&mut ReferenceBackend::default(), stdin.lock(), io::stdout().lock()) {
        eprintln!("semidet-refbackend: {e}");
        std::process::exit(2);
    }
}
