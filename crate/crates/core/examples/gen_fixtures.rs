//! Regenerate the bundled fixture tree. The output is deterministic, so
//! running this against `fixtures/istd_mini` reproduces the committed files.
//!
//! Usage: cargo run -p deshadow-core --example gen_fixtures -- <output-dir>

use deshadow_core::fixtures::write_istd_tree;

fn main() {
    let dest = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "fixtures/istd_mini".to_string());
    if let Err(e) = write_istd_tree(std::path::Path::new(&dest)) {
        eprintln!("failed to write fixture tree: {e}");
        std::process::exit(1);
    }
    println!("wrote fixture tree to {dest}");
}
