//! Regenerates the checked-in fixture corpus. The renderer is deterministic,
//! so running this against an existing corpus is a no-op byte-wise.

use std::path::PathBuf;

use anyhow::Result;

fn main() -> Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("fixtures"));
    let paths = rdc_harness::fixtures::write_corpus(&dir)?;
    println!("wrote {} fixture images to {}", paths.len(), dir.display());
    Ok(())
}
