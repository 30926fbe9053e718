//! One module per subcommand. Each takes its parsed flags, does the work,
//! writes its outputs plus a fully resolved `config.json` echo, and returns
//! a [`crate::error::CliError`] mapped to the documented exit codes.

pub mod ablate;
pub mod correct;
pub mod eval;
pub mod fit;
pub mod phantom;
pub mod register;

use std::path::Path;

use crate::error::CliError;

/// Creates an output directory (and parents).
pub fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))
}

/// Frame file stem shared by per-frame outputs: two-digit zero-padded index.
pub fn frame_tag(index: usize) -> String {
    format!("{index:02}")
}
