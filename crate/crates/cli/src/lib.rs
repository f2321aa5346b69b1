//! Library half of the `invi` command: frame-directory IO and the `run` and
//! `eval` subcommands.

pub mod eval;
pub mod io;
pub mod run;

pub use eval::{eval_command, EvalManifest};
pub use io::{frame_name, read_video, write_video};
pub use run::{run_command, RunManifest, RunSummary};
