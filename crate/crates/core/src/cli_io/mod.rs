//! Point-cloud and configuration files, and the command-line entry points.

mod cli;
mod cloud;
mod config;

pub use cli::{run_command, run_command_to, EXIT_CHECK_FAILED, EXIT_OK, EXIT_USAGE};
pub use cloud::{decode_binary, decode_text, encode_binary, encode_text, read_cloud, write_cloud, CloudFormat, CLOUD_MAGIC, CLOUD_VERSION};
pub use config::{preset_grid_size, RunConfig};
