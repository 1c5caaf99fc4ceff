use clap::Parser;
use iso_pose::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
