use clap::Parser;
use depthssl::harness::{main_with, Cli};

fn main() {
    std::process::exit(main_with(Cli::parse()));
}
