use clap::Parser;
use msntucf::cli::{run, Cli};

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(e.class().exit_code());
    }
}
