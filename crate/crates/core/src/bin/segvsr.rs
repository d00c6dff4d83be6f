use clap::Parser;

fn main() {
    std::process::exit(segvsr::cli::run(segvsr::cli::Cli::parse()));
}
