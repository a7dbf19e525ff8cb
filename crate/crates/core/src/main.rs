use clap::Parser;

fn main() {
    std::process::exit(rpmeas::cli::run(rpmeas::cli::Cli::parse()));
}
