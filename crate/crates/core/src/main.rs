use clap::Parser;

fn main() {
    std::process::exit(confexplain::cli::execute(confexplain::cli::Cli::parse()));
}
