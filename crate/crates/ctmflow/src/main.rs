use clap::Parser;

fn main() {
    let cli = ctmflow::cli::Cli::parse();
    std::process::exit(ctmflow::cli::run(cli));
}
