use clap::Parser;

fn main() {
    let cli = quasispec_cli::Cli::parse();
    std::process::exit(quasispec_cli::execute(&cli));
}
