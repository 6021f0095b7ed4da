use clap::Parser;

fn main() {
    let cli = lavic::cli::Cli::parse();
    if let Err(e) = lavic::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
