use clap::Parser;

fn main() {
    let cli = apdt::cli::Cli::parse();
    if let Err(e) = apdt::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
