use clap::Parser;

fn main() {
    let cli = minet::cli::Cli::parse();
    if let Err(e) = minet::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
