use clap::Parser;

fn main() {
    let cli = ranet::cli::Cli::parse();
    if let Err(e) = ranet::cli::run(cli) {
        eprintln!("error: {}", e);
        std::process::exit(1);
    }
}
