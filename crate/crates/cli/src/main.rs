use clap::Parser;

fn main() {
    let cli = vbgp_cli::Cli::parse();
    match vbgp_cli::run(&cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
