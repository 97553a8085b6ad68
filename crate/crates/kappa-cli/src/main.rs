use clap::Parser;

fn main() {
    let cli = match kappa_cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { kappa_cli::EXIT_USAGE } else { kappa_cli::EXIT_OK };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    std::process::exit(kappa_cli::run(cli));
}
