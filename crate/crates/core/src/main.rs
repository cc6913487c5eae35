use clap::Parser;

fn main() {
    let cli = match mtmr::cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { mtmr::cli::EXIT_USAGE } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    std::process::exit(mtmr::cli::run(cli));
}
