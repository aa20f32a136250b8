use clap::Parser;
use smoothderiv::cli::{run, CliConfig, EXIT_OK, EXIT_PARSE};

fn main() {
    let cfg = match CliConfig::try_parse() {
        Ok(cfg) => cfg,
        Err(e) => {
            let _ = e.print();
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_PARSE,
            };
            std::process::exit(code);
        }
    };
    let code = run(&cfg, &mut std::io::stdout().lock(), &mut std::io::stderr().lock());
    std::process::exit(code);
}
