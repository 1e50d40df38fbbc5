use std::process::ExitCode;

use clap::error::ErrorKind;

fn main() -> ExitCode {
    match tof_forge_cli::run(std::env::args_os()) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            if let Some(clap_err) = err.downcast_ref::<clap::Error>() {
                if matches!(clap_err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                    print!("{clap_err}");
                    return ExitCode::SUCCESS;
                }
                let rendered = clap_err.to_string();
                eprintln!("{}", rendered.lines().next().unwrap_or("error: invalid arguments"));
                return ExitCode::from(2);
            }
            eprintln!("error: {}", format!("{err:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
