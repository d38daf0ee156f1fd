use std::io::Write;
use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut stdout = std::io::stdout().lock();
    let code = match cmd_distill::cli::run(std::env::args_os(), &mut stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = stdout.flush();
            eprintln!("error: {e}");
            cmd_distill::cli::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
