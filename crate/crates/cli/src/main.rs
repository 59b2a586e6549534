use std::process::ExitCode;

fn main() -> ExitCode {
    let outcome = mcl_cli::dispatch(std::env::args_os());
    if outcome.code == 0 {
        println!("{}", outcome.summary);
        for p in &outcome.paths {
            println!("wrote {}", p.display());
        }
    } else {
        eprintln!("{}", outcome.summary.trim_end());
    }
    ExitCode::from(outcome.code.clamp(0, 255) as u8)
}
