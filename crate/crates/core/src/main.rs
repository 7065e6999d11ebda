use std::io::Write;

fn main() {
    let mut out = std::io::stdout().lock();
    let code = polyrelax::cli::run_cli(std::env::args_os(), &mut out);
    let _ = out.flush();
    std::process::exit(code);
}
