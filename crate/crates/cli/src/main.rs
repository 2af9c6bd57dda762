fn main() {
    let mut out = std::io::stdout().lock();
    std::process::exit(turbo_cli::run(std::env::args_os(), &mut out));
}
