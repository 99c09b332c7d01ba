fn main() {
    let code = routerl::cli::run_with(std::env::args_os(), &mut std::io::stdout());
    std::process::exit(code);
}
