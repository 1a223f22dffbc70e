fn main() {
    std::process::exit(tracernet_cli::dispatch(std::env::args_os()));
}
