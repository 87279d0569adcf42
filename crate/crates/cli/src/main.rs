fn main() {
    std::process::exit(tfnet_cli::dispatch(std::env::args_os()));
}
