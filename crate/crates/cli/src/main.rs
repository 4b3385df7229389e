fn main() {
    std::process::exit(xmexp::harness::cli_dispatch(std::env::args_os()));
}
