fn main() {
    std::process::exit(srl_adapt::cli::dispatch(std::env::args_os()));
}
