fn main() {
    std::process::exit(adattt::cli::main_with_args(std::env::args_os()));
}
