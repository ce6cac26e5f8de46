fn main() {
    std::process::exit(trk_cli::cli::main_with(std::env::args_os()));
}
