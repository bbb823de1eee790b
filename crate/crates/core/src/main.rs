fn main() {
    std::process::exit(motion_code::cli::main_with_args(std::env::args_os()));
}
