fn main() {
    std::process::exit(accel_eval::cli::main_with_args(std::env::args_os()));
}
