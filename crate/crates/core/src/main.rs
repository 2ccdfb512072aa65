fn main() {
    std::process::exit(qshadow::cli::main_with_args(std::env::args_os()));
}
