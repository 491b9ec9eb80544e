fn main() {
    std::process::exit(fundusbench::cli::main_with_args(std::env::args_os()));
}
