fn main() {
    std::process::exit(luna::cli::main_with(std::env::args_os()));
}
