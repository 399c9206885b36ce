fn main() {
    std::process::exit(bfnet::cli::commands::main_with(std::env::args_os()));
}
