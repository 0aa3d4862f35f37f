fn main() {
    std::process::exit(wavelit::cli::main_with(std::env::args_os()));
}
