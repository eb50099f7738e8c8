fn main() {
    let code = phonodec::cli::run(std::env::args_os());
    std::process::exit(code);
}
