fn main() {
    std::process::exit(shapeprior_cli::run(std::env::args_os()));
}
