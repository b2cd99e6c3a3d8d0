fn main() {
    std::process::exit(mixar_cli::run(std::env::args_os()));
}
