fn main() {
    std::process::exit(velomask_cli::run(std::env::args_os()));
}
