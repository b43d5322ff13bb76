fn main() {
    std::process::exit(advdev_cli::run(std::env::args_os()));
}
