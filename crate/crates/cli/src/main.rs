fn main() {
    std::process::exit(hemulab_cli::run(std::env::args_os()));
}
