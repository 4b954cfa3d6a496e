fn main() {
    std::process::exit(pcmcd::run(std::env::args_os()));
}
