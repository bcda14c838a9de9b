fn main() {
    std::process::exit(birdedge::cli::run(std::env::args_os()));
}
