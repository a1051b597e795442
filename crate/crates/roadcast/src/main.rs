fn main() {
    std::process::exit(roadcast::cli::run(std::env::args_os()));
}
