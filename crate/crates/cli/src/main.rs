fn main() {
    std::process::exit(pipemerge_cli::run(std::env::args_os()));
}
