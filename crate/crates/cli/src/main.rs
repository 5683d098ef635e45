fn main() {
    std::process::exit(mtk_cli::run(std::env::args_os()));
}
