fn main() {
    if let Err(e) = ripeloc_cli::run(std::env::args_os()) {
        eprintln!("{}", e.to_line());
        std::process::exit(e.kind.code());
    }
}
