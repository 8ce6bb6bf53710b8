fn main() {
    let code = sttatts::cli::main_from(std::env::args_os(), &mut std::io::stdout().lock());
    std::process::exit(code);
}
