fn main() {
    std::process::exit(budgeted_communities::cli::main_with_args(std::env::args_os()));
}
