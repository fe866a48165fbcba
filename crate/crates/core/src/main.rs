fn main() {
    std::process::exit(memgraft::cli::main_entry());
}
