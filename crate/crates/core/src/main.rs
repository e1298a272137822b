fn main() {
    std::process::exit(hvcnet::cli::main_entry());
}
