fn main() {
    std::process::exit(buda::cli::main_entry());
}
