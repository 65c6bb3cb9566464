fn main() {
    std::process::exit(mrckg::cli::main_entry());
}
