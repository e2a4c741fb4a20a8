fn main() {
    std::process::exit(voxdistill::cli::main_entry());
}
