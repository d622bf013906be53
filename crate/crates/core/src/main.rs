fn main() {
    std::process::exit(apslstm::cli::run());
}
