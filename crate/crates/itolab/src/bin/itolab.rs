fn main() {
    std::process::exit(itolab::run());
}
