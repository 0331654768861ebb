fn main() {
    fedjam::cli::cli_main();
}
