fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter("ENTROPIC_DECONV_LOG")).init();
    std::process::exit(entropic_deconv::cli::main_with_args(std::env::args_os()));
}
