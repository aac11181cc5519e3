fn main() {
    let seed = std::env::var(wmlab_cli::SEED_ENV).ok();
    let code = wmlab_cli::run(
        std::env::args_os(),
        seed.as_deref(),
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    );
    std::process::exit(code);
}
