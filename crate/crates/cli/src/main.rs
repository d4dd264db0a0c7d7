use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cancel = Arc::new(AtomicBool::new(false));
    let flag = cancel.clone();
    if let Err(e) = ctrlc::set_handler(move || {
        if flag.swap(true, Ordering::SeqCst) {
            std::process::exit(biseq_cli::EXIT_CANCELLED);
        }
        log::warn!("interrupt received; finishing the current epoch");
    }) {
        log::warn!("cannot install interrupt handler: {e}");
    }
    std::process::exit(biseq_cli::run_with_cancel(std::env::args_os(), Some(cancel)));
}
