use std::sync::Arc;
use std::time::Duration;

use cotox_cli::env::Env;
use cotox_core::http::ReqwestTransport;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let transport = match ReqwestTransport::new(Duration::from_secs(120)) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot initialise HTTP client: {e}");
            std::process::exit(3);
        }
    };
    let env = Env::process(Arc::new(transport));
    std::process::exit(cotox_cli::main_with(std::env::args_os(), &env));
}
