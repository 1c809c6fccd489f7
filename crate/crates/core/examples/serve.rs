//! Serves the golden toy circuit on localhost.
//!
//!     cargo run --example serve -- [port]
//!     curl localhost:8080/circuits
//!     curl -XPOST localhost:8080/whatif -d '{"circuit":"toy_class0","groups":[2],"image_id":0}'

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Result;
use neurflow::service::{serve, ServiceConfig, SessionState};

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let port: u16 = std::env::args().nth(1).map(|a| a.parse()).transpose()?.unwrap_or(8080);
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let cfg = ServiceConfig::new(root.join("golden"), root.join("toy/model.toml"), root.join("toy/images/probe"));
    let state = Arc::new(SessionState::load(&cfg)?);
    tokio::runtime::Runtime::new()?.block_on(serve(state, SocketAddr::from(([127, 0, 0, 1], port))))?;
    Ok(())
}
