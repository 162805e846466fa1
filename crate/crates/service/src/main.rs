use fedgm_core::api::DEFAULT_HTTP_ADDR;
use fedgm_service::{serve, AppState};
use tokio::net::TcpListener;
use tracing_subscriber::EnvFilter;

#[tokio::main]
async fn main() -> std::io::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let addr = std::env::args()
        .nth(1)
        .or_else(|| std::env::var("FEDGM_HTTP").ok())
        .unwrap_or_else(|| DEFAULT_HTTP_ADDR.to_string());
    let listener = TcpListener::bind(&addr).await?;
    serve(listener, AppState::default(), async {
        tokio::signal::ctrl_c().await.ok();
    })
    .await
}
