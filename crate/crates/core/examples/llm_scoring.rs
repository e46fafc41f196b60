//! Score hypotheses with a completions endpoint in echo mode.
//!
//! Without arguments this starts the bundled mock server. To use a real
//! service pass its base URL and model name and put the key in
//! `LLM_API_KEY`:
//!
//!     cargo run --example llm_scoring -- https://api.example.com/v1 some-model

use nbest_rescore::llmclient::mock::MockServer;
use nbest_rescore::llmclient::{ApiKey, LlmClient, LlmEndpointConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mock;
    let mut config = LlmEndpointConfig {
        rate_limit: 5.0,
        ..LlmEndpointConfig::default()
    };
    let client = if let [url, model] = args.as_slice() {
        config.base_url = url.clone();
        config.model_name = model.clone();
        LlmClient::new(config)?
    } else {
        mock = MockServer::start()?;
        config.base_url = mock.base_url();
        config.model_name = "mock".into();
        LlmClient::with_key(config, ApiKey::new("not-a-real-key"))
    };
    let texts = ["play the reytons", "play the ray tons", "play the reytons"];
    let scores = client.batch_score(&texts)?;
    for (t, s) in texts.iter().zip(&scores) {
        println!("{t:<20} NLL {s:.3}");
    }
    println!("{} requests for {} texts", client.request_count(), texts.len());
    Ok(())
}
