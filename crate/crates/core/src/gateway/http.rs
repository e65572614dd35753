use serde::Deserialize;

use super::{ChatClient, ChatRequest, GatewayError};

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpChatClient {
    endpoint: String,
    model: String,
    api_key: Option<String>,
}

impl HttpChatClient {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        HttpChatClient { endpoint: endpoint.into(), model: model.into(), api_key }
    }
}

#[derive(Deserialize)]
struct Message {
    content: String,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Response {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    choices: Vec<Choice>,
}

impl ChatClient for HttpChatClient {
    fn complete(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": [
                { "role": "system", "content": req.system },
                { "role": "user", "content": req.user },
            ],
            "temperature": req.params.temperature,
            "max_tokens": req.params.max_tokens,
        });
        let mut call = ureq::post(&self.endpoint);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let resp: Response = call
            .send_json(&body)
            .map_err(|e| GatewayError::Transport(e.to_string()))?
            .body_mut()
            .read_json()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        resp.text
            .or_else(|| resp.choices.into_iter().next().map(|c| c.message.content))
            .ok_or_else(|| GatewayError::Transport("response carries no text".into()))
    }
}
