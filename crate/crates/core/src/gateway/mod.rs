//! Uniform completion interface over model providers.

mod http;
mod mock;

pub use http::{
    HttpProvider, ProviderConfig, RateLimiter, ReqwestTransport, Transport, TransportFailure,
};
pub use mock::{MockRule, RuleMatcher, ScriptedMock, ScriptedMockTable};

use serde::{Deserialize, Serialize};

use crate::error::GatewayError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: usize,
    pub model_id: String,
}

fn default_max_output_tokens() -> usize {
    1024
}

impl CompletionRequest {
    /// Temperature 0, the setting used for every pipeline call.
    pub fn new(prompt: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: 0.0,
            max_output_tokens: default_max_output_tokens(),
            model_id: model_id.into(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// A provider of text completions. Implementations must be shareable across
/// threads.
pub trait LanguageModel: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError>;
}

impl<T: LanguageModel + ?Sized> LanguageModel for &T {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        (**self).complete(req)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for std::sync::Arc<T> {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        (**self).complete(req)
    }
}

impl<T: LanguageModel + ?Sized> LanguageModel for Box<T> {
    fn complete(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        (**self).complete(req)
    }
}

/// Validates the request, then asks the provider.
pub fn complete(provider: &dyn LanguageModel, req: &CompletionRequest) -> Result<String, GatewayError> {
    req.validate()?;
    provider.complete(req)
}

/// Sends `prompt`; if `parse` rejects the answer, asks once more with
/// `reminder` appended. Transport and configuration errors are not retried
/// here.
pub fn complete_parsed<T>(
    provider: &dyn LanguageModel,
    model_id: &str,
    prompt: &str,
    reminder: &str,
    parse: impl Fn(&str) -> Result<T, GatewayError>,
) -> Result<T, GatewayError> {
    let first = complete(provider, &CompletionRequest::new(prompt, model_id))?;
    match parse(&first) {
        Ok(v) => Ok(v),
        Err(_) => {
            let retry = format!("{prompt}{reminder}");
            let second = complete(provider, &CompletionRequest::new(retry, model_id))?;
            parse(&second)
        }
    }
}
