//! One vehicle's model loop: prompt, request, then the MetaAction gate.
//!
//! The gateway never touches vehicle state directly; everything goes through
//! [`CommandGate`], which only applies validated commands.

use std::sync::Arc;
use std::time::Duration;

use cda_core::agent::VehicleState;
use cda_core::meta_action::{Applied, CommandGate, Rejection, SafetyEnvelope};
use cda_core::Real;

use crate::client::{request, Failure, ModelClient, Response, DEFAULT_TIMEOUT};
use crate::prompt::{build_prompt, PromptContext};
use crate::stats::{Sample, StatsAccumulator};

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Applied(Applied),
    Rejected(Rejection),
    RequestFailed(Failure),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub prompt: String,
    pub response: Option<Response>,
    pub outcome: Outcome,
}

pub struct Gateway {
    client: Arc<dyn ModelClient>,
    gate: CommandGate,
    timeout: Duration,
    stats: Arc<StatsAccumulator<f64>>,
}

impl Gateway {
    pub fn new(client: Arc<dyn ModelClient>, envelope: SafetyEnvelope) -> Self {
        Self {
            client,
            gate: CommandGate::new(envelope),
            timeout: DEFAULT_TIMEOUT,
            stats: Arc::new(StatsAccumulator::new()),
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    /// Shares one accumulator between several vehicles' gateways.
    pub fn with_stats(mut self, stats: Arc<StatsAccumulator<f64>>) -> Self {
        self.stats = stats;
        self
    }

    pub fn stats(&self) -> &Arc<StatsAccumulator<f64>> {
        &self.stats
    }

    pub fn gate(&self) -> &CommandGate {
        &self.gate
    }

    pub fn client(&self) -> &dyn ModelClient {
        self.client.as_ref()
    }

    /// Asks the model about `state` and applies its answer if it passes
    /// validation. `now` is seconds since the start of the year.
    pub async fn consult<T: Real>(
        &mut self,
        state: &mut VehicleState<T>,
        now: f64,
        feed: Vec<String>,
    ) -> Turn {
        let prompt = build_prompt(&PromptContext::from_state(state, now).with_feed(feed));
        let result = request(self.client.as_ref(), &prompt, self.timeout).await;
        self.stats.push(Sample::from(&result));
        match result {
            Ok(response) => {
                let outcome = match self.gate.submit_text(&response.text, state, now) {
                    Ok(a) => Outcome::Applied(a),
                    Err(r) => Outcome::Rejected(r),
                };
                Turn {
                    prompt,
                    response: Some(response),
                    outcome,
                }
            }
            Err(f) => Turn {
                prompt,
                response: None,
                outcome: Outcome::RequestFailed(f),
            },
        }
    }
}
