//! Chat-completions-style remote model client. Excluded from acceptance;
//! present so a hosted model can replace the mock without code changes.
//!
//! Protocol: POST {endpoint} with JSON {model, messages:[{role, content}],
//! temperature}; the response is JSON with a "text" field. Authentication is
//! a bearer token taken from XPSTORE_MODEL_TOKEN at call time. Timeouts and
//! malformed responses retry up to the configured budget; in-flight requests
//! are bounded by a semaphore.

use std::time::Duration;

use parking_lot::{Condvar, Mutex};
use serde::Deserialize;

use super::{
    AnswerRequest, AnswerResult, Condenser, DistillResult, Gateway, GatewayConfig, GatewayError,
    GatewayMode,
};
use crate::domain::{Episode, TopicLabel};
use crate::net::HttpClient;

pub const MODEL_TOKEN_ENV: &str = "XPSTORE_MODEL_TOKEN";

struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Semaphore { permits: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) {
        let mut p = self.permits.lock();
        while *p == 0 {
            self.cv.wait(&mut p);
        }
        *p -= 1;
    }

    fn release(&self) {
        *self.permits.lock() += 1;
        self.cv.notify_one();
    }
}

pub struct RemoteGateway {
    endpoint: String,
    model: String,
    max_retries: u32,
    client: HttpClient,
    limiter: Semaphore,
    topics: Vec<TopicLabel>,
    default_topic: TopicLabel,
}

#[derive(Deserialize)]
struct ModelReply {
    text: String,
}

impl RemoteGateway {
    pub fn new(
        config: &GatewayConfig,
        topics: Vec<TopicLabel>,
        default_topic: TopicLabel,
    ) -> Result<Self, GatewayError> {
        if config.mode != GatewayMode::Remote {
            return Err(GatewayError::Misconfigured("remote gateway requires mode = remote".into()));
        }
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| GatewayError::Misconfigured("remote mode requires an endpoint".into()))?;
        let model = config
            .model
            .clone()
            .ok_or_else(|| GatewayError::Misconfigured("remote mode requires a model name".into()))?;
        Ok(RemoteGateway {
            endpoint,
            model,
            max_retries: config.max_retries.max(1),
            client: HttpClient { timeout: Duration::from_millis(config.timeout_ms.max(1)) },
            limiter: Semaphore::new(config.concurrency),
            topics,
            default_topic,
        })
    }

    fn headers(&self) -> Vec<(String, String)> {
        let mut h = vec![("content-type".to_string(), "application/json".to_string())];
        if let Ok(token) = std::env::var(MODEL_TOKEN_ENV) {
            if !token.is_empty() {
                h.push(("authorization".to_string(), format!("Bearer {token}")));
            }
        }
        h
    }

    /// One prompt round trip with the retry budget applied to transport
    /// failures, non-2xx statuses, and unparseable bodies alike.
    fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        let request = serde_json::json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": 0.0,
        });
        let body = serde_json::to_vec(&request).expect("static request shape");

        self.limiter.acquire();
        let result = self.try_rounds(&body);
        self.limiter.release();
        result
    }

    fn try_rounds(&self, body: &[u8]) -> Result<String, GatewayError> {
        let mut last = String::new();
        for _ in 0..self.max_retries {
            match self.client.request("POST", &self.endpoint, &self.headers(), body) {
                Err(e) => last = e.to_string(),
                Ok(resp) if !(200..300).contains(&resp.status) => {
                    last = format!("status {}", resp.status);
                }
                Ok(resp) => match serde_json::from_slice::<ModelReply>(&resp.body) {
                    Ok(reply) => return Ok(reply.text),
                    Err(e) => last = format!("bad reply json: {e}"),
                },
            }
        }
        Err(GatewayError::Exhausted { attempts: self.max_retries, last })
    }

    fn registry_topic(&self, raw: &str) -> TopicLabel {
        let wanted = raw.trim().to_lowercase();
        self.topics
            .iter()
            .find(|t| t.as_str() == wanted)
            .cloned()
            .unwrap_or_else(|| self.default_topic.clone())
    }
}

impl Condenser for RemoteGateway {
    fn condense(&self, texts: &[String]) -> Result<String, GatewayError> {
        if texts.len() < 2 {
            return Err(GatewayError::TooFewTexts(texts.len()));
        }
        let prompt = format!(
            "Condense the following knowledge items into one concise item, \
             preserving every distinct fact and removing repetition.\n\n{}",
            texts.join("\n---\n")
        );
        let text = self.complete(&prompt)?;
        if text.trim().is_empty() {
            return Err(GatewayError::Malformed("empty condensation".into()));
        }
        Ok(text)
    }
}

impl Gateway for RemoteGateway {
    fn distill(&self, episode: &Episode) -> Result<DistillResult, GatewayError> {
        let transcript: Vec<String> =
            episode.events.iter().map(|e| format!("{}: {}", e.role, e.text)).collect();
        let prompt = format!(
            "Summarize the reusable knowledge in this interaction as one short \
             experience note.\n\n{}",
            transcript.join("\n")
        );
        let text = self.complete(&prompt)?;
        if text.trim().is_empty() {
            return Err(GatewayError::Malformed("empty distillation".into()));
        }
        let topic = self.classify(&transcript.join(" "))?;
        Ok(DistillResult { text, topic })
    }

    fn classify(&self, text: &str) -> Result<TopicLabel, GatewayError> {
        let names: Vec<&str> = self.topics.iter().map(|t| t.as_str()).collect();
        let prompt = format!(
            "Classify the following text into exactly one of these topics and \
             reply with the topic name only: {}.\n\n{text}",
            names.join(", ")
        );
        Ok(self.registry_topic(&self.complete(&prompt)?))
    }

    /// Expects the first reply line to be the chosen answer and a later line
    /// "confidence: NN". A missing confidence is malformed; the harness
    /// counts that as an incorrect, flagged result rather than crashing.
    fn answer(&self, req: &AnswerRequest) -> Result<AnswerResult, GatewayError> {
        let mut prompt = format!("Question: {}\n", req.question);
        if !req.choices.is_empty() {
            prompt.push_str(&format!("Choices: {}\n", req.choices.join(" | ")));
        }
        if !req.experiences.is_empty() {
            prompt.push_str("Relevant experience:\n");
            for x in &req.experiences {
                prompt.push_str(x);
                prompt.push('\n');
            }
        }
        prompt.push_str(
            "Reply with the chosen answer on the first line and \
             \"confidence: <0-100>\" on the second.",
        );
        let reply = self.complete(&prompt)?;
        parse_answer(&reply)
    }
}

fn parse_answer(reply: &str) -> Result<AnswerResult, GatewayError> {
    let mut lines = reply.lines().filter(|l| !l.trim().is_empty());
    let answer = lines
        .next()
        .ok_or_else(|| GatewayError::Malformed("empty answer".into()))?
        .trim()
        .to_string();
    let confidence = lines
        .find_map(|l| {
            let l = l.trim().to_lowercase();
            l.strip_prefix("confidence:").map(|v| v.trim().parse::<f64>())
        })
        .transpose()
        .map_err(|e| GatewayError::Malformed(format!("bad confidence: {e}")))?
        .ok_or_else(|| GatewayError::Malformed("missing confidence line".into()))?;
    if !(0.0..=100.0).contains(&confidence) {
        return Err(GatewayError::Malformed(format!("confidence {confidence} out of [0,100]")));
    }
    Ok(AnswerResult { answer, confidence })
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Arc;

    use super::*;
    use crate::domain::{Event, Role};
    use crate::net::HttpServer;

    fn config(endpoint: String) -> GatewayConfig {
        GatewayConfig {
            mode: GatewayMode::Remote,
            endpoint: Some(endpoint),
            model: Some("test-model".into()),
            timeout_ms: 2_000,
            max_retries: 3,
            seed: 0,
            concurrency: 2,
        }
    }

    fn gateway_against(reply: &'static str) -> (RemoteGateway, HttpServer) {
        let handler = move |_: &str, _: &str, _: &[u8]| -> (u16, Vec<u8>) {
            (200, serde_json::json!({ "text": reply }).to_string().into_bytes())
        };
        let server = HttpServer::serve("127.0.0.1:0", Arc::new(handler)).unwrap();
        let endpoint = format!("http://{}/v1/complete", server.local_addr());
        let gw = RemoteGateway::new(
            &config(endpoint),
            vec![TopicLabel::new("biology").unwrap(), TopicLabel::new("geology").unwrap()],
            TopicLabel::new("general").unwrap(),
        )
        .unwrap();
        (gw, server)
    }

    #[test]
    fn requires_remote_configuration() {
        let bare = GatewayConfig { mode: GatewayMode::Remote, ..GatewayConfig::default() };
        assert!(matches!(
            RemoteGateway::new(&bare, vec![], TopicLabel::new("general").unwrap()),
            Err(GatewayError::Misconfigured(_))
        ));
    }

    #[test]
    fn distill_and_classify_round_trip() {
        let (gw, server) = gateway_against("biology");
        let ep = Episode {
            id: "e1".into(),
            events: vec![Event { role: Role::User, text: "cells divide".into(), seq: 0 }],
            closed_at: 0,
        };
        let got = gw.distill(&ep).unwrap();
        assert_eq!(got.text, "biology");
        assert_eq!(got.topic.as_str(), "biology");
        server.shutdown();
    }

    #[test]
    fn unknown_classification_falls_back_to_default() {
        let (gw, server) = gateway_against("astrology");
        assert_eq!(gw.classify("whatever").unwrap().as_str(), "general");
        server.shutdown();
    }

    #[test]
    fn answer_parses_choice_and_confidence() {
        let (gw, server) = gateway_against("the moon\nconfidence: 83");
        let got = gw
            .answer(&AnswerRequest {
                question: "What pulls the tides?".into(),
                experiences: vec![],
                choices: vec!["wind".into(), "the moon".into()],
            })
            .unwrap();
        assert_eq!(got.answer, "the moon");
        assert_eq!(got.confidence, 83.0);
        server.shutdown();
    }

    #[test]
    fn malformed_answers_are_rejected_not_crashed() {
        assert!(matches!(parse_answer("just text"), Err(GatewayError::Malformed(_))));
        assert!(matches!(parse_answer("x\nconfidence: 180"), Err(GatewayError::Malformed(_))));
        assert!(parse_answer("x\n\nconfidence: 55").is_ok());
    }

    #[test]
    fn retries_then_reports_exhaustion() {
        let hits = Arc::new(AtomicU32::new(0));
        let hits2 = hits.clone();
        let handler = move |_: &str, _: &str, _: &[u8]| -> (u16, Vec<u8>) {
            hits2.fetch_add(1, Ordering::SeqCst);
            (503, b"{}".to_vec())
        };
        let server = HttpServer::serve("127.0.0.1:0", Arc::new(handler)).unwrap();
        let endpoint = format!("http://{}/v1/complete", server.local_addr());
        let gw = RemoteGateway::new(&config(endpoint), vec![], TopicLabel::new("g").unwrap()).unwrap();
        let err = gw.classify("text").unwrap_err();
        assert!(matches!(err, GatewayError::Exhausted { attempts: 3, .. }), "{err}");
        assert_eq!(hits.load(Ordering::SeqCst), 3);
        server.shutdown();
    }

    #[test]
    fn condense_requires_two_texts() {
        let (gw, server) = gateway_against("anything");
        assert!(matches!(gw.condense(&["a".into()]), Err(GatewayError::TooFewTexts(1))));
        server.shutdown();
    }
}
