//! LLM-assisted latent explanations and multiple-choice evaluation of
//! meta-latent explanations, over an OpenAI-compatible chat endpoint.
//!
//! [`ChatClient`] abstracts the endpoint; [`HttpChatClient`] talks HTTP and
//! the mock clients make every code path testable offline.

use std::io::Write as _;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ActivationBatch, LabelLayout};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::metasae::DecompositionGraph;
use crate::rng::{self, streams};
use crate::sae::Sae;
use crate::scalar::Scalar;

pub const PROMPT_VERSION: &str = "v1";
pub const N_OPTIONS: usize = 5;

const EXPLAIN_SYSTEM: &str = "You explain features of a sparse autoencoder. \
Reply with one short phrase describing what the examples have in common.";

const MCQ_SYSTEM: &str = "You match feature descriptions. Reply with the number of the best option only.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: "system".into(),
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

pub trait ChatClient: Sync {
    fn model_id(&self) -> &str;
    fn complete(&self, messages: &[ChatMessage]) -> Result<String>;
}

/// Chat-completions client with exponential-backoff retries.
pub struct HttpChatClient {
    agent: ureq::Agent,
    url: String,
    model: String,
    token: Option<String>,
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl HttpChatClient {
    pub fn new(base_url: &str, model: &str, token: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            agent,
            url: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_string(),
            token,
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }

    /// Reads the bearer token from `token_env` when it is set.
    pub fn from_env(base_url: &str, model: &str, token_env: &str) -> Self {
        Self::new(base_url, model, std::env::var(token_env).ok())
    }

    fn attempt(&self, messages: &[ChatMessage]) -> std::result::Result<String, String> {
        let body = serde_json::json!({
            "model": self.model,
            "messages": messages,
            "temperature": 0,
        });
        let mut req = self.agent.post(&self.url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("status {}", status.as_u16()));
        }
        let v: serde_json::Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        v["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| "response has no choices[0].message.content".to_string())
    }
}

impl ChatClient for HttpChatClient {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        let mut log = Vec::new();
        for attempt in 0..self.max_attempts {
            if attempt > 0 {
                std::thread::sleep(self.base_delay * 2u32.pow(attempt - 1));
            }
            match self.attempt(messages) {
                Ok(s) => return Ok(s),
                Err(e) => log.push(format!("attempt {}: {e}", attempt + 1)),
            }
        }
        Err(Error::Client(format!(
            "{} failed after {} attempts ({})",
            self.url,
            self.max_attempts,
            log.join("; ")
        )))
    }
}

/// Always replies with the same text.
pub struct CannedClient(pub String);

impl ChatClient for CannedClient {
    fn model_id(&self) -> &str {
        "mock-canned"
    }

    fn complete(&self, _: &[ChatMessage]) -> Result<String> {
        Ok(self.0.clone())
    }
}

/// Replies with a uniformly random option number from a seeded stream.
pub struct RandomChoiceClient {
    rng: Mutex<rand_chacha::ChaCha8Rng>,
}

impl RandomChoiceClient {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: Mutex::new(rng::stream(seed, streams::MCQ ^ 0xc0de)),
        }
    }
}

impl ChatClient for RandomChoiceClient {
    fn model_id(&self) -> &str {
        "mock-random"
    }

    fn complete(&self, _: &[ChatMessage]) -> Result<String> {
        let mut rng = self.rng.lock().expect("rng lock");
        Ok(rng.random_range(1..=N_OPTIONS).to_string())
    }
}

/// Delegates to a closure; used for oracle and scripted mocks.
pub struct FnClient<F>(pub F);

impl<F: Fn(&[ChatMessage]) -> Result<String> + Sync> ChatClient for FnClient<F> {
    fn model_id(&self) -> &str {
        "mock-fn"
    }

    fn complete(&self, messages: &[ChatMessage]) -> Result<String> {
        (self.0)(messages)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleWindow {
    pub sample: usize,
    pub activation: f64,
    /// Text shown to the model: a token window, or a label summary for
    /// synthetic data.
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopExamples {
    pub examples: Vec<(usize, f64)>,
    /// The latent never fired on the data.
    pub never_active: bool,
}

/// Samples with the largest activation of `latent`, descending; ties go to
/// the lower sample index.
pub fn top_activating_examples<T: Scalar>(
    sae: &Sae<T>,
    data: &ActivationBatch<T>,
    latent: usize,
    n: usize,
) -> Result<TopExamples> {
    if latent >= sae.m() {
        return Err(Error::IndexOutOfRange {
            index: latent,
            len: sae.m(),
        });
    }
    if n == 0 {
        return Err(Error::InvalidConfig("autointerp.n_examples must be >= 1".into()));
    }
    let (_, f) = sae.encode_batch(data.data().view())?;
    let mut active: Vec<(usize, f64)> = f
        .column(latent)
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > T::zero())
        .map(|(i, v)| (i, v.to_f64_lossy()))
        .collect();
    active.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    active.truncate(n);
    Ok(TopExamples {
        never_active: active.is_empty(),
        examples: active,
    })
}

/// Describes a synthetic sample by its active ground-truth features, using
/// `names[g][f]` when given and `g<g>:f<f>` otherwise.
pub fn synthetic_example_text(label: u32, layout: &LabelLayout, names: Option<&[Vec<String>]>) -> String {
    layout
        .decode(label)
        .iter()
        .enumerate()
        .map(|(g, &f)| match names.and_then(|n| n.get(g)).and_then(|n| n.get(f)) {
            Some(name) => name.clone(),
            None => format!("g{g}:f{f}"),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn explain_prompt(examples: &[ExampleWindow]) -> Vec<ChatMessage> {
    let mut body = String::from("Top activating examples (activation in brackets):\n");
    for (i, e) in examples.iter().enumerate() {
        body.push_str(&format!("{}. [{:.4}] {}\n", i + 1, e.activation, e.text));
    }
    body.push_str("Explanation:");
    vec![ChatMessage::system(EXPLAIN_SYSTEM), ChatMessage::user(body)]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub latent: usize,
    pub explanation: String,
    pub examples: Vec<ExampleWindow>,
    pub model: String,
    pub prompt_version: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub raw_response: String,
}

pub fn generate_explanation(
    client: &dyn ChatClient,
    latent: usize,
    examples: &[ExampleWindow],
) -> Result<ExplanationRecord> {
    if examples.is_empty() {
        return Err(Error::Empty("explanation examples"));
    }
    let raw = client.complete(&explain_prompt(examples))?;
    let explanation = raw.trim().to_string();
    if explanation.is_empty() {
        return Err(Error::Client("empty completion".into()));
    }
    Ok(ExplanationRecord {
        latent,
        explanation,
        examples: examples.to_vec(),
        model: client.model_id().to_string(),
        prompt_version: PROMPT_VERSION.into(),
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        raw_response: raw,
    })
}

/// Example windows for a meta-latent: the explained base latents whose
/// decomposition uses it, by coefficient (descending, ties to the lower
/// latent). The window text is the base latent's explanation.
pub fn decomposition_examples(
    graph: &DecompositionGraph,
    base: &[ExplanationRecord],
    meta_latent: usize,
    n: usize,
) -> Vec<ExampleWindow> {
    let mut out: Vec<ExampleWindow> = graph
        .edges
        .iter()
        .filter(|e| e.meta == meta_latent)
        .filter_map(|e| {
            let r = base.iter().find(|r| r.latent == e.base)?;
            Some(ExampleWindow {
                sample: e.base,
                activation: e.weight,
                text: r.explanation.clone(),
            })
        })
        .collect();
    out.sort_by(|a, b| b.activation.total_cmp(&a.activation).then(a.sample.cmp(&b.sample)));
    out.truncate(n);
    out
}

/// One question: given a latent's meta-latent explanations, pick its own
/// explanation among `target` and distractors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McqSpec {
    pub item_id: usize,
    pub meta_explanations: Vec<String>,
    /// Index into the latent explanation list.
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub item_id: usize,
    pub meta_explanations: Vec<String>,
    pub candidates: Vec<String>,
    /// Latent index behind each candidate.
    pub candidate_latents: Vec<usize>,
    pub correct_index: usize,
    pub choice: Option<usize>,
    pub correct: bool,
    /// Set when the answer could not be parsed or the call failed.
    pub flag: Option<String>,
}

/// Samples four distractors uniformly from the other latents and shuffles
/// the options, per item from its own seeded stream.
pub fn build_mcq_items(specs: &[McqSpec], latent_explanations: &[String], seed: u64) -> Result<Vec<McqItem>> {
    if latent_explanations.len() < N_OPTIONS {
        return Err(Error::InvalidConfig(format!(
            "need at least {N_OPTIONS} latent explanations, got {}",
            latent_explanations.len()
        )));
    }
    specs
        .iter()
        .map(|s| {
            if s.target >= latent_explanations.len() {
                return Err(Error::IndexOutOfRange {
                    index: s.target,
                    len: latent_explanations.len(),
                });
            }
            let mut rng = rng::stream(rng::mix(seed, s.item_id as u64), streams::MCQ);
            let others: Vec<usize> = (0..latent_explanations.len()).filter(|&i| i != s.target).collect();
            let mut opts: Vec<usize> = others.choose_multiple(&mut rng, N_OPTIONS - 1).copied().collect();
            opts.push(s.target);
            opts.shuffle(&mut rng);
            let correct_index = opts.iter().position(|&i| i == s.target).expect("target present");
            Ok(McqItem {
                item_id: s.item_id,
                meta_explanations: s.meta_explanations.clone(),
                candidates: opts.iter().map(|&i| latent_explanations[i].clone()).collect(),
                candidate_latents: opts,
                correct_index,
                choice: None,
                correct: false,
                flag: None,
            })
        })
        .collect()
}

pub fn mcq_prompt(item: &McqItem) -> Vec<ChatMessage> {
    let mut body = String::from("Meta-feature descriptions:\n");
    for m in &item.meta_explanations {
        body.push_str(&format!("- {m}\n"));
    }
    body.push_str("Which feature is composed of these?\n");
    for (i, c) in item.candidates.iter().enumerate() {
        body.push_str(&format!("{}. {c}\n", i + 1));
    }
    body.push_str("Answer:");
    vec![ChatMessage::system(MCQ_SYSTEM), ChatMessage::user(body)]
}

/// First digit of the reply, as a zero-based option index.
pub fn parse_choice(reply: &str) -> Option<usize> {
    let digits: Vec<char> = reply.chars().filter(char::is_ascii_digit).collect();
    match digits.first() {
        Some(d) => {
            let v = d.to_digit(10)? as usize;
            (1..=N_OPTIONS).contains(&v).then_some(v - 1)
        }
        None => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McqOutcome {
    pub accuracy: f64,
    pub n_flagged: usize,
    pub items: Vec<McqItem>,
}

fn answer(client: &dyn ChatClient, mut item: McqItem) -> McqItem {
    match client.complete(&mcq_prompt(&item)) {
        Ok(reply) => match parse_choice(&reply) {
            Some(c) => {
                item.choice = Some(c);
                item.correct = c == item.correct_index;
            }
            None => item.flag = Some(format!("malformed answer: {reply:?}")),
        },
        Err(e) => item.flag = Some(e.to_string()),
    }
    item
}

/// Asks every item, `concurrency` requests at a time; results keep item order.
pub fn mcq_eval(client: &dyn ChatClient, items: Vec<McqItem>, concurrency: usize) -> Result<McqOutcome> {
    if items.is_empty() {
        return Err(Error::Empty("mcq items"));
    }
    let workers = concurrency.max(1);
    let answered: Vec<McqItem> = if workers == 1 {
        items.into_iter().map(|it| answer(client, it)).collect()
    } else {
        let chunk = items.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = items
                .chunks(chunk)
                .map(|c| {
                    let c = c.to_vec();
                    s.spawn(move || c.into_iter().map(|it| answer(client, it)).collect::<Vec<_>>())
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("mcq worker"))
                .collect()
        })
    };
    let hits = answered.iter().filter(|i| i.correct).count();
    Ok(McqOutcome {
        accuracy: hits as f64 / answered.len() as f64,
        n_flagged: answered.iter().filter(|i| i.flag.is_some()).count(),
        items: answered,
    })
}

/// One JSON object per line.
pub fn to_jsonl<R: Serialize>(records: &[R]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(out)
}

pub fn write_jsonl<R: Serialize>(records: &[R], path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &to_jsonl(records)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_choice_accepts_first_digit() {
        assert_eq!(parse_choice("3"), Some(2));
        assert_eq!(parse_choice(" Option 5."), Some(4));
        assert_eq!(parse_choice("6"), None);
        assert_eq!(parse_choice("none"), None);
    }

    #[test]
    fn items_have_five_options_one_correct() {
        let expl: Vec<String> = (0..9).map(|i| format!("latent {i}")).collect();
        let specs: Vec<McqSpec> = (0..9)
            .map(|i| McqSpec {
                item_id: i,
                meta_explanations: vec!["m".into()],
                target: i,
            })
            .collect();
        let items = build_mcq_items(&specs, &expl, 3).unwrap();
        for (it, s) in items.iter().zip(&specs) {
            assert_eq!(it.candidates.len(), N_OPTIONS);
            assert_eq!(it.candidate_latents[it.correct_index], s.target);
            assert_eq!(it.candidates[it.correct_index], expl[s.target]);
            let mut uniq = it.candidate_latents.clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), N_OPTIONS);
        }
        assert_eq!(items, build_mcq_items(&specs, &expl, 3).unwrap());
    }

    #[test]
    fn prompt_lists_examples_verbatim() {
        let ex = vec![
            ExampleWindow {
                sample: 4,
                activation: 2.5,
                text: "the blue square".into(),
            },
            ExampleWindow {
                sample: 9,
                activation: 1.0,
                text: "a blue circle".into(),
            },
        ];
        let p = explain_prompt(&ex);
        assert!(p[1].content.contains("the blue square"));
        assert!(p[1].content.contains("a blue circle"));
        let rec = generate_explanation(&CannedClient("  blue things \n".into()), 7, &ex).unwrap();
        assert_eq!(rec.explanation, "blue things");
        assert!(generate_explanation(&CannedClient(" ".into()), 7, &ex).is_err());
    }

    #[test]
    fn synthetic_text_uses_names() {
        let layout = LabelLayout::new(vec![3, 3]);
        let names = vec![
            vec!["red".to_string(), "green".into(), "blue".into()],
            vec!["circle".to_string(), "square".into(), "triangle".into()],
        ];
        assert_eq!(synthetic_example_text(7, &layout, Some(&names)), "blue square");
        assert_eq!(synthetic_example_text(7, &layout, None), "g0:f2 g1:f1");
    }
}
