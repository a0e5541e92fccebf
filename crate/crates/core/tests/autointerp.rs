//! Chat client, example selection and multiple-choice bookkeeping.

mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::Rng;

use saekit::autointerp::*;
use saekit::data::ActivationBatch;
use saekit::sae::Variant;
use saekit::Error;

use common::oracles::{gauss_matrix, random_sae, rng};

/// Serves one canned `(status, body)` per connection and records request
/// bodies. Returns the base URL.
fn serve(responses: Vec<(u16, String)>) -> (String, Arc<Mutex<Vec<String>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = Arc::clone(&seen);
    thread::spawn(move || {
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut req = vec![0; len];
            reader.read_exact(&mut req).unwrap();
            log.lock().unwrap().push(String::from_utf8(req).unwrap());
            let mut stream = reader.into_inner();
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
    });
    (url, seen)
}

fn fast_client(url: &str) -> HttpChatClient {
    let mut c = HttpChatClient::new(url, "test-model", Some("secret".into()));
    c.base_delay = Duration::from_millis(5);
    c
}

fn windows() -> Vec<ExampleWindow> {
    vec![
        ExampleWindow {
            sample: 4,
            activation: 2.5,
            text: "red square".into(),
        },
        ExampleWindow {
            sample: 9,
            activation: 1.25,
            text: "red circle".into(),
        },
    ]
}

#[test]
fn http_success_is_parsed_into_a_record() {
    let reply = r#"{"choices":[{"message":{"role":"assistant","content":"  red things \n"}}]}"#;
    let (url, seen) = serve(vec![(200, reply.into())]);
    let rec = generate_explanation(&fast_client(&url), 3, &windows()).unwrap();
    assert_eq!(rec.explanation, "red things");
    assert_eq!(rec.raw_response, "  red things \n");
    assert_eq!(rec.model, "test-model");
    assert_eq!(rec.latent, 3);
    assert_eq!(rec.prompt_version, PROMPT_VERSION);

    let body: serde_json::Value = serde_json::from_str(&seen.lock().unwrap()[0]).unwrap();
    assert_eq!(body["model"], "test-model");
    let user = body["messages"][1]["content"].as_str().unwrap();
    assert!(user.contains("red square") && user.contains("red circle"));
}

#[test]
fn three_server_errors_surface_the_attempt_log() {
    let (url, seen) = serve(vec![(500, "{}".into()), (500, "{}".into()), (500, "{}".into())]);
    let err = generate_explanation(&fast_client(&url), 0, &windows()).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Client(_)), "{msg}");
    for n in 1..=3 {
        assert!(msg.contains(&format!("attempt {n}: status 500")), "{msg}");
    }
    assert_eq!(seen.lock().unwrap().len(), 3);
}

#[test]
fn retry_recovers_after_a_transient_error() {
    let ok = r#"{"choices":[{"message":{"content":"blue"}}]}"#;
    let (url, _) = serve(vec![(503, "{}".into()), (200, ok.into())]);
    let rec = generate_explanation(&fast_client(&url), 0, &windows()).unwrap();
    assert_eq!(rec.explanation, "blue");
}

#[test]
fn empty_completion_is_an_error() {
    let err = generate_explanation(&CannedClient("   ".into()), 0, &windows()).unwrap_err();
    assert!(matches!(err, Error::Client(_)));
    assert!(generate_explanation(&CannedClient("x".into()), 0, &[]).is_err());
}

#[test]
fn canned_reply_lands_in_the_record() {
    let rec = generate_explanation(&CannedClient("shapes".into()), 1, &windows()).unwrap();
    assert_eq!(rec.explanation, "shapes");
    assert_eq!(rec.examples, windows());
}

#[test]
fn top_examples_match_a_full_sort() {
    for seed in 0..50 {
        let mut r = rng(900 + seed);
        let (n, m, count) = (r.random_range(2..6), r.random_range(2..8), r.random_range(1..40));
        let sae = random_sae(&mut r, Variant::Relu, n, m);
        let x = gauss_matrix(&mut r, count, n);
        let data = ActivationBatch::new(x.clone(), None).unwrap();
        let latent = r.random_range(0..m);
        let want_n = r.random_range(1..10);

        let mut oracle: Vec<(usize, f64)> = (0..count)
            .map(|i| {
                let z = sae.enc_weights.row(latent).dot(&x.row(i)) + sae.enc_bias[latent];
                (i, z.max(0.0))
            })
            .filter(|(_, a)| *a > 0.0)
            .collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        oracle.truncate(want_n);

        let got = top_activating_examples(&sae, &data, latent, want_n).unwrap();
        assert_eq!(got.never_active, oracle.is_empty());
        assert_eq!(got.examples.len(), oracle.len());
        for (g, o) in got.examples.iter().zip(&oracle) {
            assert_eq!(g.0, o.0);
            assert!((g.1 - o.1).abs() < 1e-12);
        }
    }
}

fn explanations(count: usize) -> Vec<String> {
    (0..count).map(|i| format!("feature number {i}")).collect()
}

/// Answers with the option whose text is `feature number <target>`.
fn oracle_client(items: &[McqItem]) -> impl Fn(&[ChatMessage]) -> saekit::Result<String> + Sync {
    let answers: Vec<(String, String)> = items
        .iter()
        .map(|it| (it.meta_explanations[0].clone(), it.candidates[it.correct_index].clone()))
        .collect();
    move |msgs: &[ChatMessage]| {
        let body = &msgs[1].content;
        let (_, want) = answers
            .iter()
            .find(|(key, _)| body.contains(&format!("- {key}\n")))
            .unwrap();
        let line = body
            .lines()
            .find(|l| l.split_once(". ").is_some_and(|(_, t)| t == want))
            .unwrap();
        Ok(line.split_once('.').unwrap().0.to_string())
    }
}

#[test]
fn shuffled_options_keep_the_correct_index_consistent() {
    let expl = explanations(30);
    let specs: Vec<McqSpec> = (0..200)
        .map(|i| McqSpec {
            item_id: i,
            meta_explanations: vec![format!("meta {i}")],
            target: (i * 7) % 30,
        })
        .collect();
    let items = build_mcq_items(&specs, &expl, 4).unwrap();
    let mut positions = [0usize; N_OPTIONS];
    for (it, s) in items.iter().zip(&specs) {
        assert_eq!(it.candidates.len(), N_OPTIONS);
        assert_eq!(it.candidate_latents[it.correct_index], s.target);
        assert_eq!(it.candidates[it.correct_index], expl[s.target]);
        let mut uniq = it.candidate_latents.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), N_OPTIONS);
        for (c, &l) in it.candidates.iter().zip(&it.candidate_latents) {
            assert_eq!(c, &expl[l]);
        }
        positions[it.correct_index] += 1;
    }
    // correct answers land in every slot
    assert!(positions.iter().all(|&p| p > 0), "{positions:?}");
    assert_eq!(build_mcq_items(&specs, &expl, 4).unwrap(), items);

    let out = mcq_eval(&FnClient(oracle_client(&items)), items.clone(), 3).unwrap();
    assert_eq!(out.accuracy, 1.0);
    assert_eq!(out.n_flagged, 0);
    let ids: Vec<usize> = out.items.iter().map(|i| i.item_id).collect();
    assert_eq!(ids, (0..200).collect::<Vec<_>>());
}

#[test]
fn random_mock_scores_near_chance() {
    let specs: Vec<McqSpec> = (0..1000)
        .map(|i| McqSpec {
            item_id: i,
            meta_explanations: vec![format!("meta {i}")],
            target: i % 40,
        })
        .collect();
    let items = build_mcq_items(&specs, &explanations(40), 9).unwrap();
    let out = mcq_eval(&RandomChoiceClient::new(2), items, 1).unwrap();
    let sigma = (0.2f64 * 0.8 / 1000.0).sqrt();
    assert!((out.accuracy - 0.2).abs() <= 3.0 * sigma, "{}", out.accuracy);
}

#[test]
fn malformed_and_failed_answers_are_flagged_wrong() {
    let specs: Vec<McqSpec> = (0..6)
        .map(|i| McqSpec {
            item_id: i,
            meta_explanations: vec![],
            target: i,
        })
        .collect();
    let items = build_mcq_items(&specs, &explanations(8), 1).unwrap();
    let out = mcq_eval(&CannedClient("no idea".into()), items.clone(), 2).unwrap();
    assert_eq!(out.accuracy, 0.0);
    assert_eq!(out.n_flagged, 6);
    assert!(out.items.iter().all(|i| i.choice.is_none() && !i.correct));

    let failing = FnClient(|_: &[ChatMessage]| -> saekit::Result<String> { Err(Error::Client("down".into())) });
    let out = mcq_eval(&failing, items, 1).unwrap();
    assert_eq!(out.n_flagged, 6);
}

#[test]
fn jsonl_has_one_record_per_line() {
    let recs = windows();
    let bytes = to_jsonl(&recs).unwrap();
    let text = String::from_utf8(bytes).unwrap();
    let back: Vec<ExampleWindow> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, recs);
}

#[test]
fn meta_examples_come_from_explained_edges_in_weight_order() {
    use saekit::metasae::{DecompositionGraph, GraphEdge};
    let edge = |base, meta, weight| GraphEdge { base, meta, weight };
    let graph = DecompositionGraph {
        base_ref: "b".into(),
        variance_explained: 1.0,
        nodes: vec![],
        edges: vec![
            edge(0, 1, 0.2),
            edge(1, 1, 0.9),
            edge(2, 1, 0.9),
            edge(3, 1, 0.5),
            edge(1, 0, 2.0),
        ],
        decompositions: vec![],
        excluded: vec![],
    };
    let canned = CannedClient("x".into());
    let records: Vec<ExplanationRecord> = [0usize, 1, 2]
        .iter()
        .map(|&l| {
            let mut r = generate_explanation(&canned, l, &windows()).unwrap();
            r.explanation = format!("latent {l}");
            r
        })
        .collect();
    // latent 3 has no explanation and is left out
    let got = decomposition_examples(&graph, &records, 1, 10);
    let order: Vec<usize> = got.iter().map(|w| w.sample).collect();
    assert_eq!(order, vec![1, 2, 0]);
    assert_eq!(got[0].text, "latent 1");
    assert_eq!(got[0].activation, 0.9);
    assert_eq!(decomposition_examples(&graph, &records, 1, 2).len(), 2);
    assert!(decomposition_examples(&graph, &records, 7, 2).is_empty());
}
