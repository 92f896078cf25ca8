use std::io::Cursor;
use std::sync::Arc;
use std::time::Duration;

use ctxpred::corpus::LoadOptions;
use ctxpred::gateway::{
    serve_lines, Gateway, GatewayOptions, HttpBackend, NGramBackend, ResponseCache, RetryPolicy,
    ScoreMode, ScoreRequest, ScoreResponse, ScoreServer, ScoringBackend,
};
use ctxpred::{Corpus, Direction, Error, NGramConfig, NGramModel, Vocabulary, TOY_CORPUS};

fn toy() -> (Corpus, Arc<NGramModel>, Arc<NGramModel>) {
    let (corpus, _) = Corpus::parse_jsonl(TOY_CORPUS, &LoadOptions::default()).unwrap();
    let vocab = Arc::new(Vocabulary::build(&corpus, 1).unwrap());
    let fwd = NGramModel::train(
        &corpus,
        Arc::clone(&vocab),
        NGramConfig::new(3, 0.1, Direction::Forward),
    )
    .unwrap();
    let bwd = NGramModel::train(
        &corpus,
        vocab,
        NGramConfig::new(3, 0.1, Direction::Backward),
    )
    .unwrap();
    (corpus, Arc::new(fwd), Arc::new(bwd))
}

fn in_process(cache: ResponseCache) -> Gateway {
    let (_, fwd, bwd) = toy();
    Gateway::ngram(fwd, Some(bwd), GatewayOptions::default(), cache).unwrap()
}

fn sum_of_probs(scored: &ctxpred::gateway::Scored) -> f64 {
    scored.logprobs.values().map(|l| l.exp()).sum()
}

/// Starts an HTTP scorer for the toy models on a free port; the thread lives until exit.
fn spawn_http_scorer() -> String {
    let (_, fwd, bwd) = toy();
    let backend = NGramBackend::new(fwd, Some(bwd)).unwrap();
    let server = ScoreServer::bind("127.0.0.1:0").unwrap();
    let addr = server.local_addr();
    std::thread::spawn(move || server.serve(&backend, None));
    format!("http://{addr}")
}

#[test]
fn http_scorer_matches_the_in_process_model() {
    let url = spawn_http_scorer();
    let (_, fwd, _) = toy();
    let remote = Gateway::new(
        Arc::new(HttpBackend::new(&url, Duration::from_secs(10))),
        GatewayOptions::default(),
        ResponseCache::in_memory(),
    )
    .unwrap()
    .with_vocabulary(fwd.vocab());
    let local = in_process(ResponseCache::in_memory());

    let candidates = ["time", "first", "dog", "zebra"];
    let pre = ["so", "this", "is", "the"];
    let suf = ["time", "i", "did"];
    let a = remote.score_forward(&pre, &candidates).unwrap();
    let b = local.score_forward(&pre, &candidates).unwrap();
    let c = remote.score_infill(&pre, &suf, &candidates).unwrap();
    let d = local.score_infill(&pre, &suf, &candidates).unwrap();
    for w in candidates {
        assert!((a.get(w).unwrap() - b.get(w).unwrap()).abs() < 1e-12, "{w}");
        assert!((c.get(w).unwrap() - d.get(w).unwrap()).abs() < 1e-12, "{w}");
    }
    assert_eq!(a.unknown, vec!["zebra".to_string()]);
    assert_eq!(remote.backend_calls(), 2);
}

#[test]
fn http_scorer_rejects_malformed_requests_with_4xx() {
    let url = spawn_http_scorer();
    let backend = HttpBackend::new(&url, Duration::from_secs(10));
    let empty = ScoreRequest::new(ScoreMode::Forward, vec![], vec![], vec![]);
    match backend.score(&empty) {
        Err(Error::Protocol(msg)) => assert!(msg.contains("HTTP 400"), "{msg}"),
        other => panic!("expected a protocol error, got {other:?}"),
    }
}

#[test]
fn stdio_protocol_answers_each_line() {
    let (_, fwd, bwd) = toy();
    let backend = NGramBackend::new(fwd, Some(bwd)).unwrap();
    let input = concat!(
        r#"{"mode": "forward", "pre": ["so"], "suf": [], "candidates": ["this", "that"]}"#,
        "\n\n",
        "not json\n",
        r#"{"mode": "infill", "pre": [], "suf": ["is"], "candidates": []}"#,
        "\n",
        r#"{"mode": "infill", "pre": ["so"], "suf": ["is"], "candidates": ["this"], "swapped": true}"#,
        "\n",
    );
    let mut out = Vec::new();
    serve_lines(&backend, Cursor::new(input), &mut out).unwrap();
    let lines: Vec<serde_json::Value> = String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(
        lines.len(),
        4,
        "blank lines are skipped, every other line is answered"
    );
    let first: ScoreResponse = serde_json::from_value(lines[0].clone()).unwrap();
    assert_eq!(first.logprobs.len(), 2);
    assert_eq!(first.model_id, backend.model_id());
    assert!(lines[1]["error"].as_str().unwrap().contains("protocol"));
    assert!(lines[2]["error"]
        .as_str()
        .unwrap()
        .contains("no candidates"));
    assert!(lines[3]["logprobs"]["this"].as_f64().unwrap() <= 0.0);
}

#[test]
fn dead_backend_is_a_transport_error_after_retries() {
    // Bind then drop a listener to obtain a port with nothing behind it.
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let options = GatewayOptions {
        retry: RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(1),
        },
        ..Default::default()
    };
    let gateway = Gateway::new(
        Arc::new(HttpBackend::new(
            &format!("http://127.0.0.1:{port}"),
            Duration::from_secs(2),
        )),
        options,
        ResponseCache::in_memory(),
    )
    .unwrap();
    let err = gateway.score_forward(&["so"], &["this"]).unwrap_err();
    assert!(matches!(err, Error::Transport(_)), "{err}");
    assert_eq!(gateway.backend_calls(), 3);
}

#[test]
fn warm_disk_cache_makes_no_backend_calls() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, _, _) = toy();
    let (_, fwd, _) = toy();
    let unigram = NGramModel::train(
        &corpus,
        Arc::clone(fwd.vocab()),
        NGramConfig::new(1, 0.1, Direction::Forward),
    )
    .unwrap();

    let cold = in_process(ResponseCache::on_disk(dir.path()).unwrap());
    let first = cold.batch_score_corpus(&corpus, &unigram).unwrap();
    assert!(cold.backend_calls() > 0);
    assert!(first.failures.is_empty());

    let warm = in_process(ResponseCache::on_disk(dir.path()).unwrap());
    let second = warm.batch_score_corpus(&corpus, &unigram).unwrap();
    assert_eq!(warm.backend_calls(), 0);
    assert_eq!(first.records, second.records);
}

#[test]
fn full_vocabulary_scores_sum_to_one() {
    let gateway = in_process(ResponseCache::in_memory());
    let outcomes: Vec<String> = gateway.outcomes().unwrap().to_vec();
    let all: Vec<&str> = outcomes.iter().map(String::as_str).collect();
    let contexts: [(&[&str], &[&str]); 4] = [
        (&[], &[]),
        (&["so", "this"], &[]),
        (&["so"], &["is", "the"]),
        (&[], &["time", "i", "did"]),
    ];
    for (pre, suf) in contexts {
        let f = gateway.score_forward(pre, &all).unwrap();
        let b = gateway.score_backward(suf, &all).unwrap();
        let i = gateway.score_infill(pre, suf, &all).unwrap();
        for (name, scored) in [("forward", f), ("backward", b), ("infill", i)] {
            let total = sum_of_probs(&scored);
            assert!(
                (total - 1.0).abs() < 1e-9,
                "{name} {pre:?} {suf:?}: {total}"
            );
        }
    }
}
