use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tdc_core::embed::{embed_all, EmbeddingProvider, HttpEmbeddingProvider, ProviderError};

const D: usize = 8;
const MAX_LEN: usize = 40;

#[derive(Clone)]
struct Mock {
    /// Number of leading /embed/text calls answered with 503.
    cold_calls: usize,
    calls: Arc<AtomicUsize>,
    wrong_dim: bool,
    advertised_limit: usize,
}

fn fake_vector(text: &str) -> Vec<f32> {
    let mut v: Vec<f32> = (0..D)
        .map(|i| text.bytes().enumerate().map(|(j, b)| ((b as f32) * (i + j + 1) as f32).sin()).sum::<f32>() + 0.5)
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

async fn meta(State(mock): State<Mock>) -> Json<Value> {
    Json(json!({"model": "mock-clip", "d": D, "max_input_length": mock.advertised_limit}))
}

async fn embed(State(mock): State<Mock>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    let call = mock.calls.fetch_add(1, Ordering::SeqCst);
    if call < mock.cold_calls {
        return (StatusCode::SERVICE_UNAVAILABLE, Json(json!({"error": "loading"})));
    }
    let Some(inputs) = body["inputs"].as_array() else {
        return (StatusCode::BAD_REQUEST, Json(json!({"error": "inputs"})));
    };
    let texts: Vec<&str> = inputs.iter().filter_map(Value::as_str).collect();
    if texts.iter().any(|t| t.chars().count() > MAX_LEN) {
        return (StatusCode::PAYLOAD_TOO_LARGE, Json(json!({"error": "too long"})));
    }
    let d = if mock.wrong_dim { D + 1 } else { D };
    let vectors: Vec<Vec<f32>> =
        texts.iter().map(|t| if mock.wrong_dim { vec![1.0 / (d as f32).sqrt(); d] } else { fake_vector(t) }).collect();
    (StatusCode::OK, Json(json!({"model": "mock-clip", "d": D, "vectors": vectors})))
}

/// Serves the mock on an ephemeral port from a background runtime.
fn serve(mock: Mock) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(1).enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            let app = Router::new().route("/meta", get(meta)).route("/embed/text", post(embed)).with_state(mock);
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

fn mock(cold_calls: usize) -> Mock {
    Mock { cold_calls, calls: Arc::new(AtomicUsize::new(0)), wrong_dim: false, advertised_limit: MAX_LEN }
}

fn texts(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("a photo of a class{i}.")).collect()
}

#[test]
fn reads_meta_and_embeds_in_order() {
    let endpoint = serve(mock(0));
    let provider = HttpEmbeddingProvider::connect(&endpoint, Some(D)).unwrap().with_batch_size(3);
    assert_eq!((provider.meta().model.as_str(), provider.dim()), ("mock-clip", D));
    let inputs = texts(10);
    let vectors = provider.embed_texts(&inputs).unwrap();
    assert_eq!(vectors.len(), 10);
    for (t, v) in inputs.iter().zip(&vectors) {
        assert_eq!(v, &fake_vector(t));
    }
    let again = provider.embed_texts(&inputs[..1]).unwrap();
    assert_eq!(again[0], vectors[0]);
    let map = embed_all(&provider, &[inputs[2].clone(), inputs[2].clone()]).unwrap();
    assert_eq!(map.len(), 1);
}

#[test]
fn dimension_disagreement_fails_at_connect() {
    let endpoint = serve(mock(0));
    assert!(matches!(HttpEmbeddingProvider::connect(&endpoint, Some(D + 1)), Err(ProviderError::Dimension { .. })));
}

#[test]
fn retries_while_the_model_loads() {
    let m = mock(2);
    let calls = m.calls.clone();
    let endpoint = serve(m);
    let provider = HttpEmbeddingProvider::connect(&endpoint, None).unwrap().with_max_attempts(4);
    assert_eq!(provider.embed_texts(&texts(2)).unwrap().len(), 2);
    assert_eq!(calls.load(Ordering::SeqCst), 3);

    let endpoint = serve(mock(usize::MAX));
    let provider = HttpEmbeddingProvider::connect(&endpoint, None).unwrap().with_max_attempts(2);
    let err = provider.embed_texts(&texts(1)).unwrap_err();
    assert!(err.is_retryable());
}

#[test]
fn long_inputs_are_rejected() {
    let endpoint = serve(mock(0));
    let provider = HttpEmbeddingProvider::connect(&endpoint, None).unwrap();
    let long = "x".repeat(MAX_LEN + 1);
    assert!(matches!(provider.embed_texts(std::slice::from_ref(&long)), Err(ProviderError::InputTooLong { limit: MAX_LEN, .. })));

    let endpoint = serve(Mock { advertised_limit: 1000, ..mock(0) });
    let provider = HttpEmbeddingProvider::connect(&endpoint, None).unwrap();
    assert!(matches!(provider.embed_texts(&[long]), Err(ProviderError::InputTooLong { .. })));
}

#[test]
fn malformed_vectors_are_protocol_errors() {
    let endpoint = serve(Mock { wrong_dim: true, ..mock(0) });
    let provider = HttpEmbeddingProvider::connect(&endpoint, None).unwrap();
    assert!(matches!(provider.embed_texts(&texts(1)), Err(ProviderError::Dimension { .. })));
}

#[test]
fn unreachable_endpoint_is_unavailable() {
    let err = HttpEmbeddingProvider::connect("http://127.0.0.1:9", None).unwrap_err();
    assert!(matches!(err, ProviderError::Unavailable { .. }));
}
