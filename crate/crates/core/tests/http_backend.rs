use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};

use ppsr_core::backend::{
    Backend, BackendDescriptor, HttpBackend, WireLogits, WireMode, WireRequest, WireResponse,
};
use ppsr_core::error::Error;
use ppsr_core::prompt::RenderedPrompt;

#[derive(Clone, Copy)]
enum Behavior {
    FailFirst,
    WrongId,
    NoYes,
}

#[derive(Clone)]
struct Server {
    behavior: Behavior,
    calls: Arc<AtomicUsize>,
    seen_ids: Arc<Mutex<Vec<String>>>,
}

async fn handle(State(s): State<Server>, Json(req): Json<WireRequest>) -> Response {
    let n = s.calls.fetch_add(1, Ordering::SeqCst);
    s.seen_ids.lock().unwrap().push(req.request_id.clone());
    let mut resp = WireResponse {
        request_id: req.request_id.clone(),
        ..Default::default()
    };
    match (s.behavior, req.mode) {
        (Behavior::FailFirst, _) if n == 0 => {
            return StatusCode::SERVICE_UNAVAILABLE.into_response()
        }
        (Behavior::WrongId, _) => resp.request_id = "someone-else".into(),
        (Behavior::NoYes, _) => {
            resp.logits = Some(WireLogits {
                yes: None,
                no: Some(0.0),
            })
        }
        (_, WireMode::Score) => {
            resp.logits = Some(WireLogits {
                yes: Some(1.5),
                no: Some(-0.5),
            })
        }
        (_, WireMode::Embed) => resp.vector = Some(vec![1.0, 2.0, 2.0]),
        (_, WireMode::Generate) => resp.text = Some("0123456789".into()),
    }
    Json(resp).into_response()
}

fn start(behavior: Behavior) -> (HttpBackend, Server) {
    let state = Server {
        behavior,
        calls: Arc::default(),
        seen_ids: Arc::default(),
    };
    let app = Router::new()
        .route("/", post(handle))
        .with_state(state.clone());
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, app).await.unwrap();
        });
    });
    let addr = rx.recv().unwrap();
    let mut desc = BackendDescriptor::http(format!("http://{addr}/"), 3);
    desc.max_retries = 2;
    desc.timeout_ms = 5_000;
    (HttpBackend::new(desc).unwrap(), state)
}

fn prompt() -> RenderedPrompt {
    RenderedPrompt {
        text: "Will the user purchase?".into(),
        image_refs: vec!["img/a.jpg".into()],
    }
}

#[test]
fn retries_transient_failure_with_same_request_id() {
    let (backend, server) = start(Behavior::FailFirst);
    let logits = backend.score_decision(&prompt()).unwrap();
    assert_eq!((logits.yes, logits.no), (1.5, -0.5));
    assert_eq!(server.calls.load(Ordering::SeqCst), 2);
    let ids = server.seen_ids.lock().unwrap().clone();
    assert_eq!(ids[0], ids[1]);
    assert!(!ids[0].is_empty());
}

#[test]
fn embed_and_generate_round_trip() {
    let (backend, _) = start(Behavior::FailFirst);
    let _ = backend.score_decision(&prompt());
    let v = backend.embed("text", Some("img/a.jpg")).unwrap();
    assert_eq!(v.values, vec![1.0, 2.0, 2.0]);
    assert_eq!(backend.generate(&prompt(), 4).unwrap(), "0123");
}

#[test]
fn mismatched_request_id_exhausts_retries() {
    let (backend, server) = start(Behavior::WrongId);
    let err = backend.score_decision(&prompt()).unwrap_err();
    assert!(matches!(err, Error::Backend(_)), "{err}");
    assert_eq!(server.calls.load(Ordering::SeqCst), 3);
}

#[test]
fn missing_yes_logit_is_an_error() {
    let (backend, _) = start(Behavior::NoYes);
    let err = backend.score_decision(&prompt()).unwrap_err();
    assert!(matches!(err, Error::MissingDecisionToken("yes")), "{err}");
}
