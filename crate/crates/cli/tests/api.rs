use std::fs;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use dialforge::dialogue::Dialogue;
use dialforge::refinery::{ReasoningTask, TaskKind};
use dialforge::store::{self, Store, VerificationItem};
use dialforge_cli::server::router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn dialogue(id: &str) -> Dialogue {
    serde_json::from_value(json!({
        "id": id, "scenario": "travel", "persona_id": "u-1", "action_seq_id": "a-1", "dia_len": 2, "seed": 3,
        "turns": [{"speaker": "user", "text": "What is the hotel cap?"}, {"speaker": "assistant", "text": "500 per night."}]
    }))
    .unwrap()
}

fn item(id: &str, dialogue_id: &str) -> VerificationItem {
    let task = ReasoningTask { question: "How much is refunded for 2 nights?".into(), label: Some("1000".into()), kind: TaskKind::MathWord };
    VerificationItem::new(id.into(), format!("r-{id}"), dialogue_id.into(), task)
}

fn seeded(dir: &std::path::Path, items: usize) -> Store {
    let s = Store::open(dir).unwrap();
    s.append(store::DIALOGUES, &dialogue("d-1")).unwrap();
    for i in 0..items {
        s.append(store::QUEUE, &item(&format!("v-{i}"), "d-1")).unwrap();
    }
    s
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or(Body::empty(), |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn verdict(id: &str, decision: &str) -> Option<Value> {
    Some(json!({ "item_id": id, "decision": decision }))
}

#[tokio::test]
async fn empty_store_serves_empty_queue() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(Store::open(dir.path()).unwrap());
    assert_eq!(call(&app, "GET", "/api/queue?status=pending", None).await, (StatusCode::OK, json!([])));
    assert_eq!(call(&app, "GET", "/api/queue", None).await, (StatusCode::OK, json!([])));
    assert_eq!(call(&app, "GET", "/api/runs", None).await, (StatusCode::OK, json!([])));
}

#[tokio::test]
async fn queue_lists_items_with_dialogue_context() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(seeded(dir.path(), 2));
    let (status, body) = call(&app, "GET", "/api/queue?status=pending", None).await;
    assert_eq!(status, StatusCode::OK);
    let items = body.as_array().unwrap();
    assert_eq!(items.len(), 2);
    assert_eq!(items[0]["status"], "pending");
    assert_eq!(items[0]["proposed_task"]["label"], "1000");
    assert_eq!(items[0]["dialogue"]["turns"][1]["text"], "500 per night.");
    let (status, _) = call(&app, "GET", "/api/queue?status=maybe", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn verdict_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(seeded(dir.path(), 3));
    let (status, body) = call(&app, "POST", "/api/verdict", verdict("v-0", "accept")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "accepted");
    assert_eq!(call(&app, "POST", "/api/verdict", verdict("v-0", "reject")).await.0, StatusCode::CONFLICT);
    assert_eq!(call(&app, "POST", "/api/verdict", verdict("nope", "accept")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "POST", "/api/verdict", verdict("v-1", "edit")).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "POST", "/api/verdict", verdict("v-1", "approve")).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, "POST", "/api/verdict", Some(json!("accept"))).await.0, StatusCode::BAD_REQUEST);
    let edit = Some(json!({ "item_id": "v-1", "decision": "edit", "label": "900" }));
    let (status, body) = call(&app, "POST", "/api/verdict", edit).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((body["status"].as_str(), body["verdict_label"].as_str()), (Some("edited"), Some("900")));
    let (_, pending) = call(&app, "GET", "/api/queue?status=pending", None).await;
    assert_eq!(pending.as_array().unwrap().len(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn racing_verdicts_have_one_winner() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(seeded(dir.path(), 20));
    for i in 0..20 {
        let id = format!("v-{i}");
        let a = tokio::spawn({
            let app = app.clone();
            let id = id.clone();
            async move { call(&app, "POST", "/api/verdict", verdict(&id, "accept")).await.0 }
        });
        let b = tokio::spawn({
            let app = app.clone();
            async move { call(&app, "POST", "/api/verdict", verdict(&id, "reject")).await.0 }
        });
        let mut codes = [a.await.unwrap(), b.await.unwrap()];
        codes.sort();
        assert_eq!(codes, [StatusCode::OK, StatusCode::CONFLICT], "item {i}");
    }
    let history = Store::open(dir.path()).unwrap().history(store::QUEUE).unwrap();
    assert_eq!(history.len(), 40, "one seed line and one verdict line per item");
}

#[tokio::test]
async fn restart_keeps_queue_and_reads_do_not_write() {
    let dir = tempfile::tempdir().unwrap();
    {
        let app = router(seeded(dir.path(), 2));
        assert_eq!(call(&app, "POST", "/api/verdict", verdict("v-1", "reject")).await.0, StatusCode::OK);
    }
    let before = fs::read(dir.path().join("queue.jsonl")).unwrap();
    let app = router(Store::open(dir.path()).unwrap());
    let (_, all) = call(&app, "GET", "/api/queue", None).await;
    let statuses: Vec<&str> = all.as_array().unwrap().iter().map(|i| i["status"].as_str().unwrap()).collect();
    assert_eq!(statuses, ["pending", "rejected"]);
    call(&app, "GET", "/api/queue?status=pending", None).await;
    call(&app, "GET", "/api/reports/stats", None).await;
    assert_eq!(fs::read(dir.path().join("queue.jsonl")).unwrap(), before);
    assert_eq!(call(&app, "POST", "/api/verdict", verdict("v-1", "accept")).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn dialogues_reports_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(seeded(dir.path(), 0));
    let (status, d) = call(&app, "GET", "/api/dialogues/d-1", None).await;
    assert_eq!((status, d["id"].as_str()), (StatusCode::OK, Some("d-1")));
    assert_eq!(call(&app, "GET", "/api/dialogues/d-404", None).await.0, StatusCode::NOT_FOUND);

    let (status, stats) = call(&app, "GET", "/api/reports/stats", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((stats["dialogues"].as_u64(), stats["total_turns"].as_u64()), (Some(1), Some(2)));
    assert_eq!(call(&app, "GET", "/api/reports/similarity", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, "GET", "/api/reports/bogus", None).await.0, StatusCode::NOT_FOUND);
    fs::create_dir_all(dir.path().join("reports")).unwrap();
    let sim = json!({"dialogues": 2, "pairs": 1, "max": 0.5, "min": 0.5, "mean": 0.5});
    fs::write(dir.path().join("reports/similarity.json"), sim.to_string()).unwrap();
    assert_eq!(call(&app, "GET", "/api/reports/similarity", None).await, (StatusCode::OK, sim));

    Store::open(dir.path()).unwrap().append_value(store::RUNS, json!({"seed": 1, "generations": []})).unwrap();
    let (status, runs) = call(&app, "GET", "/api/runs", None).await;
    assert_eq!((status, runs[0]["id"].as_str()), (StatusCode::OK, Some("runs-1")));
}
