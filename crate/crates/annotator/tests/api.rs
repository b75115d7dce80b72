use std::path::Path;
use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use serde_json::{json, Value};
use tower::ServiceExt;
use trajreward::annotate::{compute_cutoff, Annotation};
use trajreward::synthworld::{gen_dataset, write_dataset, DatasetConfig};
use trajreward::trajdata::{load_manifest, read_manifest};
use trajreward_annotator::{router, AppState, CutoffBody, FrameBody, TrajectoryMeta, ANNOTATIONS_FILE};

fn make_dataset(dir: &Path) {
    let sd = gen_dataset(&DatasetConfig {
        n_tasks: 4,
        trajs_per_task: 6,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    write_dataset(&sd, dir).unwrap();
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn get(app: &axum::Router, uri: &str) -> (StatusCode, Value) {
    call(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &axum::Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap();
    call(app, req).await
}

struct Fixture {
    _dir: tempfile::TempDir,
    data: std::path::PathBuf,
    log: std::path::PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    make_dataset(&data);
    let log = dir.path().join(ANNOTATIONS_FILE);
    Fixture { _dir: dir, data, log }
}

fn start(f: &Fixture) -> (Arc<AppState>, axum::Router) {
    let st = AppState::open(&f.data, &f.log).unwrap();
    (st.clone(), router(st))
}

#[tokio::test]
async fn lists_two_sources() {
    let f = fixture();
    let (_, app) = start(&f);
    let (s, v) = get(&app, "/sources").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v, json!(["synth-a", "synth-b"]));
}

#[tokio::test]
async fn sampling_is_deterministic_and_scoped() {
    let f = fixture();
    let (_, app) = start(&f);
    let (s, a) = get(&app, "/sources/synth-a/trajectories?n=5&seed=9").await;
    assert_eq!(s, StatusCode::OK);
    let (_, b) = get(&app, "/sources/synth-a/trajectories?n=5&seed=9").await;
    assert_eq!(a, b);
    let metas: Vec<TrajectoryMeta> = serde_json::from_value(a).unwrap();
    assert_eq!(metas.len(), 5);
    assert!(metas.iter().all(|m| m.source == "synth-a"));
    let (s, v) = get(&app, "/sources/nope/trajectories").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "not_found");
}

#[tokio::test]
async fn metadata_and_frames() {
    let f = fixture();
    let ds = load_manifest(&f.data).unwrap();
    let t = &ds.trajectories[0];
    let (_, app) = start(&f);
    let (s, v) = get(&app, &format!("/trajectories/{}", t.id)).await;
    assert_eq!(s, StatusCode::OK);
    let m: TrajectoryMeta = serde_json::from_value(v).unwrap();
    assert_eq!(m.num_frames, t.num_frames);
    assert_eq!(m.frame_shape, Some([3, 16, 16]));

    let (s, v) = get(&app, &format!("/trajectories/{}/frames/2", t.id)).await;
    assert_eq!(s, StatusCode::OK);
    let fr: FrameBody = serde_json::from_value(v).unwrap();
    assert_eq!(fr.data, t.frames[2].to_nested());

    let (s, v) = get(&app, &format!("/trajectories/{}/frames/{}", t.id, t.num_frames)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["message"].as_str().unwrap().contains("out of range"));
    let (s, _) = get(&app, "/trajectories/missing").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn rejects_out_of_range_end_frame() {
    let f = fixture();
    let ds = load_manifest(&f.data).unwrap();
    let t = &ds.trajectories[0];
    let (st, app) = start(&f);
    let (s, v) = post(
        &app,
        "/annotations",
        json!({"traj_id": t.id, "end_frame": t.num_frames, "annotator": "x"}),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "invalid");
    assert!(v["message"].as_str().unwrap().contains("end_frame"));
    assert!(st.annotations().is_empty());

    let (s, _) = post(&app, "/annotations", json!({"traj_id": "missing", "end_frame": 0, "annotator": "x"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = post(&app, "/annotations", json!({"traj_id": t.id})).await;
    assert!(s.is_client_error());
}

#[tokio::test]
async fn cutoff_end_to_end_matches_pure_function_and_survives_restart() {
    let f = fixture();
    let ds = load_manifest(&f.data).unwrap();
    let (st, app) = start(&f);
    let (_, v) = get(&app, "/sources/synth-b/trajectories?n=10&seed=1").await;
    let metas: Vec<TrajectoryMeta> = serde_json::from_value(v).unwrap();
    assert_eq!(metas.len(), 10);

    for (k, m) in metas.iter().enumerate().take(9) {
        let end = (m.num_frames * (k + 3) / 12).min(m.num_frames - 1);
        let (s, v) = post(&app, "/annotations", json!({"traj_id": m.id, "end_frame": end, "annotator": "a"})).await;
        assert_eq!(s, StatusCode::CREATED);
        let ack: Annotation = serde_json::from_value(v).unwrap();
        assert_eq!(ack.end_frame, end);
    }
    let (s, v) = get(&app, "/sources/synth-b/cutoff").await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "insufficient_annotations");

    let last = &metas[9];
    let (s, _) = post(
        &app,
        "/annotations",
        json!({"traj_id": last.id, "end_frame": last.num_frames - 1, "annotator": "a"}),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);

    let (s, v) = get(&app, "/sources/synth-b/cutoff").await;
    assert_eq!(s, StatusCode::OK);
    let body: CutoffBody = serde_json::from_value(v).unwrap();
    let expect = compute_cutoff(&ds, "synth-b", &st.annotations(), 10).unwrap();
    assert_eq!(body.cutoff, expect);
    assert_eq!(body.count, 10);
    assert!(body.updated > 0);

    let recs = read_manifest(&f.data).unwrap();
    for r in &recs {
        if r.source == "synth-b" {
            assert_eq!(r.cutoff, Some(expect));
        } else {
            assert_eq!(r.cutoff, None);
        }
    }
    let (_, v) = get(&app, &format!("/trajectories/{}", last.id)).await;
    assert_eq!(v["cutoff"], json!(expect));

    // another source is unaffected by synth-b annotations
    let (s, _) = get(&app, "/sources/synth-a/cutoff").await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    drop(app);
    drop(st);
    let (st2, app2) = start(&f);
    assert_eq!(st2.annotations().len(), 10);
    let (_, v) = get(&app2, "/sources/synth-b/cutoff").await;
    let again: CutoffBody = serde_json::from_value(v).unwrap();
    assert_eq!(again.cutoff.to_bits(), expect.to_bits());
    let (_, v) = get(&app2, "/sources/synth-b/cutoff?min_count=11").await;
    assert_eq!(v["code"], "insufficient_annotations");
}

#[tokio::test]
async fn serves_over_tcp_and_reports_port_in_use() {
    let f = fixture();
    let st = AppState::open(&f.data, &f.log).unwrap();
    let listener = trajreward_annotator::bind("127.0.0.1:0".parse().unwrap()).await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(trajreward_annotator::serve_on(st.clone(), listener));

    let body: Vec<String> = reqwest::get(format!("http://{addr}/sources")).await.unwrap().json().await.unwrap();
    assert_eq!(body, vec!["synth-a", "synth-b"]);

    let err = trajreward_annotator::serve(st, addr).await.unwrap_err();
    assert!(matches!(err, trajreward_annotator::ServeError::Bind { .. }), "{err}");
    server.abort();
}
