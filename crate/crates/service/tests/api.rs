use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use flim_core::criterion::rank_and_recommend;
use flim_core::dataset::{Dataset, Split};
use flim_core::flim::LayerSpec;
use flim_core::io::{load_checkpoint, markers_to_csv, oracle_markers, synth_dataset, SynthConfig};
use flim_core::metrics::{region_mask, Region};
use flim_core::session::{Session, SessionConfig};
use flim_core::simulate::auto_label;
use flim_core::sunet::ArchSpec;
use flim_service::{router, AppState};
use http_body_util::BodyExt;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use tower::ServiceExt;

fn arch() -> ArchSpec {
    let specs = vec![LayerSpec::new(3, 2, 8); 3];
    ArchSpec {
        flair: specs.clone(),
        t1gd: specs,
        decoder_widths: vec![8, 8],
        classes: 4,
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    app: Router,
    ds: Dataset,
}

fn fixture(dims: &[usize], n: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    synth_dataset(
        &SynthConfig::new(n, dims.to_vec(), 11),
        &dir.path().join("data"),
    )
    .unwrap();
    let ds = Dataset::load(&dir.path().join("data/manifest.json")).unwrap();
    let app = router(AppState::new(dir.path()));
    Fixture { _dir: dir, app, ds }
}

struct Reply {
    status: StatusCode,
    bytes: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or(Value::Null)
    }
}

async fn call(
    app: &Router,
    method: Method,
    uri: &str,
    content_type: &str,
    body: impl Into<Body>,
) -> Reply {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", content_type)
        .body(body.into())
        .unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, bytes }
}

async fn get(app: &Router, uri: &str) -> Reply {
    call(app, Method::GET, uri, "application/json", Body::empty()).await
}

async fn post(app: &Router, uri: &str, body: Value) -> Reply {
    call(app, Method::POST, uri, "application/json", body.to_string()).await
}

async fn put_json(app: &Router, uri: &str, body: Value) -> Reply {
    call(app, Method::PUT, uri, "application/json", body.to_string()).await
}

async fn create(app: &Router, budget: usize) -> String {
    let r = post(
        app,
        "/api/sessions",
        json!({ "manifest_path": "data/manifest.json", "budget": budget, "seed": 3, "arch": arch() }),
    )
    .await;
    assert_eq!(
        r.status,
        StatusCode::CREATED,
        "{}",
        String::from_utf8_lossy(&r.bytes)
    );
    r.json()["id"].as_str().unwrap().to_string()
}

async fn wait_job(app: &Router, id: &str) -> Value {
    loop {
        let j = get(app, &format!("/api/jobs/{id}")).await.json();
        if j["state"] == "done" || j["state"] == "failed" {
            return j;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

async fn run_job(app: &Router, uri: &str, body: Value) -> Value {
    let r = post(app, uri, body).await;
    assert_eq!(
        r.status,
        StatusCode::ACCEPTED,
        "{uri}: {}",
        String::from_utf8_lossy(&r.bytes)
    );
    wait_job(app, r.json()["job_id"].as_str().unwrap()).await
}

fn oracle_csv(ds: &Dataset, case: &str) -> String {
    let (m, _) = oracle_markers(case, ds.get(case).unwrap().gt().unwrap(), 6, 0).unwrap();
    markers_to_csv(&[m])
}

async fn put_markers(app: &Router, sid: &str, ds: &Dataset, case: &str) -> Reply {
    call(
        app,
        Method::PUT,
        &format!("/api/sessions/{sid}/markers/{case}"),
        "text/csv",
        oracle_csv(ds, case),
    )
    .await
}

fn decode_png(bytes: &[u8]) -> (png::OutputInfo, Vec<u8>) {
    let mut reader = png::Decoder::new(std::io::Cursor::new(bytes))
        .read_info()
        .unwrap();
    let mut buf = vec![0; reader.output_buffer_size().unwrap()];
    let info = reader.next_frame(&mut buf).unwrap();
    buf.truncate(info.buffer_size());
    (info, buf)
}

/// Selects the first training case, marks it, learns layer 1 and labels
/// filters with the oracle labeler. Returns the selected case.
async fn bootstrap(f: &Fixture, sid: &str) -> String {
    let first = f.ds.ids(Split::Train)[0].clone();
    assert_eq!(
        post(
            &f.app,
            &format!("/api/sessions/{sid}/select"),
            json!({ "case_id": first })
        )
        .await
        .status,
        StatusCode::OK
    );
    assert_eq!(
        put_markers(&f.app, sid, &f.ds, &first).await.status,
        StatusCode::OK
    );
    let j = run_job(&f.app, &format!("/api/sessions/{sid}/learn"), json!({})).await;
    assert_eq!(j["state"], "done", "{j}");
    first
}

async fn label_like_oracle(f: &Fixture, sid: &str, session: &Session) {
    let ann = auto_label(session, &f.ds, 0.3).unwrap();
    for (id, label) in &ann.labels {
        let r = put_json(
            &f.app,
            &format!("/api/sessions/{sid}/filters/{id}/label"),
            json!({ "label": label }),
        )
        .await;
        assert_eq!(r.status, StatusCode::OK);
    }
}

/// In-process session driven through the same calls.
fn local_session(budget: usize) -> Session {
    Session::new(SessionConfig {
        budget,
        stop_threshold: Some(0.85),
        arch: arch(),
        seed: 3,
    })
    .unwrap()
}

#[tokio::test]
async fn health_and_session_creation() {
    let f = fixture(&[16, 16], 6);
    assert_eq!(get(&f.app, "/api/health").await.status, StatusCode::OK);
    let sid = create(&f.app, 4).await;
    let s = get(&f.app, &format!("/api/sessions/{sid}")).await.json();
    assert_eq!(s["budget"], 4);
    let r = post(
        &f.app,
        "/api/sessions",
        json!({ "manifest_path": "missing.json" }),
    )
    .await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    let r = post(
        &f.app,
        "/api/sessions",
        json!({ "manifest_path": "data/manifest.json" }),
    )
    .await;
    let id = r.json()["id"].as_str().unwrap().to_string();
    assert_eq!(
        get(&f.app, &format!("/api/sessions/{id}")).await.json()["budget"],
        8
    );
    assert_eq!(
        get(&f.app, "/api/sessions/nope").await.status,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn slices_render_window_leveled_png() {
    let f = fixture(&[16, 16, 16], 4);
    let sid = create(&f.app, 8).await;
    let case = f.ds.ids(Split::Train)[0].clone();
    let base = format!("/api/sessions/{sid}/images/{case}/slice");
    let r = get(&f.app, &format!("{base}?axis=0&index=0")).await;
    assert_eq!(r.status, StatusCode::OK);
    let (info, _) = decode_png(&r.bytes);
    assert_eq!((info.width, info.height), (16, 16));
    assert_eq!(info.color_type, png::ColorType::Grayscale);
    assert_eq!(
        get(&f.app, &format!("{base}?axis=0&index=0")).await.bytes,
        r.bytes
    );
    assert_eq!(
        get(&f.app, &format!("{base}?axis=2&index=16")).await.status,
        StatusCode::RANGE_NOT_SATISFIABLE
    );
    assert_eq!(
        get(&f.app, &format!("{base}?axis=3&index=0")).await.status,
        StatusCode::RANGE_NOT_SATISFIABLE
    );
    let missing = format!("/api/sessions/{sid}/images/nope/slice?axis=0&index=0");
    assert_eq!(get(&f.app, &missing).await.status, StatusCode::NOT_FOUND);
    assert_eq!(
        get(&f.app, &format!("{base}?overlay=bogus")).await.status,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        get(&f.app, &format!("{base}?overlay=prediction"))
            .await
            .status,
        StatusCode::CONFLICT
    );
    assert_eq!(
        get(&f.app, &format!("{base}?overlay=activation:flair-0"))
            .await
            .status,
        StatusCode::CONFLICT
    );

    // Colored pixels of the GT overlay are exactly the WT voxels of the slice.
    let wt = region_mask(f.ds.get(&case).unwrap().gt().unwrap(), Region::Wt);
    for axis in 0..3 {
        let index = 8;
        let r = get(
            &f.app,
            &format!("{base}?axis={axis}&index={index}&channel=t1gd&overlay=gt"),
        )
        .await;
        let (info, rgb) = decode_png(&r.bytes);
        assert_eq!(info.color_type, png::ColorType::Rgb);
        let colored = rgb
            .chunks(3)
            .filter(|p| !(p[0] == p[1] && p[1] == p[2]))
            .count();
        let mut expected = 0;
        for i in 0..16 {
            for j in 0..16 {
                let mut c = [i, j, j];
                match axis {
                    0 => c = [index, i, j],
                    1 => c = [i, index, j],
                    _ => c[2] = index,
                }
                expected += wt.bits()[(c[0] * 16 + c[1]) * 16 + c[2]] as usize;
            }
        }
        assert!(expected > 0);
        assert_eq!(colored, expected, "axis {axis}");
    }
}

#[tokio::test]
async fn markers_are_validated() {
    let f = fixture(&[16, 16], 6);
    let sid = create(&f.app, 8).await;
    let case = f.ds.ids(Split::Train)[0].clone();
    let uri = format!("/api/sessions/{sid}/markers/{case}");
    assert_eq!(
        put_markers(&f.app, &sid, &f.ds, &case).await.status,
        StatusCode::OK
    );
    let stored = get(&f.app, &uri).await.json();
    assert!(!stored["entries"].as_array().unwrap().is_empty());
    let bad = format!("case_id,x,y,z,marker_id,tag\n{case},1,1,,1,object\n{case},16,1,,1,object\n");
    let r = call(&f.app, Method::PUT, &uri, "text/csv", bad).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["line"], 3);
    assert_eq!(
        call(&f.app, Method::PUT, &uri, "text/csv", "").await.status,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let body = json!({ "entries": [{ "coord": [2, 3], "marker_id": 1, "tag": "object" }] });
    assert_eq!(put_json(&f.app, &uri, body).await.status, StatusCode::OK);
    let empty = json!({ "entries": [] });
    assert_eq!(
        put_json(&f.app, &uri, empty).await.status,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let test_case = f.ds.ids(Split::Test)[0].clone();
    let r = put_markers(&f.app, &sid, &f.ds, &test_case).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn learn_label_score_rank_select() {
    let f = fixture(&[16, 16], 8);
    let sid = create(&f.app, 3).await;
    assert_eq!(
        post(&f.app, &format!("/api/sessions/{sid}/learn"), json!({}))
            .await
            .status,
        StatusCode::CONFLICT
    );
    let first = bootstrap(&f, &sid).await;
    let filters = get(&f.app, &format!("/api/sessions/{sid}/filters"))
        .await
        .json();
    let n = filters.as_array().unwrap().len();
    assert!(n > 0 && n <= 16);

    // Mirror the session in process.
    let mut local = local_session(3);
    local.select(&f.ds, &first).unwrap();
    let (m, _) = oracle_markers(&first, f.ds.get(&first).unwrap().gt().unwrap(), 6, 0).unwrap();
    local.set_markers(&f.ds, m).unwrap();
    local.learn_layer1(&f.ds).unwrap();
    assert_eq!(filters, json!(local.filters()));

    let label = |fid: &str| format!("/api/sessions/{sid}/filters/{fid}/label");
    assert_eq!(
        put_json(&f.app, &label("flair-0"), json!({ "label": "good_WT" }))
            .await
            .status,
        StatusCode::OK
    );
    assert_eq!(
        put_json(&f.app, &label("flair-0"), json!({ "label": "none" }))
            .await
            .status,
        StatusCode::OK
    );
    assert_eq!(
        put_json(&f.app, &label("flair-999"), json!({ "label": "none" }))
            .await
            .status,
        StatusCode::NOT_FOUND
    );
    assert_eq!(
        put_json(&f.app, &label("t1gd-0"), json!({ "label": "great" }))
            .await
            .status,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    assert_eq!(
        post(&f.app, &format!("/api/sessions/{sid}/score"), json!({}))
            .await
            .status,
        StatusCode::CONFLICT
    );

    label_like_oracle(&f, &sid, &local).await;
    let ann = auto_label(&local, &f.ds, 0.3).unwrap();
    local.set_annotations(ann).unwrap();
    let ranking = format!("/api/sessions/{sid}/ranking");
    assert_eq!(get(&f.app, &ranking).await.status, StatusCode::CONFLICT);
    assert_eq!(
        run_job(&f.app, &format!("/api/sessions/{sid}/score"), json!({})).await["state"],
        "done"
    );
    let r = get(&f.app, &ranking).await.json();
    let table = local.score(&f.ds).unwrap().clone();
    assert_eq!(r["table"], json!(table));
    assert_eq!(r["recommended"], json!(rank_and_recommend(&table).unwrap()));
    let rows = r["table"]["rows"].as_array().unwrap();
    assert!(rows
        .windows(2)
        .all(|w| w[0]["aggregate"].as_f64() <= w[1]["aggregate"].as_f64()));

    // Override the recommendation: allowed, audited.
    let rec = r["recommended"].as_str().unwrap().to_string();
    let other = rows
        .iter()
        .map(|x| x["image_id"].as_str().unwrap())
        .find(|id| *id != rec)
        .unwrap()
        .to_string();
    let ev = post(
        &f.app,
        &format!("/api/sessions/{sid}/select"),
        json!({ "case_id": other }),
    )
    .await;
    assert_eq!(ev.status, StatusCode::OK);
    assert_eq!(ev.json()["overridden"], true);
    assert_eq!(get(&f.app, &ranking).await.status, StatusCode::CONFLICT);
    let select_uri = format!("/api/sessions/{sid}/select");
    let sel = |c: &str| post(&f.app, &select_uri, json!({ "case_id": c }));
    assert_eq!(sel("nope").await.status, StatusCode::NOT_FOUND);
    assert_eq!(sel(&rec).await.status, StatusCode::OK);
    let fourth =
        f.ds.ids(Split::Train)
            .into_iter()
            .find(|c| ![&first, &rec, &other].contains(&c))
            .unwrap();
    assert_eq!(sel(&fourth).await.status, StatusCode::CONFLICT);
    let s = get(&f.app, &format!("/api/sessions/{sid}")).await.json();
    assert_eq!(s["selected"], json!([first, other, rec]));
    assert_eq!(s["audit"][1]["overridden"], true);
}

#[tokio::test]
async fn empty_remaining_set_gives_no_content() {
    let f = fixture(&[16, 16], 4);
    let train = f.ds.ids(Split::Train);
    let sid = create(&f.app, train.len()).await;
    let first = bootstrap(&f, &sid).await;
    for c in train.iter().filter(|c| **c != first) {
        assert_eq!(
            post(
                &f.app,
                &format!("/api/sessions/{sid}/select"),
                json!({ "case_id": c })
            )
            .await
            .status,
            StatusCode::OK
        );
    }
    put_json(
        &f.app,
        &format!("/api/sessions/{sid}/filters/flair-0/label"),
        json!({ "label": "good_WT" }),
    )
    .await;
    assert_eq!(
        run_job(&f.app, &format!("/api/sessions/{sid}/score"), json!({})).await["state"],
        "done"
    );
    assert_eq!(
        get(&f.app, &format!("/api/sessions/{sid}/ranking"))
            .await
            .status,
        StatusCode::NO_CONTENT
    );
}

#[tokio::test]
async fn training_jobs_metrics_and_checkpoint() {
    let f = fixture(&[16, 16], 6);
    let sid = create(&f.app, 8).await;
    let base = format!("/api/sessions/{sid}");
    assert_eq!(
        post(&f.app, &format!("{base}/train-encoder-rest"), json!({}))
            .await
            .status,
        StatusCode::CONFLICT
    );
    assert_eq!(
        get(&f.app, &format!("{base}/metrics")).await.status,
        StatusCode::CONFLICT
    );
    bootstrap(&f, &sid).await;
    assert_eq!(
        post(&f.app, &format!("{base}/train-decoder"), json!({}))
            .await
            .status,
        StatusCode::CONFLICT
    );
    assert_eq!(
        run_job(&f.app, &format!("{base}/train-encoder-rest"), json!({})).await["state"],
        "done"
    );
    let s = get(&f.app, &base).await.json();
    assert_eq!(s["encoder_layers"], json!({ "flair": 3, "t1gd": 3 }));
    let bad = post(
        &f.app,
        &format!("{base}/train-decoder"),
        json!({ "config": { "lr0": -1.0 } }),
    )
    .await;
    assert_eq!(bad.status, StatusCode::UNPROCESSABLE_ENTITY);
    let j = run_job(
        &f.app,
        &format!("{base}/train-decoder"),
        json!({ "config": { "epochs": 3 } }),
    )
    .await;
    assert_eq!(j["state"], "done", "{j}");
    assert_eq!(j["kind"], "train_decoder");
    assert_eq!(j["progress"], 1.0);
    let epochs = j["epochs"].as_array().unwrap();
    assert_eq!(epochs.len(), 3);
    assert!(epochs
        .iter()
        .all(|e| e["mean_loss"].as_f64().unwrap().is_finite()));
    let m = get(&f.app, &format!("{base}/metrics")).await;
    assert_eq!(m.status, StatusCode::OK);
    for reg in ["ET", "TC", "WT"] {
        assert!(
            m.json().to_string().contains(reg)
                || m.json().to_string().contains(&reg.to_lowercase())
        );
    }
    let ev = run_job(&f.app, &format!("{base}/evaluate"), json!({})).await;
    assert_eq!(ev["result"], m.json());
    let case = f.ds.ids(Split::Test)[0].clone();
    let r = get(
        &f.app,
        &format!("{base}/images/{case}/slice?overlay=prediction"),
    )
    .await;
    assert_eq!(r.status, StatusCode::OK);
    let ck = post(&f.app, &format!("{base}/checkpoint"), json!({})).await;
    assert_eq!(ck.status, StatusCode::OK);
    let path = ck.json()["path"].as_str().unwrap().to_string();
    let loaded = load_checkpoint(Path::new(&path)).unwrap();
    assert_eq!(loaded.encoder_flair.len(), 3);
    assert!(loaded.decoder.is_some());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn one_mutating_job_at_a_time_and_reads_stay_available() {
    let f = fixture(&[16, 16], 6);
    let sid = create(&f.app, 8).await;
    let base = format!("/api/sessions/{sid}");
    bootstrap(&f, &sid).await;
    run_job(&f.app, &format!("{base}/train-encoder-rest"), json!({})).await;
    let r = post(
        &f.app,
        &format!("{base}/train-decoder"),
        json!({ "config": { "epochs": 100000 } }),
    )
    .await;
    assert_eq!(r.status, StatusCode::ACCEPTED);
    let job = r.json()["job_id"].as_str().unwrap().to_string();
    assert_eq!(
        post(&f.app, &format!("{base}/learn"), json!({}))
            .await
            .status,
        StatusCode::CONFLICT
    );
    assert_eq!(
        post(&f.app, &format!("{base}/train-encoder-rest"), json!({}))
            .await
            .status,
        StatusCode::CONFLICT
    );
    let label = put_json(
        &f.app,
        &format!("{base}/filters/flair-0/label"),
        json!({ "label": "good_WT" }),
    )
    .await;
    assert_eq!(label.status, StatusCode::CONFLICT);
    let other = f.ds.ids(Split::Train)[1].clone();
    assert_eq!(
        post(
            &f.app,
            &format!("{base}/select"),
            json!({ "case_id": other })
        )
        .await
        .status,
        StatusCode::CONFLICT
    );
    assert_eq!(
        get(&f.app, &format!("{base}/filters")).await.status,
        StatusCode::OK
    );
    assert_eq!(get(&f.app, &base).await.json()["active_job"], json!(job));
    assert_eq!(
        post(&f.app, &format!("/api/jobs/{job}/cancel"), json!({}))
            .await
            .status,
        StatusCode::OK
    );
    let j = wait_job(&f.app, &job).await;
    assert_eq!(j["state"], "failed");
    assert_eq!(j["error"], "cancelled");
    let s = get(&f.app, &base).await.json();
    assert_eq!(s["trained"], false);
    assert_eq!(s["active_job"], Value::Null);
    assert_eq!(
        get(&f.app, "/api/jobs/nope").await.status,
        StatusCode::NOT_FOUND
    );
}

/// Random UI-like call sequences keep the session invariants and never
/// produce a server error.
#[tokio::test]
async fn random_call_sequences_preserve_invariants() {
    let f = fixture(&[16, 16], 8);
    let train = f.ds.ids(Split::Train);
    let all: Vec<String> =
        f.ds.cases
            .iter()
            .map(|c| c.id.clone())
            .chain(["ghost".to_string()])
            .collect();
    let (mut learned, mut ranked) = (0, 0);
    for seed in 0..3u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let budget = 2 + seed as usize;
        let sid = create(&f.app, budget).await;
        let base = format!("/api/sessions/{sid}");
        for _ in 0..60 {
            let case = &all[rng.random_range(0..all.len())];
            // Labeling and scoring are weighted up as in a real session.
            let r = match [0, 1, 2, 3, 3, 3, 4, 4, 5, 6][rng.random_range(0..10)] {
                0 => {
                    post(
                        &f.app,
                        &format!("{base}/select"),
                        json!({ "case_id": case }),
                    )
                    .await
                }
                1 if case != "ghost" && f.ds.get(case).unwrap().gt.is_some() => {
                    put_markers(&f.app, &sid, &f.ds, case).await
                }
                2 => {
                    let r = post(&f.app, &format!("{base}/learn"), json!({})).await;
                    if r.status == StatusCode::ACCEPTED {
                        learned += 1;
                        wait_job(&f.app, r.json()["job_id"].as_str().unwrap()).await;
                    }
                    r
                }
                3 => {
                    let m = ["flair", "t1gd"][rng.random_range(0..2)];
                    let l = ["good_WT", "good_ET", "none"][rng.random_range(0..3)];
                    let fid = format!("{m}-{}", rng.random_range(0..10));
                    put_json(
                        &f.app,
                        &format!("{base}/filters/{fid}/label"),
                        json!({ "label": l }),
                    )
                    .await
                }
                4 => {
                    let r = post(&f.app, &format!("{base}/score"), json!({})).await;
                    if r.status == StatusCode::ACCEPTED {
                        wait_job(&f.app, r.json()["job_id"].as_str().unwrap()).await;
                    }
                    r
                }
                5 => get(&f.app, &format!("{base}/ranking")).await,
                _ => {
                    get(
                        &f.app,
                        &format!("{base}/images/{case}/slice?overlay=activation:flair-0"),
                    )
                    .await
                }
            };
            assert!(
                !r.status.is_server_error(),
                "{}: {}",
                r.status,
                String::from_utf8_lossy(&r.bytes)
            );
            let s = get(&f.app, &base).await.json();
            let selected: Vec<String> = serde_json::from_value(s["selected"].clone()).unwrap();
            assert!(selected.len() <= budget);
            assert!(selected.iter().all(|c| train.contains(c)));
            let rk = get(&f.app, &format!("{base}/ranking")).await;
            if rk.status == StatusCode::OK {
                ranked += 1;
                for row in rk.json()["table"]["rows"].as_array().unwrap() {
                    let id = row["image_id"].as_str().unwrap().to_string();
                    assert!(train.contains(&id) && !selected.contains(&id));
                }
            }
        }
    }
    assert!(
        learned > 0 && ranked > 0,
        "learned {learned} ranked {ranked}"
    );
}

#[test]
fn state_is_shareable_across_threads() {
    fn assert_send_sync<T: Send + Sync>() {}
    assert_send_sync::<Arc<AppState>>();
}
