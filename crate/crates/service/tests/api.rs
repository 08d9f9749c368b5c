use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use mvseg_core::bundle_io::save_bundle;
use mvseg_core::checkpoint::save_checkpoint;
use mvseg_core::decoder::DecoderConfig;
use mvseg_core::encoder::EncoderConfig;
use mvseg_core::geometry::{Polarity, Prompt};
use mvseg_core::model::{Model, ModelConfig, SceneContext};
use mvseg_core::rle;
use mvseg_core::scenegen::{generate_scene, SceneBundle, SceneGenConfig};
use mvseg_service::{router, AppState, ServiceConfig};

fn small_model() -> Model {
    let cfg = ModelConfig {
        fourier_features: 16,
        encoder: EncoderConfig {
            channels: [8, 16, 16],
            output_dim: 32,
            ..Default::default()
        },
        decoder: DecoderConfig {
            dim: 32,
            num_blocks: 1,
            num_heads: 4,
            ..Default::default()
        },
        ..Default::default()
    };
    Model::new(cfg, 11).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    app: axum::Router,
    state: Arc<AppState>,
    scenes: Vec<SceneBundle>,
    model: Model,
}

fn fixture(views: &[usize]) -> Fixture {
    fixture_with(views, small_model())
}

fn fixture_with(views: &[usize], model: Model) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let ckpts = dir.path().join("checkpoints");
    let mut scenes = Vec::new();
    for (i, &n) in views.iter().enumerate() {
        let b = generate_scene(&SceneGenConfig { views: n, ..Default::default() }, 100 + i as u64).unwrap();
        save_bundle(&b, &data.join(&b.scene_id)).unwrap();
        scenes.push(b);
    }
    save_checkpoint(&ckpts.join("toy"), &model, None, 0, 11).unwrap();
    let state = AppState::new(ServiceConfig {
        data_dir: data,
        checkpoint_dir: ckpts,
        ..Default::default()
    });
    Fixture {
        _dir: dir,
        app: router(state.clone()),
        state,
        scenes,
        model,
    }
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn parse(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

async fn create(f: &Fixture, scene: usize) -> Value {
    let (s, body) = call(
        &f.app,
        "POST",
        "/sessions",
        Some(json!({ "scene_id": f.scenes[scene].scene_id, "checkpoint_id": "toy" })),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
    parse(&body)
}

fn prompts_json(p: &[Prompt]) -> Value {
    json!({ "prompts": p })
}

#[tokio::test]
async fn catalog_lists_scenes_sorted() {
    let f = fixture(&[2, 3]);
    let (s, body) = call(&f.app, "GET", "/scenes", None).await;
    assert_eq!(s, StatusCode::OK);
    let v = parse(&body);
    let ids: Vec<&str> = v["scenes"].as_array().unwrap().iter().map(|s| s["scene_id"].as_str().unwrap()).collect();
    let mut want: Vec<&str> = f.scenes.iter().map(|b| b.scene_id.as_str()).collect();
    want.sort();
    assert_eq!(ids, want);
    let (_, body) = call(&f.app, "GET", "/checkpoints", None).await;
    assert_eq!(parse(&body)["checkpoints"], json!(["toy"]));
}

#[tokio::test]
async fn empty_data_dir_gives_empty_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(ServiceConfig {
        data_dir: dir.path().join("nothing-here"),
        ..Default::default()
    }));
    let (s, body) = call(&app, "GET", "/scenes", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(parse(&body), json!({ "scenes": [] }));
}

#[tokio::test]
async fn descriptor_lists_every_view() {
    let f = fixture(&[4]);
    let d = create(&f, 0).await;
    assert_eq!(d["num_views"], 4);
    assert_eq!(d["height"], 32);
    assert_eq!(d["width"], 32);
    assert_eq!(d["views"].as_array().unwrap().len(), 4);
    let url = d["views"][3]["image_url"].as_str().unwrap();
    let (s, png) = call(&f.app, "GET", url, None).await;
    assert_eq!(s, StatusCode::OK);
    let img = image::load_from_memory(&png).unwrap().to_rgb8();
    assert_eq!((img.height(), img.width()), (32, 32));
}

#[tokio::test]
async fn frame_subset_selects_views() {
    let f = fixture(&[4]);
    let (s, body) = call(
        &f.app,
        "POST",
        "/sessions",
        Some(json!({ "scene_id": f.scenes[0].scene_id, "checkpoint_id": "toy", "frames": [3, 1] })),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(parse(&body)["num_views"], 2);
}

#[tokio::test]
async fn unknown_things_are_404_with_error_body() {
    let f = fixture(&[2]);
    let cases = [
        ("POST", "/sessions", Some(json!({ "scene_id": "nope", "checkpoint_id": "toy" }))),
        ("POST", "/sessions", Some(json!({ "scene_id": f.scenes[0].scene_id, "checkpoint_id": "nope" }))),
        ("POST", "/sessions/missing/prompts", Some(prompts_json(&[Prompt::new(0, 1, 1, Polarity::Positive)]))),
        ("GET", "/sessions/missing/views/0/image", None),
        ("DELETE", "/sessions/missing", None),
        ("GET", "/no/such/route", None),
    ];
    for (m, uri, body) in cases {
        let (s, bytes) = call(&f.app, m, uri, body).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{m} {uri}");
        let v = parse(&bytes);
        assert_eq!(v["error"]["code"], "not_found");
        assert!(v["error"]["message"].as_str().unwrap().len() > 3);
    }
    let d = create(&f, 0).await;
    let id = d["session_id"].as_str().unwrap();
    let (s, _) = call(&f.app, "GET", &format!("/sessions/{id}/views/2/image"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn bad_prompts_are_422_naming_the_index() {
    let f = fixture(&[2]);
    let d = create(&f, 0).await;
    let uri = format!("/sessions/{}/prompts", d["session_id"].as_str().unwrap());
    let (s, body) = call(&f.app, "POST", &uri, Some(json!({ "prompts": [] }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(parse(&body)["error"]["code"], "empty_prompts");

    let bad = json!({ "prompts": [{ "view": 0, "row": -1, "col": 0, "polarity": "positive" }] });
    let (s, body) = call(&f.app, "POST", &uri, Some(bad)).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let v = parse(&body);
    assert_eq!(v["error"]["code"], "invalid_prompt");
    assert_eq!(v["error"]["detail"]["index"], 0);

    let bad = json!({ "prompts": [
        { "view": 0, "row": 3, "col": 3, "polarity": "positive" },
        { "view": 5, "row": 3, "col": 3, "polarity": "negative" }
    ] });
    let (_, body) = call(&f.app, "POST", &uri, Some(bad)).await;
    assert_eq!(parse(&body)["error"]["detail"]["index"], 1);

    let (s, body) = call(&f.app, "POST", &uri, Some(json!({ "prompts": [{ "view": 0 }] }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(parse(&body)["error"]["code"], "invalid_json");
}

#[tokio::test]
async fn prompts_are_idempotent_and_match_batch_pipeline() {
    let f = fixture(&[3]);
    let d = create(&f, 0).await;
    let uri = format!("/sessions/{}/prompts", d["session_id"].as_str().unwrap());
    let prompts = [
        Prompt::new(0, 12, 14, Polarity::Positive),
        Prompt::new(1, 20, 5, Polarity::Positive),
        Prompt::new(2, 2, 30, Polarity::Negative),
    ];
    let (s, first) = call(&f.app, "POST", &uri, Some(prompts_json(&prompts))).await;
    assert_eq!(s, StatusCode::OK);
    let (_, second) = call(&f.app, "POST", &uri, Some(prompts_json(&prompts))).await;
    assert_eq!(first, second);

    let ctx = SceneContext::new(&f.model, &f.scenes[0].views).unwrap();
    let want = f.model.predict(&ctx, &prompts).unwrap();
    let v = parse(&first);
    let masks = v["masks"].as_array().unwrap();
    assert_eq!(masks.len(), 3);
    for (i, m) in masks.iter().enumerate() {
        assert_eq!(m["view"], i);
        let runs: Vec<u32> = serde_json::from_value(m["rle"].clone()).unwrap();
        let got = rle::decode(m["h"].as_u64().unwrap() as usize, m["w"].as_u64().unwrap() as usize, &runs).unwrap();
        assert_eq!(got, want[i].binary);
    }
}

#[tokio::test]
async fn negative_prompt_changes_response() {
    let f = fixture(&[2]);
    let d = create(&f, 0).await;
    let uri = format!("/sessions/{}/prompts", d["session_id"].as_str().unwrap());
    let mut prompts = vec![Prompt::new(0, 16, 16, Polarity::Positive)];
    let (_, before) = call(&f.app, "POST", &uri, Some(prompts_json(&prompts))).await;
    let v = parse(&before);
    let runs: Vec<u32> = serde_json::from_value(v["masks"][0]["rle"].clone()).unwrap();
    let mask = rle::decode(32, 32, &runs).unwrap();
    // a predicted pixel if any, otherwise any pixel: the response must move
    let idx = mask.data().iter().position(|&b| b == 1).unwrap_or(0);
    prompts.push(Prompt::new(0, idx / 32, idx % 32, Polarity::Negative));
    let (_, after) = call(&f.app, "POST", &uri, Some(prompts_json(&prompts))).await;
    assert_ne!(before, after);
}

#[tokio::test]
async fn sessions_are_isolated_and_deletable() {
    let f = fixture(&[2]);
    let a = create(&f, 0).await;
    let b = create(&f, 0).await;
    let (ia, ib) = (a["session_id"].as_str().unwrap(), b["session_id"].as_str().unwrap());
    assert_ne!(ia, ib);
    let pa = [Prompt::new(0, 16, 16, Polarity::Positive)];
    let pb = [Prompt::new(1, 4, 4, Polarity::Positive), Prompt::new(0, 9, 9, Polarity::Negative)];
    let (_, alone) = call(&f.app, "POST", &format!("/sessions/{ia}/prompts"), Some(prompts_json(&pa))).await;
    call(&f.app, "POST", &format!("/sessions/{ib}/prompts"), Some(prompts_json(&pb))).await;
    let (_, again) = call(&f.app, "POST", &format!("/sessions/{ia}/prompts"), Some(prompts_json(&pa))).await;
    assert_eq!(alone, again);

    assert_eq!(f.state.session_count(), 2);
    let (s, _) = call(&f.app, "DELETE", &format!("/sessions/{ia}"), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = call(&f.app, "POST", &format!("/sessions/{ia}/prompts"), Some(prompts_json(&pa))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&f.app, "POST", &format!("/sessions/{ib}/prompts"), Some(prompts_json(&pb))).await;
    assert_eq!(s, StatusCode::OK);
}

/// Seconds for one cold create and the median of five repeated predicts.
async fn create_and_predict_secs(model: Model) -> (f64, f64) {
    let f = fixture_with(&[16], model);
    let t = Instant::now();
    let d = create(&f, 0).await;
    let create_secs = t.elapsed().as_secs_f64();
    let uri = format!("/sessions/{}/prompts", d["session_id"].as_str().unwrap());
    let p = prompts_json(&[Prompt::new(0, 16, 16, Polarity::Positive), Prompt::new(0, 2, 2, Polarity::Negative)]);
    let mut times = Vec::new();
    for _ in 0..5 {
        let t = Instant::now();
        let (s, _) = call(&f.app, "POST", &uri, Some(p.clone())).await;
        times.push(t.elapsed().as_secs_f64());
        assert_eq!(s, StatusCode::OK);
    }
    times.sort_by(f64::total_cmp);
    (create_secs, times[2])
}

/// Prompt updates reuse the cached embeddings: a far heavier encoder makes
/// session creation slower but leaves predict latency unchanged.
#[tokio::test]
async fn predict_latency_is_independent_of_encoder_cost() {
    let base = ModelConfig::default();
    let heavy = ModelConfig {
        encoder: EncoderConfig {
            channels: [128, 256, 256],
            ..base.encoder.clone()
        },
        ..base.clone()
    };
    let (create_base, predict_base) = create_and_predict_secs(Model::new(base, 11).unwrap()).await;
    let (create_heavy, predict_heavy) = create_and_predict_secs(Model::new(heavy, 11).unwrap()).await;
    println!(
        "default encoder: create {create_base:.4}s predict {predict_base:.4}s ratio {:.2}",
        create_base / predict_base
    );
    println!(
        "heavy encoder: create {create_heavy:.4}s predict {predict_heavy:.4}s ratio {:.2}",
        create_heavy / predict_heavy
    );
    assert!(create_heavy > 2.0 * create_base, "heavy encoder should dominate creation");
    assert!(predict_heavy < 1.5 * predict_base, "predict must not rerun the encoder");
}

#[test]
fn config_file_then_flag_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("service.json");
    std::fs::write(&path, r#"{"port": 9000, "data_dir": "/srv/scenes"}"#).unwrap();
    let cfg = ServiceConfig::from_file(&path).unwrap();
    assert_eq!(cfg.port, 9000);
    assert_eq!(cfg.data_dir, Path::new("/srv/scenes"));
    assert_eq!(cfg.checkpoint_dir, ServiceConfig::default().checkpoint_dir);
    let cfg = cfg.with_overrides(Some(9100), None, Some("/ck".into()));
    assert_eq!((cfg.port, cfg.checkpoint_dir.as_path()), (9100, Path::new("/ck")));
    assert_eq!(cfg.data_dir, Path::new("/srv/scenes"));
    std::fs::write(&path, r#"{"prot": 1}"#).unwrap();
    assert!(ServiceConfig::from_file(&path).is_err());
}
