mod common;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::Engine;
use conrf_cli::request::{PoseSpec, RenderRequest, RenderResponse, StyleSource};
use conrf_cli::service::{router, AppState};
use conrf_core::image::Image;
use conrf_core::pipeline::Renderer;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Ids {
    stylized: String,
    selected: String,
}

fn app() -> (Router, Ids) {
    let f = common::fixture();
    let stylized = Renderer::with_encoders(f.stylized.clone(), f.encoders.clone()).unwrap();
    let selected = Renderer::with_encoders(f.selected.clone(), f.encoders.clone()).unwrap();
    let ids = Ids {
        stylized: stylized.id().to_string(),
        selected: selected.id().to_string(),
    };
    (router(AppState::new([stylized, selected])), ids)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, body.to_vec())
}

async fn post_json(app: &Router, path: &str, body: &Value) -> (StatusCode, Vec<u8>) {
    let req = Request::post(path)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(serde_json::to_vec(body).unwrap()))
        .unwrap();
    call(app, req).await
}

async fn get(app: &Router, path: &str) -> (StatusCode, Value) {
    let (status, body) = call(app, Request::get(path).body(Body::empty()).unwrap()).await;
    (status, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

fn view_name() -> String {
    common::fixture().selected.manifest.views[1].name.clone()
}

fn error_kind(body: &[u8]) -> String {
    let v: Value = serde_json::from_slice(body).unwrap();
    v["error"]["kind"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn discovery_endpoints() {
    let (app, ids) = app();
    let (s, v) = get(&app, "/healthz").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");

    let (s, v) = get(&app, "/checkpoints").await;
    assert_eq!(s, StatusCode::OK);
    let listed: Vec<&str> = v.as_array().unwrap().iter().map(|c| c["id"].as_str().unwrap()).collect();
    assert!(listed.contains(&ids.stylized.as_str()) && listed.contains(&ids.selected.as_str()));
    let local: Vec<bool> = v.as_array().unwrap().iter().map(|c| c["local"].as_bool().unwrap()).collect();
    assert_eq!(local.iter().filter(|&&l| l).count(), 1);

    let dataset = &common::fixture().scene.dataset;
    let (s, v) = get(&app, &format!("/views/{}", dataset.name)).await;
    assert_eq!(s, StatusCode::OK);
    let views = v.as_array().unwrap();
    assert_eq!(views.len(), dataset.len());
    for (named, view) in views.iter().zip(&dataset.views) {
        assert_eq!(named["name"], view.name.as_str());
        let camera: conrf_core::scene_io::Camera = serde_json::from_value(named["camera"].clone()).unwrap();
        assert_eq!(camera, view.camera);
    }
    let (s, _) = get(&app, "/views/nowhere").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn minimal_text_request_renders_requested_size() {
    let (app, ids) = app();
    let body = json!({
        "checkpoint": ids.stylized,
        "pose": {"view": view_name()},
        "style": {"text": "red and blue stripes"},
        "width": 16,
        "height": 16,
    });
    let (s, bytes) = post_json(&app, "/render", &body).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    let resp: RenderResponse = serde_json::from_slice(&bytes).unwrap();
    assert_eq!((resp.width, resp.height), (16, 16));
    assert_eq!(resp.checkpoint, ids.stylized);
    assert!(resp.mask_overlay.is_none());
    assert!(resp.timings.contains_key("render"));
    let png = base64::engine::general_purpose::STANDARD.decode(&resp.image).unwrap();
    let img = Image::from_png_bytes(&png).unwrap();
    assert_eq!((img.width(), img.height()), (16, 16));

    let (_, again) = post_json(&app, "/render", &body).await;
    let again: RenderResponse = serde_json::from_slice(&again).unwrap();
    assert_eq!(again.image, resp.image);
}

#[tokio::test]
async fn local_request_returns_mask_overlay() {
    let (app, ids) = app();
    let caption = common::fixture().scene.objects[0].caption.clone();
    let body = json!({
        "checkpoint": ids.selected,
        "pose": {"view": view_name()},
        "style": {"text": "red and blue stripes"},
        "style2": {"text": "green and white dots"},
        "content": caption,
        "threshold": 0.2,
    });
    let (s, bytes) = post_json(&app, "/render", &body).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    let resp: RenderResponse = serde_json::from_slice(&bytes).unwrap();
    let overlay = base64::engine::general_purpose::STANDARD
        .decode(resp.mask_overlay.unwrap())
        .unwrap();
    let overlay = Image::from_png_bytes(&overlay).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (resp.width, resp.height));
    assert!((0.0..=1.0).contains(&resp.mask_coverage.unwrap()));
}

#[tokio::test]
async fn invalid_requests_are_400() {
    let (app, ids) = app();
    let two_styles = json!({
        "checkpoint": ids.selected,
        "pose": {"view": view_name()},
        "style": {"text": "red"},
        "style2": {"text": "blue"},
    });
    let (s, body) = post_json(&app, "/render", &two_styles).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_kind(&body), "invalid_request");

    let cases = [
        json!({"checkpoint": ids.stylized, "pose": {"view": view_name()}}),
        json!({"checkpoint": ids.stylized, "pose": {"view": "no-such-view"}, "style": {"text": "red"}}),
        json!({"checkpoint": ids.stylized, "pose": {"view": view_name()}, "style": {"text": "red"}, "width": 16}),
        json!({"checkpoint": ids.stylized, "pose": {"view": view_name()}, "style": {"stats": {"mean": [0.0], "std": [1.0]}}}),
        json!({"checkpoint": ids.stylized, "pose": {"view": view_name()}, "style": {"image_id": "missing"}}),
        json!({"checkpoint": ids.stylized, "pose": {"view": view_name()}, "style": {"text": "red"}, "width": 16, "height": 8}),
        json!({"pose": {"view": view_name()}, "style": {"text": "red"}}),
    ];
    for case in cases {
        let (s, body) = post_json(&app, "/render", &case).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{case}: {}", String::from_utf8_lossy(&body));
    }
    let req = Request::post("/render").body(Body::from("{not json")).unwrap();
    let (s, body) = call(&app, req).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_kind(&body), "invalid_request");
}

#[tokio::test]
async fn unknown_checkpoint_is_404_and_missing_head_is_422() {
    let (app, ids) = app();
    let (s, body) = post_json(
        &app,
        "/render",
        &json!({"checkpoint": "nope", "pose": {"view": view_name()}, "style": {"text": "red"}}),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(error_kind(&body), "not_found");

    let local = json!({
        "checkpoint": ids.stylized,
        "pose": {"view": view_name()},
        "style": {"text": "red"},
        "style2": {"text": "blue"},
        "content": "red ball",
    });
    let (s, body) = post_json(&app, "/render", &local).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_kind(&body), "capability");
}

#[tokio::test]
async fn uploaded_style_matches_inline_image_and_png_negotiation() {
    let (app, ids) = app();
    let style = Image::from_fn(24, 24, |x, y| if (x / 4 + y / 4) % 2 == 0 { [0.9, 0.2, 0.1] } else { [0.1, 0.3, 0.8] });
    let png = style.to_png_bytes().unwrap();
    let (s, body) = call(&app, Request::post("/styles").body(Body::from(png.clone())).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let id = serde_json::from_slice::<Value>(&body).unwrap()["id"].as_str().unwrap().to_string();
    let (_, listed) = get(&app, "/styles").await;
    assert!(listed.as_array().unwrap().iter().any(|v| v == id.as_str()));

    let mut by_id = RenderRequest::new(PoseSpec::View(view_name()), Some(StyleSource::ImageId(id)));
    by_id.checkpoint = Some(ids.stylized.clone());
    let mut inline = by_id.clone();
    inline.style = Some(StyleSource::ImageBase64(base64::engine::general_purpose::STANDARD.encode(&png)));
    let render_png = |r: RenderRequest| {
        Request::post("/render")
            .header(header::ACCEPT, "image/png")
            .body(Body::from(serde_json::to_vec(&r).unwrap()))
            .unwrap()
    };
    let resp = app.clone().oneshot(render_png(by_id.clone())).await.unwrap();
    assert_eq!(resp.headers()[header::CONTENT_TYPE], "image/png");
    assert_eq!(resp.headers()["x-conrf-checkpoint"], ids.stylized.as_str());
    let a = axum::body::to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    let (_, b) = call(&app, render_png(inline)).await;
    assert_eq!(a.to_vec(), b);

    let (s, _) = call(&app, Request::post("/styles").body(Body::from("not an image")).unwrap()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_agree() {
    let (app, ids) = app();
    let body = json!({
        "checkpoint": ids.selected,
        "pose": {"view": view_name()},
        "style": {"text": "orange and teal waves"},
    });
    let tasks: Vec<_> = (0..4)
        .map(|_| {
            let app = app.clone();
            let body = body.clone();
            tokio::spawn(async move { post_json(&app, "/render", &body).await })
        })
        .collect();
    let mut images = Vec::new();
    for t in tasks {
        let (s, bytes) = t.await.unwrap();
        assert_eq!(s, StatusCode::OK);
        images.push(serde_json::from_slice::<RenderResponse>(&bytes).unwrap().image);
    }
    assert!(images.windows(2).all(|w| w[0] == w[1]));
}
