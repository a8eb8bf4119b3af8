mod fixture;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use sofa_cli::service::{
    router, AppState, FloatMap, Health, OptimizeResponse, PredictResponse, StudyEntry, StudyInput,
    ViewInput, ViewParams,
};
use sofa_core::io::{encode_rgb_png, read_cohort};
use sofa_core::optimize::{optimize_params, OptimizerConfig, RiskModel};
use sofa_core::{Study, ViewId};

use fixture::fixture;

fn state(cohort: bool, models: bool) -> AppState {
    let f = fixture();
    let (g, c) = if models {
        (Some(f.generator.as_path()), Some(f.classifier.as_path()))
    } else {
        (None, None)
    };
    let cohort = cohort.then_some(f.cohort.as_path());
    AppState::load(cohort, g, c, OptimizerConfig::default()).unwrap()
}

async fn call(
    state: AppState,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let app = router(Arc::new(state), None).unwrap();
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn post<T: serde::de::DeserializeOwned>(uri: &str, body: Value) -> T {
    let (status, v) = call(state(true, true), "POST", uri, Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    serde_json::from_value(v).unwrap()
}

fn first_study() -> Study {
    read_cohort(&fixture().cohort).unwrap().remove(0)
}

fn inline(study: &Study) -> StudyInput {
    StudyInput {
        id: Some(study.id.clone()),
        views: study
            .samples
            .iter()
            .map(|s| ViewInput {
                view: s.view,
                pre_png: B64.encode(encode_rgb_png(&s.pre).unwrap()),
                params: FloatMap::from_array3(&s.params.channels),
            })
            .collect(),
        ranges: Some(study.samples[0].params.ranges),
    }
}

fn filled_params(study: &Study, value: f32) -> Vec<ViewParams> {
    study
        .samples
        .iter()
        .map(|s| ViewParams {
            view: s.view,
            params: FloatMap::from_array3(&s.params.channels.mapv(|_| value)),
        })
        .collect()
}

#[tokio::test]
async fn health_reports_loaded_state() {
    let (status, v) = call(state(true, true), "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    let h: Health = serde_json::from_value(v).unwrap();
    assert!(h.models_loaded && h.cohort_loaded);
    assert!(h.model.is_some());
    let (_, v) = call(state(false, false), "GET", "/healthz", None).await;
    let h: Health = serde_json::from_value(v).unwrap();
    assert!(!h.models_loaded && !h.cohort_loaded);
}

#[tokio::test]
async fn studies_are_listed_in_order() {
    let (status, v) = call(state(true, false), "GET", "/studies", None).await;
    assert_eq!(status, StatusCode::OK);
    let list: Vec<StudyEntry> = serde_json::from_value(v).unwrap();
    assert_eq!(list.len(), fixture::STUDIES);
    let ids: Vec<&str> = list.iter().map(|s| s.id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    assert!(list
        .iter()
        .all(|s| s.label.is_some() && !s.thumbnail_png.is_empty()));
}

#[tokio::test]
async fn empty_cohort_lists_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let st = AppState::load(Some(dir.path()), None, None, OptimizerConfig::default()).unwrap();
    let (status, v) = call(st, "GET", "/studies", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v, json!([]));
}

#[tokio::test]
async fn missing_cohort_is_unavailable() {
    let (status, v) = call(state(false, false), "GET", "/studies", None).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(v["error"].is_string());
}

#[tokio::test]
async fn predict_returns_probability_and_six_views() {
    let id = first_study().id;
    let r: PredictResponse = post("/predict", json!({ "study_id": id })).await;
    assert!((0.0..=1.0).contains(&r.risk));
    assert_eq!(r.views.len(), 6);
    let n = fixture::RESOLUTION;
    assert!(r.views.iter().all(|v| v.scar.shape == vec![n, n]));
}

#[tokio::test]
async fn inline_study_matches_cohort_study() {
    let study = first_study();
    let by_id: PredictResponse = post("/predict", json!({ "study_id": study.id })).await;
    let by_value: PredictResponse = post("/predict", json!({ "study": inline(&study) })).await;
    assert_eq!(by_id.logit, by_value.logit);
}

#[tokio::test]
async fn edited_params_change_the_risk() {
    let study = first_study();
    let none: PredictResponse = post(
        "/predict",
        json!({ "study_id": study.id, "params": filled_params(&study, 0.0) }),
    )
    .await;
    let dense: PredictResponse = post(
        "/predict",
        json!({ "study_id": study.id, "params": filled_params(&study, 1.0) }),
    )
    .await;
    assert_ne!(none.logit, dense.logit);
}

#[tokio::test]
async fn missing_view_is_named() {
    let study = first_study();
    let mut input = inline(&study);
    input.views.retain(|v| v.view != ViewId::Superior);
    let (status, v) = call(
        state(true, true),
        "POST",
        "/predict",
        Some(json!({ "study": input })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(
        v["error"]
            .as_str()
            .unwrap()
            .contains("missing view superior"),
        "{v}"
    );
}

#[tokio::test]
async fn malformed_and_unknown_requests_are_rejected() {
    let st = || state(true, true);
    let (status, _) = call(st(), "POST", "/predict", Some(json!({ "study_id": 3 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(
        st(),
        "POST",
        "/predict",
        Some(json!({ "study_id": "../etc" })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(
        st(),
        "POST",
        "/predict",
        Some(json!({ "study_id": "nope" })),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let id = first_study().id;
    let (status, _) = call(
        st(),
        "POST",
        "/optimize",
        Some(json!({ "study_id": id, "steps": 1000 })),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn model_mismatch_conflicts() {
    let id = first_study().id;
    let model = json!({ "generator_hash": "0", "classifier_hash": "0" });
    let (status, _) = call(
        state(true, true),
        "POST",
        "/predict",
        Some(json!({ "study_id": id, "model": model })),
    )
    .await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn missing_models_are_unavailable() {
    let id = first_study().id;
    let (status, _) = call(
        state(true, false),
        "POST",
        "/predict",
        Some(json!({ "study_id": id })),
    )
    .await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn out_of_range_params_are_unprocessable() {
    let study = first_study();
    let body = json!({ "study_id": study.id, "params": filled_params(&study, 1.5) });
    let (status, _) = call(state(true, true), "POST", "/optimize", Some(body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn zero_steps_scores_the_start() {
    let id = first_study().id;
    let p: PredictResponse = post("/predict", json!({ "study_id": id })).await;
    let o: OptimizeResponse = post("/optimize", json!({ "study_id": id, "steps": 0 })).await;
    assert_eq!(o.steps.len(), 1);
    assert!(
        (o.initial_risk - p.risk).abs() < 1e-6,
        "{} vs {}",
        o.initial_risk,
        p.risk
    );
    assert_eq!(o.final_risk, o.initial_risk);
}

#[tokio::test]
async fn chained_calls_match_one_long_call() {
    let id = first_study().id;
    let long: OptimizeResponse = post(
        "/optimize",
        json!({ "study_id": id, "steps": 20, "patience": 100 }),
    )
    .await;
    let first: OptimizeResponse = post(
        "/optimize",
        json!({ "study_id": id, "steps": 10, "patience": 100 }),
    )
    .await;
    let second: OptimizeResponse = post(
        "/optimize",
        json!({ "study_id": id, "steps": 10, "patience": 100, "params": first.params }),
    )
    .await;
    assert!(
        (second.final_risk - long.final_risk).abs() < 1e-5,
        "{} vs {}",
        second.final_risk,
        long.final_risk
    );
}

#[tokio::test]
async fn heavy_regularization_keeps_the_plan() {
    let study = first_study();
    let o: OptimizeResponse = post(
        "/optimize",
        json!({ "study_id": study.id, "steps": 5, "reg_weight": 1e6 }),
    )
    .await;
    for (vp, s) in o.params.iter().zip(study.ordered_samples().unwrap()) {
        let got = vp.params.values().unwrap();
        let worst = got
            .iter()
            .zip(s.params.channels.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 1e-3, "{}: {worst}", vp.view);
    }
}

#[tokio::test]
async fn service_matches_library_optimizer() {
    let study = first_study();
    let st = state(true, true);
    let m = st.models.as_ref().unwrap();
    let risk = RiskModel::new(&m.generator, &m.classifier).unwrap();
    let cfg = OptimizerConfig {
        max_steps: 8,
        ..OptimizerConfig::default()
    };
    let direct = optimize_params(&study, &cfg, &risk).unwrap();
    let o: OptimizeResponse = post("/optimize", json!({ "study_id": study.id, "steps": 8 })).await;
    // JSON float parsing may move the last bit.
    assert!((o.final_risk - direct.final_risk()).abs() < 1e-12);
    assert_eq!(o.steps.len(), direct.steps.len());
    for (a, b) in o.steps.iter().zip(&direct.steps) {
        assert!((a.risk - b.risk).abs() < 1e-12 && (a.loss - b.loss).abs() < 1e-12);
    }
}
