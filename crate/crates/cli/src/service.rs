//! JSON-over-HTTP prediction and optimization against frozen models.
//!
//! Routes: `GET /healthz`, `GET /studies`, `POST /predict`, `POST /optimize`.
//! Images travel as base64 PNG, float maps as base64 little-endian f32 with a
//! shape. Handlers never mutate the shared state.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ndarray::{Array2, Array3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

use sofa_core::generator::GeneratorState;
use sofa_core::io::{
    decode_rgb_png, encode_rgb_png, f32_from_le_bytes, f32_to_le_bytes, list_study_ids, read_study,
    study_dir,
};
use sofa_core::optimize::{optimize_from, OptimizerConfig, RiskModel, StepRecord, StopReason};
use sofa_core::recurrence::{
    aggregate_views, embed_study, predict_logit, probability, ClassifierState,
};
use sofa_core::{validate_study, ParamMaps, ParamRanges, RgbImage, Study, ViewId, ViewSample};

use crate::commands::{load_classifier, load_generator};

/// Largest step count one `/optimize` call may request.
pub const MAX_STEPS: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelVersion {
    pub generator_hash: String,
    pub classifier_hash: String,
}

pub struct Models {
    pub generator: GeneratorState,
    pub classifier: ClassifierState,
    pub risk: RiskModel,
    pub version: ModelVersion,
}

impl Models {
    pub fn new(generator: GeneratorState, classifier: ClassifierState) -> anyhow::Result<Self> {
        let risk = RiskModel::new(&generator, &classifier)?;
        let version = ModelVersion {
            generator_hash: generator.hash()?,
            classifier_hash: classifier.hash()?,
        };
        Ok(Self {
            generator: generator.frozen()?,
            classifier,
            risk,
            version,
        })
    }
}

pub struct AppState {
    pub cohort: Option<PathBuf>,
    pub models: Option<Models>,
    pub optimizer: OptimizerConfig,
}

impl AppState {
    /// Models load only when both checkpoints are given.
    pub fn load(
        cohort: Option<&Path>,
        generator: Option<&Path>,
        classifier: Option<&Path>,
        optimizer: OptimizerConfig,
    ) -> anyhow::Result<Self> {
        let models = match (generator, classifier) {
            (Some(g), Some(c)) => Some(Models::new(load_generator(g)?, load_classifier(c)?)?),
            (None, None) => None,
            _ => anyhow::bail!("--generator and --classifier must be given together"),
        };
        Ok(Self {
            cohort: cohort.map(Path::to_path_buf),
            models,
            optimizer,
        })
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.message })),
        )
            .into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Row-major float array with its shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FloatMap {
    pub shape: Vec<usize>,
    /// Base64 of little-endian f32 values.
    pub data: String,
}

impl FloatMap {
    pub fn from_values(shape: Vec<usize>, values: impl IntoIterator<Item = f32>) -> Self {
        Self {
            shape,
            data: B64.encode(f32_to_le_bytes(values)),
        }
    }

    pub fn from_array3(a: &Array3<f32>) -> Self {
        let (c, h, w) = a.dim();
        Self::from_values(vec![c, h, w], a.iter().copied())
    }

    pub fn from_array2(a: &Array2<f32>) -> Self {
        let (h, w) = a.dim();
        Self::from_values(vec![h, w], a.iter().copied())
    }

    pub fn values(&self) -> Result<Vec<f32>, ApiError> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| ApiError::bad_request(format!("float map: {e}")))?;
        let v = f32_from_le_bytes(&bytes).map_err(|e| ApiError::bad_request(e.to_string()))?;
        if v.len() != self.shape.iter().product::<usize>() {
            return Err(ApiError::bad_request(format!(
                "float map has {} values for shape {:?}",
                v.len(),
                self.shape
            )));
        }
        Ok(v)
    }

    pub fn to_array3(&self) -> Result<Array3<f32>, ApiError> {
        let [c, h, w] = self.shape[..] else {
            return Err(ApiError::bad_request(format!(
                "expected a 3-d map, got shape {:?}",
                self.shape
            )));
        };
        Array3::from_shape_vec((c, h, w), self.values()?)
            .map_err(|e| ApiError::bad_request(e.to_string()))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewInput {
    pub view: ViewId,
    pub pre_png: String,
    /// Normalized `[4, H, W]` parameter maps.
    pub params: FloatMap,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyInput {
    #[serde(default)]
    pub id: Option<String>,
    pub views: Vec<ViewInput>,
    #[serde(default)]
    pub ranges: Option<ParamRanges>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewParams {
    pub view: ViewId,
    pub params: FloatMap,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictRequest {
    pub study_id: Option<String>,
    pub study: Option<StudyInput>,
    /// User-edited maps replacing the study's own for the listed views.
    pub params: Option<Vec<ViewParams>>,
    /// Rejects the request with 409 unless the loaded models match.
    pub model: Option<ModelVersion>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViewPrediction {
    pub view: ViewId,
    pub post_png: String,
    pub scar: FloatMap,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictResponse {
    pub risk: f64,
    pub logit: f64,
    pub views: Vec<ViewPrediction>,
    pub model: ModelVersion,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeRequest {
    pub study_id: Option<String>,
    pub study: Option<StudyInput>,
    /// Starting maps, e.g. the previous result or a user edit. The mask and
    /// proximal term always refer to the study's own plan.
    pub params: Option<Vec<ViewParams>>,
    pub steps: Option<usize>,
    pub step_size: Option<f64>,
    pub reg_weight: Option<f64>,
    pub closing_radius: Option<usize>,
    pub stop_tolerance: Option<f64>,
    pub patience: Option<usize>,
    pub model: Option<ModelVersion>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViewMask {
    pub view: ViewId,
    pub mask: FloatMap,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizeResponse {
    pub model: ModelVersion,
    pub config: OptimizerConfig,
    pub steps: Vec<StepRecord>,
    pub initial_risk: f64,
    pub final_risk: f64,
    pub best_step: usize,
    pub no_improvement: bool,
    pub stop: StopReason,
    pub params: Vec<ViewParams>,
    /// Optimized minus original.
    pub diffs: Vec<ViewParams>,
    pub masks: Vec<ViewMask>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudyEntry {
    pub id: String,
    pub label: Option<u8>,
    pub thumbnail_png: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub models_loaded: bool,
    pub cohort_loaded: bool,
    pub model: Option<ModelVersion>,
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body)
        .map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))
}

fn models<'a>(
    state: &'a AppState,
    expected: Option<&ModelVersion>,
) -> Result<&'a Models, ApiError> {
    let m = state
        .models
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "models not loaded"))?;
    if let Some(v) = expected {
        if *v != m.version {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                format!(
                    "model mismatch: loaded generator {} classifier {}",
                    m.version.generator_hash, m.version.classifier_hash
                ),
            ));
        }
    }
    Ok(m)
}

fn cohort_study(state: &AppState, id: &str) -> Result<Study, ApiError> {
    let dir = state
        .cohort
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no cohort mounted"))?;
    let valid = !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if !valid {
        return Err(ApiError::bad_request(format!("invalid study id {id:?}")));
    }
    let sdir = study_dir(dir, id);
    if !sdir.is_dir() {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            format!("unknown study {id}"),
        ));
    }
    read_study(&sdir).map_err(ApiError::internal)
}

fn inline_study(input: &StudyInput) -> Result<Study, ApiError> {
    let ranges = input.ranges.unwrap_or_default();
    let samples = input
        .views
        .iter()
        .map(|v| {
            let png = B64
                .decode(&v.pre_png)
                .map_err(|e| ApiError::bad_request(format!("{}: pre_png: {e}", v.view)))?;
            let pre = decode_rgb_png(&png)
                .map_err(|e| ApiError::bad_request(format!("{}: pre_png: {e}", v.view)))?;
            let params = ParamMaps::new(v.params.to_array3()?, ranges)
                .map_err(|e| ApiError::bad_request(format!("{}: params: {e}", v.view)))?;
            Ok(ViewSample {
                view: v.view,
                pre,
                params,
                target: None,
            })
        })
        .collect::<Result<Vec<_>, ApiError>>()?;
    Ok(Study {
        id: input.id.clone().unwrap_or_else(|| "inline".into()),
        samples,
        label: None,
        meta: Default::default(),
    })
}

/// The referenced or inline study, validated against the model resolution.
fn resolve_study(
    state: &AppState,
    m: &Models,
    id: Option<&String>,
    inline: Option<&StudyInput>,
) -> Result<Study, ApiError> {
    let study = match (id, inline) {
        (Some(id), None) => cohort_study(state, id)?,
        (None, Some(s)) => inline_study(s)?,
        _ => {
            return Err(ApiError::bad_request(
                "give exactly one of study_id and study",
            ))
        }
    };
    let res = m.generator.config().resolution;
    let report = validate_study(&study, res);
    if !report.is_valid() {
        let text: Vec<String> = report.issues.iter().map(|i| i.to_string()).collect();
        return Err(ApiError::bad_request(text.join("; ")));
    }
    Ok(study)
}

/// The study's maps with `edits` substituted. Edited values must be finite and
/// inside `[0, 1]` (422 otherwise).
fn edited_params(
    study: &Study,
    edits: Option<&Vec<ViewParams>>,
) -> Result<Vec<ParamMaps>, ApiError> {
    let mut params = study
        .params()
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    for e in edits.into_iter().flatten() {
        let a = e.params.to_array3()?;
        let slot = &mut params[e.view.index()];
        if a.dim() != slot.channels.dim() {
            return Err(ApiError::bad_request(format!(
                "{}: params shape {:?}, expected {:?}",
                e.view,
                a.dim(),
                slot.channels.dim()
            )));
        }
        let bad = a.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
        if bad > 0 {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                format!("{}: {bad} parameter values outside [0, 1]", e.view),
            ));
        }
        slot.channels = a;
    }
    Ok(params)
}

pub fn predict(state: &AppState, req: &PredictRequest) -> Result<PredictResponse, ApiError> {
    let m = models(state, req.model.as_ref())?;
    let study = resolve_study(state, m, req.study_id.as_ref(), req.study.as_ref())?;
    let params = edited_params(&study, req.params.as_ref())?;
    let study = study.with_params(&params).map_err(ApiError::internal)?;
    let samples = study.ordered_samples().map_err(ApiError::internal)?;
    let preds = m.generator.predict(&samples).map_err(ApiError::internal)?;
    let z = aggregate_views(&embed_study(&study, &m.generator).map_err(ApiError::internal)?)
        .map_err(ApiError::internal)?;
    let logit = predict_logit(&z, &m.classifier).map_err(ApiError::internal)?;
    let views = samples
        .iter()
        .zip(preds)
        .map(|(s, (post, scar))| {
            Ok(ViewPrediction {
                view: s.view,
                post_png: B64.encode(encode_rgb_png(&post).map_err(ApiError::internal)?),
                scar: FloatMap::from_array2(&scar.0),
            })
        })
        .collect::<Result<_, ApiError>>()?;
    Ok(PredictResponse {
        risk: probability(logit),
        logit,
        views,
        model: m.version.clone(),
    })
}

pub fn optimize(state: &AppState, req: &OptimizeRequest) -> Result<OptimizeResponse, ApiError> {
    let m = models(state, req.model.as_ref())?;
    let study = resolve_study(state, m, req.study_id.as_ref(), req.study.as_ref())?;
    let anchor = study.params().map_err(ApiError::internal)?;
    let start = edited_params(&study, req.params.as_ref())?;
    let mut cfg = state.optimizer.clone();
    if let Some(s) = req.steps {
        cfg.max_steps = s;
    }
    if let Some(v) = req.step_size {
        cfg.step_size = v;
    }
    if let Some(v) = req.reg_weight {
        cfg.reg_weight = v;
    }
    if let Some(v) = req.closing_radius {
        cfg.closing_radius = v;
    }
    if let Some(v) = req.stop_tolerance {
        cfg.stop_tolerance = v;
    }
    if let Some(v) = req.patience {
        cfg.patience = v;
    }
    if cfg.max_steps > MAX_STEPS {
        return Err(ApiError::bad_request(format!(
            "steps {} exceeds the limit of {MAX_STEPS}",
            cfg.max_steps
        )));
    }
    cfg.validate()
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let trace =
        optimize_from(&study, &start, &anchor, &cfg, &m.risk).map_err(ApiError::internal)?;
    let diffs = trace.diffs().map_err(ApiError::internal)?;
    let views = ViewId::ALL;
    Ok(OptimizeResponse {
        model: m.version.clone(),
        config: cfg,
        initial_risk: trace.initial_risk(),
        final_risk: trace.final_risk(),
        best_step: trace.best_step,
        no_improvement: trace.no_improvement,
        stop: trace.stop.clone(),
        params: views
            .iter()
            .zip(&trace.best)
            .map(|(&view, p)| ViewParams {
                view,
                params: FloatMap::from_array3(&p.channels),
            })
            .collect(),
        diffs: views
            .iter()
            .zip(&diffs)
            .map(|(&view, d)| ViewParams {
                view,
                params: FloatMap::from_array3(d),
            })
            .collect(),
        masks: views
            .iter()
            .zip(&trace.masks)
            .map(|(&view, mk)| ViewMask {
                view,
                mask: FloatMap::from_array2(&mk.0),
            })
            .collect(),
        steps: trace.steps,
    })
}

pub fn list_studies(state: &AppState) -> Result<Vec<StudyEntry>, ApiError> {
    let dir = state
        .cohort
        .as_ref()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "no cohort mounted"))?;
    let ids = list_study_ids(dir).map_err(ApiError::internal)?;
    ids.iter()
        .map(|id| {
            let s = read_study(&study_dir(dir, id)).map_err(ApiError::internal)?;
            let thumb = s
                .ordered_samples()
                .ok()
                .and_then(|v| v.first().map(|x| x.pre.clone()))
                .unwrap_or_else(|| RgbImage::zeros(1, 1));
            Ok(StudyEntry {
                id: s.id.clone(),
                label: s.label,
                thumbnail_png: B64.encode(encode_rgb_png(&thumb).map_err(ApiError::internal)?),
            })
        })
        .collect()
}

async fn blocking<T, F>(state: Arc<AppState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(ApiError::internal)?
        .map(Json)
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        models_loaded: state.models.is_some(),
        cohort_loaded: state.cohort.is_some(),
        model: state.models.as_ref().map(|m| m.version.clone()),
    })
}

async fn studies(State(state): State<Arc<AppState>>) -> ApiResult<Vec<StudyEntry>> {
    blocking(state, list_studies).await
}

async fn predict_route(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<PredictResponse> {
    let req: PredictRequest = parse(&body)?;
    blocking(state, move |s| predict(s, &req)).await
}

async fn optimize_route(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<OptimizeResponse> {
    let req: OptimizeRequest = parse(&body)?;
    blocking(state, move |s| optimize(s, &req)).await
}

pub fn router(state: Arc<AppState>, cors_origin: Option<&str>) -> anyhow::Result<Router> {
    let origin = match cors_origin {
        Some(o) => AllowOrigin::exact(HeaderValue::from_str(o)?),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Ok(Router::new()
        .route("/healthz", get(healthz))
        .route("/studies", get(studies))
        .route("/predict", post(predict_route))
        .route("/optimize", post(optimize_route))
        .layer(cors)
        .with_state(state))
}

pub async fn serve(
    state: AppState,
    addr: SocketAddr,
    cors_origin: Option<&str>,
) -> anyhow::Result<()> {
    let app = router(Arc::new(state), cors_origin)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await?;
    Ok(())
}
