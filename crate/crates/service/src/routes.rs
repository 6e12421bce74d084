use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use chrono::{NaiveDate, Utc};
use culicid_core::bundle::{BundleError, ModelBundle};
use culicid_core::catalog::{
    AlertRecord, Decision, ImageRef, Location, Prediction, Review, Severity, SpecimenInfo, SpecimenRecord,
};
use culicid_core::explain::cam;
use culicid_core::image::{decode_image, encode_png, ImageTensor};
use culicid_core::{Species, TaxonLabel};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::ApiError;
use crate::state::{AlertEvent, AppState};

type AppResult<T> = Result<T, ApiError>;
type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    let protected = Router::new()
        .route("/specimens", post(ingest))
        .route("/specimens/{id}", get(specimen))
        .route("/review/pending", get(pending))
        .route("/review/{id}", get(review_item))
        .route("/review/{id}/decision", post(decide))
        .route("/export/training-corpus", get(export_corpus))
        .route("/summary", get(summary))
        .route("/alerts", get(alerts))
        .route("/model", post(swap_model))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/health", get(health))
        .merge(protected)
        .layer(DefaultBodyLimit::max(256 * 1024 * 1024))
        .with_state(state)
}

async fn require_token(State(state): State<Shared>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.config.auth_token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response();
        }
    }
    next.run(req).await
}

async fn health(State(state): State<Shared>) -> Json<Value> {
    let model = state.model();
    Json(json!({
        "status": "ok",
        "model_loaded": model.is_some(),
        "model_id": model.as_ref().map(|m| m.id().to_owned()),
        "mode": state.config.mode,
    }))
}

// ---------------------------------------------------------------------------
// Ingest
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestMetadata {
    specimen_id: Option<String>,
    trap_id: Option<String>,
    capture_date: Option<NaiveDate>,
    location: Option<Location>,
    label: Option<String>,
    #[serde(default)]
    images: Vec<ImageMetadata>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageMetadata {
    phone: Option<String>,
    background: Option<String>,
    orientation: Option<String>,
}

#[derive(Debug, Serialize)]
struct IngestResponse {
    specimen_id: String,
    model_id: String,
    label: TaxonLabel,
    confidence: f64,
    probabilities: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    genus_probabilities: Option<Vec<f64>>,
    alert: Option<AlertRecord>,
    review_requested: bool,
    image_ids: Vec<String>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
        && !id.starts_with('.')
}

fn parse_species(s: &str) -> AppResult<TaxonLabel> {
    s.parse::<Species>()
        .map(TaxonLabel::from)
        .map_err(|e| ApiError::bad_request(format!("unknown species {:?}", e.0)))
}

struct Upload {
    name: String,
    bytes: Bytes,
}

struct Analysis {
    prediction: culicid_core::bundle::BundlePrediction,
    cams: Vec<Vec<u8>>,
}

fn analyse(bundle: &ModelBundle, state: &AppState, uploads: &[Upload]) -> AppResult<Analysis> {
    let mut prepared: Vec<ImageTensor> = Vec::with_capacity(uploads.len());
    for u in uploads {
        let raw = decode_image(&u.bytes).map_err(|e| ApiError::unprocessable(format!("image {:?}: {e}", u.name)))?;
        prepared.push(bundle.prepare(&raw).map_err(|e| ApiError::unprocessable(format!("image {:?}: {e}", u.name)))?);
    }
    let mode = state.config.mode;
    let prediction = bundle.classify(mode, &prepared).map_err(model_error)?;
    let (head, class) = bundle.explaining_head(mode, prediction.label).map_err(model_error)?;
    let cams = prepared
        .iter()
        .map(|img| {
            let r = cam(head, bundle.backbone(), img, Some(class)).map_err(ApiError::internal)?;
            encode_png(&r.overlay).map_err(ApiError::internal)
        })
        .collect::<AppResult<Vec<_>>>()?;
    Ok(Analysis { prediction, cams })
}

fn model_error(e: BundleError) -> ApiError {
    match e {
        BundleError::MissingHead { .. } => ApiError::unavailable(e.to_string()),
        other => ApiError::internal(other),
    }
}

fn extension(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(b"\x89PNG") {
        "png"
    } else {
        "pnm"
    }
}

async fn ingest(State(state): State<Shared>, mut multipart: Multipart) -> AppResult<(StatusCode, Json<IngestResponse>)> {
    let mut meta = IngestMetadata::default();
    let mut uploads = Vec::new();
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request(format!("malformed multipart body: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_owned();
        let file_name = field.file_name().map(str::to_owned);
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::bad_request(format!("malformed multipart body: {e}")))?;
        match name.as_str() {
            "metadata" => {
                meta = serde_json::from_slice(&bytes).map_err(|e| ApiError::bad_request(format!("metadata: {e}")))?;
            }
            "image" | "images" => uploads.push(Upload {
                name: file_name.unwrap_or_else(|| format!("image {}", uploads.len() + 1)),
                bytes,
            }),
            other => return Err(ApiError::bad_request(format!("unexpected field {other:?}"))),
        }
    }
    let max = state.config.max_images;
    if uploads.is_empty() || uploads.len() > max {
        return Err(ApiError::bad_request(format!("expected 1 to {max} images, got {}", uploads.len())));
    }
    if !meta.images.is_empty() && meta.images.len() != uploads.len() {
        return Err(ApiError::bad_request("metadata.images must describe every image or none"));
    }
    if let Some(id) = &meta.specimen_id {
        if !valid_id(id) {
            return Err(ApiError::bad_request(format!("invalid specimen id {id:?}")));
        }
    }
    let field_label = meta.label.as_deref().map(parse_species).transpose()?;
    let bundle = state.model().ok_or_else(|| ApiError::unavailable("no model loaded"))?;

    let uploads = Arc::new(uploads);
    let Analysis { prediction, cams } = {
        let (state, bundle, uploads) = (state.clone(), bundle.clone(), uploads.clone());
        tokio::task::spawn_blocking(move || analyse(&bundle, &state, &uploads))
            .await
            .map_err(ApiError::internal)??
    };

    let now = Utc::now();
    let specimen_id = meta.specimen_id.clone().unwrap_or_else(|| {
        let mut h = Sha256::new();
        for u in uploads.iter() {
            h.update(&u.bytes);
        }
        h.update(now.to_rfc3339().as_bytes());
        let d = h.finalize();
        format!("S{}", d[..6].iter().map(|b| format!("{b:02x}")).collect::<String>())
    });

    let _guard = state.write_lock.lock().await;
    let existing = state.records.load()?;
    if existing.get(&specimen_id).is_some() {
        return Err(ApiError::conflict(format!("specimen {specimen_id} already exists")));
    }
    let image_dir = PathBuf::from("images").join(&specimen_id);
    let cam_dir = PathBuf::from("cams").join(&specimen_id);
    std::fs::create_dir_all(state.store_dir().join(&image_dir))?;
    std::fs::create_dir_all(state.store_dir().join(&cam_dir))?;
    let mut images = Vec::with_capacity(uploads.len());
    for (i, (u, overlay)) in uploads.iter().zip(&cams).enumerate() {
        let image_id = format!("{specimen_id}-{}", i + 1);
        let rel = image_dir.join(format!("{image_id}.{}", extension(&u.bytes)));
        std::fs::write(state.store_dir().join(&rel), &u.bytes)?;
        std::fs::write(state.store_dir().join(cam_dir.join(format!("{image_id}.png"))), overlay)?;
        let m = meta.images.get(i).cloned().unwrap_or_default();
        images.push(ImageRef {
            image_id,
            path: rel.to_string_lossy().into_owned(),
            phone: m.phone,
            background: m.background,
            orientation: m.orientation,
        });
    }
    let info = SpecimenInfo {
        specimen_id: specimen_id.clone(),
        trap_id: meta.trap_id.clone(),
        capture_date: meta.capture_date,
        location: meta.location,
        images,
        label: field_label,
        created: now,
    };
    let image_ids = info.images.iter().map(|i| i.image_id.clone()).collect();
    state.records.append_record(info)?;

    let alert = state.config.alerts.evaluate(prediction.label, prediction.confidence);
    let review_requested = prediction.confidence < state.config.review_threshold;
    let record = Prediction {
        model_id: bundle.id().to_owned(),
        classes: prediction.classes.clone(),
        probabilities: prediction.probabilities.clone(),
        label: prediction.label,
        timestamp: now,
        genus_probabilities: prediction.genus_probabilities.clone(),
        alert: alert.clone(),
        review_requested,
        cam_path: Some(cam_dir.to_string_lossy().into_owned()),
    };
    state.records.append_prediction(&specimen_id, record)?;
    if let Some(a) = &alert {
        state.alerts.append(&AlertEvent {
            specimen_id: specimen_id.clone(),
            trap_id: meta.trap_id.clone(),
            species: a.species,
            severity: a.severity,
            confidence: a.confidence,
            timestamp: now,
        })?;
        tracing::warn!(specimen = %specimen_id, species = %a.species, severity = ?a.severity, "vector alert");
    }
    Ok((
        StatusCode::CREATED,
        Json(IngestResponse {
            specimen_id,
            model_id: bundle.id().to_owned(),
            label: prediction.label,
            confidence: prediction.confidence,
            probabilities: prediction.classes.iter().cloned().zip(prediction.probabilities.iter().copied()).collect(),
            genus_probabilities: prediction.genus_probabilities,
            alert,
            review_requested,
            image_ids,
        }),
    ))
}

// ---------------------------------------------------------------------------
// Records and review
// ---------------------------------------------------------------------------

fn find(state: &AppState, id: &str) -> AppResult<SpecimenRecord> {
    state
        .records
        .load()?
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown specimen {id}")))
}

async fn specimen(State(state): State<Shared>, Path(id): Path<String>) -> AppResult<Json<SpecimenRecord>> {
    Ok(Json(find(&state, &id)?))
}

#[derive(Debug, Serialize)]
struct PendingItem {
    specimen_id: String,
    label: TaxonLabel,
    confidence: f64,
    trap_id: Option<String>,
    created: chrono::DateTime<Utc>,
}

async fn pending(State(state): State<Shared>) -> AppResult<Json<Vec<PendingItem>>> {
    let mut items: Vec<PendingItem> = state
        .records
        .load()?
        .records
        .iter()
        .filter(|r| r.reviews.is_empty())
        .filter_map(|r| {
            let p = r.latest_prediction().filter(|p| p.review_requested)?;
            Some(PendingItem {
                specimen_id: r.id().to_owned(),
                label: p.label,
                confidence: p.confidence(),
                trap_id: r.info.trap_id.clone(),
                created: r.info.created,
            })
        })
        .collect();
    items.sort_by_key(|i| i.created);
    Ok(Json(items))
}

async fn review_item(State(state): State<Shared>, Path(id): Path<String>) -> AppResult<Json<Value>> {
    let record = find(&state, &id)?;
    let store = state.store_dir();
    let cam_dir = record.latest_prediction().and_then(|p| p.cam_path.clone()).map(PathBuf::from);
    let mut images = Vec::new();
    for img in &record.info.images {
        let bytes = std::fs::read(store.join(&img.path))?;
        let overlay = match &cam_dir {
            Some(dir) => std::fs::read(store.join(dir).join(format!("{}.png", img.image_id))).ok(),
            None => None,
        };
        images.push(json!({
            "image_id": img.image_id,
            "image": B64.encode(bytes),
            "cam_overlay": overlay.map(|b| B64.encode(b)),
        }));
    }
    Ok(Json(json!({
        "specimen_id": record.id(),
        "trap_id": record.info.trap_id,
        "capture_date": record.info.capture_date,
        "prediction": record.latest_prediction(),
        "review": record.review(),
        "images": images,
    })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionRequest {
    decision: String,
    label: Option<String>,
    reviewer: Option<String>,
    #[serde(default)]
    force: bool,
}

async fn decide(State(state): State<Shared>, Path(id): Path<String>, body: Bytes) -> AppResult<Json<Value>> {
    let req: DecisionRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("decision body: {e}")))?;
    let decision = match (req.decision.as_str(), &req.label) {
        ("confirm", None) => Decision::Confirm,
        ("override", Some(l)) => Decision::Override { label: parse_species(l)? },
        ("confirm", Some(_)) => return Err(ApiError::bad_request("confirm takes no label")),
        ("override", None) => return Err(ApiError::bad_request("override needs a label")),
        (other, _) => return Err(ApiError::bad_request(format!("unknown decision {other:?}"))),
    };
    let _guard = state.write_lock.lock().await;
    let record = find(&state, &id)?;
    if record.latest_prediction().is_none() {
        return Err(ApiError::conflict(format!("specimen {id} has no prediction to review")));
    }
    if record.review().is_some() && !req.force {
        return Err(ApiError::conflict(format!("specimen {id} already has a decision; use force to replace it")));
    }
    let review = Review {
        decision,
        reviewer: req.reviewer.unwrap_or_else(|| "anonymous".into()),
        timestamp: Utc::now(),
        forced: req.force && record.review().is_some(),
    };
    state.records.append_review(&id, review.clone())?;
    let updated = find(&state, &id)?;
    Ok(Json(json!({
        "specimen_id": id,
        "review": review,
        "label": updated.effective_label(),
    })))
}

// ---------------------------------------------------------------------------
// Export, summary, alerts, model
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct CorpusItem {
    specimen_id: String,
    label: TaxonLabel,
    label_source: &'static str,
    images: Vec<String>,
}

fn corpus_label(r: &SpecimenRecord) -> Option<(TaxonLabel, &'static str)> {
    if let Some(l) = r.reviewed_label() {
        return Some((l, "review"));
    }
    if let Some(p) = r.latest_prediction() {
        return Some((p.label, "prediction"));
    }
    r.info.label.map(|l| (l, "field"))
}

async fn export_corpus(
    State(state): State<Shared>,
    Query(q): Query<HashMap<String, String>>,
) -> AppResult<Json<Value>> {
    let reviewed_only = match q.get("reviewed_only").map(String::as_str) {
        None | Some("false") => false,
        Some("true") => true,
        Some(other) => return Err(ApiError::bad_request(format!("reviewed_only={other:?}"))),
    };
    let items: Vec<CorpusItem> = state
        .records
        .load()?
        .records
        .iter()
        .filter_map(|r| {
            let (label, source) = corpus_label(r)?;
            (!reviewed_only || source == "review").then(|| CorpusItem {
                specimen_id: r.id().to_owned(),
                label,
                label_source: source,
                images: r.info.images.iter().map(|i| i.path.clone()).collect(),
            })
        })
        .collect();
    Ok(Json(json!({ "generated": Utc::now(), "items": items })))
}

fn since_param(q: &HashMap<String, String>) -> AppResult<Option<NaiveDate>> {
    q.get("since")
        .map(|s| {
            NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .map_err(|_| ApiError::bad_request(format!("since must be YYYY-MM-DD, got {s:?}")))
        })
        .transpose()
}

async fn summary(State(state): State<Shared>, Query(q): Query<HashMap<String, String>>) -> AppResult<Json<Value>> {
    let since = since_param(&q)?;
    let loaded = state.records.load()?;
    let mut per_species: BTreeMap<String, u64> = BTreeMap::new();
    let mut per_trap: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    let mut alerts: BTreeMap<&str, u64> = [("critical", 0), ("watch", 0)].into();
    let (mut total, mut reviewed, mut pending) = (0u64, 0u64, 0u64);
    for r in &loaded.records {
        let day = r.info.capture_date.unwrap_or_else(|| r.info.created.date_naive());
        if since.is_some_and(|s| day < s) {
            continue;
        }
        total += 1;
        if r.review().is_some() {
            reviewed += 1;
        } else if r.latest_prediction().is_some_and(|p| p.review_requested) {
            pending += 1;
        }
        if let Some(p) = r.latest_prediction().and_then(|p| p.alert.as_ref()) {
            let key = match p.severity {
                Severity::Critical => "critical",
                Severity::Watch => "watch",
            };
            *alerts.entry(key).or_default() += 1;
        }
        let Some(label) = r.effective_label() else { continue };
        let name = label.species().to_string();
        *per_species.entry(name.clone()).or_default() += 1;
        let trap = r.info.trap_id.clone().unwrap_or_else(|| "unassigned".into());
        *per_trap.entry(trap).or_default().entry(name).or_default() += 1;
    }
    Ok(Json(json!({
        "since": since,
        "specimens": total,
        "reviewed": reviewed,
        "pending_review": pending,
        "per_species": per_species,
        "alerts": alerts,
        "per_trap": per_trap,
    })))
}

async fn alerts(State(state): State<Shared>, Query(q): Query<HashMap<String, String>>) -> AppResult<Json<Vec<AlertEvent>>> {
    let since = since_param(&q)?;
    let events = state.alerts.read()?;
    Ok(Json(
        events
            .into_iter()
            .filter(|e| since.is_none_or(|s| e.timestamp.date_naive() >= s))
            .collect(),
    ))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelRequest {
    path: PathBuf,
}

async fn swap_model(State(state): State<Shared>, body: Bytes) -> AppResult<Json<Value>> {
    let req: ModelRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("model body: {e}")))?;
    let bundle = tokio::task::spawn_blocking(move || ModelBundle::load(&req.path))
        .await
        .map_err(ApiError::internal)?
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    if !bundle.supports(state.config.mode) {
        return Err(ApiError::unprocessable(format!(
            "model lacks the heads for {} mode",
            state.config.mode
        )));
    }
    let loaded = state.swap_model(bundle);
    tracing::info!(model = loaded.id(), "model swapped");
    Ok(Json(json!({ "model_id": loaded.id() })))
}
