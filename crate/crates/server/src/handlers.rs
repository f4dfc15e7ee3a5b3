use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Json;
use backpack::control::{bias_report as library_bias_report, bias_spec, generate as library_generate, sense_projection_topk, GenerateSettings, InterventionSpec, Pronouns, Target};
use backpack::corpus::{Vocabulary, BOS};
use backpack::eval::PromptTemplate;
use backpack::model::{LanguageModel, TokenId};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::{round9, ApiError, AppState, Session, MAX_NEW_TOKENS};

type Shared = State<Arc<AppState>>;
type ApiResult<T> = Result<T, ApiError>;

/// Largest allowed `|Σ contributions − logits|` before /decompose refuses to answer.
const SUM_CHECK_TOLERANCE: f64 = 1e-4;

fn num(x: f64) -> Value {
    json!(round9(x))
}

fn nums(xs: impl IntoIterator<Item = f64>) -> Value {
    Value::Array(xs.into_iter().map(num).collect())
}

fn token_text(vocab: &Vocabulary, id: TokenId) -> String {
    vocab.decode(&[id])
}

fn encode(vocab: &Vocabulary, text: &str) -> ApiResult<Vec<TokenId>> {
    if text.is_empty() {
        return Err(ApiError::bad_request("prompt must be nonempty"));
    }
    let unknown = vocab.unknown_chars(text);
    if !unknown.is_empty() {
        return Err(ApiError::unknown_chars(unknown));
    }
    Ok(vocab.encode(text))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

pub async fn health() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

pub async fn meta(State(st): Shared) -> Json<Value> {
    let c = st.model.config();
    Json(json!({
        "architecture": "backpack",
        "checkpoint_sha256": st.checkpoint_sha256,
        "config_hash": st.metadata.get("config_hash"),
        "step": st.metadata.get("step").and_then(|s| s.parse::<u64>().ok()),
        "config": {
            "vocab_size": c.vocab_size,
            "embed_dim": c.embed_dim,
            "num_senses": c.num_senses,
            "layers": c.layers,
            "heads": c.heads,
            "context_length": c.context_length,
            "dropout": num(c.dropout),
        },
        "float_digits": 9,
    }))
}

/// Parses a rule document and checks its senses and characters against the model.
fn parse_spec(st: &AppState, text: Option<&str>) -> ApiResult<Option<InterventionSpec>> {
    let Some(text) = text else { return Ok(None) };
    let spec = InterventionSpec::parse(text)?;
    let k = st.model.config().num_senses;
    for r in &spec.rules {
        if let Some(l) = r.sense.filter(|&l| l >= k) {
            return Err(ApiError::bad_request(format!("sense {l} out of range for {k} senses")));
        }
        if let Target::Char(c) = r.target {
            if st.vocab.id(c).is_none() {
                return Err(ApiError::unknown_chars(vec![c]));
            }
        }
    }
    Ok(Some(spec))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub prompt: String,
    pub max_new_tokens: Option<usize>,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
    pub top: Option<usize>,
    /// Rule document; overrides the session's spec when present.
    pub spec: Option<String>,
    pub session: Option<u64>,
}

pub async fn generate(State(st): Shared, Json(req): Json<GenerateRequest>) -> ApiResult<Json<Value>> {
    let session = match req.session {
        Some(id) => Some(session_of(&st, id)?),
        None => None,
    };
    let settings = GenerateSettings {
        max_new_tokens: req
            .max_new_tokens
            .or(session.as_ref().map(|s| s.max_new_tokens))
            .unwrap_or(GenerateSettings::default().max_new_tokens),
        temperature: req.temperature.or(session.as_ref().map(|s| s.temperature)).unwrap_or(0.0),
        seed: req.seed.or(session.as_ref().map(|s| s.seed)).unwrap_or(0),
        top: req.top.unwrap_or(5),
    };
    if settings.max_new_tokens > MAX_NEW_TOKENS {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("max_new_tokens {} exceeds {MAX_NEW_TOKENS}", settings.max_new_tokens),
        ));
    }
    let spec = match parse_spec(&st, req.spec.as_deref())? {
        Some(s) => s,
        None => session.map(|s| s.spec).unwrap_or_default(),
    };
    let ids = encode(&st.vocab, &req.prompt)?;
    blocking(move || {
        let out = library_generate(&st.model, &ids, &settings, Some(&spec), Some(&st.vocab))?;
        let v = &st.vocab;
        let steps: Vec<Value> = out
            .steps
            .iter()
            .map(|s| {
                json!({
                    "token": token_text(v, s.token),
                    "id": s.token,
                    "prob": num(s.prob),
                    "top": s.top.iter().map(|&(t, p)| json!({ "token": token_text(v, t), "id": t, "prob": num(p) })).collect::<Vec<_>>(),
                })
            })
            .collect();
        Ok(Json(json!({
            "prompt": req.prompt,
            "text": v.decode(&out.tokens),
            "steps": steps,
            "spec": spec.to_string(),
            "settings": {
                "max_new_tokens": settings.max_new_tokens,
                "temperature": num(settings.temperature),
                "seed": settings.seed,
            },
        })))
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct TopK {
    pub topk: Option<usize>,
}

pub async fn senses(State(st): Shared, Path(ch): Path<String>, Query(q): Query<TopK>) -> ApiResult<Json<Value>> {
    let mut chars = ch.chars();
    let c = match (chars.next(), chars.next()) {
        (Some(c), None) => c,
        _ => return Err(ApiError::bad_request(format!("expected one character, got `{ch}`"))),
    };
    let id = st
        .vocab
        .id(c)
        .ok_or_else(|| ApiError::not_found(format!("character {c:?} is not in the vocabulary")))?;
    let topk = q.topk.unwrap_or(10);
    blocking(move || {
        let k = st.model.config().num_senses;
        let mut senses = Vec::with_capacity(k);
        for l in 0..k {
            let top = sense_projection_topk(&st.model, id, l, topk)?;
            senses.push(json!({
                "sense": l,
                "top": top.iter().map(|&(t, s)| json!({ "token": token_text(&st.vocab, t), "id": t, "score": num(s) })).collect::<Vec<_>>(),
            }));
        }
        Ok(Json(json!({ "char": c.to_string(), "id": id, "senses": senses })))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeRequest {
    pub prompt: String,
    /// Prepend BOS (default true).
    pub bos: Option<bool>,
    /// Position whose full per-vocabulary contributions are returned.
    pub position: Option<usize>,
    pub spec: Option<String>,
}

pub async fn decompose(State(st): Shared, Json(req): Json<DecomposeRequest>) -> ApiResult<Response> {
    let mut ids = Vec::new();
    if req.bos.unwrap_or(true) {
        ids.push(BOS);
    }
    ids.extend(encode(&st.vocab, &req.prompt)?);
    let ctx = st.model.config().context_length;
    if ids.len() > ctx {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("{} tokens exceed the context length {ctx}", ids.len()),
        ));
    }
    if let Some(p) = req.position.filter(|&p| p >= ids.len()) {
        return Err(ApiError::bad_request(format!("position {p} outside {} tokens", ids.len())));
    }
    let spec = parse_spec(&st, req.spec.as_deref())?;
    blocking(move || {
        let k = st.model.config().num_senses;
        let resolved = spec
            .map(|s| s.resolve(&ids, Some(&st.vocab), k))
            .transpose()?;
        let hook = resolved.as_ref().map(|r| r as &dyn backpack::model::AlphaHook<f32>);
        let decs = st.model.decompose_all(&ids, hook)?;
        let max_residual = decs.iter().map(|d| d.max_residual()).fold(0.0, f64::max);
        let ok = max_residual <= SUM_CHECK_TOLERANCE;
        if !ok {
            log::error!("decomposition sum check failed: residual {max_residual:e}");
        }
        let positions: Vec<Value> = decs
            .iter()
            .map(|d| {
                let weights: Vec<Value> = (0..k)
                    .map(|l| nums(d.contributions.iter().filter(|c| c.sense == l).map(|c| c.weight as f64)))
                    .collect();
                let mut p = json!({ "position": d.position, "alpha": weights });
                if req.position == Some(d.position) {
                    p["logits"] = nums(d.logits.iter().map(|&x| x as f64));
                    p["contributions"] = Value::Array(
                        d.contributions
                            .iter()
                            .map(|c| json!({ "source": c.position, "sense": c.sense, "weight": num(c.weight as f64), "values": nums(c.values.iter().map(|&x| x as f64)) }))
                            .collect(),
                    );
                }
                p
            })
            .collect();
        let body = json!({
            "tokens": ids.iter().map(|&t| token_text(&st.vocab, t)).collect::<Vec<_>>(),
            "ids": ids,
            "num_senses": k,
            "max_residual": num(max_residual),
            "sum_check": ok,
            "positions": positions,
        });
        let status = if ok { StatusCode::OK } else { StatusCode::INTERNAL_SERVER_ERROR };
        let mut resp = (status, Json(body)).into_response();
        resp.headers_mut()
            .insert("x-sum-check", HeaderValue::from_static(if ok { "true" } else { "false" }));
        Ok(resp)
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasRequest {
    pub word: String,
    pub templates: Vec<String>,
    /// `remove:<sense>` or a rule document.
    pub spec: Option<String>,
    pub he: Option<char>,
    pub she: Option<char>,
}

pub async fn bias_report(State(st): Shared, Json(req): Json<BiasRequest>) -> ApiResult<Json<Value>> {
    let templates = req
        .templates
        .iter()
        .map(|t| PromptTemplate::new(t.as_str()))
        .collect::<backpack::Result<Vec<_>>>()?;
    if templates.is_empty() {
        return Err(ApiError::bad_request("at least one template is required"));
    }
    let unknown = st.vocab.unknown_chars(&format!("{}{}", req.word, req.templates.concat().replace("[WORD]", "")));
    if !unknown.is_empty() {
        return Err(ApiError::unknown_chars(unknown));
    }
    let pronouns = Pronouns::from_chars(&st.vocab, req.he.unwrap_or('他'), req.she.unwrap_or('她'))?;
    let spec = req.spec.as_deref().map(|s| bias_spec(s, &st.vocab, &req.word)).transpose()?;
    blocking(move || {
        let r = library_bias_report(&st.model, &st.vocab, &req.word, &templates, pronouns, spec.as_ref())?;
        Ok(Json(json!({
            "word": r.word,
            "prompts": r.prompts,
            "before": nums(r.before.iter().copied()),
            "after": r.after.as_ref().map(|a| nums(a.iter().copied())),
            "mean_before": num(r.mean_before()),
            "mean_after": r.mean_after().map(num),
            "spec": spec.map(|s| s.to_string()),
        })))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionRequest {
    pub spec: Option<String>,
    pub max_new_tokens: Option<usize>,
    pub temperature: Option<f64>,
    pub beam_width: Option<usize>,
    pub seed: Option<u64>,
}

fn session_json(st: &AppState, s: &Session) -> Value {
    json!({
        "id": s.id,
        "checkpoint_sha256": st.checkpoint_sha256,
        "spec": s.spec.to_string(),
        "max_new_tokens": s.max_new_tokens,
        "temperature": num(s.temperature),
        "beam_width": s.beam_width,
        "seed": s.seed,
    })
}

fn session_of(st: &AppState, id: u64) -> ApiResult<Session> {
    let table = st.sessions.lock().expect("session lock");
    table
        .table
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("no session {id}")))
}

pub async fn create_session(State(st): Shared, body: Option<Json<SessionRequest>>) -> ApiResult<(StatusCode, Json<Value>)> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    let spec = parse_spec(&st, req.spec.as_deref())?.unwrap_or_default();
    let temperature = req.temperature.unwrap_or(0.0);
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(ApiError::bad_request(format!("temperature {temperature} must be finite and >= 0")));
    }
    let max_new_tokens = req.max_new_tokens.unwrap_or(GenerateSettings::default().max_new_tokens);
    if max_new_tokens > MAX_NEW_TOKENS {
        return Err(ApiError::bad_request(format!("max_new_tokens {max_new_tokens} exceeds {MAX_NEW_TOKENS}")));
    }
    let mut table = st.sessions.lock().expect("session lock");
    table.next_id += 1;
    let s = Session {
        id: table.next_id,
        spec,
        max_new_tokens,
        temperature,
        beam_width: req.beam_width.unwrap_or(1).max(1),
        seed: req.seed.unwrap_or(0),
    };
    table.table.insert(s.id, s.clone());
    Ok((StatusCode::CREATED, Json(session_json(&st, &s))))
}

pub async fn get_session(State(st): Shared, Path(id): Path<u64>) -> ApiResult<Json<Value>> {
    Ok(Json(session_json(&st, &session_of(&st, id)?)))
}

pub async fn delete_session(State(st): Shared, Path(id): Path<u64>) -> ApiResult<StatusCode> {
    let mut table = st.sessions.lock().expect("session lock");
    match table.table.remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(format!("no session {id}"))),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecRequest {
    pub spec: String,
}

/// Replaces the session's spec in one step; an invalid document leaves it unchanged.
pub async fn put_spec(State(st): Shared, Path(id): Path<u64>, Json(req): Json<SpecRequest>) -> ApiResult<Json<Value>> {
    let spec = parse_spec(&st, Some(&req.spec))?.unwrap_or_default();
    let mut table = st.sessions.lock().expect("session lock");
    let s = table
        .table
        .get_mut(&id)
        .ok_or_else(|| ApiError::not_found(format!("no session {id}")))?;
    s.spec = spec;
    let s = s.clone();
    drop(table);
    Ok(Json(session_json(&st, &s)))
}
