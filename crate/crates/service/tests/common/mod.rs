#![allow(dead_code)]

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use candle_core::DType;
use http_body_util::BodyExt;
use seqattn_core::config::{ModelConfig, TrainConfig};
use seqattn_core::synth::full_caption_corpus;
use seqattn_core::{Image, Trainer, Vocabulary};
use seqattn_service::session::DEFAULT_MAX_TURNS;
use seqattn_service::store::DEFAULT_TTL_SECS;
use seqattn_service::{AppState, Engine, SessionStore};
use serde_json::Value;
use tower::ServiceExt;

pub fn small_model() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        grid_side: 4,
        d_e: 8,
        d_h: 8,
        d_z: 4,
        d_s: 8,
        emb_dim: 6,
        d_cond: 4,
        gen_channels: 3,
        disc_channels: 3,
        enc_channels: 3,
        damsm_channels: 3,
        vocab_size: 8,
        max_len: 12,
        use_attention: true,
    }
}

pub fn trainer(seed: u64, use_attention: bool) -> Trainer {
    let vocab = Vocabulary::build(&full_caption_corpus(), 1);
    let mut cfg = TrainConfig {
        model: small_model(),
        seed,
        ..TrainConfig::default()
    };
    cfg.model.use_attention = use_attention;
    Trainer::with_dtype(cfg, vocab, DType::F32).unwrap()
}

pub fn engine(seed: u64) -> Engine {
    let tr = trainer(seed, true);
    Engine::new(tr.model, tr.vocab, format!("test-{seed}"))
}

pub fn app(seed: u64) -> Arc<AppState> {
    app_with(
        seed,
        DEFAULT_MAX_TURNS,
        SessionStore::in_memory(DEFAULT_TTL_SECS),
    )
}

pub fn app_with(seed: u64, max_turns: usize, store: SessionStore) -> Arc<AppState> {
    Arc::new(AppState::new(
        Some(Arc::new(engine(seed))),
        store,
        max_turns,
        0,
    ))
}

pub async fn call(
    router: &Router,
    method: &str,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let json = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes)
            .unwrap_or(Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, json)
}

pub fn png(v: &Value) -> Image {
    let bytes = B64.decode(v.as_str().expect("base64 string")).unwrap();
    Image::decode(&bytes).unwrap()
}

pub fn floats(v: &Value) -> Vec<f32> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap() as f32)
        .collect()
}
