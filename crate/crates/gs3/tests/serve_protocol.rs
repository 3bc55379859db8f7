use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use gs3::protocol::{decode_frame, FrameFormat, SceneContext};
use gs3::serve::{spawn_server, AppState, FrameRenderer, ModelRenderer};
use gs3_core::{ImageBuffer, RenderRequest, SceneBounds, SceneModel};
use rand::SeedableRng;
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio_tungstenite::tungstenite::Message;

/// Sleeps, then returns a flat image whose value encodes the exposure.
struct SlowRenderer {
    delay: Duration,
    rendered: Arc<Mutex<Vec<f64>>>,
}

impl FrameRenderer for SlowRenderer {
    fn render(&self, req: &RenderRequest) -> Result<ImageBuffer, String> {
        std::thread::sleep(self.delay);
        self.rendered.lock().unwrap().push(req.exposure);
        Ok(ImageBuffer::filled(req.camera.width, req.camera.height, 3, req.exposure / 10.0))
    }
}

type Socket = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn start(renderer: impl FrameRenderer) -> SocketAddr {
    let (addr, _handle) = spawn_server("127.0.0.1:0".parse().unwrap(), AppState::new(renderer, SceneContext::default())).await.unwrap();
    addr
}

async fn connect(addr: SocketAddr) -> Socket {
    tokio_tungstenite::connect_async(format!("ws://{addr}/ws")).await.unwrap().0
}

fn state(seq: u32, exposure: f64) -> Message {
    Message::text(
        json!({
            "type": "state", "seq": seq, "exposure": exposure,
            "camera": {"camera_to_world": [[1,0,0,0],[0,1,0,0],[0,0,1,3],[0,0,0,1]]},
            "light": {"kind": "point", "position": [0, 3, 0], "intensity": [9, 9, 9]},
            "quality": {"width": 8, "height": 6}
        })
        .to_string(),
    )
}

async fn next(ws: &mut Socket) -> Message {
    tokio::time::timeout(Duration::from_secs(20), ws.next()).await.expect("reply in time").unwrap().unwrap()
}

async fn next_json(ws: &mut Socket) -> Value {
    match next(ws).await {
        Message::Text(t) => serde_json::from_str(&t).unwrap(),
        other => panic!("expected text, got {other:?}"),
    }
}

fn slow(ms: u64) -> (SlowRenderer, Arc<Mutex<Vec<f64>>>) {
    let rendered = Arc::new(Mutex::new(vec![]));
    (SlowRenderer { delay: Duration::from_millis(ms), rendered: rendered.clone() }, rendered)
}

#[tokio::test]
async fn health_endpoint() {
    let addr = start(slow(0).0).await;
    let mut s = tokio::net::TcpStream::connect(addr).await.unwrap();
    s.write_all(b"GET /health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").await.unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).await.unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.ends_with("ok"), "{resp}");
}

#[tokio::test]
async fn ping_pong_echoes_seq() {
    let addr = start(slow(0).0).await;
    let mut ws = connect(addr).await;
    ws.send(Message::text(r#"{"type":"ping","seq":41}"#)).await.unwrap();
    assert_eq!(next_json(&mut ws).await, json!({"type": "pong", "seq": 41}));
    ws.send(Message::text(r#"{"type":"ping"}"#)).await.unwrap();
    assert_eq!(next_json(&mut ws).await["type"], "pong");
}

#[tokio::test]
async fn malformed_messages_get_errors_and_keep_the_session() {
    let (r, rendered) = slow(0);
    let mut ws = connect(start(r).await).await;
    for bad in ["not json", r#"{"type":"state"}"#, r#"{"type":"teleport"}"#] {
        ws.send(Message::text(bad)).await.unwrap();
        let e = next_json(&mut ws).await;
        assert_eq!(e["type"], "error", "{bad}");
        assert!(e["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
    // a state that parses but cannot be rendered also errors
    let mut bad_pose = state(3, 1.0).into_text().unwrap().to_string();
    bad_pose = bad_pose.replacen("[[1,0,0,0]", "[[2,0,0,0]", 1);
    ws.send(Message::text(bad_pose)).await.unwrap();
    let e = next_json(&mut ws).await;
    assert_eq!((e["type"].as_str(), e["seq"].as_u64()), (Some("error"), Some(3)));
    assert!(rendered.lock().unwrap().is_empty());
    // the connection still works
    ws.send(state(4, 5.0)).await.unwrap();
    let Message::Binary(b) = next(&mut ws).await else { panic!("expected a frame") };
    let (h, f, px) = decode_frame(&b).unwrap();
    assert_eq!((h.seq, h.width, h.height, f), (4, 8, 6, FrameFormat::Rgb8));
    assert!(px.iter().all(|&v| v == 128));
}

#[tokio::test]
async fn rapid_states_coalesce_to_first_and_latest() {
    let (r, rendered) = slow(300);
    let mut ws = connect(start(r).await).await;
    for seq in 1..=6 {
        ws.send(state(seq, seq as f64)).await.unwrap();
    }
    let mut seqs = vec![];
    while seqs.last() != Some(&6) {
        let Message::Binary(b) = next(&mut ws).await else { panic!("expected a frame") };
        seqs.push(decode_frame(&b).unwrap().0.seq);
    }
    assert!(seqs.windows(2).all(|w| w[0] < w[1]), "{seqs:?}");
    assert!(seqs.iter().all(|s| [1, 6].contains(s)), "{seqs:?}");
    assert_eq!(rendered.lock().unwrap().len(), seqs.len());
    // no stragglers
    ws.send(Message::text(r#"{"type":"ping","seq":99}"#)).await.unwrap();
    assert_eq!(next_json(&mut ws).await["seq"], 99);
}

#[tokio::test]
async fn real_model_frames() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let seeds = SceneModel::uniform_seeds(&SceneBounds { radius: 0.4, ..SceneBounds::UNIT }, 60, &mut rng);
    let model = SceneModel::initialize(&seeds, SceneBounds { radius: 0.4, ..SceneBounds::UNIT }, 2, &mut rng).unwrap();
    let mut ws = connect(start(ModelRenderer::new(model, None).unwrap()).await).await;
    let mut msg: Value = serde_json::from_str(state(1, 1.0).to_text().unwrap()).unwrap();
    msg["format"] = "f32".into();
    msg["toggles"] = json!({"psi": false});
    ws.send(Message::text(msg.to_string())).await.unwrap();
    let Message::Binary(b) = next(&mut ws).await else { panic!("expected a frame") };
    let (h, f, px) = decode_frame(&b).unwrap();
    assert_eq!((h.seq, h.width, h.height, f), (1, 8, 6, FrameFormat::F32));
    let values: Vec<f32> = px.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    assert!(values.iter().all(|v| v.is_finite() && *v >= 0.0));
    assert!(values.iter().any(|&v| v > 0.0));
    msg["light"] = json!({"kind": "env", "samples": 2});
    msg["seq"] = 2.into();
    ws.send(Message::text(msg.to_string())).await.unwrap();
    let Message::Binary(b) = next(&mut ws).await else { panic!("expected a frame") };
    assert_eq!(decode_frame(&b).unwrap().0.seq, 2);
}
