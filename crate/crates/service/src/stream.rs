//! `WS /api/stream`: per-session pose/camera state, newest-wins rendering
//! and sequence playback.
//!
//! Each session owns a `watch` channel holding its latest state. A single
//! render worker per session waits for changes, renders off the async
//! runtime and pushes the frame; updates arriving mid-render overwrite each
//! other, so only the newest state is rendered next.

use std::collections::BTreeMap;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::ws::{CloseFrame, Message, Utf8Bytes, WebSocket};
use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use splatavatar::image_io::{encode_jpeg_rgb8, encode_png_rgb8, to_rgb8, Encoding};
use splatavatar::raster::Camera;
use tokio::sync::{mpsc, watch};

use crate::avatar::{Avatar, CameraRequest, Number, RequestError, Resolved};
use crate::AppState;

pub const JPEG_QUALITY: u8 = 90;
pub const HEADER_BYTES: usize = 16;
pub const ENCODING_JPEG: u32 = 1;
pub const ENCODING_PNG: u32 = 2;

/// Close codes sent on protocol violations.
pub const CLOSE_MALFORMED: u16 = 4000;
pub const CLOSE_UNKNOWN_MESSAGE: u16 = 4001;
pub const CLOSE_INVALID_VALUE: u16 = 4002;
pub const CLOSE_NON_FINITE: u16 = 4003;
pub const CLOSE_NOT_LOADED: u16 = 4010;

pub const MAX_FPS: f64 = 120.0;

/// Client → server control messages.
#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    /// Joint overrides merged into the current pose.
    Pose { pose: BTreeMap<String, [Number; 3]> },
    Camera { camera: CameraRequest },
    Pca { enabled: bool, k: Option<usize> },
    /// Back to the neutral pose.
    Reset {},
    Encoding { encoding: StreamEncoding },
    Play {
        sequence: String,
        fps: f64,
        #[serde(default)]
        looping: bool,
    },
    Pause {},
    Resume {},
    Stop {},
    Seek { frame: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamEncoding {
    Jpeg,
    Png,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Playback {
    pub sequence: usize,
    pub frame: usize,
    pub fps: f64,
    pub looping: bool,
    pub playing: bool,
}

/// Everything a session's next frame depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub pose: Vec<f64>,
    pub camera: Camera,
    pub pca: Option<usize>,
    pub encoding: StreamEncoding,
    pub playback: Option<Playback>,
}

/// Server → client text messages.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    /// Sent immediately before the binary frame with the same id.
    FrameMeta {
        frame_id: u32,
        width: usize,
        height: usize,
        encoding: StreamEncoding,
        coefficients_ms: f64,
        blend_lbs_ms: f64,
        rasterize_ms: f64,
        encode_ms: f64,
        sequence: Option<String>,
        sequence_frame: Option<usize>,
    },
    PlaybackEnded { sequence: String, frames: usize },
    Error { message: String },
}

/// 16-byte little-endian header: frame id, width, height, encoding tag.
pub fn frame_header(frame_id: u32, width: usize, height: usize, encoding: StreamEncoding) -> [u8; HEADER_BYTES] {
    let mut h = [0u8; HEADER_BYTES];
    h[0..4].copy_from_slice(&frame_id.to_le_bytes());
    h[4..8].copy_from_slice(&(width as u32).to_le_bytes());
    h[8..12].copy_from_slice(&(height as u32).to_le_bytes());
    let tag = match encoding {
        StreamEncoding::Jpeg => ENCODING_JPEG,
        StreamEncoding::Png => ENCODING_PNG,
    };
    h[12..16].copy_from_slice(&tag.to_le_bytes());
    h
}

struct Violation {
    code: u16,
    reason: String,
}

impl From<RequestError> for Violation {
    fn from(e: RequestError) -> Self {
        match e {
            RequestError::Malformed(m) => Violation {
                code: CLOSE_INVALID_VALUE,
                reason: m,
            },
            RequestError::NonFinite(m) => Violation {
                code: CLOSE_NON_FINITE,
                reason: m,
            },
        }
    }
}

fn apply(avatar: &Avatar, state: &mut SessionState, msg: ClientMessage) -> Result<(), Violation> {
    match msg {
        ClientMessage::Pose { pose } => {
            let mut next = state.pose.clone();
            avatar.apply_pose(&mut next, &pose)?;
            state.pose = next;
        }
        ClientMessage::Camera { camera } => state.camera = avatar.resolve_camera(&camera)?,
        ClientMessage::Pca { enabled, k } => {
            state.pca = avatar.resolve_pca(&crate::avatar::PcaRequest { enabled, k })?;
        }
        ClientMessage::Reset {} => {
            state.pose = vec![0.0; avatar.model.pose_len()];
            state.playback = None;
        }
        ClientMessage::Encoding { encoding } => state.encoding = encoding,
        ClientMessage::Play { sequence, fps, looping } => {
            let idx = avatar
                .sequences
                .iter()
                .position(|s| s.name == sequence)
                .ok_or_else(|| Violation {
                    code: CLOSE_INVALID_VALUE,
                    reason: format!("unknown sequence `{sequence}`"),
                })?;
            if avatar.sequences[idx].poses.is_empty() {
                return Err(Violation {
                    code: CLOSE_INVALID_VALUE,
                    reason: format!("sequence `{sequence}` is empty"),
                });
            }
            if !fps.is_finite() || fps <= 0.0 || fps > MAX_FPS {
                return Err(Violation {
                    code: CLOSE_INVALID_VALUE,
                    reason: format!("fps must lie in (0, {MAX_FPS}]"),
                });
            }
            state.playback = Some(Playback {
                sequence: idx,
                frame: 0,
                fps,
                looping,
                playing: true,
            });
        }
        ClientMessage::Pause {} | ClientMessage::Resume {} => {
            let playing = matches!(msg, ClientMessage::Resume {});
            match state.playback.as_mut() {
                Some(p) => p.playing = playing,
                None => {
                    return Err(Violation {
                        code: CLOSE_INVALID_VALUE,
                        reason: "no sequence is loaded".into(),
                    })
                }
            }
        }
        ClientMessage::Stop {} => state.playback = None,
        ClientMessage::Seek { frame } => {
            let p = state.playback.as_mut().ok_or_else(|| Violation {
                code: CLOSE_INVALID_VALUE,
                reason: "no sequence is loaded".into(),
            })?;
            let len = avatar.sequences[p.sequence].poses.len();
            if frame >= len {
                return Err(Violation {
                    code: CLOSE_INVALID_VALUE,
                    reason: format!("frame {frame} is past the end ({len} frames)"),
                });
            }
            p.frame = frame;
        }
    }
    Ok(())
}

fn parse_message(text: &str) -> Result<ClientMessage, Violation> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Violation {
        code: CLOSE_MALFORMED,
        reason: e.to_string(),
    })?;
    serde_json::from_value(value).map_err(|e| Violation {
        code: CLOSE_UNKNOWN_MESSAGE,
        reason: e.to_string(),
    })
}

fn close(code: u16, reason: &str) -> Message {
    // Close reasons are limited to 123 bytes.
    let mut r = reason.to_string();
    while r.len() > 120 {
        r.pop();
    }
    Message::Close(Some(CloseFrame {
        code,
        reason: Utf8Bytes::from(r),
    }))
}

/// What the worker renders for a state snapshot.
fn render_input(avatar: &Avatar, s: &SessionState) -> (Resolved, Option<(String, usize)>) {
    match &s.playback {
        Some(p) => {
            let seq = &avatar.sequences[p.sequence];
            (
                Resolved {
                    pose: seq.poses[p.frame].clone(),
                    camera: s.camera.clone(),
                    pca: s.pca,
                },
                Some((seq.name.clone(), p.frame)),
            )
        }
        None => (
            Resolved {
                pose: s.pose.clone(),
                camera: s.camera.clone(),
                pca: s.pca,
            },
            None,
        ),
    }
}

struct Encoded {
    meta: ServerMessage,
    binary: Vec<u8>,
}

fn render_frame(app: &AppState, avatar: &Avatar, s: &SessionState, frame_id: u32) -> splatavatar::Result<Encoded> {
    let (input, seq) = render_input(avatar, s);
    app.renders.fetch_add(1, Ordering::SeqCst);
    let state = splatavatar::workflow::render_pose(&avatar.model, &input.pose, &input.camera, input.pca)?;
    let t = Instant::now();
    let f = &state.frame;
    let rgb8 = to_rgb8(&f.color, Encoding::Srgb);
    let payload = match s.encoding {
        StreamEncoding::Jpeg => encode_jpeg_rgb8(f.width, f.height, &rgb8, JPEG_QUALITY)?,
        StreamEncoding::Png => encode_png_rgb8(f.width, f.height, &rgb8)?,
    };
    let encode_ms = t.elapsed().as_secs_f64() * 1e3;
    let mut binary = frame_header(frame_id, f.width, f.height, s.encoding).to_vec();
    binary.extend(payload);
    let (sequence, sequence_frame) = match seq {
        Some((n, i)) => (Some(n), Some(i)),
        None => (None, None),
    };
    Ok(Encoded {
        meta: ServerMessage::FrameMeta {
            frame_id,
            width: f.width,
            height: f.height,
            encoding: s.encoding,
            coefficients_ms: state.times.coefficients_ms,
            blend_lbs_ms: state.times.blend_lbs_ms,
            rasterize_ms: state.times.rasterize_ms,
            encode_ms,
            sequence,
            sequence_frame,
        },
        binary,
    })
}

fn text(msg: &ServerMessage) -> Message {
    Message::Text(Utf8Bytes::from(serde_json::to_string(msg).expect("server messages serialize")))
}

/// Render worker: one in-flight render at a time, newest state wins.
async fn worker(
    app: Arc<AppState>,
    avatar: Arc<Avatar>,
    tx: Arc<watch::Sender<SessionState>>,
    mut rx: watch::Receiver<SessionState>,
    out: mpsc::Sender<Message>,
) {
    let mut frame_id: u32 = 0;
    let mut play_clock: Option<(Instant, usize)> = None;
    loop {
        let snapshot = rx.borrow_and_update().clone();
        let id = frame_id;
        frame_id = frame_id.wrapping_add(1);
        let (a, av, s) = (app.clone(), avatar.clone(), snapshot.clone());
        let rendered = tokio::task::spawn_blocking(move || render_frame(&a, &av, &s, id)).await;
        match rendered {
            Ok(Ok(enc)) => {
                if out.send(text(&enc.meta)).await.is_err() || out.send(Message::Binary(enc.binary.into())).await.is_err() {
                    return;
                }
            }
            Ok(Err(e)) => {
                if out.send(text(&ServerMessage::Error { message: e.to_string() })).await.is_err() {
                    return;
                }
            }
            Err(_) => return,
        }

        let Some(p) = snapshot.playback.as_ref().filter(|p| p.playing) else {
            play_clock = None;
            if rx.changed().await.is_err() {
                return;
            }
            continue;
        };
        // Frames are scheduled from when playback (re)started, so render time
        // does not accumulate as drift.
        let (start, base) = *play_clock.get_or_insert((Instant::now(), p.frame));
        let due = start + Duration::from_secs_f64((p.frame + 1 - base) as f64 / p.fps);
        tokio::select! {
            changed = rx.changed() => {
                if changed.is_err() {
                    return;
                }
                play_clock = None;
                continue;
            }
            _ = tokio::time::sleep_until(due.into()) => {}
        }
        let seq = &avatar.sequences[p.sequence];
        let len = seq.poses.len();
        let mut advanced = Advance::Next;
        tx.send_modify(|s| {
            if let Some(pb) = s.playback.as_mut() {
                if pb.frame + 1 < len {
                    pb.frame += 1;
                } else if pb.looping {
                    pb.frame = 0;
                    advanced = Advance::Wrapped;
                } else {
                    pb.playing = false;
                    advanced = Advance::Ended;
                }
            }
        });
        match advanced {
            Advance::Next => {}
            Advance::Wrapped => play_clock = None,
            Advance::Ended => {
                play_clock = None;
                // The last frame is already on screen; wait for the client.
                rx.borrow_and_update();
                let m = ServerMessage::PlaybackEnded {
                    sequence: seq.name.clone(),
                    frames: len,
                };
                if out.send(text(&m)).await.is_err() || rx.changed().await.is_err() {
                    return;
                }
            }
        }
    }
}

enum Advance {
    Next,
    Wrapped,
    Ended,
}

/// Runs one WebSocket session until either side closes.
pub async fn session(socket: WebSocket, app: Arc<AppState>) {
    let (mut sink, mut stream) = socket.split();
    let Some(avatar) = app.avatar() else {
        let _ = sink.send(close(CLOSE_NOT_LOADED, "checkpoint is still loading")).await;
        return;
    };
    app.sessions.fetch_add(1, Ordering::SeqCst);
    let initial = SessionState {
        pose: vec![0.0; avatar.model.pose_len()],
        camera: avatar.default_camera(),
        pca: None,
        encoding: StreamEncoding::Jpeg,
        playback: None,
    };
    let (tx, rx) = watch::channel(initial);
    let tx = Arc::new(tx);
    let (out_tx, mut out_rx) = mpsc::channel::<Message>(8);

    let writer = tokio::spawn(async move {
        while let Some(m) = out_rx.recv().await {
            let is_close = matches!(m, Message::Close(_));
            if sink.send(m).await.is_err() || is_close {
                break;
            }
        }
        let _ = sink.close().await;
    });
    let render = tokio::spawn(worker(app.clone(), avatar.clone(), tx.clone(), rx, out_tx.clone()));

    while let Some(msg) = stream.next().await {
        let text = match msg {
            Ok(Message::Text(t)) => t,
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(Message::Ping(_)) | Ok(Message::Pong(_)) => continue,
            Ok(Message::Binary(_)) => {
                let _ = out_tx.send(close(CLOSE_MALFORMED, "binary messages are not accepted")).await;
                break;
            }
        };
        let result = parse_message(text.as_str()).and_then(|m| {
            let mut next = tx.borrow().clone();
            apply(&avatar, &mut next, m)?;
            tx.send_replace(next);
            Ok(())
        });
        if let Err(v) = result {
            let _ = out_tx.send(close(v.code, &v.reason)).await;
            break;
        }
    }
    // Disposing the session: stop the worker and let the writer drain.
    render.abort();
    drop(out_tx);
    drop(tx);
    let _ = render.await;
    let _ = writer.await;
    app.sessions.fetch_sub(1, Ordering::SeqCst);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let h = frame_header(7, 64, 48, StreamEncoding::Jpeg);
        assert_eq!(&h[0..4], &7u32.to_le_bytes());
        assert_eq!(&h[4..8], &64u32.to_le_bytes());
        assert_eq!(&h[8..12], &48u32.to_le_bytes());
        assert_eq!(&h[12..16], &1u32.to_le_bytes());
        assert_eq!(frame_header(0, 1, 1, StreamEncoding::Png)[12], 2);
    }

    #[test]
    fn message_parsing_codes() {
        assert!(matches!(parse_message("{\"type\":\"reset\"}"), Ok(ClientMessage::Reset {})));
        assert_eq!(parse_message("{not json").err().unwrap().code, CLOSE_MALFORMED);
        assert_eq!(parse_message("{\"type\":\"dance\"}").err().unwrap().code, CLOSE_UNKNOWN_MESSAGE);
        assert_eq!(parse_message("{\"type\":\"pause\",\"x\":1}").err().unwrap().code, CLOSE_UNKNOWN_MESSAGE);
        let m = parse_message("{\"type\":\"play\",\"sequence\":\"train\",\"fps\":10}").ok().unwrap();
        assert!(matches!(m, ClientMessage::Play { looping: false, .. }));
    }
}
