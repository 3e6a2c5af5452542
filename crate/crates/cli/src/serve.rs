//! WebSocket service that lets a browser operator drive the gripper and
//! record demonstrations.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{Context, Result};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use lfd_core::demos::{read_dataset_file, write_dataset_file, Demonstration, Outcome, Source, Waypoint};
use lfd_core::sim::{tick, EnvState, GripperState, TaskKind, TaskSpec, GRIPPER_DIM, TICK_HZ};
use lfd_core::wire::to_line;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello {
        task: TaskKind,
    },
    State {
        tick: u64,
        objects: Vec<[f64; 7]>,
        gripper: [f64; GRIPPER_DIM],
        attached: Option<usize>,
    },
    Saved {
        raw_id: u64,
    },
    Error {
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    /// Increments to the commanded gripper pose: meters and radians of yaw.
    Control {
        #[serde(default)]
        dx: f64,
        #[serde(default)]
        dy: f64,
        #[serde(default)]
        dz: f64,
        #[serde(default)]
        dyaw: f64,
        #[serde(default)]
        grip_toggle: bool,
    },
    BeginDemo {},
    EndDemo {
        outcome: Outcome,
    },
}

pub struct ServeOptions {
    pub task: TaskSpec,
    pub out: PathBuf,
    pub seed: u64,
}

struct Session {
    env: EnvState,
    target: GripperState,
    rng: ChaCha8Rng,
    recording: Option<Demonstration>,
    driver: Option<u64>,
    next_client: u64,
    saved: Vec<Demonstration>,
    out: PathBuf,
}

impl Session {
    fn state_message(&self) -> ServerMessage {
        ServerMessage::State {
            tick: self.env.ticks,
            objects: self.env.objects.iter().map(|o| o.to_array()).collect(),
            gripper: self.env.gripper.to_vector(),
            attached: self.env.attached.as_ref().map(|a| a.object),
        }
    }

    fn step(&mut self) -> Result<()> {
        self.env.advance(&self.target, tick())?;
        if let Some(demo) = &mut self.recording {
            demo.commands.push(self.target.to_vector());
            demo.waypoints.push(Waypoint::from_state(&self.env));
        }
        Ok(())
    }

    fn apply(&mut self, client: u64, msg: ClientMessage) -> std::result::Result<Option<ServerMessage>, String> {
        if self.driver.is_some_and(|d| d != client) {
            return Err("another operator is driving; this connection is read-only".into());
        }
        self.driver = Some(client);
        match msg {
            ClientMessage::Control { dx, dy, dz, dyaw, grip_toggle } => {
                if ![dx, dy, dz, dyaw].iter().all(|v| v.is_finite()) {
                    return Err("control values must be finite".into());
                }
                let p = self.target.pose.position;
                let ws = &self.env.task.workspace;
                self.target.pose.position = ws.clamp(&[p[0] + dx, p[1] + dy, p[2] + dz]);
                if dyaw != 0.0 {
                    let q = self.target.pose.unit_quaternion();
                    let turned = lfd_core::sim::Pose::from_yaw([0.0; 3], dyaw).unit_quaternion() * q;
                    self.target.pose.set_unit_quaternion(&turned);
                }
                if grip_toggle {
                    self.target.open = !self.target.open;
                }
                Ok(None)
            }
            ClientMessage::BeginDemo {} => {
                if self.recording.is_some() {
                    return Err("a demonstration is already being recorded".into());
                }
                self.recording = Some(Demonstration::new(
                    self.env.task.kind,
                    TICK_HZ,
                    Source::Human,
                    Outcome::Failure,
                    0,
                    vec![Waypoint::from_state(&self.env)],
                ));
                Ok(None)
            }
            ClientMessage::EndDemo { outcome } => {
                let Some(mut demo) = self.recording.take() else {
                    return Err("no demonstration is being recorded".into());
                };
                demo.outcome = outcome;
                demo.raw_id = self.saved.iter().map(|d| d.raw_id + 1).max().unwrap_or(0);
                demo.validate().map_err(|e| e.to_string())?;
                self.saved.push(demo);
                if let Err(e) = write_dataset_file(&self.out, &self.saved) {
                    self.saved.pop();
                    return Err(format!("saving {}: {e}", self.out.display()));
                }
                let raw_id = self.saved.last().map(|d| d.raw_id).unwrap_or(0);
                self.env = EnvState::reset(Arc::clone(&self.env.task), &mut self.rng).map_err(|e| e.to_string())?;
                self.target = self.env.gripper;
                Ok(Some(ServerMessage::Saved { raw_id }))
            }
        }
    }
}

#[derive(Clone)]
struct Shared {
    session: Arc<Mutex<Session>>,
    states: broadcast::Sender<String>,
    task: TaskKind,
}

fn encode(msg: &ServerMessage) -> String {
    to_line(msg).expect("server messages always serialize")
}

/// Runs the service on `listener` until the task is dropped.
pub async fn serve(listener: TcpListener, options: ServeOptions) -> Result<()> {
    options.task.validate()?;
    let saved = if options.out.exists() {
        let demos = read_dataset_file(&options.out).with_context(|| format!("reading {}", options.out.display()))?;
        if let Some(d) = demos.iter().find(|d| d.task != options.task.kind) {
            anyhow::bail!("{} already holds {} demonstrations", options.out.display(), d.task);
        }
        demos
    } else {
        Vec::new()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let task = Arc::new(options.task);
    let env = EnvState::reset(Arc::clone(&task), &mut rng)?;
    let session = Session {
        target: env.gripper,
        env,
        rng,
        recording: None,
        driver: None,
        next_client: 0,
        saved,
        out: options.out,
    };
    let (states, _) = broadcast::channel(64);
    let shared = Shared {
        session: Arc::new(Mutex::new(session)),
        states,
        task: task.kind,
    };

    let ticker = shared.clone();
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(Duration::from_secs_f64(1.0 / TICK_HZ));
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
        loop {
            interval.tick().await;
            let line = {
                let mut s = ticker.session.lock().expect("session lock");
                if let Err(e) = s.step() {
                    encode(&ServerMessage::Error { message: e.to_string() })
                } else {
                    encode(&s.state_message())
                }
            };
            // No receivers is fine; nobody is watching.
            let _ = ticker.states.send(line);
        }
    });

    let app = Router::new().route("/", get(upgrade)).with_state(shared);
    axum::serve(listener, app.into_make_service_with_connect_info::<SocketAddr>()).await?;
    Ok(())
}

async fn upgrade(ws: WebSocketUpgrade, State(shared): State<Shared>) -> Response {
    ws.on_upgrade(move |socket| client(socket, shared))
}

async fn client(socket: WebSocket, shared: Shared) {
    let id = {
        let mut s = shared.session.lock().expect("session lock");
        s.next_client += 1;
        s.next_client
    };
    let (mut sink, mut stream) = socket.split();
    if sink.send(Message::Text(encode(&ServerMessage::Hello { task: shared.task }))).await.is_err() {
        return;
    }
    let (reply_tx, mut replies) = mpsc::unbounded_channel::<String>();
    let mut states = shared.states.subscribe();
    let writer = tokio::spawn(async move {
        loop {
            let line = tokio::select! {
                r = replies.recv() => match r {
                    Some(line) => line,
                    None => break,
                },
                s = states.recv() => match s {
                    Ok(line) => line,
                    // A slow reader skips stale states.
                    Err(broadcast::error::RecvError::Lagged(_)) => continue,
                    Err(broadcast::error::RecvError::Closed) => break,
                },
            };
            if sink.send(Message::Text(line)).await.is_err() {
                break;
            }
        }
    });

    while let Some(Ok(msg)) = stream.next().await {
        let text = match msg {
            Message::Text(t) => t,
            Message::Close(_) => break,
            _ => continue,
        };
        let reply = match serde_json::from_str::<ClientMessage>(&text) {
            Ok(m) => {
                let mut s = shared.session.lock().expect("session lock");
                match s.apply(id, m) {
                    Ok(r) => r,
                    Err(message) => Some(ServerMessage::Error { message }),
                }
            }
            Err(e) => Some(ServerMessage::Error {
                message: format!("unreadable message: {e}"),
            }),
        };
        if let Some(r) = reply {
            if reply_tx.send(encode(&r)).is_err() {
                break;
            }
        }
    }
    {
        let mut s = shared.session.lock().expect("session lock");
        if s.driver == Some(id) {
            s.driver = None;
        }
    }
    drop(reply_tx);
    writer.abort();
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_shapes() {
        let m: ClientMessage = serde_json::from_str(r#"{"type":"control","dx":0.01,"grip_toggle":true}"#).unwrap();
        assert_eq!(
            m,
            ClientMessage::Control {
                dx: 0.01,
                dy: 0.0,
                dz: 0.0,
                dyaw: 0.0,
                grip_toggle: true
            }
        );
        let m: ClientMessage = serde_json::from_str(r#"{"type":"end_demo","outcome":"failure"}"#).unwrap();
        assert_eq!(m, ClientMessage::EndDemo { outcome: Outcome::Failure });
        assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"begin_demo"}"#).is_ok());
        assert!(serde_json::from_str::<ClientMessage>(r#"{"type":"teleport"}"#).is_err());
        let line = encode(&ServerMessage::Saved { raw_id: 4 });
        assert_eq!(line, r#"{"type":"saved","raw_id":4}"#);
        let line = encode(&ServerMessage::State {
            tick: 1,
            objects: vec![[0.1, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]],
            gripper: [0.0; 8],
            attached: None,
        });
        assert!(line.starts_with(r#"{"type":"state","tick":1,"objects":[[1.0000000000000001e-1,"#), "{line}");
    }

    #[test]
    fn yaw_control_turns_about_vertical() {
        let task = Arc::new(TaskSpec::pick_place());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let env = EnvState::reset(Arc::clone(&task), &mut rng).unwrap();
        let start = env.gripper.pose.yaw();
        let mut s = Session {
            target: env.gripper,
            env,
            rng,
            recording: None,
            driver: None,
            next_client: 0,
            saved: Vec::new(),
            out: PathBuf::from("unused"),
        };
        let turn = ClientMessage::Control {
            dx: 0.0,
            dy: 0.0,
            dz: 0.0,
            dyaw: 0.3,
            grip_toggle: false,
        };
        s.apply(1, turn.clone()).unwrap();
        let want = lfd_core::sim::wrap_angle(start + 0.3);
        assert!((s.target.pose.yaw() - want).abs() < 1e-12);
        assert!(s.apply(2, turn).is_err());
    }
}
