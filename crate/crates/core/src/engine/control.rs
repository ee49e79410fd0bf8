use std::sync::mpsc::{self, Receiver, Sender};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GatingParams, MultiplexGraph, Pair};
use crate::ingest::SignalRegistry;
use crate::spectral::SimilarityMode;

/// A node given by index or by label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeRef {
    Index(usize),
    Label(String),
}

impl NodeRef {
    fn resolve(&self, registry: &SignalRegistry) -> Result<usize, ControlError> {
        match self {
            Self::Index(i) if *i < registry.len() => Ok(*i),
            Self::Index(i) => Err(ControlError::UnknownPair(format!("node {i} out of range"))),
            Self::Label(l) => registry
                .lookup(l)
                .map(|id| id.index)
                .ok_or_else(|| ControlError::UnknownPair(format!("no signal labelled {l:?}"))),
        }
    }
}

impl From<usize> for NodeRef {
    fn from(i: usize) -> Self {
        Self::Index(i)
    }
}

impl From<&str> for NodeRef {
    fn from(s: &str) -> Self {
        Self::Label(s.to_string())
    }
}

/// Operator commands, posted as JSON with a `cmd` tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlCommand {
    SetThreshold { theta_on: f64, theta_off: f64 },
    PinPair { i: NodeRef, j: NodeRef },
    UnpinPair { i: NodeRef, j: NodeRef },
    SetSimilarityMode { mode: SimilarityMode },
    Pause,
    Resume,
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "message", rename_all = "snake_case")]
pub enum ControlError {
    #[error("invalid command: {0}")]
    InvalidCommand(String),
    #[error("unknown pair: {0}")]
    UnknownPair(String),
    #[error("engine stopped")]
    EngineStopped,
}

/// The steerable part of engine state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlState {
    pub theta_on: f64,
    pub theta_off: f64,
    pub similarity_mode: SimilarityMode,
    pub paused: bool,
    pub pinned: Vec<Pair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReply {
    pub ok: bool,
    /// First tick on which the command is in effect.
    pub effective_tick: u64,
    pub error: Option<ControlError>,
    pub state: ControlState,
}

/// Everything a command may touch.
pub struct Steerable<'a> {
    pub gating: &'a mut GatingParams,
    pub mode: &'a mut SimilarityMode,
    pub paused: &'a mut bool,
    pub graph: &'a mut MultiplexGraph,
    pub registry: &'a SignalRegistry,
}

impl Steerable<'_> {
    pub fn state(&self) -> ControlState {
        ControlState {
            theta_on: self.gating.theta_on,
            theta_off: self.gating.theta_off,
            similarity_mode: *self.mode,
            paused: *self.paused,
            pinned: self.graph.pinned().iter().copied().collect(),
        }
    }

    fn pair(&self, i: &NodeRef, j: &NodeRef) -> Result<Pair, ControlError> {
        let (a, b) = (i.resolve(self.registry)?, j.resolve(self.registry)?);
        Pair::checked(a, b, self.registry.len()).map_err(|e| ControlError::UnknownPair(e.to_string()))
    }

    /// Applies one command; on error nothing changes.
    pub fn apply(&mut self, cmd: &ControlCommand, tick: u64) -> Result<(), ControlError> {
        match cmd {
            ControlCommand::SetThreshold { theta_on, theta_off } => {
                let next = GatingParams {
                    theta_on: *theta_on,
                    theta_off: *theta_off,
                    alpha: self.gating.alpha,
                };
                next.validate()
                    .map_err(|e| ControlError::InvalidCommand(e.to_string()))?;
                *self.gating = next;
            }
            ControlCommand::PinPair { i, j } => {
                let p = self.pair(i, j)?;
                self.graph.pin(p, tick);
            }
            ControlCommand::UnpinPair { i, j } => {
                let p = self.pair(i, j)?;
                if !self.graph.unpin(p) {
                    return Err(ControlError::UnknownPair(format!("pair {p} is not pinned")));
                }
            }
            ControlCommand::SetSimilarityMode { mode } => *self.mode = *mode,
            ControlCommand::Pause => *self.paused = true,
            ControlCommand::Resume => *self.paused = false,
        }
        Ok(())
    }
}

pub type ReplyFn = Box<dyn FnOnce(ControlReply) + Send>;

/// Queued command awaiting the tick driver.
pub struct Envelope {
    pub command: ControlCommand,
    pub reply: Option<ReplyFn>,
}

/// Cloneable submission side of the control queue.
#[derive(Clone)]
pub struct ControlHandle {
    tx: Sender<Envelope>,
}

impl std::fmt::Debug for ControlHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ControlHandle")
    }
}

pub fn control_channel() -> (ControlHandle, Receiver<Envelope>) {
    let (tx, rx) = mpsc::channel();
    (ControlHandle { tx }, rx)
}

impl ControlHandle {
    /// Queues `command`; `reply` runs on the tick thread once it is applied.
    pub fn submit(&self, command: ControlCommand, reply: Option<ReplyFn>) -> Result<(), ControlError> {
        self.tx
            .send(Envelope { command, reply })
            .map_err(|_| ControlError::EngineStopped)
    }

    /// Queues `command` and blocks until the engine replies.
    pub fn submit_wait(&self, command: ControlCommand) -> Result<ControlReply, ControlError> {
        let (tx, rx) = mpsc::channel();
        self.submit(
            command,
            Some(Box::new(move |r| {
                let _ = tx.send(r);
            })),
        )?;
        rx.recv().map_err(|_| ControlError::EngineStopped)
    }
}
