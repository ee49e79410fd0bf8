use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};

use super::events::Event;

/// Result of offering one event to a subscriber.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Accepted,
    /// The subscriber's queue is at capacity.
    Full,
    /// The subscriber went away.
    Closed,
}

/// A subscriber endpoint. Implementations must never block.
pub trait EventSink: Send {
    fn offer(&mut self, event: &Event) -> Delivery;
}

/// Bounded std channel sink; the receiving half is a [`Subscription`].
pub struct QueueSink {
    tx: SyncSender<Event>,
}

impl EventSink for QueueSink {
    fn offer(&mut self, event: &Event) -> Delivery {
        match self.tx.try_send(event.clone()) {
            Ok(()) => Delivery::Accepted,
            Err(TrySendError::Full(_)) => Delivery::Full,
            Err(TrySendError::Disconnected(_)) => Delivery::Closed,
        }
    }
}

/// Receiving end of a [`QueueSink`]. Iteration ends once the publisher has
/// disconnected the subscriber and the queue is drained.
pub struct Subscription {
    pub id: u64,
    rx: Receiver<Event>,
}

impl Subscription {
    pub fn try_recv(&self) -> Option<Event> {
        self.rx.try_recv().ok()
    }

    pub fn recv_timeout(&self, timeout: std::time::Duration) -> Result<Event, mpsc::RecvTimeoutError> {
        self.rx.recv_timeout(timeout)
    }

    pub fn drain(&self) -> Vec<Event> {
        self.rx.try_iter().collect()
    }
}

impl Iterator for Subscription {
    type Item = Event;

    fn next(&mut self) -> Option<Event> {
        self.rx.recv().ok()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PublisherStats {
    pub subscribers: usize,
    pub delivered: u64,
    pub disconnected_slow: u64,
    pub disconnected_closed: u64,
}

/// Fan-out to all live subscribers. Subscribers that cannot keep up are
/// dropped rather than slowing the caller.
pub struct Publisher {
    sinks: Mutex<Vec<(u64, Box<dyn EventSink>)>>,
    next_id: AtomicU64,
    queue_depth: usize,
    delivered: AtomicU64,
    slow: AtomicU64,
    closed: AtomicU64,
}

impl std::fmt::Debug for Publisher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Publisher").field("stats", &self.stats()).finish()
    }
}

impl Publisher {
    pub fn new(queue_depth: usize) -> Arc<Self> {
        Arc::new(Self {
            sinks: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(1),
            queue_depth: queue_depth.max(1),
            delivered: AtomicU64::new(0),
            slow: AtomicU64::new(0),
            closed: AtomicU64::new(0),
        })
    }

    pub fn queue_depth(&self) -> usize {
        self.queue_depth
    }

    pub fn add_sink(&self, sink: Box<dyn EventSink>) -> u64 {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        self.sinks.lock().unwrap().push((id, sink));
        id
    }

    /// Registers a std-channel subscriber with the configured queue depth.
    pub fn subscribe(&self) -> Subscription {
        let (tx, rx) = mpsc::sync_channel(self.queue_depth);
        let id = self.add_sink(Box::new(QueueSink { tx }));
        Subscription { id, rx }
    }

    pub fn unsubscribe(&self, id: u64) {
        self.sinks.lock().unwrap().retain(|(i, _)| *i != id);
    }

    pub fn has_subscribers(&self) -> bool {
        !self.sinks.lock().unwrap().is_empty()
    }

    pub fn publish(&self, events: &[Event]) {
        let mut sinks = self.sinks.lock().unwrap();
        if sinks.is_empty() {
            return;
        }
        sinks.retain_mut(|(id, sink)| {
            for ev in events {
                match sink.offer(ev) {
                    Delivery::Accepted => {
                        self.delivered.fetch_add(1, Ordering::Relaxed);
                    }
                    Delivery::Full => {
                        log::warn!("subscriber {id} fell {} events behind; disconnecting", self.queue_depth);
                        self.slow.fetch_add(1, Ordering::Relaxed);
                        return false;
                    }
                    Delivery::Closed => {
                        self.closed.fetch_add(1, Ordering::Relaxed);
                        return false;
                    }
                }
            }
            true
        });
    }

    pub fn stats(&self) -> PublisherStats {
        PublisherStats {
            subscribers: self.sinks.lock().map(|s| s.len()).unwrap_or(0),
            delivered: self.delivered.load(Ordering::Relaxed),
            disconnected_slow: self.slow.load(Ordering::Relaxed),
            disconnected_closed: self.closed.load(Ordering::Relaxed),
        }
    }
}
