use super::IngestError;

/// Fixed-capacity sliding window over the most recent samples of one signal.
///
/// Writes are O(1) and never reallocate. Logical order runs oldest to newest.
#[derive(Debug, Clone, PartialEq)]
pub struct RingBuffer {
    data: Box<[f64]>,
    head: usize,
    filled: usize,
}

impl RingBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ring buffer capacity must be positive");
        Self {
            data: vec![0.0; capacity].into_boxed_slice(),
            head: 0,
            filled: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.data.len()
    }

    /// Number of valid samples, saturating at capacity.
    pub fn filled(&self) -> usize {
        self.filled
    }

    pub fn is_full(&self) -> bool {
        self.filled == self.data.len()
    }

    /// Appends `x`, evicting the oldest sample when full.
    ///
    /// Non-finite samples are rejected and leave the window untouched.
    pub fn push(&mut self, x: f64) -> Result<(), IngestError> {
        if !x.is_finite() {
            return Err(IngestError::NonFiniteSample(x));
        }
        self.data[self.head] = x;
        self.head = (self.head + 1) % self.data.len();
        if self.filled < self.data.len() {
            self.filled += 1;
        }
        Ok(())
    }

    /// Most recent sample, if any.
    pub fn newest(&self) -> Option<f64> {
        if self.filled == 0 {
            return None;
        }
        let n = self.data.len();
        Some(self.data[(self.head + n - 1) % n])
    }

    /// The two contiguous halves of the logical window, oldest first.
    pub fn as_slices(&self) -> (&[f64], &[f64]) {
        if self.filled < self.data.len() {
            (&self.data[..self.filled], &[])
        } else {
            let (a, b) = self.data.split_at(self.head);
            (b, a)
        }
    }

    /// Copies the logical window into `out`, which must hold `filled()` values.
    pub fn copy_into(&self, out: &mut [f64]) {
        let (a, b) = self.as_slices();
        out[..a.len()].copy_from_slice(a);
        out[a.len()..a.len() + b.len()].copy_from_slice(b);
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        let (a, b) = self.as_slices();
        a.iter().chain(b.iter()).copied()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.iter().collect()
    }

    /// Last `k` samples (or fewer during warm-up), oldest first.
    pub fn tail(&self, k: usize) -> Vec<f64> {
        let skip = self.filled.saturating_sub(k);
        self.iter().skip(skip).collect()
    }
}
