//! Credit-based flow control, used at both stream and connection level.

/// Send-side credit: the peer's advertised absolute byte limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SendCredit {
    pub limit: u64,
    pub used: u64,
}

impl SendCredit {
    pub fn new(limit: u64) -> Self {
        SendCredit { limit, used: 0 }
    }

    pub fn available(&self) -> u64 {
        self.limit.saturating_sub(self.used)
    }

    /// Raises the limit; stale (smaller) advertisements are ignored.
    pub fn update(&mut self, limit: u64) -> bool {
        if limit > self.limit {
            self.limit = limit;
            true
        } else {
            false
        }
    }
}

/// Receive-side window: tracks what was advertised and consumed and decides
/// when a fresh advertisement is due.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecvWindow {
    pub window: u64,
    pub advertised: u64,
    pub consumed: u64,
}

impl RecvWindow {
    pub fn new(window: u64) -> Self {
        RecvWindow {
            window,
            advertised: window,
            consumed: 0,
        }
    }

    /// Whether data ending at `end` stays within what was advertised.
    pub fn permits(&self, end: u64) -> bool {
        end <= self.advertised
    }

    /// Records consumption; returns a new absolute limit once at least half
    /// the window has been consumed since the last advertisement.
    pub fn consume(&mut self, n: u64) -> Option<u64> {
        self.consumed += n;
        if self.advertised - self.consumed.min(self.advertised) <= self.window / 2 {
            self.advertised = self.consumed + self.window;
            Some(self.advertised)
        } else {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn update_at_half_window() {
        let mut w = RecvWindow::new(100);
        assert_eq!(w.consume(49), None);
        assert_eq!(w.consume(1), Some(150));
        assert!(w.permits(150));
        assert!(!w.permits(151));
    }

    #[test]
    fn credit_never_shrinks() {
        let mut c = SendCredit::new(10);
        c.used = 10;
        assert_eq!(c.available(), 0);
        assert!(!c.update(5));
        assert!(c.update(20));
        assert_eq!(c.available(), 10);
    }
}
