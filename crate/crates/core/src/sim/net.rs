//! Connections: per-(sender node, receiver node, stream) FIFO links with
//! credit-based flow control standing in for transport backpressure.
//!
//! A sender may push while it holds credit; every push consumes one credit
//! and schedules delivery after the link latency. Credits return only when
//! the receiver actually consumes (or deliberately discards) a frame, so a
//! stopped receiver stalls its senders once the pipeline fills.

use crate::model::StreamId;

/// One directed connection. Frames in flight are the scheduled deliver
/// events; `in_flight` counts them for the conservation invariant.
#[derive(Debug)]
pub(crate) struct Conn {
    pub stream: StreamId,
    pub sender_node: usize,
    pub receiver_node: usize,
    pub receiver_slot: u32,
    pub credit: u32,
    pub capacity: u32,
    pub in_flight: u32,
    /// Cumulative data units pushed (sender-side progress numerator).
    pub data_pushed: u64,
    /// Cumulative data units acked via credit returns.
    pub data_acked: u64,
    /// Set when either endpoint failed; nothing is pushed afterwards.
    pub closed: bool,
}

impl Conn {
    pub fn new(
        stream: StreamId,
        sender_node: usize,
        receiver_node: usize,
        receiver_slot: u32,
        capacity: u32,
    ) -> Self {
        Conn {
            stream,
            sender_node,
            receiver_node,
            receiver_slot,
            credit: capacity,
            capacity,
            in_flight: 0,
            data_pushed: 0,
            data_acked: 0,
            closed: false,
        }
    }

    /// True when a frame may be pushed right now.
    pub fn can_push(&self) -> bool {
        !self.closed && self.credit > 0
    }

    /// Consumes one credit for a push. Callers must have checked
    /// [`Conn::can_push`].
    pub fn take_credit(&mut self) {
        debug_assert!(self.can_push());
        self.credit -= 1;
        self.in_flight += 1;
        debug_assert!(self.in_flight <= self.capacity);
    }

    pub fn delivered(&mut self) {
        self.in_flight = self.in_flight.saturating_sub(1);
    }

    /// Restores one credit after the receiver consumed a frame.
    pub fn restore_credit(&mut self) {
        self.credit = (self.credit + 1).min(self.capacity);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conn(capacity: u32) -> Conn {
        Conn::new(StreamId(0), 0, 1, 0, capacity)
    }

    #[test]
    fn push_consumes_credit_until_blocked() {
        let mut c = conn(1);
        assert!(c.can_push());
        c.take_credit();
        assert!(!c.can_push());
    }

    #[test]
    fn consumption_restores_credit() {
        let mut c = conn(1);
        c.take_credit();
        c.delivered();
        assert!(!c.can_push());
        c.restore_credit();
        assert!(c.can_push());
        // Credits never exceed capacity.
        c.restore_credit();
        assert_eq!(c.credit, 1);
    }

    #[test]
    fn closed_connections_reject_pushes() {
        let mut c = conn(4);
        c.closed = true;
        assert!(!c.can_push());
    }

    #[test]
    fn in_flight_never_exceeds_capacity() {
        let mut c = conn(3);
        for _ in 0..3 {
            assert!(c.can_push());
            c.take_credit();
        }
        assert!(!c.can_push());
        assert_eq!(c.in_flight, 3);
        c.delivered();
        c.restore_credit();
        assert!(c.can_push());
    }
}
