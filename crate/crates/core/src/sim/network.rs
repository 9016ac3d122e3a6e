//! Synchronous message queue. Messages sent during a step are delivered in
//! send order when the step ends, so delivery never depends on scheduling.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Device(usize),
    Custodian(u32),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope<M> {
    pub seq: u64,
    pub from: Endpoint,
    pub to: Endpoint,
    pub payload: M,
}

#[derive(Debug, Clone)]
pub struct Network<M> {
    queue: VecDeque<Envelope<M>>,
    next_seq: u64,
}

impl<M> Default for Network<M> {
    fn default() -> Self {
        Network {
            queue: VecDeque::new(),
            next_seq: 0,
        }
    }
}

impl<M> Network<M> {
    pub fn send(&mut self, from: Endpoint, to: Endpoint, payload: M) {
        self.queue.push_back(Envelope {
            seq: self.next_seq,
            from,
            to,
            payload,
        });
        self.next_seq += 1;
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Total messages ever sent.
    pub fn sent(&self) -> u64 {
        self.next_seq
    }

    /// Everything queued addressed to `to`, in send order.
    pub fn deliver_to(&mut self, to: Endpoint) -> Vec<Envelope<M>> {
        let (mine, rest): (VecDeque<_>, VecDeque<_>) =
            self.queue.drain(..).partition(|e| e.to == to);
        self.queue = rest;
        mine.into_iter().collect()
    }

    /// Everything queued, in send order.
    pub fn deliver_all(&mut self) -> Vec<Envelope<M>> {
        self.queue.drain(..).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_per_destination() {
        let mut net = Network::default();
        net.send(Endpoint::Device(0), Endpoint::Custodian(1), "a");
        net.send(Endpoint::Device(1), Endpoint::Custodian(2), "b");
        net.send(Endpoint::Device(2), Endpoint::Custodian(1), "c");
        let got: Vec<_> = net
            .deliver_to(Endpoint::Custodian(1))
            .into_iter()
            .map(|e| (e.seq, e.payload))
            .collect();
        assert_eq!(got, vec![(0, "a"), (2, "c")]);
        assert_eq!(net.len(), 1);
        assert_eq!(net.deliver_all()[0].payload, "b");
        assert!(net.is_empty());
        assert_eq!(net.sent(), 3);
    }
}
