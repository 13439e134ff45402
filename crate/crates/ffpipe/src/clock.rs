//! Wall-clock accounting per node: every instant since start is charged to
//! exactly one of busy, idle or communication.

use std::time::{Duration, Instant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Busy,
    Idle,
    Comm,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Totals {
    pub busy_ms: f64,
    pub idle_ms: f64,
    pub comm_ms: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct NodeClock {
    start: Instant,
    mark: Instant,
    phase: Phase,
    spent: [Duration; 3],
}

impl NodeClock {
    /// Starts in the busy phase.
    pub fn start() -> Self {
        Self::start_at(Instant::now())
    }

    pub fn start_at(start: Instant) -> Self {
        NodeClock {
            start,
            mark: start,
            phase: Phase::Busy,
            spent: [Duration::ZERO; 3],
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Charges time since the last switch to the current phase and enters
    /// `phase`; returns the phase left.
    pub fn switch(&mut self, phase: Phase) -> Phase {
        let now = Instant::now().max(self.mark);
        self.spent[self.phase as usize] += now - self.mark;
        self.mark = now;
        std::mem::replace(&mut self.phase, phase)
    }

    /// Runs `f` charged to `phase`, then returns to the previous phase.
    pub fn during<T>(&mut self, phase: Phase, f: impl FnOnce() -> T) -> T {
        let prev = self.switch(phase);
        let out = f();
        self.switch(prev);
        out
    }

    pub fn elapsed(&self) -> Duration {
        Instant::now().saturating_duration_since(self.start)
    }

    /// Milliseconds since start, for timestamps comparable across nodes that
    /// share a start instant.
    pub fn now_ms(&self) -> f64 {
        ms(self.elapsed())
    }

    /// Totals up to now, the open phase included.
    pub fn totals(&self) -> Totals {
        let now = Instant::now().max(self.mark);
        let mut spent = self.spent;
        spent[self.phase as usize] += now - self.mark;
        Totals {
            busy_ms: ms(spent[0]),
            idle_ms: ms(spent[1]),
            comm_ms: ms(spent[2]),
            wall_ms: ms(now - self.start),
        }
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phases_sum_to_wall() {
        let mut c = NodeClock::start();
        std::thread::sleep(Duration::from_millis(5));
        c.during(Phase::Idle, || std::thread::sleep(Duration::from_millis(10)));
        c.switch(Phase::Comm);
        std::thread::sleep(Duration::from_millis(3));
        assert_eq!(c.phase(), Phase::Comm);
        let t = c.totals();
        assert!(t.idle_ms >= 10.0 && t.busy_ms >= 5.0 && t.comm_ms >= 3.0, "{t:?}");
        assert!((t.busy_ms + t.idle_ms + t.comm_ms - t.wall_ms).abs() < 1e-6, "{t:?}");
    }
}
