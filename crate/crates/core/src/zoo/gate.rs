use std::sync::{Condvar, Mutex};

/// Counting semaphore limiting concurrent calls into one backend.
#[derive(Debug)]
pub struct Gate {
    limit: Option<usize>,
    active: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    gate: &'a Gate,
}

impl Gate {
    /// `None` disables the gate.
    pub fn new(limit: Option<usize>) -> Self {
        Self {
            limit: limit.map(|l| l.max(1)),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Option<Permit<'_>> {
        let limit = self.limit?;
        let mut active = self.active.lock().expect("gate mutex poisoned");
        while *active >= limit {
            active = self.freed.wait(active).expect("gate mutex poisoned");
        }
        *active += 1;
        Some(Permit { gate: self })
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.gate.active.lock().expect("gate mutex poisoned");
        *active -= 1;
        self.gate.freed.notify_one();
    }
}
