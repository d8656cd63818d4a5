// SPDX-License-Identifier: Apache-2.0

//! The global configuration lock: one holder at a time, granted in arrival
//! order.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

#[derive(Debug, Default)]
struct Queue {
    next_ticket: u64,
    serving: u64,
    abandoned: BTreeSet<u64>,
    holder: Option<String>,
    grants: u64,
    max_waiting: u64,
}

impl Queue {
    fn skip_abandoned(&mut self) {
        while self.abandoned.remove(&self.serving) {
            self.serving += 1;
        }
    }
}

/// Ticket lock. Waiters that time out give up their place in the queue.
#[derive(Debug, Default)]
pub struct ConfigLock {
    queue: Mutex<Queue>,
    turn: Condvar,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{who} timed out after {waited_ms} ms waiting for the configuration lock")]
pub struct LockTimeout {
    pub who: String,
    pub waited_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LockStats {
    pub grants: u64,
    pub max_waiting: u64,
    pub holder: Option<String>,
}

/// Held configuration lock; released on drop.
#[derive(Debug)]
pub struct LockGuard<'a> {
    lock: &'a ConfigLock,
}

impl ConfigLock {
    pub fn new() -> Self {
        ConfigLock::default()
    }

    pub fn acquire(&self, who: &str, timeout: Duration) -> Result<LockGuard<'_>, LockTimeout> {
        let start = Instant::now();
        let deadline = start + timeout;
        let mut q = self.queue.lock();
        let ticket = q.next_ticket;
        q.next_ticket += 1;
        q.max_waiting = q.max_waiting.max(q.next_ticket - q.serving);
        while q.serving != ticket {
            if self.turn.wait_until(&mut q, deadline).timed_out() && q.serving != ticket {
                q.abandoned.insert(ticket);
                q.skip_abandoned();
                self.turn.notify_all();
                return Err(LockTimeout { who: who.to_string(), waited_ms: start.elapsed().as_millis() });
            }
        }
        debug_assert!(q.holder.is_none());
        q.holder = Some(who.to_string());
        q.grants += 1;
        Ok(LockGuard { lock: self })
    }

    pub fn stats(&self) -> LockStats {
        let q = self.queue.lock();
        LockStats { grants: q.grants, max_waiting: q.max_waiting, holder: q.holder.clone() }
    }
}

impl Drop for LockGuard<'_> {
    fn drop(&mut self) {
        let mut q = self.lock.queue.lock();
        q.holder = None;
        q.serving += 1;
        q.skip_abandoned();
        self.lock.turn.notify_all();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn grants_in_arrival_order_one_at_a_time() {
        let lock = Arc::new(ConfigLock::new());
        let inside = Arc::new(AtomicUsize::new(0));
        let order = Arc::new(Mutex::new(Vec::new()));
        let first = lock.acquire("main", Duration::from_secs(1)).unwrap();
        let mut handles = Vec::new();
        for i in 0..6 {
            let (l, inside, order) = (lock.clone(), inside.clone(), order.clone());
            handles.push(std::thread::spawn(move || {
                let _g = l.acquire(&format!("t{i}"), Duration::from_secs(10)).unwrap();
                assert_eq!(inside.fetch_add(1, Ordering::SeqCst), 0);
                order.lock().push(i);
                std::thread::sleep(Duration::from_millis(2));
                inside.fetch_sub(1, Ordering::SeqCst);
            }));
            // Let thread i enqueue before thread i + 1.
            while lock.queue.lock().next_ticket < i as u64 + 2 {
                std::thread::yield_now();
            }
        }
        drop(first);
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(*order.lock(), (0..6).collect::<Vec<_>>());
        assert_eq!(lock.stats().grants, 7);
    }

    #[test]
    fn timed_out_waiter_does_not_block_the_queue() {
        let lock = ConfigLock::new();
        let g = lock.acquire("a", Duration::from_millis(10)).unwrap();
        let err = lock.acquire("b", Duration::from_millis(20)).unwrap_err();
        assert_eq!(err.who, "b");
        drop(g);
        let _c = lock.acquire("c", Duration::from_millis(10)).unwrap();
        assert_eq!(lock.stats().holder.as_deref(), Some("c"));
    }
}
