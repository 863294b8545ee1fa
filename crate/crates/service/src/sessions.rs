use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use retro_core::planner::PlanSession;

/// One planning session. Mutations lock `session`, so each session has a
/// single writer at a time.
pub struct SessionSlot {
    pub session: Mutex<PlanSession>,
    /// Seconds since the Unix epoch.
    pub created: u64,
    touched: Mutex<Instant>,
}

/// In-memory sessions with idle eviction.
pub struct SessionStore {
    slots: Mutex<HashMap<String, Arc<SessionSlot>>>,
    ttl: Duration,
    capacity: usize,
}

impl SessionStore {
    pub fn new(ttl: Duration, capacity: usize) -> Self {
        SessionStore {
            slots: Mutex::new(HashMap::new()),
            ttl,
            capacity,
        }
    }

    /// Stores `session` under a fresh id, or returns `None` when full.
    pub fn insert(&self, session: PlanSession) -> Option<String> {
        let mut slots = self.slots.lock().unwrap();
        self.evict_locked(&mut slots);
        if slots.len() >= self.capacity {
            return None;
        }
        let id = uuid::Uuid::new_v4().to_string();
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        slots.insert(
            id.clone(),
            Arc::new(SessionSlot {
                session: Mutex::new(session),
                created,
                touched: Mutex::new(Instant::now()),
            }),
        );
        Some(id)
    }

    /// The live session `id`, marked as used now.
    pub fn get(&self, id: &str) -> Option<Arc<SessionSlot>> {
        let mut slots = self.slots.lock().unwrap();
        self.evict_locked(&mut slots);
        let slot = slots.get(id)?.clone();
        *slot.touched.lock().unwrap() = Instant::now();
        Some(slot)
    }

    pub fn remove(&self, id: &str) -> bool {
        self.slots.lock().unwrap().remove(id).is_some()
    }

    pub fn len(&self) -> usize {
        self.slots.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops sessions idle for longer than the TTL; returns how many.
    pub fn evict_expired(&self) -> usize {
        let mut slots = self.slots.lock().unwrap();
        self.evict_locked(&mut slots)
    }

    fn evict_locked(&self, slots: &mut HashMap<String, Arc<SessionSlot>>) -> usize {
        let before = slots.len();
        slots.retain(|_, s| s.touched.lock().unwrap().elapsed() <= self.ttl);
        before - slots.len()
    }
}
