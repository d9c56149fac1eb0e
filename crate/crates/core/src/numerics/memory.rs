//! Element-counting allocation hook.
//!
//! While a [`MemoryProbe`] is alive on a thread, every tensor buffer created
//! on that thread registers its element count with the probe and releases it
//! again when dropped (whichever thread drops it). The probe reports the peak
//! number of simultaneously live elements, the number of allocations and the
//! largest single allocation.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

#[derive(Debug, Default)]
pub struct Counters {
    live: AtomicU64,
    peak: AtomicU64,
    allocs: AtomicU64,
    largest: AtomicU64,
    shapes: Option<Mutex<Vec<Vec<usize>>>>,
}

impl Counters {
    fn register(&self, shape: &[usize], elements: usize) {
        let elements = elements as u64;
        let live = self.live.fetch_add(elements, Ordering::Relaxed) + elements;
        self.peak.fetch_max(live, Ordering::Relaxed);
        self.allocs.fetch_add(1, Ordering::Relaxed);
        self.largest.fetch_max(elements, Ordering::Relaxed);
        if let Some(shapes) = &self.shapes {
            shapes.lock().expect("shape log").push(shape.to_vec());
        }
    }

    fn release(&self, elements: usize) {
        self.live.fetch_sub(elements as u64, Ordering::Relaxed);
    }
}

/// Registration handle stored inside a tracked tensor buffer.
#[derive(Debug)]
pub(crate) struct Tracked {
    counters: Arc<Counters>,
    elements: usize,
}

impl Drop for Tracked {
    fn drop(&mut self) {
        self.counters.release(self.elements);
    }
}

thread_local! {
    static ACTIVE: RefCell<Option<Arc<Counters>>> = const { RefCell::new(None) };
}

pub(crate) fn track(shape: &[usize], elements: usize) -> Option<Tracked> {
    ACTIVE.with(|active| {
        active.borrow().as_ref().map(|counters| {
            counters.register(shape, elements);
            Tracked {
                counters: Arc::clone(counters),
                elements,
            }
        })
    })
}

/// Scope guard that enables allocation counting on the current thread.
#[derive(Debug)]
pub struct MemoryProbe {
    counters: Arc<Counters>,
    previous: Option<Arc<Counters>>,
}

impl MemoryProbe {
    pub fn start() -> Self {
        Self::install(Counters::default())
    }

    /// Like [`MemoryProbe::start`] but also records the shape of every allocation.
    pub fn start_with_shapes() -> Self {
        Self::install(Counters {
            shapes: Some(Mutex::new(Vec::new())),
            ..Counters::default()
        })
    }

    fn install(counters: Counters) -> Self {
        let counters = Arc::new(counters);
        let previous = ACTIVE.with(|active| active.borrow_mut().replace(Arc::clone(&counters)));
        MemoryProbe { counters, previous }
    }

    pub fn live_elements(&self) -> u64 {
        self.counters.live.load(Ordering::Relaxed)
    }

    pub fn peak_elements(&self) -> u64 {
        self.counters.peak.load(Ordering::Relaxed)
    }

    pub fn allocations(&self) -> u64 {
        self.counters.allocs.load(Ordering::Relaxed)
    }

    pub fn largest_allocation(&self) -> u64 {
        self.counters.largest.load(Ordering::Relaxed)
    }

    /// Shapes of all allocations so far; empty unless started with shape logging.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.counters
            .shapes
            .as_ref()
            .map(|s| s.lock().expect("shape log").clone())
            .unwrap_or_default()
    }
}

impl Drop for MemoryProbe {
    fn drop(&mut self) {
        let previous = self.previous.take();
        ACTIVE.with(|active| *active.borrow_mut() = previous);
    }
}
