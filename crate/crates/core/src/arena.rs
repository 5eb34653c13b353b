//! Push-only allocation arena.
//!
//! Versions and certifier state are shared by raw reference between worker
//! threads and are never reclaimed while the owning engine is alive (no
//! garbage collection), so handing out `&T` tied to the arena's lifetime is
//! sound. Allocation is a single CAS on the list head.

use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicUsize, Ordering::SeqCst};

struct Node<T> {
    value: T,
    next: *mut Node<T>,
}

pub struct PushArena<T> {
    head: AtomicPtr<Node<T>>,
    len: AtomicUsize,
}

// SAFETY: nodes are only freed in Drop (exclusive access); shared access hands
// out `&T`, which requires `T: Sync` to cross threads.
unsafe impl<T: Send + Sync> Sync for PushArena<T> {}
unsafe impl<T: Send> Send for PushArena<T> {}

impl<T> Default for PushArena<T> {
    fn default() -> Self {
        PushArena {
            head: AtomicPtr::new(ptr::null_mut()),
            len: AtomicUsize::new(0),
        }
    }
}

impl<T> PushArena<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, value: T) -> &T {
        let node = Box::into_raw(Box::new(Node {
            value,
            next: ptr::null_mut(),
        }));
        let mut head = self.head.load(SeqCst);
        loop {
            // SAFETY: `node` is not yet shared.
            unsafe { (*node).next = head };
            match self.head.compare_exchange_weak(head, node, SeqCst, SeqCst) {
                Ok(_) => break,
                Err(cur) => head = cur,
            }
        }
        self.len.fetch_add(1, SeqCst);
        // SAFETY: the node lives until the arena is dropped.
        unsafe { &(*node).value }
    }

    pub fn len(&self) -> usize {
        self.len.load(SeqCst)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<T> Drop for PushArena<T> {
    fn drop(&mut self) {
        let mut cur = *self.head.get_mut();
        while !cur.is_null() {
            // SAFETY: every node was produced by Box::into_raw and is visited once.
            let node = unsafe { Box::from_raw(cur) };
            cur = node.next;
        }
    }
}
