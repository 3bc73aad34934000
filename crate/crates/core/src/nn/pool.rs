//! Per-thread free list of activation buffers.
//!
//! Tapes allocate a few megabytes per layer and drop them again every
//! epoch. Fresh allocations of that size come straight from the kernel and
//! page-fault on first touch, which costs as much as the arithmetic, so
//! released buffers are kept for reuse instead.

use std::cell::RefCell;

use ndarray::Array2;

const MAX_POOLED: usize = 96;

thread_local! {
    static FREE: RefCell<Vec<Vec<f64>>> = const { RefCell::new(Vec::new()) };
}

/// A zero-filled `(rows, cols)` array, reusing a released buffer if one is big enough.
pub(crate) fn zeros(shape: (usize, usize)) -> Array2<f64> {
    let len = shape.0 * shape.1;
    let buf = FREE.with(|f| {
        let mut f = f.borrow_mut();
        // smallest buffer that fits
        let best = f
            .iter()
            .enumerate()
            .filter(|(_, v)| v.capacity() >= len)
            .min_by_key(|(_, v)| v.capacity())
            .map(|(i, _)| i);
        best.map(|i| f.swap_remove(i))
    });
    let mut buf = buf.unwrap_or_else(|| Vec::with_capacity(len));
    buf.clear();
    buf.resize(len, 0.0);
    Array2::from_shape_vec(shape, buf).expect("length matches shape")
}

/// Returns an array's storage to the pool.
pub(crate) fn recycle(a: Array2<f64>) {
    let (buf, _) = a.into_raw_vec_and_offset();
    if buf.capacity() == 0 {
        return;
    }
    FREE.with(|f| {
        let mut f = f.borrow_mut();
        if f.len() < MAX_POOLED {
            f.push(buf);
        }
    });
}
