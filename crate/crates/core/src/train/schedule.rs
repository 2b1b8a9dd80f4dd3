//! Step schedules. Both hit their endpoints exactly: `start` at step 0 and
//! `end` at or after `total`.

use std::f64::consts::PI;

pub fn cosine_schedule(start: f64, end: f64, step: u64, total: u64) -> f64 {
    if step == 0 && total > 0 {
        return start;
    }
    if step >= total {
        return end;
    }
    let t = step as f64 / total as f64;
    end + 0.5 * (start - end) * (1.0 + (PI * t).cos())
}

pub fn linear_schedule(start: f64, end: f64, step: u64, total: u64) -> f64 {
    if step == 0 && total > 0 {
        return start;
    }
    if step >= total {
        return end;
    }
    let t = step as f64 / total as f64;
    start + (end - start) * t
}
