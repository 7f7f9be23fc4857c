//! Temporary per-op timing accumulator (to be removed after tuning).

use std::cell::RefCell;
use std::collections::HashMap;
use std::time::Instant;

thread_local! {
    static TIMES: RefCell<HashMap<&'static str, (f64, u64)>> = RefCell::new(HashMap::new());
}

pub struct OpTimer {
    name: &'static str,
    start: Instant,
}

impl OpTimer {
    pub fn new(name: &'static str) -> OpTimer {
        OpTimer { name, start: Instant::now() }
    }
}

impl Drop for OpTimer {
    fn drop(&mut self) {
        let dt = self.start.elapsed().as_secs_f64();
        TIMES.with(|t| {
            let mut t = t.borrow_mut();
            let e = t.entry(self.name).or_insert((0.0, 0));
            e.0 += dt;
            e.1 += 1;
        });
    }
}

pub fn report() -> String {
    TIMES.with(|t| {
        let t = t.borrow();
        let mut rows: Vec<(&str, f64, u64)> = t.iter().map(|(k, v)| (*k, v.0, v.1)).collect();
        rows.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        let mut out = String::new();
        for (name, secs, calls) in rows {
            out.push_str(&format!("{name}: {:.1} ms total, {} calls\n", secs * 1000.0, calls));
        }
        out
    })
}

pub fn reset() {
    TIMES.with(|t| t.borrow_mut().clear());
}
