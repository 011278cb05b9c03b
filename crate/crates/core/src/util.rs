use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Runs `f` over `items` on at most `workers` scoped threads and returns the
/// results in input order, whatever order they complete in.
pub(crate) fn fan_out<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = workers.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }

    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(idx) else { break };
                let result = f(item);
                slots.lock().expect("fan-out slots poisoned")[idx] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("fan-out slots poisoned")
        .into_iter()
        .map(|r| r.expect("every slot is filled once the scope joins"))
        .collect()
}

/// Truncates `text` to at most `budget` bytes on a char boundary, appending a
/// marker when anything was cut.
pub(crate) fn truncate_chars(text: &str, budget: usize) -> String {
    if text.len() <= budget {
        return text.to_string();
    }
    const MARKER: &str = "\n[... truncated ...]";
    let keep = budget.saturating_sub(MARKER.len());
    let mut end = keep.min(text.len());
    while end > 0 && !text.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}{}", &text[..end], MARKER)
}

/// Shortest round-tripping decimal rendering (`0.98`, `44`).
pub(crate) fn fmt_number(value: f64) -> String {
    format!("{value}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fan_out_preserves_order() {
        let items: Vec<u64> = (0..50).collect();
        let out = fan_out(&items, 8, |x| {
            std::thread::sleep(std::time::Duration::from_millis(50 - x));
            x * 2
        });
        assert_eq!(out, items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn fan_out_empty() {
        let out: Vec<u8> = fan_out(&[] as &[u8], 4, |x| *x);
        assert!(out.is_empty());
    }

    #[test]
    fn truncation_respects_budget_and_boundaries() {
        let text = "é".repeat(100);
        let cut = truncate_chars(&text, 50);
        assert!(cut.len() <= 50);
        assert!(cut.ends_with("[... truncated ...]"));
        assert_eq!(truncate_chars("short", 50), "short");
    }
}
