//! Adversarial alternation schedule.
//!
//! The critic trains alone for a warmup span, then the loop settles into a
//! fixed critic:generator ratio. Each time the generator completes another
//! `burst_every` updates, the critic gets `burst_steps` extra updates before
//! the ratio resumes. Warmup and burst updates do not count toward the
//! ratio tally.

use crate::harness::events::{Event, EventKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepKind {
    D,
    G,
}

#[derive(Debug, Clone)]
pub struct GanSchedule {
    warmup: u64,
    ratio: u64,
    burst_steps: u64,
    burst_every: u64,
    d_total: u64,
    g_total: u64,
    d_since_g: u64,
    burst_remaining: u64,
}

impl GanSchedule {
    pub fn new(warmup: u64, ratio: u64, burst_steps: u64, burst_every: u64) -> Self {
        GanSchedule {
            warmup,
            ratio,
            burst_steps,
            burst_every,
            d_total: 0,
            g_total: 0,
            d_since_g: 0,
            burst_remaining: 0,
        }
    }

    pub fn g_total(&self) -> u64 {
        self.g_total
    }

    pub fn d_total(&self) -> u64 {
        self.d_total
    }

    /// Decides what the next optimizer update trains and advances the
    /// internal counters.
    pub fn next(&mut self) -> StepKind {
        if self.d_total < self.warmup {
            self.d_total += 1;
            return StepKind::D;
        }
        if self.burst_remaining > 0 {
            self.burst_remaining -= 1;
            self.d_total += 1;
            return StepKind::D;
        }
        if self.d_since_g < self.ratio {
            self.d_since_g += 1;
            self.d_total += 1;
            return StepKind::D;
        }
        self.d_since_g = 0;
        self.g_total += 1;
        if self.burst_every > 0 && self.g_total % self.burst_every == 0 {
            self.burst_remaining = self.burst_steps;
        }
        StepKind::G
    }
}

/// Audits an event trace against the schedule rules without reusing the
/// scheduler: replays only d_step/g_step records and checks, position by
/// position, that each one is what the rules demand. Returns the number of
/// optimizer steps audited.
pub fn verify_gan_trace(
    events: &[Event],
    warmup: u64,
    ratio: u64,
    burst_steps: u64,
    burst_every: u64,
) -> Result<u64, String> {
    let mut step_no = 0u64;
    let mut g_count = 0u64;
    let mut d_run = 0u64;
    let mut owed_burst = 0u64;
    for ev in events {
        let kind = match ev.kind {
            EventKind::DStep => StepKind::D,
            EventKind::GStep => StepKind::G,
            _ => continue,
        };
        step_no += 1;
        if ev.step != step_no {
            return Err(format!(
                "optimizer event {} carries step {}, expected {}",
                step_no, ev.step, step_no
            ));
        }
        if step_no <= warmup {
            if kind != StepKind::D {
                return Err(format!("step {} inside warmup is not a d_step", step_no));
            }
            continue;
        }
        match kind {
            StepKind::D => {
                if owed_burst > 0 {
                    owed_burst -= 1;
                } else {
                    d_run += 1;
                    if d_run > ratio {
                        return Err(format!(
                            "step {}: {} critic steps in a row exceeds the {}:1 ratio",
                            step_no,
                            d_run,
                            ratio
                        ));
                    }
                }
            }
            StepKind::G => {
                if owed_burst > 0 {
                    return Err(format!(
                        "step {}: g_step arrived with {} burst critic steps still owed",
                        step_no, owed_burst
                    ));
                }
                if d_run != ratio {
                    return Err(format!(
                        "step {}: g_step after {} critic steps, ratio demands {}",
                        step_no, d_run, ratio
                    ));
                }
                d_run = 0;
                g_count += 1;
                if burst_every > 0 && g_count % burst_every == 0 {
                    owed_burst = burst_steps;
                }
            }
        }
    }
    Ok(step_no)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(schedule: &mut GanSchedule, n: u64) -> Vec<Event> {
        (1..=n)
            .map(|step| Event {
                step,
                kind: match schedule.next() {
                    StepKind::D => EventKind::DStep,
                    StepKind::G => EventKind::GStep,
                },
                value: 0.0,
            })
            .collect()
    }

    #[test]
    fn warmup_is_critic_only() {
        let mut s = GanSchedule::new(100, 5, 200, 500);
        let t = trace(&mut s, 100);
        assert!(t.iter().all(|e| e.kind == EventKind::DStep));
        assert_eq!(s.g_total(), 0);
    }

    #[test]
    fn ratio_blocks_after_warmup() {
        let mut s = GanSchedule::new(10, 5, 200, 500);
        let t = trace(&mut s, 10 + 6 * 4);
        for block in 0..4 {
            let base = 10 + block * 6;
            for i in 0..5 {
                assert_eq!(t[base + i].kind, EventKind::DStep, "block {} d {}", block, i);
            }
            assert_eq!(t[base + 5].kind, EventKind::GStep, "block {}", block);
        }
    }

    #[test]
    fn burst_fires_after_every_burst_every_g_steps() {
        let mut s = GanSchedule::new(0, 2, 4, 3);
        // pattern: (DDG) x3 then 4 burst Ds, repeating
        let t = trace(&mut s, 3 * 3 + 4 + 3 * 3 + 4);
        let kinds: Vec<char> = t
            .iter()
            .map(|e| if e.kind == EventKind::DStep { 'D' } else { 'G' })
            .collect();
        let s: String = kinds.into_iter().collect();
        assert_eq!(s, "DDGDDGDDGDDDDDDGDDGDDGDDDD");
    }

    #[test]
    fn generated_trace_passes_independent_verifier() {
        let mut s = GanSchedule::new(50, 5, 20, 7);
        let t = trace(&mut s, 1000);
        let audited = verify_gan_trace(&t, 50, 5, 20, 7).unwrap();
        assert_eq!(audited, 1000);
    }

    #[test]
    fn verifier_rejects_planted_violations() {
        let mut s = GanSchedule::new(10, 5, 20, 7);
        let mut t = trace(&mut s, 300);
        // a generator step smuggled into warmup
        let mut bad = t.clone();
        bad[3].kind = EventKind::GStep;
        assert!(verify_gan_trace(&bad, 10, 5, 20, 7).is_err());
        // a generator step one critic step too early
        t[14].kind = EventKind::GStep;
        assert!(verify_gan_trace(&t, 10, 5, 20, 7).is_err());
    }

    #[test]
    fn paper_constants_burst_lands_after_five_hundred_g_steps() {
        let mut s = GanSchedule::new(10_000, 5, 200, 500);
        let total = 13_500u64;
        let t = trace(&mut s, total);
        verify_gan_trace(&t, 10_000, 5, 200, 500).unwrap();
        // G step number 500 happens at optimizer step 10000 + 500*6 = 13000
        assert_eq!(t[12_999].kind, EventKind::GStep);
        let g_before: usize = t[..13_000]
            .iter()
            .filter(|e| e.kind == EventKind::GStep)
            .count();
        assert_eq!(g_before, 500);
        for i in 13_000..13_200 {
            assert_eq!(t[i].kind, EventKind::DStep, "burst step {}", i);
        }
        for i in 13_200..13_205 {
            assert_eq!(t[i].kind, EventKind::DStep, "ratio step {}", i);
        }
        assert_eq!(t[13_205].kind, EventKind::GStep);
    }
}
