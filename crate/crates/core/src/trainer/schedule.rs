/// Geometric checkpoint schedule: step 0, step 1, then each next step is
/// the smallest integer `≥ previous · ratio`.
///
/// The ratio is applied as an exact decimal fraction (six digits), so
/// `1.1` yields `…, 10, 11, 13, 15, …` without binary rounding drift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckpointSchedule {
    num: u128,
    den: u128,
}

impl CheckpointSchedule {
    pub fn new(ratio: f64) -> Self {
        assert!(ratio > 1.0, "checkpoint ratio must exceed 1");
        let den = 1_000_000u128;
        let num = (ratio * den as f64).round() as u128;
        CheckpointSchedule { num, den }
    }

    pub fn next_after(&self, step: u64) -> u64 {
        if step == 0 {
            return 1;
        }
        let s = step as u128;
        let next = (s * self.num).div_ceil(self.den);
        (next.max(s + 1)) as u64
    }

    /// All logged steps `≤ max_step`, starting at 0.
    pub fn steps_up_to(&self, max_step: u64) -> Vec<u64> {
        let mut out = vec![0];
        let mut s = 0;
        loop {
            s = self.next_after(s);
            if s > max_step {
                break;
            }
            out.push(s);
        }
        out
    }
}
