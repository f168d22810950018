//! Communication delay models and their deterministic sampler.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use std::fmt;

/// How neighbor messages propagate from one price update to the next.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DelayModel {
    /// Every message arrives before the next accumulator refresh.
    None,
    /// Every message arrives a fixed number of iterations late.
    Fixed(u32),
    /// Each message independently draws a delay from `{0, …, τ_max}`.
    UniformRandom(u32),
    /// Messages are sent only on iterations divisible by the period; in
    /// between, receivers keep using the last values heard.
    Intermittent(u32),
}

impl DelayModel {
    /// Largest staleness one hop can introduce, used by the step-size bound.
    pub fn tau_max(&self) -> u32 {
        match *self {
            DelayModel::None => 0,
            DelayModel::Fixed(t) => t,
            DelayModel::UniformRandom(t) => t,
            DelayModel::Intermittent(k) => k.saturating_sub(1),
        }
    }

    /// Parses the scenario-file syntax: `none`, `fixed:5`, `uniform:15`,
    /// `intermittent:5`.
    pub fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if s == "none" {
            return Ok(DelayModel::None);
        }
        let (kind, arg) = s
            .split_once(':')
            .ok_or_else(|| format!("malformed delay spec '{s}'"))?;
        let n: u32 = arg
            .trim()
            .parse()
            .map_err(|_| format!("delay parameter '{arg}' is not a non-negative integer"))?;
        match kind.trim() {
            "fixed" => Ok(DelayModel::Fixed(n)),
            "uniform" => Ok(DelayModel::UniformRandom(n)),
            "intermittent" if n >= 1 => Ok(DelayModel::Intermittent(n)),
            "intermittent" => Err("intermittent period must be at least 1".into()),
            other => Err(format!("unknown delay model '{other}'")),
        }
    }
}

impl fmt::Display for DelayModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            DelayModel::None => write!(f, "none"),
            DelayModel::Fixed(t) => write!(f, "fixed:{t}"),
            DelayModel::UniformRandom(t) => write!(f, "uniform:{t}"),
            DelayModel::Intermittent(k) => write!(f, "intermittent:{k}"),
        }
    }
}

/// Draws per-message delays; owns its own random stream so toggling other
/// randomness (noise, model error) never changes delay outcomes.
#[derive(Debug, Clone)]
pub struct DelaySampler {
    model: DelayModel,
    rng: ChaCha20Rng,
}

impl DelaySampler {
    pub fn new(model: DelayModel, rng: ChaCha20Rng) -> Self {
        DelaySampler { model, rng }
    }

    /// Whether any messages are produced on this iteration.
    pub fn tick_sends(&self, t: u64) -> bool {
        match self.model {
            DelayModel::Intermittent(k) => t.is_multiple_of(u64::from(k)),
            _ => true,
        }
    }

    /// Delay, in iterations, for the next message. Called once per message
    /// in a fixed order, which keeps runs reproducible.
    pub fn sample(&mut self) -> u64 {
        match self.model {
            DelayModel::None | DelayModel::Intermittent(_) => 0,
            DelayModel::Fixed(t) => u64::from(t),
            DelayModel::UniformRandom(t) => self.rng.gen_range(0..=u64::from(t)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn parse_round_trip() {
        for s in ["none", "fixed:5", "uniform:15", "intermittent:5"] {
            assert_eq!(DelayModel::parse(s).unwrap().to_string(), s);
        }
        assert!(DelayModel::parse("intermittent:0").is_err());
        assert!(DelayModel::parse("sometimes:3").is_err());
        assert!(DelayModel::parse("fixed:-1").is_err());
    }

    #[test]
    fn tau_max_per_model() {
        assert_eq!(DelayModel::None.tau_max(), 0);
        assert_eq!(DelayModel::Fixed(5).tau_max(), 5);
        assert_eq!(DelayModel::UniformRandom(15).tau_max(), 15);
        assert_eq!(DelayModel::Intermittent(5).tau_max(), 4);
    }

    #[test]
    fn uniform_sampler_stays_in_range() {
        let rng = ChaCha20Rng::seed_from_u64(1);
        let mut s = DelaySampler::new(DelayModel::UniformRandom(7), rng);
        let mut seen_hi = 0;
        for _ in 0..1000 {
            let d = s.sample();
            assert!(d <= 7);
            seen_hi = seen_hi.max(d);
        }
        assert_eq!(seen_hi, 7, "upper bound should be attained");
    }

    #[test]
    fn intermittent_schedule() {
        let rng = ChaCha20Rng::seed_from_u64(2);
        let s = DelaySampler::new(DelayModel::Intermittent(5), rng);
        let sends: Vec<bool> = (0..11).map(|t| s.tick_sends(t)).collect();
        assert_eq!(
            sends,
            [true, false, false, false, false, true, false, false, false, false, true]
        );
    }
}
