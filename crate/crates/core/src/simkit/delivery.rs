use rand::Rng;

use super::config::LatencySpec;
use super::PointCloudFrame;
use crate::feature::FeatureMap;

/// Anything carrying a capture timestamp.
pub trait Timestamped {
    fn timestamp_us(&self) -> i64;
}

impl Timestamped for PointCloudFrame {
    fn timestamp_us(&self) -> i64 {
        self.timestamp_us
    }
}

impl Timestamped for FeatureMap {
    fn timestamp_us(&self) -> i64 {
        self.timestamp_us
    }
}

impl<T: Timestamped + ?Sized> Timestamped for &T {
    fn timestamp_us(&self) -> i64 {
        (**self).timestamp_us()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DelayedMessage<T> {
    pub payload: T,
    pub sent_at: i64,
    pub delay_us: i64,
    pub arrives_at: i64,
}

impl<T> DelayedMessage<T> {
    pub fn new(payload: T, sent_at: i64, delay_us: i64) -> Self {
        debug_assert!(delay_us >= 0);
        Self {
            payload,
            sent_at,
            delay_us,
            arrives_at: sent_at + delay_us,
        }
    }

    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> DelayedMessage<U> {
        DelayedMessage {
            payload: f(self.payload),
            sent_at: self.sent_at,
            delay_us: self.delay_us,
            arrives_at: self.arrives_at,
        }
    }
}

fn ms_to_us(ms: f64) -> i64 {
    (ms * 1000.0).round() as i64
}

/// Draw one delay in microseconds.
pub fn sample_delay_us<R: Rng + ?Sized>(spec: &LatencySpec, rng: &mut R) -> i64 {
    match *spec {
        LatencySpec::Fixed { ms } => ms_to_us(ms),
        LatencySpec::Uniform { lo_ms, hi_ms } => {
            let (lo, hi) = (ms_to_us(lo_ms), ms_to_us(hi_ms));
            if hi <= lo {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        }
    }
}

/// Wrap every item with a delay and sort by arrival (ties keep send order).
pub fn schedule_delivery<T: Timestamped, R: Rng + ?Sized>(
    items: impl IntoIterator<Item = T>,
    spec: &LatencySpec,
    rng: &mut R,
) -> Vec<DelayedMessage<T>> {
    let mut out: Vec<_> = items
        .into_iter()
        .map(|item| {
            let sent = item.timestamp_us();
            let d = sample_delay_us(spec, rng);
            DelayedMessage::new(item, sent, d)
        })
        .collect();
    out.sort_by_key(|m| (m.arrives_at, m.sent_at));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Tick(i64);
    impl Timestamped for Tick {
        fn timestamp_us(&self) -> i64 {
            self.0
        }
    }

    fn ticks(n: i64) -> Vec<Tick> {
        (0..n).map(|k| Tick(k * 100_000)).collect()
    }

    #[test]
    fn zero_delay_keeps_send_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let msgs = schedule_delivery(ticks(10), &LatencySpec::fixed_ms(0.0), &mut rng);
        let sent: Vec<i64> = msgs.iter().map(|m| m.sent_at).collect();
        assert_eq!(sent, (0..10).map(|k| k * 100_000).collect::<Vec<_>>());
    }

    #[test]
    fn fixed_400ms_is_four_frames_stale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let msgs = schedule_delivery(ticks(20), &LatencySpec::fixed_ms(400.0), &mut rng);
        let t = 1_500_000;
        let newest = msgs.iter().filter(|m| m.arrives_at <= t).map(|m| m.sent_at).max();
        assert_eq!(newest, Some(t - 400_000));
        assert_eq!((t - newest.unwrap()) / 100_000, 4);
        for m in &msgs {
            assert_eq!(m.payload.0, m.arrives_at - m.delay_us);
        }
    }

    #[test]
    fn uniform_delays_reproducible_with_mean_near_200ms() {
        let spec = LatencySpec::Uniform { lo_ms: 0.0, hi_ms: 400.0 };
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..1000).map(|_| sample_delay_us(&spec, &mut rng)).collect::<Vec<_>>()
        };
        let a = draw(5);
        assert_eq!(a, draw(5));
        let mean_ms = a.iter().sum::<i64>() as f64 / 1000.0 / 1000.0;
        assert!((mean_ms - 200.0).abs() < 20.0, "{mean_ms}");
        let msgs = schedule_delivery(ticks(50), &spec, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(msgs.windows(2).all(|w| w[0].arrives_at <= w[1].arrives_at));
    }
}
