//! Simplified 802.11p broadcast MAC/PHY: transmission timing, uniform
//! backoff draws, and receiver-side outcome resolution (range, obstacle
//! shadowing, overlap collisions).
//!
//! Interference is binary: a shadowed signal contributes no energy at the
//! receiver, and any overlap among in-range clear signals collides all of
//! them (no capture effect).

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::obstacle::{classify_link, LinkModel, Obstacle, Point, RegionClass};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacParams {
    pub data_rate_bps: f64,
    pub cw_min: u32,
    pub cw_max: u32,
    pub slot_time_s: f64,
    pub sifs_s: f64,
    pub msg_size_bytes: u32,
    /// Periodic beacons are much smaller than data payloads.
    pub beacon_size_bytes: u32,
}

impl Default for MacParams {
    fn default() -> Self {
        MacParams {
            data_rate_bps: 2_000_000.0,
            cw_min: 31,
            cw_max: 1023,
            // 802.11p 10 MHz channel timing.
            slot_time_s: 13e-6,
            sifs_s: 32e-6,
            msg_size_bytes: 256,
            beacon_size_bytes: 32,
        }
    }
}

impl MacParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.data_rate_bps > 0.0) {
            return Err(SimError::Config("data_rate_bps must be > 0".into()));
        }
        if self.cw_min == 0 || self.cw_min > self.cw_max {
            return Err(SimError::Config(
                "contention window must satisfy 0 < cw_min <= cw_max".into(),
            ));
        }
        if !(self.slot_time_s > 0.0) {
            return Err(SimError::Config("slot_time_s must be > 0".into()));
        }
        if self.msg_size_bytes == 0 {
            return Err(SimError::Config("msg_size_bytes must be > 0".into()));
        }
        if self.beacon_size_bytes == 0 {
            return Err(SimError::Config("beacon_size_bytes must be > 0".into()));
        }
        Ok(())
    }

    /// Airtime of one data frame: msg_size * 8 / data_rate.
    pub fn tx_duration(&self) -> f64 {
        f64::from(self.msg_size_bytes) * 8.0 / self.data_rate_bps
    }

    /// Airtime of one beacon frame.
    pub fn beacon_duration(&self) -> f64 {
        f64::from(self.beacon_size_bytes) * 8.0 / self.data_rate_bps
    }
}

/// Uniform backoff draw in [0, cw] slots.
pub fn draw_backoff(rng: &mut impl Rng, cw: u32) -> u32 {
    rng.gen_range(0..=cw)
}

/// One on-air transmission.
#[derive(Debug, Clone, PartialEq)]
pub struct TxAttempt {
    pub sender: String,
    pub message_id: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RxOutcome {
    Delivered,
    Collided,
    ShadowBlocked,
    OutOfRange,
}

/// Per-receiver outcome of one attempt against the set of concurrent
/// attempts. Exposed separately so the event engine and the batch resolver
/// share one rule set.
pub fn outcome_for(
    attempt_idx: usize,
    attempts: &[TxAttempt],
    receiver: &str,
    rx_pos: Point,
    position_of: &dyn Fn(&str, f64) -> Option<Point>,
    obstacles: &[Obstacle],
    lm: &LinkModel,
) -> Result<RxOutcome> {
    let a = &attempts[attempt_idx];
    let tx_pos = position_of(&a.sender, a.start).ok_or_else(|| {
        SimError::Integrity(format!("no position for sender {} at t={}", a.sender, a.start))
    })?;
    match classify_link(tx_pos, rx_pos, obstacles, lm)? {
        RegionClass::OutOfRange => return Ok(RxOutcome::OutOfRange),
        RegionClass::Shadowed => return Ok(RxOutcome::ShadowBlocked),
        RegionClass::Clear => {}
    }
    for (j, other) in attempts.iter().enumerate() {
        if j == attempt_idx || other.sender == receiver {
            continue;
        }
        if other.start < a.end && a.start < other.end {
            let other_pos = position_of(&other.sender, other.start).ok_or_else(|| {
                SimError::Integrity(format!(
                    "no position for sender {} at t={}",
                    other.sender, other.start
                ))
            })?;
            if other_pos == rx_pos {
                // Overlapping transmission from the receiver's own spot;
                // treat as interference regardless of classification.
                return Ok(RxOutcome::Collided);
            }
            if classify_link(other_pos, rx_pos, obstacles, lm)? == RegionClass::Clear {
                return Ok(RxOutcome::Collided);
            }
        }
    }
    Ok(RxOutcome::Delivered)
}

/// Resolve every (attempt, receiver) pair. Receivers are identified by id;
/// positions are looked up at attempt start times.
pub fn resolve_receptions(
    attempts: &[TxAttempt],
    receivers: &[String],
    position_of: &dyn Fn(&str, f64) -> Option<Point>,
    obstacles: &[Obstacle],
    lm: &LinkModel,
) -> Result<HashMap<(usize, String), RxOutcome>> {
    let mut out = HashMap::new();
    for (i, a) in attempts.iter().enumerate() {
        for r in receivers {
            if *r == a.sender {
                continue;
            }
            let rx_pos = position_of(r, a.start).ok_or_else(|| {
                SimError::Integrity(format!("no position for receiver {r} at t={}", a.start))
            })?;
            let outcome = outcome_for(i, attempts, r, rx_pos, position_of, obstacles, lm)?;
            out.insert((i, r.clone()), outcome);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obstacle::Obstacle;
    use crate::simcore::substream;
    use rand::Rng;

    #[test]
    fn tx_duration_table_values() {
        let p = MacParams::default();
        assert!((p.tx_duration() - 1.024e-3).abs() < 1e-15);
        let p2 = MacParams {
            msg_size_bytes: 512,
            ..MacParams::default()
        };
        assert!((p2.tx_duration() - 2.048e-3).abs() < 1e-15);
    }

    #[test]
    fn zero_size_message_rejected() {
        let p = MacParams {
            msg_size_bytes: 0,
            ..MacParams::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn backoff_degenerate_and_deterministic() {
        let mut rng = substream(1, "mac-backoff");
        assert_eq!(draw_backoff(&mut rng, 0), 0);
        let mut a = substream(9, "mac-backoff");
        let mut b = substream(9, "mac-backoff");
        for _ in 0..100 {
            assert_eq!(draw_backoff(&mut a, 31), draw_backoff(&mut b, 31));
        }
    }

    #[test]
    fn backoff_uniform_mean() {
        let mut rng = substream(2, "mac-backoff");
        let n = 100_000;
        let sum: u64 = (0..n).map(|_| u64::from(draw_backoff(&mut rng, 31))).sum();
        let mean = sum as f64 / n as f64;
        assert!((mean - 15.5).abs() < 0.2, "mean {mean}");
    }

    fn static_positions(pts: &[(&str, Point)]) -> impl Fn(&str, f64) -> Option<Point> {
        let map: HashMap<String, Point> =
            pts.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        move |id: &str, _t: f64| map.get(id).copied()
    }

    fn lm300() -> LinkModel {
        LinkModel::new(300.0, 0.0).unwrap()
    }

    #[test]
    fn single_attempt_clear_receiver_delivered() {
        let attempts = vec![TxAttempt {
            sender: "a".into(),
            message_id: "m".into(),
            start: 0.0,
            end: 0.001,
        }];
        let pos = static_positions(&[
            ("a", Point::new(0.0, 0.0)),
            ("b", Point::new(100.0, 0.0)),
        ]);
        let out = resolve_receptions(&attempts, &["b".into()], &pos, &[], &lm300()).unwrap();
        assert_eq!(out[&(0, "b".into())], RxOutcome::Delivered);
    }

    #[test]
    fn identical_windows_collide_both() {
        let attempts = vec![
            TxAttempt {
                sender: "a".into(),
                message_id: "m1".into(),
                start: 0.0,
                end: 0.001,
            },
            TxAttempt {
                sender: "b".into(),
                message_id: "m2".into(),
                start: 0.0,
                end: 0.001,
            },
        ];
        let pos = static_positions(&[
            ("a", Point::new(0.0, 0.0)),
            ("b", Point::new(200.0, 0.0)),
            ("r", Point::new(100.0, 0.0)),
        ]);
        let out = resolve_receptions(&attempts, &["r".into()], &pos, &[], &lm300()).unwrap();
        assert_eq!(out[&(0, "r".into())], RxOutcome::Collided);
        assert_eq!(out[&(1, "r".into())], RxOutcome::Collided);
    }

    #[test]
    fn receiver_behind_building_shadow_blocked() {
        let attempts = vec![TxAttempt {
            sender: "a".into(),
            message_id: "m".into(),
            start: 0.0,
            end: 0.001,
        }];
        let pos = static_positions(&[
            ("a", Point::new(0.0, 0.0)),
            ("r", Point::new(100.0, 0.0)),
        ]);
        let obs = [Obstacle::from_bounds(40.0, -10.0, 60.0, 10.0).unwrap()];
        let out = resolve_receptions(&attempts, &["r".into()], &pos, &obs, &lm300()).unwrap();
        assert_eq!(out[&(0, "r".into())], RxOutcome::ShadowBlocked);
    }

    #[test]
    fn shadowed_interferer_does_not_collide() {
        // Interferer behind a building relative to the receiver: its energy
        // is dropped, the main attempt still delivers.
        let attempts = vec![
            TxAttempt {
                sender: "a".into(),
                message_id: "m1".into(),
                start: 0.0,
                end: 0.001,
            },
            TxAttempt {
                sender: "x".into(),
                message_id: "m2".into(),
                start: 0.0005,
                end: 0.0015,
            },
        ];
        let pos = static_positions(&[
            ("a", Point::new(0.0, 0.0)),
            ("r", Point::new(0.0, 100.0)),
            ("x", Point::new(100.0, 100.0)),
        ]);
        let obs = [Obstacle::from_bounds(40.0, 90.0, 60.0, 110.0).unwrap()];
        let out = resolve_receptions(&attempts, &["r".into()], &pos, &obs, &lm300()).unwrap();
        assert_eq!(out[&(0, "r".into())], RxOutcome::Delivered);
    }

    #[test]
    fn out_of_range_receiver() {
        let attempts = vec![TxAttempt {
            sender: "a".into(),
            message_id: "m".into(),
            start: 0.0,
            end: 0.001,
        }];
        let pos = static_positions(&[
            ("a", Point::new(0.0, 0.0)),
            ("r", Point::new(400.0, 0.0)),
        ]);
        let out = resolve_receptions(&attempts, &["r".into()], &pos, &[], &lm300()).unwrap();
        assert_eq!(out[&(0, "r".into())], RxOutcome::OutOfRange);
    }

    #[test]
    fn missing_position_fails_fast() {
        let attempts = vec![TxAttempt {
            sender: "a".into(),
            message_id: "m".into(),
            start: 0.0,
            end: 0.001,
        }];
        let pos = static_positions(&[("a", Point::new(0.0, 0.0))]);
        let r = resolve_receptions(&attempts, &["ghost".into()], &pos, &[], &lm300());
        assert!(matches!(r, Err(SimError::Integrity(_))));
    }

    /// Random-load properties: single sender never collides; duplicating
    /// every attempt never reduces the collided count.
    #[test]
    fn collision_monotone_in_load() {
        let mut rng = substream(5, "channel-prop");
        for _ in 0..50 {
            let n_senders = rng.gen_range(1..6);
            let mut attempts = Vec::new();
            let mut ids = Vec::new();
            let mut pts = Vec::new();
            for s in 0..n_senders {
                let id = format!("s{s}");
                pts.push((
                    id.clone(),
                    Point::new(rng.gen_range(0.0..400.0), rng.gen_range(0.0..400.0)),
                ));
                let start = rng.gen_range(0.0..0.01);
                attempts.push(TxAttempt {
                    sender: id.clone(),
                    message_id: format!("m{s}"),
                    start,
                    end: start + 0.001,
                });
                ids.push(id);
            }
            let receiver = "r".to_string();
            pts.push((receiver.clone(), Point::new(200.0, 200.0)));
            let map: HashMap<String, Point> = pts.into_iter().collect();
            let pos = move |id: &str, _t: f64| map.get(id).copied();
            let lm = LinkModel::new(500.0, 0.0).unwrap();

            let base =
                resolve_receptions(&attempts, &[receiver.clone()], &pos, &[], &lm).unwrap();
            let base_collided = base
                .values()
                .filter(|&&o| o == RxOutcome::Collided)
                .count();
            if n_senders == 1 {
                assert_eq!(base_collided, 0);
            }

            let mut doubled = attempts.clone();
            doubled.extend(attempts.iter().cloned());
            let dup =
                resolve_receptions(&doubled, &[receiver.clone()], &pos, &[], &lm).unwrap();
            let dup_collided = dup.values().filter(|&&o| o == RxOutcome::Collided).count();
            assert!(dup_collided >= base_collided);
        }
    }
}
