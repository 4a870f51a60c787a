//! Dissemination protocol building blocks: per-message mode selection and
//! the greedy coverage-maximizing gateway selection used by the cloud
//! path. The event-driven state machines that use these live in `engine`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::mobility::Role;
use crate::obstacle::{classify_link, LinkModel, Obstacle, Point, RegionClass};

/// Which path a message takes at origination (or after escalation).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DisseminationMode {
    CloudGateway,
    MultiHopV2V,
    MultiHopV2I,
}

/// The protocol under simulation. The three baselines are intentionally
/// simplified comparators sharing the same channel and obstacle models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProtocolKind {
    /// Cloud path in shadowed regions, multi-hop elsewhere, with
    /// escalation on forwarding failure.
    HybridVehcloud,
    /// Every message forced through the cloud pipeline.
    CmdsLike,
    /// Pure multi-hop broadcast, no cloud fallback.
    ClbpLike,
    /// Static split of messages between cloud and multi-hop paths,
    /// irrespective of shadowing.
    CloudVanetLike,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 4] = [
        ProtocolKind::HybridVehcloud,
        ProtocolKind::CmdsLike,
        ProtocolKind::ClbpLike,
        ProtocolKind::CloudVanetLike,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ProtocolKind::HybridVehcloud => "hybrid-vehcloud",
            ProtocolKind::CmdsLike => "cmds-like",
            ProtocolKind::ClbpLike => "clbp-like",
            ProtocolKind::CloudVanetLike => "cloud-vanet-like",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hybrid-vehcloud" => Ok(ProtocolKind::HybridVehcloud),
            "cmds-like" => Ok(ProtocolKind::CmdsLike),
            "clbp-like" => Ok(ProtocolKind::ClbpLike),
            "cloud-vanet-like" => Ok(ProtocolKind::CloudVanetLike),
            other => Err(SimError::Config(format!(
                "unknown protocol `{other}` (expected hybrid-vehcloud, cmds-like, clbp-like or cloud-vanet-like)"
            ))),
        }
    }
}

/// Cloud service timing constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CloudModel {
    pub uplink_delay_s: f64,
    pub downlink_delay_s: f64,
    /// Paid once per run, on first use of the cloud.
    pub deploy_delay_s: f64,
    pub processing_delay_s: f64,
}

impl Default for CloudModel {
    fn default() -> Self {
        CloudModel {
            uplink_delay_s: 0.020,
            downlink_delay_s: 0.020,
            deploy_delay_s: 0.100,
            processing_delay_s: 0.010,
        }
    }
}

impl CloudModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("uplink_delay_s", self.uplink_delay_s),
            ("downlink_delay_s", self.downlink_delay_s),
            ("deploy_delay_s", self.deploy_delay_s),
            ("processing_delay_s", self.processing_delay_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// What a mobile gateway advertises to the cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct GatewayInfo {
    pub gateway_id: String,
    pub pos: Point,
    pub access_delay_s: f64,
    pub bandwidth_bps: f64,
}

/// One neighbor as seen by the mode-selection step.
#[derive(Debug, Clone, Copy)]
pub struct NeighborView {
    pub pos: Point,
    pub role: Role,
}

/// Pick the dissemination mode for a message originating at `source`.
///
/// Cloud when the fraction of shadowed in-range links reaches the
/// threshold (or no neighbor is in range at all); otherwise V2V if some
/// clear-link vehicle neighbor exists, else V2I through an RSU.
///
/// `bus_links_clear` models the elevated bus antenna: links to buses
/// ignore obstacle shadowing.
pub fn select_mode(
    source: Point,
    neighbors: &[NeighborView],
    obstacles: &[Obstacle],
    lm: &LinkModel,
    bus_links_clear: bool,
    threshold: f64,
) -> DisseminationMode {
    let mut in_range = 0u32;
    let mut shadowed = 0u32;
    let mut clear_vehicle = false;
    for n in neighbors {
        if n.pos == source {
            continue;
        }
        let obs: &[Obstacle] = if bus_links_clear && n.role == Role::Bus {
            &[]
        } else {
            obstacles
        };
        match classify_link(source, n.pos, obs, lm) {
            Ok(RegionClass::OutOfRange) | Err(_) => {}
            Ok(RegionClass::Shadowed) => {
                in_range += 1;
                shadowed += 1;
            }
            Ok(RegionClass::Clear) => {
                in_range += 1;
                if n.role != Role::Rsu {
                    clear_vehicle = true;
                }
            }
        }
    }
    let fraction = if in_range == 0 {
        1.0
    } else {
        f64::from(shadowed) / f64::from(in_range)
    };
    if fraction >= threshold {
        DisseminationMode::CloudGateway
    } else if clear_vehicle {
        DisseminationMode::MultiHopV2V
    } else {
        DisseminationMode::MultiHopV2I
    }
}

/// Which targets a gateway covers: in range with a clear link.
fn coverage_set(
    gw: &GatewayInfo,
    targets: &[(String, Point)],
    obstacles: &[Obstacle],
    lm: &LinkModel,
) -> u64 {
    debug_assert!(targets.len() <= 64);
    let mut mask = 0u64;
    for (i, (_, pos)) in targets.iter().enumerate() {
        if *pos == gw.pos {
            mask |= 1 << i;
            continue;
        }
        if matches!(
            classify_link(gw.pos, *pos, obstacles, lm),
            Ok(RegionClass::Clear)
        ) {
            mask |= 1 << i;
        }
    }
    mask
}

/// Greedy maximum-coverage gateway selection: repeatedly pick the gateway
/// covering the most yet-uncovered targets, stopping at `k_max` gateways
/// or full coverage. Ties break by lower access delay, then by gateway id.
/// Returns an empty selection when no gateway covers any target (caller
/// queues the message for retry) and when there are no targets.
pub fn select_gateways(
    candidates: &[GatewayInfo],
    targets: &[(String, Point)],
    obstacles: &[Obstacle],
    lm: &LinkModel,
    k_max: usize,
) -> Vec<String> {
    assert!(k_max >= 1, "k_max must be >= 1");
    if targets.is_empty() || candidates.is_empty() {
        return Vec::new();
    }
    // Chunk target sets into 64-bit masks.
    let chunks: Vec<Vec<(String, Point)>> =
        targets.chunks(64).map(|c| c.to_vec()).collect();
    let mut cover: Vec<Vec<u64>> = candidates
        .iter()
        .map(|gw| {
            chunks
                .iter()
                .map(|c| coverage_set(gw, c, obstacles, lm))
                .collect()
        })
        .collect();
    let mut selected = Vec::new();
    let mut used = vec![false; candidates.len()];
    for _ in 0..k_max {
        let mut best: Option<(usize, u32)> = None;
        for (i, masks) in cover.iter().enumerate() {
            if used[i] {
                continue;
            }
            let gain: u32 = masks.iter().map(|m| m.count_ones()).sum();
            if gain == 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bi, bg)) => {
                    gain > bg
                        || (gain == bg
                            && (candidates[i].access_delay_s, &candidates[i].gateway_id)
                                < (candidates[bi].access_delay_s, &candidates[bi].gateway_id))
                }
            };
            if better {
                best = Some((i, gain));
            }
        }
        let Some((i, _)) = best else { break };
        used[i] = true;
        selected.push(candidates[i].gateway_id.clone());
        let picked = cover[i].clone();
        for (j, masks) in cover.iter_mut().enumerate() {
            if !used[j] {
                for (m, p) in masks.iter_mut().zip(&picked) {
                    *m &= !p;
                }
            }
        }
    }
    selected
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simcore::substream;
    use rand::Rng;

    fn lm(t_base: f64) -> LinkModel {
        LinkModel::new(t_base, 0.0).unwrap()
    }

    fn gw(id: &str, x: f64, y: f64) -> GatewayInfo {
        GatewayInfo {
            gateway_id: id.into(),
            pos: Point::new(x, y),
            access_delay_s: 0.0,
            bandwidth_bps: 2e6,
        }
    }

    #[test]
    fn mode_all_clear_is_v2v() {
        let neighbors = [
            NeighborView {
                pos: Point::new(100.0, 0.0),
                role: Role::Car,
            },
            NeighborView {
                pos: Point::new(0.0, 100.0),
                role: Role::Rsu,
            },
        ];
        let m = select_mode(Point::new(0.0, 0.0), &neighbors, &[], &lm(300.0), true, 0.5);
        assert_eq!(m, DisseminationMode::MultiHopV2V);
    }

    #[test]
    fn mode_all_shadowed_is_cloud() {
        let obs = [Obstacle::from_bounds(40.0, -10.0, 60.0, 10.0).unwrap()];
        let neighbors = [NeighborView {
            pos: Point::new(100.0, 0.0),
            role: Role::Car,
        }];
        let m = select_mode(Point::new(0.0, 0.0), &neighbors, &obs, &lm(300.0), true, 0.5);
        assert_eq!(m, DisseminationMode::CloudGateway);
    }

    #[test]
    fn mode_no_neighbors_is_cloud() {
        let m = select_mode(Point::new(0.0, 0.0), &[], &[], &lm(300.0), true, 0.5);
        assert_eq!(m, DisseminationMode::CloudGateway);
    }

    #[test]
    fn mode_only_rsu_clear_is_v2i() {
        let neighbors = [NeighborView {
            pos: Point::new(100.0, 0.0),
            role: Role::Rsu,
        }];
        let m = select_mode(Point::new(0.0, 0.0), &neighbors, &[], &lm(300.0), true, 0.0);
        // Threshold 0 forces cloud whenever anything is shadowed; with a
        // clear RSU-only table and threshold above zero we get V2I.
        assert_eq!(m, DisseminationMode::CloudGateway);
        let m = select_mode(Point::new(0.0, 0.0), &neighbors, &[], &lm(300.0), true, 0.5);
        assert_eq!(m, DisseminationMode::MultiHopV2I);
    }

    #[test]
    fn bus_link_ignores_obstacles_when_enabled() {
        let obs = [Obstacle::from_bounds(40.0, -10.0, 60.0, 10.0).unwrap()];
        let neighbors = [NeighborView {
            pos: Point::new(100.0, 0.0),
            role: Role::Bus,
        }];
        let m = select_mode(Point::new(0.0, 0.0), &neighbors, &obs, &lm(300.0), true, 0.5);
        assert_eq!(m, DisseminationMode::MultiHopV2V);
        let m = select_mode(Point::new(0.0, 0.0), &neighbors, &obs, &lm(300.0), false, 0.5);
        assert_eq!(m, DisseminationMode::CloudGateway);
    }

    #[test]
    fn single_gateway_covering_all() {
        let targets: Vec<(String, Point)> = (0..4)
            .map(|i| (format!("t{i}"), Point::new(f64::from(i) * 50.0, 0.0)))
            .collect();
        let sel = select_gateways(&[gw("bus0", 75.0, 0.0)], &targets, &[], &lm(300.0), 3);
        assert_eq!(sel, vec!["bus0".to_string()]);
    }

    #[test]
    fn empty_targets_empty_selection() {
        let sel = select_gateways(&[gw("bus0", 0.0, 0.0)], &[], &[], &lm(300.0), 3);
        assert!(sel.is_empty());
    }

    #[test]
    fn no_candidates_is_retry_signal() {
        let targets = vec![("t0".to_string(), Point::new(0.0, 0.0))];
        let sel = select_gateways(&[], &targets, &[], &lm(300.0), 3);
        assert!(sel.is_empty());
    }

    #[test]
    fn ties_break_by_access_delay_then_id() {
        let targets = vec![("t0".to_string(), Point::new(0.0, 0.0))];
        let mut a = gw("busB", 10.0, 0.0);
        let b = gw("busA", -10.0, 0.0);
        let sel = select_gateways(&[a.clone(), b.clone()], &targets, &[], &lm(300.0), 1);
        assert_eq!(sel, vec!["busA".to_string()]);
        a.access_delay_s = -0.0;
        let mut b2 = b;
        b2.access_delay_s = 0.5;
        let sel = select_gateways(&[a, b2], &targets, &[], &lm(300.0), 1);
        assert_eq!(sel, vec!["busB".to_string()]);
    }

    /// Exhaustive maximum-coverage oracle over all subsets of size <= k.
    fn exhaustive_optimum(
        candidates: &[GatewayInfo],
        targets: &[(String, Point)],
        obstacles: &[Obstacle],
        lm: &LinkModel,
        k_max: usize,
    ) -> u32 {
        assert!(candidates.len() <= 12 && targets.len() <= 64);
        let masks: Vec<u64> = candidates
            .iter()
            .map(|g| coverage_set(g, targets, obstacles, lm))
            .collect();
        let mut best = 0;
        for subset in 0u32..(1 << candidates.len()) {
            if subset.count_ones() as usize > k_max {
                continue;
            }
            let mut union = 0u64;
            for (i, m) in masks.iter().enumerate() {
                if subset & (1 << i) != 0 {
                    union |= m;
                }
            }
            best = best.max(union.count_ones());
        }
        best
    }

    fn coverage_of(
        selection: &[String],
        candidates: &[GatewayInfo],
        targets: &[(String, Point)],
        obstacles: &[Obstacle],
        lm: &LinkModel,
    ) -> u32 {
        let mut union = 0u64;
        for id in selection {
            let g = candidates.iter().find(|c| &c.gateway_id == id).unwrap();
            union |= coverage_set(g, targets, obstacles, lm);
        }
        union.count_ones()
    }

    #[test]
    fn greedy_matches_small_optimum() {
        // 3 candidates, 6 targets, k_max = 2: greedy equals the exhaustive
        // optimum on this instance.
        let candidates = vec![gw("g0", 0.0, 0.0), gw("g1", 500.0, 0.0), gw("g2", 250.0, 0.0)];
        let targets: Vec<(String, Point)> = (0..6)
            .map(|i| (format!("t{i}"), Point::new(f64::from(i) * 100.0, 0.0)))
            .collect();
        let model = lm(160.0);
        let sel = select_gateways(&candidates, &targets, &[], &model, 2);
        let got = coverage_of(&sel, &candidates, &targets, &[], &model);
        let opt = exhaustive_optimum(&candidates, &targets, &[], &model, 2);
        assert_eq!(got, opt);
    }

    #[test]
    fn greedy_respects_approximation_bound() {
        let mut rng = substream(11, "cover-test");
        for _ in 0..60 {
            let n_gw = rng.gen_range(1..=8);
            let n_t = rng.gen_range(1..=20);
            let k = rng.gen_range(1..=3);
            let candidates: Vec<GatewayInfo> = (0..n_gw)
                .map(|i| {
                    gw(
                        &format!("g{i}"),
                        rng.gen_range(0.0..1000.0),
                        rng.gen_range(0.0..1000.0),
                    )
                })
                .collect();
            let targets: Vec<(String, Point)> = (0..n_t)
                .map(|i| {
                    (
                        format!("t{i}"),
                        Point::new(rng.gen_range(0.0..1000.0), rng.gen_range(0.0..1000.0)),
                    )
                })
                .collect();
            let model = lm(rng.gen_range(100.0..400.0));
            let sel = select_gateways(&candidates, &targets, &[], &model, k);
            assert!(sel.len() <= k);
            let got = coverage_of(&sel, &candidates, &targets, &[], &model);
            let opt = exhaustive_optimum(&candidates, &targets, &[], &model, k);
            assert!(
                f64::from(got) >= (1.0 - 1.0 / std::f64::consts::E) * f64::from(opt),
                "greedy {got} vs optimum {opt}"
            );
        }
    }

    #[test]
    fn protocol_names_roundtrip() {
        for p in ProtocolKind::ALL {
            assert_eq!(ProtocolKind::parse(p.name()).unwrap(), p);
        }
        assert!(ProtocolKind::parse("nope").is_err());
    }
}
