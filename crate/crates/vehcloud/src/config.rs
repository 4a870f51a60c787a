//! Scenario configuration: a TOML file with nested sections. Unknown keys
//! are hard errors so typos fail loudly instead of silently using a
//! default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::MacParams;
use crate::error::{Result, SimError};
use crate::mobility::GridSpec;
use crate::protocols::{CloudModel, ProtocolKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub run: RunSection,
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub link: LinkSection,
    #[serde(default)]
    pub mac: MacParams,
    #[serde(default)]
    pub cloud: CloudModel,
    #[serde(default)]
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub workload: WorkloadSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Zero-backoff test mode: no carrier sense, no backoff, no
    /// collisions. Used to verify delay additivity.
    #[serde(default)]
    pub ideal_mac: bool,
}

fn default_duration() -> f64 {
    200.0
}
fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    #[serde(default = "default_target_radius")]
    pub target_radius_m: f64,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub trace: Option<TraceSection>,
}

fn default_target_radius() -> f64 {
    1000.0
}

/// External mobility trace plus the static scenario pieces the CSV cannot
/// carry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSection {
    pub path: PathBuf,
    /// Obstacles as [xmin, ymin, xmax, ymax].
    #[serde(default)]
    pub obstacles: Vec<[f64; 4]>,
    /// Trace vehicle ids acting as bus gateways (ids starting with `bus`
    /// are recognized without listing).
    #[serde(default)]
    pub bus_ids: Vec<String>,
    /// Static RSU positions as [x, y].
    #[serde(default)]
    pub rsus: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkSection {
    pub t_base_m: f64,
    pub clearance_delta_m: f64,
    /// Probability that a shadowed link drops a frame.
    pub shadow_loss_prob: f64,
    /// Elevated bus antennas: links with a bus endpoint ignore obstacle
    /// shadowing.
    pub bus_links_clear_obstacles: bool,
    /// Transmission range for links with a bus endpoint.
    pub bus_t_base_m: f64,
}

impl Default for LinkSection {
    fn default() -> Self {
        LinkSection {
            t_base_m: 300.0,
            clearance_delta_m: 5.0,
            shadow_loss_prob: 1.0,
            bus_links_clear_obstacles: true,
            bus_t_base_m: 500.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolSection {
    pub kind: String,
    pub shadow_threshold: f64,
    pub k_max_gateways: usize,
    pub ttl_hops: u32,
    pub retry_interval_s: f64,
    pub max_retries: u32,
    /// Per-frame MAC retransmissions for unicast legs and relay handoffs.
    pub retry_count: u32,
    /// Cloud-path share for the static-split baseline.
    pub split: f64,
    pub beacon_interval_s: f64,
    /// Neighbor-table entry lifetime.
    pub neighbor_expiry_s: f64,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        ProtocolSection {
            kind: "hybrid-vehcloud".into(),
            shadow_threshold: 0.5,
            k_max_gateways: 3,
            ttl_hops: 10,
            retry_interval_s: 0.3,
            max_retries: 3,
            retry_count: 4,
            split: 0.5,
            beacon_interval_s: 1.0,
            neighbor_expiry_s: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSection {
    pub msgs_per_sec_per_10_vehicles: f64,
}

impl Default for WorkloadSection {
    fn default() -> Self {
        WorkloadSection {
            msgs_per_sec_per_10_vehicles: 0.5,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: ScenarioConfig =
            toml::from_str(s).map_err(|e| SimError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_toml_str(&s)
    }

    /// Load and apply `--set key=value` overrides (dotted paths into the
    /// TOML tree), then re-validate.
    pub fn load_with_overrides(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::from_toml_str_with_overrides(&s, overrides)
    }

    pub fn from_toml_str_with_overrides(
        s: &str,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut value: toml::Value =
            toml::from_str(s).map_err(|e| SimError::Config(e.to_string()))?;
        for (key, raw) in overrides {
            set_path(&mut value, key, raw)?;
        }
        let text = toml::to_string(&value).map_err(|e| SimError::Config(e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.run.duration_s > 0.0) {
            return Err(SimError::Config("run.duration_s must be > 0".into()));
        }
        match (&self.scenario.grid, &self.scenario.trace) {
            (Some(_), Some(_)) => {
                return Err(SimError::Config(
                    "exactly one of scenario.grid and scenario.trace must be set, got both".into(),
                ))
            }
            (None, None) => {
                return Err(SimError::Config(
                    "exactly one of scenario.grid and scenario.trace must be set, got neither"
                        .into(),
                ))
            }
            _ => {}
        }
        if let Some(grid) = &self.scenario.grid {
            grid.validate()?;
        }
        if let Some(tr) = &self.scenario.trace {
            for o in &tr.obstacles {
                if !(o[0] < o[2] && o[1] < o[3]) {
                    return Err(SimError::Config(format!(
                        "obstacle [{}, {}, {}, {}] must have min < max per axis",
                        o[0], o[1], o[2], o[3]
                    )));
                }
            }
        }
        if !(self.scenario.target_radius_m > 0.0) {
            return Err(SimError::Config("scenario.target_radius_m must be > 0".into()));
        }
        if !(self.link.t_base_m > 0.0) {
            return Err(SimError::Config("link.t_base_m must be > 0".into()));
        }
        if !(self.link.clearance_delta_m >= 0.0
            && self.link.clearance_delta_m < self.link.t_base_m)
        {
            return Err(SimError::Config(
                "link.clearance_delta_m must be in [0, t_base_m)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.link.shadow_loss_prob) {
            return Err(SimError::Config("link.shadow_loss_prob must be in [0, 1]".into()));
        }
        if !(self.link.bus_t_base_m > 0.0) {
            return Err(SimError::Config("link.bus_t_base_m must be > 0".into()));
        }
        self.mac.validate()?;
        self.cloud.validate()?;
        ProtocolKind::parse(&self.protocol.kind)?;
        if !(0.0..=1.0).contains(&self.protocol.shadow_threshold) {
            return Err(SimError::Config(
                "protocol.shadow_threshold must be in [0, 1]".into(),
            ));
        }
        if self.protocol.k_max_gateways < 1 {
            return Err(SimError::Config("protocol.k_max_gateways must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.protocol.split) {
            return Err(SimError::Config("protocol.split must be in [0, 1]".into()));
        }
        if !(self.protocol.beacon_interval_s > 0.0) {
            return Err(SimError::Config("protocol.beacon_interval_s must be > 0".into()));
        }
        if !(self.protocol.retry_interval_s > 0.0) {
            return Err(SimError::Config("protocol.retry_interval_s must be > 0".into()));
        }
        if !(self.workload.msgs_per_sec_per_10_vehicles >= 0.0) {
            return Err(SimError::Config(
                "workload.msgs_per_sec_per_10_vehicles must be >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn protocol_kind(&self) -> ProtocolKind {
        ProtocolKind::parse(&self.protocol.kind).expect("validated")
    }

    /// Stable hash of the resolved configuration, embedded in output
    /// headers so every run directory is self-describing.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml_string().as_bytes());
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn set_path(root: &mut toml::Value, dotted: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = dotted.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(SimError::Config(format!("invalid override key `{dotted}`")));
    }
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| SimError::Config(format!("`{dotted}`: `{part}` is not a table")))?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| SimError::Config(format!("`{dotted}` does not address a table entry")))?;
    let value = parse_override_value(raw);
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_override_value(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return toml::Value::Integer(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

/// The default Manhattan scenario (Table-style parameter defaults).
pub fn default_grid_config(n_vehicles: usize) -> ScenarioConfig {
    ScenarioConfig {
        run: RunSection {
            duration_s: default_duration(),
            seed: default_seed(),
            ideal_mac: false,
        },
        scenario: ScenarioSection {
            target_radius_m: default_target_radius(),
            grid: Some(GridSpec {
                road_length_m: 10_000.0,
                block_m: 200.0,
                lanes: 3,
                // 30-50 mph.
                speed_min_mps: 13.4,
                speed_max_mps: 22.4,
                n_vehicles,
                n_buses: None,
                n_rsus: 9,
                street_margin_m: 45.0,
                sample_interval_s: 1.0,
            }),
            trace: None,
        },
        link: LinkSection::default(),
        mac: MacParams::default(),
        cloud: CloudModel::default(),
        protocol: ProtocolSection::default(),
        workload: WorkloadSection::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates_and_roundtrips() {
        let cfg = default_grid_config(150);
        cfg.validate().unwrap();
        let text = cfg.to_toml_string();
        let parsed = ScenarioConfig::from_toml_str(&text).unwrap();
        assert_eq!(parsed, cfg);
        // Serialize -> parse -> serialize is a fixed point.
        assert_eq!(parsed.to_toml_string(), text);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = default_grid_config(10).to_toml_string();
        text.push_str("\n[typo_section]\nx = 1\n");
        assert!(ScenarioConfig::from_toml_str(&text).is_err());
        let text2 = default_grid_config(10)
            .to_toml_string()
            .replace("shadow_threshold", "shadow_treshold");
        assert!(ScenarioConfig::from_toml_str(&text2).is_err());
    }

    #[test]
    fn grid_and_trace_are_exclusive() {
        let mut cfg = default_grid_config(10);
        cfg.scenario.trace = Some(TraceSection {
            path: "x.csv".into(),
            obstacles: vec![],
            bus_ids: vec![],
            rsus: vec![],
        });
        assert!(cfg.validate().is_err());
        cfg.scenario.grid = None;
        cfg.validate().unwrap();
        cfg.scenario.trace = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overrides_apply_and_bad_keys_fail() {
        let text = default_grid_config(10).to_toml_string();
        let cfg = ScenarioConfig::from_toml_str_with_overrides(
            &text,
            &[
                ("scenario.grid.n_vehicles".into(), "450".into()),
                ("protocol.kind".into(), "cmds-like".into()),
                ("run.ideal_mac".into(), "true".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.scenario.grid.as_ref().unwrap().n_vehicles, 450);
        assert_eq!(cfg.protocol_kind(), ProtocolKind::CmdsLike);
        assert!(cfg.run.ideal_mac);

        let bad = ScenarioConfig::from_toml_str_with_overrides(
            &text,
            &[("protocol.no_such_knob".into(), "1".into())],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn zero_duration_rejected() {
        let mut cfg = default_grid_config(10);
        cfg.run.duration_s = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = default_grid_config(50);
        let mut b = default_grid_config(50);
        assert_eq!(a.hash(), b.hash());
        b.run.seed = 43;
        assert_ne!(a.hash(), b.hash());
    }
}
