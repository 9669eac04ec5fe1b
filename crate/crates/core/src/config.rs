//! Pipeline thresholds, read from JSON or `key = value` text.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::change::{ChangeDetectConfig, PermanenceConfig};
use crate::geodesy::GeodeticCoord;
use crate::metadata::MetadataGenConfig;
use crate::pose::PoseConfig;
use crate::realtime::{RangeGate, DEFAULT_ASSOCIATION_RADIUS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    pub u_min: f64,
    pub u_max: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        let g = RangeGate::default();
        Self {
            u_min: g.u_min,
            u_max: g.u_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermanenceSettings {
    pub min_vehicles: usize,
    pub min_days: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub t_d: f64,
    pub min_support: usize,
    pub match_radius_r: f64,
    pub gate: GateConfig,
    pub score_threshold: f64,
    pub r_assoc: f64,
    pub min_track_count: usize,
    pub removal_min_visible_frames: usize,
    pub fov_margin_deg: f64,
    pub max_ref_distance: f64,
    pub reanchor_every: usize,
    /// No default: promotion needs both thresholds stated.
    pub permanence: Option<PermanenceSettings>,
    pub enu_origin: Option<GeodeticCoord>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let m = MetadataGenConfig::default();
        let c = ChangeDetectConfig::default();
        let p = PoseConfig::default();
        Self {
            t_d: m.t_d,
            min_support: m.min_support,
            match_radius_r: c.match_radius_r,
            gate: GateConfig::default(),
            score_threshold: c.score_threshold,
            r_assoc: DEFAULT_ASSOCIATION_RADIUS,
            min_track_count: c.min_track_count,
            removal_min_visible_frames: c.removal_min_visible_frames,
            fov_margin_deg: c.fov_margin_deg,
            max_ref_distance: p.max_ref_distance,
            reanchor_every: p.reanchor_every,
            permanence: None,
            enu_origin: None,
        }
    }
}

impl PipelineConfig {
    /// JSON when the text starts with `{`, otherwise `key = value` lines
    /// with `#` comments; dotted keys address nested fields
    /// (`gate.u_max = 40`).
    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Self = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| e.to_string())?
        } else {
            serde_json::from_value(key_values(text)?).map_err(|e| e.to_string())?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.metadata().validate().map_err(|e| e.to_string())?;
        self.change().validate().map_err(|e| e.to_string())?;
        if !(self.r_assoc > 0.0) {
            return Err("r_assoc must be positive".into());
        }
        if !(self.max_ref_distance > 0.0) {
            return Err("max_ref_distance must be positive".into());
        }
        if self.reanchor_every < 1 {
            return Err("reanchor_every must be at least 1".into());
        }
        if let Some(p) = self.permanence {
            PermanenceConfig::new(p.min_vehicles, p.min_days).map_err(|e| e.to_string())?;
        }
        if let Some(o) = self.enu_origin {
            o.validate().map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    pub fn metadata(&self) -> MetadataGenConfig {
        MetadataGenConfig {
            t_d: self.t_d,
            min_support: self.min_support,
        }
    }

    pub fn gate(&self) -> RangeGate {
        RangeGate {
            u_min: self.gate.u_min,
            u_max: self.gate.u_max,
        }
    }

    pub fn change(&self) -> ChangeDetectConfig {
        ChangeDetectConfig {
            match_radius_r: self.match_radius_r,
            gate: self.gate(),
            score_threshold: self.score_threshold,
            min_track_count: self.min_track_count,
            removal_min_visible_frames: self.removal_min_visible_frames,
            fov_margin_deg: self.fov_margin_deg,
        }
    }

    pub fn pose(&self) -> PoseConfig {
        PoseConfig {
            max_ref_distance: self.max_ref_distance,
            reanchor_every: self.reanchor_every,
        }
    }
}

fn key_values(text: &str) -> Result<Value, String> {
    let mut root = Map::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, raw) = line
            .split_once('=')
            .ok_or_else(|| format!("config line {}: expected key = value", i + 1))?;
        let raw = raw.trim();
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let parts: Vec<&str> = key.trim().split('.').collect();
        let mut node = &mut root;
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .ok_or_else(|| format!("config line {}: '{part}' is not a section", i + 1))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(Value::Object(root))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!((c.t_d, c.match_radius_r, c.score_threshold, c.r_assoc), (5.0, 20.0, 0.4, 10.0));
        assert!(c.permanence.is_none());
        c.validate().unwrap();
    }

    #[test]
    fn json_and_key_value_agree() {
        let a = PipelineConfig::parse(r#"{"t_d": 4.0, "gate": {"u_min": 2, "u_max": 40}, "permanence": {"min_vehicles": 2, "min_days": 3}}"#)
            .unwrap();
        let b = PipelineConfig::parse(
            "# thresholds\nt_d = 4.0\ngate.u_min = 2\ngate.u_max = 40\npermanence.min_vehicles = 2\npermanence.min_days = 3\n",
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.gate().u_max, 40.0);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(PipelineConfig::parse("t_d = -1").is_err());
        assert!(PipelineConfig::parse("bogus = 1").is_err());
        assert!(PipelineConfig::parse("gate.u_min = 60").is_err());
        assert!(PipelineConfig::parse("permanence.min_vehicles = 0\npermanence.min_days = 1").is_err());
        assert!(PipelineConfig::parse("no equals sign").is_err());
    }
}
