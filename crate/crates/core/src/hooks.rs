//! Attention/feature hook surface.
//!
//! A [`HookScope`] is created per denoiser call and passed down explicitly, so
//! no hook state outlives a run or leaks between concurrent edits. Denoisers
//! that expose hook points call [`HookScope::visit`] with the tensor they just
//! computed and continue with whatever it returns.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{PicError, Result};

/// Row sums of attention maps must be within this of one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookKind {
    /// Query-by-token cross-attention probabilities.
    CrossAttention,
    /// Query-by-query self-attention probabilities.
    SelfAttention,
    /// Residual block output features.
    Feature,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HookPoint {
    pub kind: HookKind,
    pub layer: String,
}

impl HookPoint {
    pub fn new(kind: HookKind, layer: impl Into<String>) -> Self {
        HookPoint {
            kind,
            layer: layer.into(),
        }
    }
}

/// Maps and features captured from one denoiser evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionSnapshot {
    pub step: usize,
    pub cross_maps: BTreeMap<String, Array2<f64>>,
    pub self_maps: BTreeMap<String, Array2<f64>>,
    pub features: BTreeMap<String, Array2<f64>>,
}

impl AttentionSnapshot {
    pub fn empty(step: usize) -> Self {
        AttentionSnapshot {
            step,
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.cross_maps.is_empty() && self.self_maps.is_empty() && self.features.is_empty()
    }

    fn table(&self, kind: HookKind) -> &BTreeMap<String, Array2<f64>> {
        match kind {
            HookKind::CrossAttention => &self.cross_maps,
            HookKind::SelfAttention => &self.self_maps,
            HookKind::Feature => &self.features,
        }
    }

    fn table_mut(&mut self, kind: HookKind) -> &mut BTreeMap<String, Array2<f64>> {
        match kind {
            HookKind::CrossAttention => &mut self.cross_maps,
            HookKind::SelfAttention => &mut self.self_maps,
            HookKind::Feature => &mut self.features,
        }
    }

    pub fn get(&self, point: &HookPoint) -> Option<&Array2<f64>> {
        self.table(point.kind).get(&point.layer)
    }

    pub fn insert(&mut self, point: &HookPoint, value: Array2<f64>) {
        self.table_mut(point.kind)
            .insert(point.layer.clone(), value);
    }

    /// Checks every attention map is row-stochastic and finite.
    pub fn validate(&self) -> Result<()> {
        for (kind, table) in [("cross", &self.cross_maps), ("self", &self.self_maps)] {
            for (layer, map) in table {
                check_row_stochastic(map).map_err(|e| {
                    PicError::Validation(format!("{kind}-attention map {layer}: {e}"))
                })?;
            }
        }
        for (layer, f) in &self.features {
            if f.iter().any(|v| !v.is_finite()) {
                return Err(PicError::Validation(format!(
                    "feature {layer} has non-finite values"
                )));
            }
        }
        Ok(())
    }
}

pub fn check_row_stochastic(map: &Array2<f64>) -> Result<(), String> {
    for (i, row) in map.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(format!("row {i} has negative or non-finite entries"));
        }
        let s: f64 = row.sum();
        if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(format!("row {i} sums to {s}"));
        }
    }
    Ok(())
}

/// Which captured kinds an injection substitutes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InjectKinds {
    pub cross: bool,
    pub self_attn: bool,
    pub features: bool,
}

impl InjectKinds {
    pub fn contains(&self, kind: HookKind) -> bool {
        match kind {
            HookKind::CrossAttention => self.cross,
            HookKind::SelfAttention => self.self_attn,
            HookKind::Feature => self.features,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HookEvent {
    Captured {
        point: HookPoint,
    },
    Injected {
        point: HookPoint,
        value: Array2<f64>,
    },
}

#[derive(Debug, Default)]
pub struct HookScope {
    capture: bool,
    captured: AttentionSnapshot,
    injection: Option<(AttentionSnapshot, InjectKinds)>,
    trace: Vec<HookEvent>,
}

impl HookScope {
    /// A scope that neither captures nor injects.
    pub fn passive() -> Self {
        HookScope::default()
    }

    pub fn capturing(step: usize) -> Self {
        HookScope {
            capture: true,
            captured: AttentionSnapshot::empty(step),
            ..Default::default()
        }
    }

    pub fn injecting(snapshot: AttentionSnapshot, kinds: InjectKinds) -> Result<Self> {
        snapshot.validate()?;
        Ok(HookScope {
            injection: Some((snapshot, kinds)),
            ..Default::default()
        })
    }

    /// True when visiting hook points cannot change the computation.
    pub fn is_inert(&self) -> bool {
        !self.capture
            && self
                .injection
                .as_ref()
                .is_none_or(|(snap, kinds)| *kinds == InjectKinds::default() || snap.is_empty())
    }

    /// Called by a denoiser at each hook point with the tensor it computed;
    /// returns the tensor to continue with.
    pub fn visit(&mut self, point: HookPoint, computed: Array2<f64>) -> Result<Array2<f64>> {
        if self.capture {
            self.captured.insert(&point, computed.clone());
            self.trace.push(HookEvent::Captured {
                point: point.clone(),
            });
        }
        if let Some((snap, kinds)) = &self.injection {
            if kinds.contains(point.kind) {
                if let Some(value) = snap.get(&point) {
                    if value.dim() != computed.dim() {
                        return Err(PicError::ShapeMismatch {
                            expected: vec![computed.nrows(), computed.ncols()],
                            actual: vec![value.nrows(), value.ncols()],
                        });
                    }
                    let value = value.clone();
                    self.trace.push(HookEvent::Injected {
                        point,
                        value: value.clone(),
                    });
                    return Ok(value);
                }
            }
        }
        Ok(computed)
    }

    pub fn into_snapshot(self) -> AttentionSnapshot {
        self.captured
    }

    pub fn trace(&self) -> &[HookEvent] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<HookEvent> {
        std::mem::take(&mut self.trace)
    }
}
