//! Merge-Attend-Diffuse: attention layers selected by a [`MergeSchedule`]
//! attend over the merged canvas instead of each view alone.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{
    per_view_attention, Attend, AttentionHook, AttentionOptions, AttnBlockDescriptor, BackboneError, Stage,
};
use crate::tensor::Matrix;
use crate::tiling::{merge_tensor, split_tensor, ViewStack};
use crate::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MadError {
    #[error("tau {tau} exceeds total steps {total}")]
    TauExceedsSteps { tau: usize, total: usize },
    #[error("override for unknown attention layer {0}")]
    UnknownLayer(usize),
    #[error("step index {step} outside 0..{total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("unknown stage preset {0:?}; expected all, up, down, mid or none")]
    Preset(String),
}

/// Named stage subsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StagePreset {
    All,
    Up,
    Down,
    Mid,
    None,
}

impl StagePreset {
    pub fn stages(self) -> BTreeSet<Stage> {
        match self {
            StagePreset::All => Stage::ALL.into_iter().collect(),
            StagePreset::Up => [Stage::Up].into(),
            StagePreset::Down => [Stage::Down].into(),
            StagePreset::Mid => [Stage::Mid].into(),
            StagePreset::None => BTreeSet::new(),
        }
    }
}

impl FromStr for StagePreset {
    type Err = MadError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(Self::All),
            "up" => Ok(Self::Up),
            "down" => Ok(Self::Down),
            "mid" => Ok(Self::Mid),
            "none" => Ok(Self::None),
            _ => Err(MadError::Preset(s.to_string())),
        }
    }
}

impl fmt::Display for StagePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::All => "all",
            Self::Up => "up",
            Self::Down => "down",
            Self::Mid => "mid",
            Self::None => "none",
        };
        f.write_str(s)
    }
}

/// Which `(step, layer)` pairs attend over the merged canvas.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeSchedule {
    pub tau: usize,
    pub stages: BTreeSet<Stage>,
    #[serde(default)]
    pub overrides: BTreeMap<usize, bool>,
    #[serde(rename = "T")]
    pub total_steps: usize,
}

impl MergeSchedule {
    pub fn new(tau: usize, preset: StagePreset, total_steps: usize) -> Result<Self, MadError> {
        let s = Self {
            tau,
            stages: preset.stages(),
            overrides: BTreeMap::new(),
            total_steps,
        };
        s.check_tau()?;
        Ok(s)
    }

    /// Everywhere inactive: plain joint diffusion with end-of-step averaging.
    pub fn disabled(total_steps: usize) -> Self {
        Self {
            tau: 0,
            stages: BTreeSet::new(),
            overrides: BTreeMap::new(),
            total_steps,
        }
    }

    pub fn with_override(mut self, layer_id: usize, merged: bool) -> Self {
        self.overrides.insert(layer_id, merged);
        self
    }

    fn check_tau(&self) -> Result<(), MadError> {
        if self.tau > self.total_steps {
            return Err(MadError::TauExceedsSteps {
                tau: self.tau,
                total: self.total_steps,
            });
        }
        Ok(())
    }

    /// Checks tau and that every override names one of `layers`.
    pub fn validate(&self, layers: &[AttnBlockDescriptor]) -> Result<(), MadError> {
        self.check_tau()?;
        for &id in self.overrides.keys() {
            if !layers.iter().any(|l| l.layer_id == id) {
                return Err(MadError::UnknownLayer(id));
            }
        }
        Ok(())
    }

    /// True when nothing is ever merged.
    pub fn is_inactive(&self) -> bool {
        self.tau == 0 || (self.stages.is_empty() && !self.overrides.values().any(|&v| v))
    }

    /// `step_index` counts sampler iterations from 0 at the noisiest step.
    pub fn is_merged(&self, step_index: usize, layer: &AttnBlockDescriptor) -> Result<bool, MadError> {
        if step_index >= self.total_steps {
            return Err(MadError::StepOutOfRange {
                step: step_index,
                total: self.total_steps,
            });
        }
        let in_stage = self
            .overrides
            .get(&layer.layer_id)
            .copied()
            .unwrap_or_else(|| self.stages.contains(&layer.stage));
        Ok(step_index < self.tau && in_stage)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MadOptions {
    /// Hard limit on merged tokens; `None` disables the guard.
    pub token_cap: Option<usize>,
    /// Merged sequences longer than this use key-chunked attention.
    pub chunk_threshold: usize,
    pub key_chunk: usize,
}

impl Default for MadOptions {
    fn default() -> Self {
        Self {
            token_cap: Some(1 << 18),
            chunk_threshold: 8192,
            key_chunk: 1024,
        }
    }
}

/// Merge the stack, attend over the flattened canvas, split back.
pub fn mad_attention<S: Scalar>(
    stack: ViewStack<S>,
    attend: &Attend<'_, S>,
    context: Option<&Matrix<S>>,
    options: &MadOptions,
) -> Result<ViewStack<S>, BackboneError> {
    let layout = stack.layout.clone();
    let merged = merge_tensor(&stack)?;
    let (h, w) = (merged.height, merged.width);
    let tokens = h * w;
    if let Some(cap) = options.token_cap {
        if tokens > cap {
            return Err(BackboneError::TokenCap { tokens, cap });
        }
    }
    let attn_opts = AttentionOptions {
        key_chunk: (tokens > options.chunk_threshold).then_some(options.key_chunk),
    };
    let out = attend(&merged.into_tokens(), context, &attn_opts)?;
    Ok(split_tensor(&out.into_tensor(h, w), &layout)?)
}

/// Merged or per-view attention depending on the schedule.
pub fn route_attention<S: Scalar>(
    schedule: &MergeSchedule,
    step_index: usize,
    layer: &AttnBlockDescriptor,
    stack: ViewStack<S>,
    attend: &Attend<'_, S>,
    context: Option<&Matrix<S>>,
    options: &MadOptions,
) -> Result<ViewStack<S>, BackboneError> {
    let merged = schedule
        .is_merged(step_index, layer)
        .map_err(|e| BackboneError::Config(e.to_string()))?;
    if merged {
        mad_attention(stack, attend, context, options)
    } else {
        per_view_attention(stack, attend, context)
    }
}

/// Observes attention outputs on the merged path.
pub trait MergeProbe<S> {
    fn merged(&mut self, step_index: usize, layer: &AttnBlockDescriptor, output: &ViewStack<S>);
}

/// Attention hook applying [`route_attention`] for one sampler step.
pub struct MadRouter<'a, S> {
    pub schedule: &'a MergeSchedule,
    pub step_index: usize,
    pub options: MadOptions,
    pub probe: Option<&'a mut dyn MergeProbe<S>>,
    merged_calls: usize,
}

impl<'a, S: Scalar> MadRouter<'a, S> {
    pub fn new(schedule: &'a MergeSchedule, step_index: usize, options: MadOptions) -> Self {
        Self {
            schedule,
            step_index,
            options,
            probe: None,
            merged_calls: 0,
        }
    }

    pub fn with_probe(mut self, probe: &'a mut dyn MergeProbe<S>) -> Self {
        self.probe = Some(probe);
        self
    }

    /// Attention layers that took the merged path so far.
    pub fn merged_calls(&self) -> usize {
        self.merged_calls
    }
}

impl<S: Scalar> AttentionHook<S> for MadRouter<'_, S> {
    fn on_attention(
        &mut self,
        layer: &AttnBlockDescriptor,
        features: ViewStack<S>,
        attend: &Attend<'_, S>,
        context: Option<&Matrix<S>>,
    ) -> Result<ViewStack<S>, BackboneError> {
        let merged = self
            .schedule
            .is_merged(self.step_index, layer)
            .map_err(|e| BackboneError::Config(e.to_string()))?;
        if !merged {
            return per_view_attention(features, attend, context);
        }
        self.merged_calls += 1;
        let out = mad_attention(features, attend, context, &self.options)?;
        if let Some(p) = self.probe.as_deref_mut() {
            p.merged(self.step_index, layer, &out);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::AttnKind;
    use crate::tensor::Tensor3;
    use crate::tiling::{overlap_counts, ViewLayout};

    fn layer(id: usize, stage: Stage) -> AttnBlockDescriptor {
        AttnBlockDescriptor {
            layer_id: id,
            stage,
            kind: AttnKind::SelfAttention,
            feature_channels: 4,
            spatial_scale: 1,
        }
    }

    fn layers() -> Vec<AttnBlockDescriptor> {
        [Stage::Down, Stage::Down, Stage::Mid, Stage::Up, Stage::Up]
            .into_iter()
            .enumerate()
            .map(|(i, s)| layer(i, s))
            .collect()
    }

    #[test]
    fn is_merged_examples() {
        let all = MergeSchedule::new(15, StagePreset::All, 50).unwrap();
        assert!(all.is_merged(10, &layer(0, Stage::Up)).unwrap());
        assert!(!all.is_merged(20, &layer(0, Stage::Up)).unwrap());
        assert!(!all.is_merged(15, &layer(0, Stage::Up)).unwrap());
        let mid = MergeSchedule::new(15, StagePreset::Mid, 50).unwrap();
        assert!(!mid.is_merged(0, &layer(0, Stage::Up)).unwrap());
        assert!(mid.is_merged(0, &layer(0, Stage::Mid)).unwrap());
        assert!(all.is_merged(50, &layer(0, Stage::Up)).is_err());
    }

    #[test]
    fn tau_zero_or_no_stages_is_inactive() {
        for s in [
            MergeSchedule::new(0, StagePreset::All, 10).unwrap(),
            MergeSchedule::new(10, StagePreset::None, 10).unwrap(),
            MergeSchedule::disabled(10),
        ] {
            assert!(s.is_inactive());
            for step in 0..10 {
                for l in layers() {
                    assert!(!s.is_merged(step, &l).unwrap());
                }
            }
        }
    }

    #[test]
    fn overrides_win_and_are_validated() {
        let s = MergeSchedule::new(5, StagePreset::Mid, 10)
            .unwrap()
            .with_override(0, true)
            .with_override(2, false);
        s.validate(&layers()).unwrap();
        assert!(s.is_merged(0, &layers()[0]).unwrap());
        assert!(!s.is_merged(0, &layers()[2]).unwrap());
        let bad = s.with_override(9, true);
        assert_eq!(bad.validate(&layers()), Err(MadError::UnknownLayer(9)));
        assert!(MergeSchedule::new(11, StagePreset::All, 10).is_err());
    }

    #[test]
    fn merged_set_grows_with_tau() {
        for total in 1..=50 {
            for preset in [StagePreset::All, StagePreset::Up, StagePreset::Down, StagePreset::Mid, StagePreset::None] {
                let mut previous: Vec<(usize, usize)> = Vec::new();
                for tau in 0..=total {
                    let s = MergeSchedule::new(tau, preset, total).unwrap();
                    let set: Vec<(usize, usize)> = (0..total)
                        .flat_map(|step| layers().into_iter().map(move |l| (step, l)))
                        .filter(|(step, l)| s.is_merged(*step, l).unwrap())
                        .map(|(step, l)| (step, l.layer_id))
                        .collect();
                    assert!(previous.iter().all(|p| set.contains(p)));
                    previous = set;
                }
            }
        }
    }

    #[test]
    fn preset_parse_round_trip() {
        for p in ["all", "up", "down", "mid", "none"] {
            assert_eq!(p.parse::<StagePreset>().unwrap().to_string(), p);
        }
        assert!("left".parse::<StagePreset>().is_err());
    }

    #[test]
    fn schedule_serializes_documented_keys() {
        let s = MergeSchedule::new(15, StagePreset::All, 50).unwrap().with_override(3, false);
        let v = serde_json::to_value(&s).unwrap();
        assert_eq!(v["tau"], 15);
        assert_eq!(v["T"], 50);
        assert_eq!(v["stages"], serde_json::json!(["down", "mid", "up"]));
        assert_eq!(v["overrides"]["3"], false);
        let back: MergeSchedule = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
    }

    fn identity(t: &Matrix<f64>, _c: Option<&Matrix<f64>>, _o: &AttentionOptions) -> Result<Matrix<f64>, BackboneError> {
        Ok(t.clone())
    }

    #[test]
    fn identity_attention_returns_consistent_stack() {
        let grid = Tensor3::from_fn(4, 10, 2, |y, x, c| (y * 31 + x * 7 + c) as f64 * 0.1);
        let layout = ViewLayout::tile((4, 10), 4, 2, true).unwrap();
        let stack = split_tensor(&grid, &layout).unwrap();
        let out = mad_attention(stack.clone(), &identity, None, &MadOptions::default()).unwrap();
        for (a, b) in out.views.iter().zip(&stack.views) {
            assert!(a.max_abs_diff(b) < 1e-12);
        }
    }

    #[test]
    fn single_view_equals_per_view_attention() {
        let softmax_mix = |t: &Matrix<f64>, _c: Option<&Matrix<f64>>, _o: &AttentionOptions| {
            let n = t.rows;
            let mut out = Matrix::zeros(n, t.cols);
            for i in 0..n {
                let scores: Vec<f64> = (0..n).map(|j| crate::tensor::dot(t.row(i), t.row(j))).collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..n {
                    for c in 0..t.cols {
                        out.data[i * t.cols + c] += e[j] / z * t.get(j, c);
                    }
                }
            }
            Ok(out)
        };
        let v = Tensor3::from_fn(3, 3, 2, |y, x, c| ((y * 3 + x) as f64 * 0.37 + c as f64).sin());
        let stack = ViewStack::new(vec![v], ViewLayout::whole(3, 3)).unwrap();
        let merged = mad_attention(stack.clone(), &softmax_mix, None, &MadOptions::default()).unwrap();
        let per_view = per_view_attention(stack, &softmax_mix, None).unwrap();
        assert_eq!(merged.views, per_view.views);
    }

    #[test]
    fn overlapping_cells_agree_after_merge() {
        let scramble = |t: &Matrix<f64>, _c: Option<&Matrix<f64>>, _o: &AttentionOptions| {
            let mut out = t.clone();
            for (i, v) in out.data.iter_mut().enumerate() {
                *v = (*v * 3.0 + i as f64).tanh();
            }
            Ok(out)
        };
        let views: Vec<Tensor3<f64>> = (0..4)
            .map(|i| Tensor3::from_fn(4, 4, 3, |y, x, c| ((i * 97 + y * 13 + x * 5 + c) as f64).cos()))
            .collect();
        let layout = ViewLayout::tile((4, 10), 4, 2, true).unwrap();
        let stack = ViewStack::new(views, layout.clone()).unwrap();
        let out = mad_attention(stack, &scramble, None, &MadOptions::default()).unwrap();
        let counts = overlap_counts(&layout);
        for y in 0..4 {
            for x in 0..10 {
                let covering: Vec<f64> = layout
                    .origins
                    .iter()
                    .zip(&out.views)
                    .filter(|((_, c0), _)| x >= *c0 && x < c0 + 4)
                    .map(|((_, c0), v)| v.get(y, x - c0, 1))
                    .collect();
                assert_eq!(covering.len() as u32, counts.get(y, x));
                assert!(covering.iter().all(|&v| v == covering[0]));
            }
        }
    }

    #[test]
    fn token_cap_guard() {
        let stack = ViewStack::new(vec![Tensor3::<f64>::zeros(4, 4, 1)], ViewLayout::whole(4, 4)).unwrap();
        let opts = MadOptions {
            token_cap: Some(15),
            ..MadOptions::default()
        };
        assert!(matches!(
            mad_attention(stack, &identity, None, &opts),
            Err(BackboneError::TokenCap { tokens: 16, cap: 15 })
        ));
    }

    #[test]
    fn chunking_requested_above_threshold() {
        let seen = std::cell::Cell::new(None);
        let probe = |t: &Matrix<f64>, _c: Option<&Matrix<f64>>, o: &AttentionOptions| {
            seen.set(Some(o.key_chunk));
            Ok(t.clone())
        };
        let stack = ViewStack::new(vec![Tensor3::<f64>::zeros(4, 4, 1)], ViewLayout::whole(4, 4)).unwrap();
        let opts = MadOptions {
            chunk_threshold: 8,
            key_chunk: 3,
            token_cap: None,
        };
        mad_attention(stack.clone(), &probe, None, &opts).unwrap();
        assert_eq!(seen.get(), Some(Some(3)));
        mad_attention(stack, &probe, None, &MadOptions::default()).unwrap();
        assert_eq!(seen.get(), Some(None));
    }

    #[test]
    fn route_dispatch() {
        let calls = std::cell::Cell::new(0usize);
        let counting = |t: &Matrix<f64>, _c: Option<&Matrix<f64>>, _o: &AttentionOptions| {
            calls.set(calls.get() + 1);
            Ok(t.clone())
        };
        let layout = ViewLayout::tile((4, 10), 4, 2, true).unwrap();
        let stack = split_tensor(&Tensor3::<f64>::zeros(4, 10, 1), &layout).unwrap();
        let opts = MadOptions::default();
        let none = MergeSchedule::disabled(10);
        route_attention(&none, 0, &layer(0, Stage::Down), stack.clone(), &counting, None, &opts).unwrap();
        assert_eq!(calls.get(), 4);
        let all = MergeSchedule::new(10, StagePreset::All, 10).unwrap();
        route_attention(&all, 0, &layer(0, Stage::Down), stack.clone(), &counting, None, &opts).unwrap();
        assert_eq!(calls.get(), 5);
        let up = MergeSchedule::new(10, StagePreset::Up, 10).unwrap();
        route_attention(&up, 0, &layer(0, Stage::Down), stack, &counting, None, &opts).unwrap();
        assert_eq!(calls.get(), 9);
    }
}
