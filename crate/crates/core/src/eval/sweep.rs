//! One training (or evaluation) per axis value, everything else held fixed.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::synth_data::BASE_FRAME_RATE;
use crate::trainer::{fit, FitOptions};

use super::{evaluate, MetricsReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    EdgeDropout,
    PathLength,
    /// Training-data frame rate; `inf` trains on a repeated still frame.
    FrameRate,
    /// Propagation context length `m`; evaluates a fixed encoder.
    ContextLength,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::EdgeDropout => "edge-dropout",
            SweepAxis::PathLength => "path-length",
            SweepAxis::FrameRate => "frame-rate",
            SweepAxis::ContextLength => "context-length",
        }
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::EdgeDropout => vec![0.0, 0.05, 0.1, 0.2, 0.3, 0.4],
            SweepAxis::PathLength => vec![2.0, 4.0, 6.0, 10.0],
            SweepAxis::FrameRate => vec![6.0, 12.0, 24.0, f64::INFINITY],
            SweepAxis::ContextLength => vec![1.0, 2.0, 4.0, 8.0, 20.0],
        }
    }

    fn trains(self) -> bool {
        self != SweepAxis::ContextLength
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edge-dropout" => Ok(SweepAxis::EdgeDropout),
            "path-length" => Ok(SweepAxis::PathLength),
            "frame-rate" => Ok(SweepAxis::FrameRate),
            "context-length" => Ok(SweepAxis::ContextLength),
            other => Err(Error::config(format!(
                "unknown sweep axis {other:?}; expected edge-dropout, path-length, frame-rate or context-length"
            ))),
        }
    }
}

fn integral(v: f64, what: &str) -> Result<usize> {
    if v >= 1.0 && v.fract() == 0.0 && v < 1e9 {
        Ok(v as usize)
    } else {
        Err(Error::config(format!("{what} must be a positive integer, got {v}")))
    }
}

fn value_label(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}

/// Training and held-out configurations for one cell. Held-out data always
/// comes from the base scene so frame-rate cells share an evaluation set.
fn apply(axis: SweepAxis, value: f64, base: &RunConfig) -> Result<(RunConfig, RunConfig)> {
    let mut cell = base.clone();
    let mut eval = base.clone();
    match axis {
        SweepAxis::EdgeDropout => {
            cell.train.walk.edge_dropout = value;
            cell.data.allow_occlusion = true;
            eval.data.allow_occlusion = true;
        }
        SweepAxis::PathLength => {
            let t = integral(value, "path length")?;
            if t < 2 {
                return Err(Error::config("path length must be at least 2"));
            }
            cell.train.clip_len = t;
            cell.data.frames = cell.data.frames.max(t);
        }
        SweepAxis::FrameRate => {
            if value.is_infinite() && value > 0.0 {
                cell.data.static_frames = true;
            } else {
                let ratio = BASE_FRAME_RATE / value;
                let m = integral(ratio, "base frame rate / frame rate")?;
                cell.data.speed_multiplier = m as u32;
                cell.data.frames = cell.data.frames.max((cell.train.clip_len - 1) * m + 1);
            }
        }
        SweepAxis::ContextLength => {
            eval.propagation.context = integral(value, "context length")?;
        }
    }
    eval.train = cell.train.clone();
    Ok((cell.resolve()?, eval.resolve()?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: String,
    pub metrics: Option<MetricsReport>,
    /// Mean loss over the last 10% of training steps.
    pub final_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
    pub version: String,
    pub config: serde_json::Value,
}

fn run_cell(axis: SweepAxis, value: f64, base: &RunConfig, fixed: Option<&ParamSet<f64>>) -> Result<(MetricsReport, Option<f64>)> {
    let (cell, eval_cfg) = apply(axis, value, base)?;
    let (params, final_loss) = match (axis.trains(), fixed) {
        (false, Some(p)) => (p.clone(), None),
        _ => {
            let data = cell.train_sequences()?;
            let fitted = fit(
                &data,
                &cell.train,
                FitOptions {
                    config_echo: cell.echo(),
                    ..FitOptions::default()
                },
            )?;
            let tail = (fitted.history.len() / 10).max(1);
            let loss = fitted.history.iter().rev().take(tail).map(|r| r.total_loss).sum::<f64>() / tail as f64;
            (fitted.params, (!fitted.history.is_empty()).then_some(loss))
        }
    };
    let heldout = eval_cfg.heldout_set()?;
    let report = evaluate(&params, &heldout, &eval_cfg.train, &eval_cfg.eval.hops, Some(&eval_cfg.propagation), cell.echo())?;
    Ok((report, final_loss))
}

/// Failed cells record their error and the sweep continues. `fixed` supplies
/// the encoder for evaluation-only axes; without it one is trained on `base`.
pub fn run_sweep(axis: SweepAxis, values: &[f64], base: &RunConfig, fixed: Option<&ParamSet<f64>>) -> Result<SweepTable> {
    let base = base.clone().resolve()?;
    let trained;
    let fixed = match (axis.trains(), fixed) {
        (false, None) => {
            let data = base.train_sequences()?;
            trained = fit(&data, &base.train, FitOptions::default())?.params;
            Some(&trained)
        }
        (_, f) => f,
    };
    let cells = values
        .par_iter()
        .map(|&v| match run_cell(axis, v, &base, fixed) {
            Ok((m, loss)) => SweepCell {
                value: value_label(v),
                metrics: Some(m),
                final_loss: loss,
                error: None,
            },
            Err(e) => SweepCell {
                value: value_label(v),
                metrics: None,
                final_loss: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    Ok(SweepTable {
        axis,
        cells,
        version: crate::version_string(),
        config: base.echo(),
    })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl SweepTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    /// One row per cell; `#` comment lines carry the version and configuration.
    pub fn to_csv(&self) -> String {
        let hops: Vec<usize> = self
            .cells
            .iter()
            .find_map(|c| c.metrics.as_ref())
            .map(|m| m.hops.iter().map(|h| h.hop).collect())
            .unwrap_or_default();
        let mut out = String::new();
        let _ = writeln!(out, "# version: {}", self.version);
        let _ = writeln!(out, "# config: {}", self.config);
        let mut header = vec!["axis".to_string(), "value".into()];
        header.extend(hops.iter().map(|h| format!("walk_accuracy_hop{h}")));
        header.extend(hops.iter().map(|h| format!("entropy_hop{h}")));
        header.extend(["mean_iou", "mean_return_probability", "final_loss", "error"].map(String::from));
        let _ = writeln!(out, "{}", header.join(","));
        let num = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for c in &self.cells {
            let mut row = vec![self.axis.name().to_string(), csv_field(&c.value)];
            for &h in &hops {
                row.push(num(c.metrics.as_ref().and_then(|m| m.accuracy_at(h))));
            }
            for &h in &hops {
                row.push(num(c.metrics.as_ref().and_then(|m| m.hops.iter().find(|x| x.hop == h)).map(|x| x.entropy)));
            }
            row.push(num(c.metrics.as_ref().and_then(|m| m.mean_iou)));
            row.push(num(c.metrics.as_ref().map(|m| m.mean_return_probability)));
            row.push(num(c.final_loss));
            row.push(csv_field(c.error.as_deref().unwrap_or("")));
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_round_trip() {
        for a in [SweepAxis::EdgeDropout, SweepAxis::PathLength, SweepAxis::FrameRate, SweepAxis::ContextLength] {
            assert_eq!(a.name().parse::<SweepAxis>().unwrap(), a);
            assert_eq!(serde_json::to_value(a).unwrap(), a.name());
        }
        assert!("speed".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn frame_rate_values_map_to_multipliers() {
        let base = RunConfig::default();
        let (c, e) = apply(SweepAxis::FrameRate, 6.0, &base).unwrap();
        assert_eq!(c.data.speed_multiplier, 4);
        assert!(c.data.output_frames() >= c.train.clip_len);
        assert_eq!(e.data, base.data);
        let (c, _) = apply(SweepAxis::FrameRate, f64::INFINITY, &base).unwrap();
        assert!(c.data.static_frames);
        assert!(apply(SweepAxis::FrameRate, 7.0, &base).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let base = RunConfig::default();
        assert!(apply(SweepAxis::PathLength, 1.0, &base).is_err());
        assert!(apply(SweepAxis::PathLength, 2.5, &base).is_err());
        assert!(apply(SweepAxis::EdgeDropout, 1.0, &base).is_err());
        assert!(apply(SweepAxis::ContextLength, 0.0, &base).is_err());
    }

    #[test]
    fn failing_cells_are_recorded_and_the_sweep_continues() {
        let mut base = RunConfig::default();
        base.train.steps = 1;
        base.train.batch_size = 1;
        base.dataset.train_sequences = 2;
        base.dataset.heldout_sequences = 1;
        let t = run_sweep(SweepAxis::EdgeDropout, &[0.0, 1.5], &base, None).unwrap();
        assert!(t.cells[0].metrics.is_some());
        assert!(t.cells[1].error.as_deref().unwrap().contains("edge dropout"));
        let csv = t.to_csv();
        let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].starts_with("axis,value,walk_accuracy_hop1"));
        let back: SweepTable = serde_json::from_str(&t.to_json()).unwrap();
        assert_eq!(back.cells.len(), 2);
    }
}
