//! One-axis hyperparameter sweeps: clone a base configuration, vary one
//! knob at reduced budget, rank variants by best validation loss.

use std::str::FromStr;

use iclbench::attention::FeatureMapKind;
use iclbench::model::AttentionKind;
use iclbench::{Error, Result};

use crate::manifest::ManifestRun;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    LearningRate,
    BatchSize,
    Steps,
    FeatureMap,
}

impl SweepAxis {
    fn slug(self) -> &'static str {
        match self {
            SweepAxis::LearningRate => "lr",
            SweepAxis::BatchSize => "batch",
            SweepAxis::Steps => "steps",
            SweepAxis::FeatureMap => "fmap",
        }
    }
}

/// Directory-safe form of a swept value (`1e-4` stays, `0.5` -> `0p5`).
fn value_slug(value: &str) -> String {
    value
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                'p'
            }
        })
        .collect()
}

/// Applies one axis value to a copy of the base run. Non-`Steps` axes run at
/// `budget_steps`; a `FeatureMap` sweep forces linear attention since the
/// map only exists there.
pub fn apply_axis(
    base: &ManifestRun,
    axis: SweepAxis,
    value: &str,
    budget_steps: u64,
) -> Result<ManifestRun> {
    let mut run = base.clone();
    run.name = format!("{}-{}-{}", base.name, axis.slug(), value_slug(value));
    run.train.steps = budget_steps;
    let parse_err = |what: &str| {
        Error::Config(format!("cannot parse '{value}' as a {what} for the sweep axis"))
    };
    match axis {
        SweepAxis::LearningRate => {
            run.train.learning_rate = value.parse::<f64>().map_err(|_| parse_err("number"))?;
        }
        SweepAxis::BatchSize => {
            run.train.batch_size =
                value.parse::<usize>().map_err(|_| parse_err("positive integer"))?;
        }
        SweepAxis::Steps => {
            run.train.steps = value.parse::<u64>().map_err(|_| parse_err("step count"))?;
        }
        SweepAxis::FeatureMap => {
            let kind =
                FeatureMapKind::from_str(value).map_err(|_| parse_err("feature map"))?;
            run.model.attention = AttentionKind::Linear(kind);
        }
    }
    run.train.validate()?;
    run.model.validate()?;
    Ok(run)
}

/// Ranks `(value, mean best validation loss)` pairs ascending and renders
/// the result table with the winner marked.
pub fn render_ranking(mut rows: Vec<(String, f64)>) -> (String, String) {
    rows.sort_by(|a, b| a.1.total_cmp(&b.1));
    let winner = rows.first().map(|(v, _)| v.clone()).unwrap_or_default();
    let mut out = String::from("value            best_val_loss\n");
    for (i, (value, loss)) in rows.iter().enumerate() {
        let marker = if i == 0 { "  <- winner" } else { "" };
        out.push_str(&format!("{value:<16} {loss:>12.6}{marker}\n"));
    }
    (out, winner)
}
