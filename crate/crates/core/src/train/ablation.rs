use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, TrainConfig};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, DEFAULT_IOU_THRESHOLD};
use crate::model::decoder::DecoderKind;
use crate::model::fusion::FusionMode;
use crate::model::{ModelConfig, SegModel};

/// Rows of the ablation ladder, each adding one ingredient to the previous.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationMode {
    /// Finest pyramid level through the projection head; no adapters, no auxiliary features.
    #[serde(rename = "A_convdec_nofinetune")]
    A,
    /// Hierarchical decoder.
    #[serde(rename = "B_hierdec")]
    B,
    /// Hierarchical decoder and adapters.
    #[serde(rename = "C_adapter")]
    C,
    /// Adapters and auxiliary features by concatenation.
    #[serde(rename = "D_concat")]
    D,
    /// Adapters and auxiliary features by interleaving.
    #[default]
    #[serde(rename = "E_interleave")]
    E,
}

impl AblationMode {
    pub const ALL: [AblationMode; 5] = [Self::A, Self::B, Self::C, Self::D, Self::E];

    pub fn name(self) -> &'static str {
        match self {
            Self::A => "A_convdec_nofinetune",
            Self::B => "B_hierdec",
            Self::C => "C_adapter",
            Self::D => "D_concat",
            Self::E => "E_interleave",
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    /// Accepts the full name or its leading letter, case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s) || m.name()[..1].eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown ablation mode {s:?}")))
    }
}

/// The model configuration of an ablation row, derived from `base`.
pub fn model_for_mode(base: &ModelConfig, mode: AblationMode) -> ModelConfig {
    let mut cfg = base.clone();
    cfg.encoder.adapter_enabled = mode >= AblationMode::C;
    cfg.fusion.mode = match mode {
        AblationMode::D => FusionMode::Concat,
        AblationMode::E => FusionMode::Interleave,
        _ => FusionMode::None,
    };
    cfg.decoder.kind = match mode {
        AblationMode::A => DecoderKind::FinestOnly,
        _ => DecoderKind::Hierarchical,
    };
    cfg
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub trainable_elements: usize,
    pub total_elements: usize,
    pub levels_consumed: usize,
    pub best_val_loss: f64,
    pub report: MetricReport,
}

/// Trains and evaluates every row with the same seed and data. Each row is
/// scored with its lowest-validation-loss weights.
pub fn ablation_suite(
    base: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    test_set: &[Sample],
) -> Result<Vec<AblationRow>> {
    let test: Vec<&Sample> = test_set.iter().collect();
    AblationMode::ALL
        .into_iter()
        .map(|mode| {
            let mut model = SegModel::new(model_for_mode(base, mode), cfg.seed)?;
            let row_cfg = TrainConfig {
                ablation_mode: mode,
                ..cfg.clone()
            };
            let outcome = train(&mut model, train_set, val_set, &row_cfg, None)?;
            model.params = outcome.best_params;
            let eval = evaluate(&model, &test, cfg.batch_size, DEFAULT_IOU_THRESHOLD)?;
            Ok(AblationRow {
                mode,
                trainable_elements: model.params.count_elements(true),
                total_elements: model.params.count_elements(false),
                levels_consumed: model.config.decoder.levels_consumed(),
                best_val_loss: outcome.state.best_val_loss,
                report: eval.report,
            })
        })
        .collect()
}

pub const ABLATION_HEADER: &str = "mode,dsc,hd,hd95,trainable_params,total_params";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.mode,
            r.report.dsc,
            opt(r.report.hd),
            opt(r.report.hd95),
            r.trainable_elements,
            r.total_elements
        );
    }
    s
}
