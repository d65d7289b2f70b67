//! Built-in configuration files: model shapes, pretraining schedules, the
//! fine-tuning grids, the distillation recipe and published benchmark scores.

use crate::distill::DistillationRecipe;
use crate::encoder::{EncoderConfig, ModelPreset};
use crate::error::{Error, Result};
use crate::finetune::{HyperGrid, LrVariant};
use crate::kv::KvDocument;
use crate::metrics::ModelScores;
use crate::schedule::TrainingSchedule;

const MODELS: [(&str, &str); 7] = [
    ("albeto-tiny", include_str!("../presets/models/albeto-tiny.txt")),
    ("albeto-base", include_str!("../presets/models/albeto-base.txt")),
    ("albeto-large", include_str!("../presets/models/albeto-large.txt")),
    ("albeto-xlarge", include_str!("../presets/models/albeto-xlarge.txt")),
    ("albeto-xxlarge", include_str!("../presets/models/albeto-xxlarge.txt")),
    ("distilbeto", include_str!("../presets/models/distilbeto.txt")),
    ("beto-teacher", include_str!("../presets/models/beto-teacher.txt")),
];

const SCHEDULES: [(&str, &str); 5] = [
    ("albeto-tiny", include_str!("../presets/schedules/albeto-tiny.txt")),
    ("albeto-base", include_str!("../presets/schedules/albeto-base.txt")),
    ("albeto-large", include_str!("../presets/schedules/albeto-large.txt")),
    ("albeto-xlarge", include_str!("../presets/schedules/albeto-xlarge.txt")),
    (
        "albeto-xxlarge",
        include_str!("../presets/schedules/albeto-xxlarge.txt"),
    ),
];

const STANDARD_GRID: &str = include_str!("../presets/grids/standard.txt");
const REDUCED_GRID: &str = include_str!("../presets/grids/reduced.txt");
const DISTIL_RECIPE: &str = include_str!("../presets/recipes/distilbeto.txt");

const SCORES: [&str; 8] = [
    include_str!("../presets/scores/beto-uncased.txt"),
    include_str!("../presets/scores/beto-cased.txt"),
    include_str!("../presets/scores/distilbeto.txt"),
    include_str!("../presets/scores/albeto-tiny.txt"),
    include_str!("../presets/scores/albeto-base.txt"),
    include_str!("../presets/scores/albeto-large.txt"),
    include_str!("../presets/scores/albeto-xlarge.txt"),
    include_str!("../presets/scores/albeto-xxlarge.txt"),
];

/// Model the comparison ratios are measured against.
pub const REFERENCE_MODEL: &str = "BETO cased";

fn lookup<'a>(table: &[(&str, &'a str)], name: &str, what: &str) -> Result<&'a str> {
    table
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, text)| *text)
        .ok_or_else(|| Error::Config(format!("no {what} preset named {name:?}")))
}

pub fn model_names() -> impl Iterator<Item = &'static str> {
    MODELS.iter().map(|(n, _)| *n)
}

/// Raw text of a model preset file.
pub fn model_text(name: &str) -> Result<&'static str> {
    lookup(&MODELS, name, "model")
}

pub fn model_config(name: &str) -> Result<EncoderConfig> {
    EncoderConfig::from_kv(&KvDocument::parse(model_text(name)?)?)
}

pub fn model_preset(name: &str) -> Result<ModelPreset> {
    ModelPreset::from_name(name).ok_or_else(|| Error::Config(format!("no model preset named {name:?}")))
}

pub fn schedule_names() -> impl Iterator<Item = &'static str> {
    SCHEDULES.iter().map(|(n, _)| *n)
}

pub fn schedule_text(name: &str) -> Result<&'static str> {
    lookup(&SCHEDULES, name, "schedule")
}

pub fn pretraining_schedule(name: &str) -> Result<TrainingSchedule> {
    TrainingSchedule::from_kv(&KvDocument::parse(schedule_text(name)?)?)
}

pub fn grid(variant: LrVariant) -> Result<HyperGrid> {
    let text = match variant {
        LrVariant::Standard => STANDARD_GRID,
        LrVariant::Reduced => REDUCED_GRID,
    };
    HyperGrid::from_kv(&KvDocument::parse(text)?)
}

pub fn distil_recipe() -> Result<DistillationRecipe> {
    DistillationRecipe::from_kv(&KvDocument::parse(DISTIL_RECIPE)?)
}

/// Number of distillation steps of the published student.
pub fn distil_total_steps() -> Result<u64> {
    KvDocument::parse(DISTIL_RECIPE)?.require("total_steps")
}

/// Published benchmark scores in table order.
pub fn published_scores() -> Result<Vec<ModelScores>> {
    SCORES
        .iter()
        .map(|text| ModelScores::from_kv(&KvDocument::parse(text)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_files_match_builtin_configs() {
        for preset in ModelPreset::ALL {
            assert_eq!(
                model_config(preset.name()).unwrap(),
                preset.config(),
                "{}",
                preset.name()
            );
        }
        assert_eq!(model_names().count(), ModelPreset::ALL.len());
    }

    #[test]
    fn schedules_round_trip() {
        for name in schedule_names() {
            let schedule = pretraining_schedule(name).unwrap();
            let again = TrainingSchedule::from_kv(&schedule.to_kv()).unwrap();
            assert_eq!(schedule, again, "{name}");
        }
        assert_eq!(pretraining_schedule("albeto-tiny").unwrap().total_steps, 8_300_000);
    }

    #[test]
    fn grid_files_match_constructors() {
        assert_eq!(grid(LrVariant::Standard).unwrap(), HyperGrid::standard());
        assert_eq!(
            grid(LrVariant::Reduced).unwrap(),
            HyperGrid::standard().with_variant(LrVariant::Reduced)
        );
    }

    #[test]
    fn recipe_matches_default() {
        assert_eq!(distil_recipe().unwrap(), DistillationRecipe::default());
        assert_eq!(distil_total_steps().unwrap(), 90_000);
    }

    #[test]
    fn scores_parse() {
        let scores = published_scores().unwrap();
        assert_eq!(scores.len(), 8);
        assert_eq!(scores.iter().filter(|s| s.model == REFERENCE_MODEL).count(), 1);
    }
}
