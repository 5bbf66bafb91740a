//! Decision curves: accuracy per reveal level, normalized by intact-image
//! accuracy, and the human/model decision-alignment score.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Category, Response, StimulusManifest, TrialResponse};
use crate::metrics::{self, MetricsError};

#[derive(Debug, Error, PartialEq)]
pub enum DecisionError {
    #[error("animal class set must be a non-empty proper subset of {classes} classes")]
    BadAnimalSet { classes: usize },
    #[error("non-finite logit at index {0}")]
    NonFinite(usize),
    #[error("response {index} references unknown stimulus ({image_id}, level {level})")]
    UnknownStimulus {
        index: usize,
        image_id: String,
        level: usize,
    },
    #[error("curves need at least 3 shared levels, found {0}")]
    TooFewLevels(usize),
    #[error("decision alignment undefined: {0}")]
    Undefined(MetricsError),
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn model_decision(logits: &[f64], animal_classes: &BTreeSet<usize>) -> Result<Category, DecisionError> {
    let classes = logits.len();
    let proper =
        !animal_classes.is_empty() && animal_classes.len() < classes && animal_classes.iter().all(|&c| c < classes);
    if !proper {
        return Err(DecisionError::BadAnimalSet { classes });
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(DecisionError::NonFinite(i));
    }
    Ok(if animal_classes.contains(&argmax(logits)) {
        Category::Animal
    } else {
        Category::NonAnimal
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPoint {
    pub level: usize,
    pub fraction: f64,
    pub n: usize,
    pub correct: usize,
    /// `None` when the level had no valid trials.
    pub accuracy: Option<f64>,
    pub normalized: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveStatus {
    Ok,
    /// The intact level had no valid trials, so nothing could be normalized.
    NoIntact,
    NoData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionCurve {
    pub status: CurveStatus,
    pub intact_accuracy: Option<f64>,
    pub points: Vec<LevelPoint>,
    /// Timed-out trials excluded from every level.
    pub timeouts: usize,
}

impl DecisionCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,fraction,n,correct,accuracy,normalized\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for p in &self.points {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                p.level,
                p.fraction,
                p.n,
                p.correct,
                opt(p.accuracy),
                opt(p.normalized)
            );
        }
        s
    }
}

/// Pools responses per level. The intact reference is the level with the
/// largest reveal fraction (100%); normalized accuracy is clamped at 1.
pub fn decision_curve(
    responses: &[TrialResponse],
    manifest: &StimulusManifest,
) -> Result<DecisionCurve, DecisionError> {
    let categories: BTreeMap<(&str, usize), Category> = manifest
        .entries
        .iter()
        .map(|e| ((e.image_id.as_str(), e.level), e.category))
        .collect();
    let mut tallies: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut timeouts = 0;
    for (index, r) in responses.iter().enumerate() {
        let Some(&truth) = categories.get(&(r.image_id.as_str(), r.level)) else {
            return Err(DecisionError::UnknownStimulus {
                index,
                image_id: r.image_id.clone(),
                level: r.level,
            });
        };
        let answer = match r.response {
            Response::Timeout => {
                timeouts += 1;
                continue;
            }
            Response::Animal => Category::Animal,
            Response::NonAnimal => Category::NonAnimal,
        };
        let t = tallies.entry(r.level).or_default();
        t.0 += 1;
        if answer == truth {
            t.1 += 1;
        }
    }
    let intact_level = manifest
        .levels
        .iter()
        .max_by(|a, b| a.fraction.total_cmp(&b.fraction))
        .map(|l| l.index);
    let acc = |level: usize| tallies.get(&level).filter(|t| t.0 > 0).map(|t| t.1 as f64 / t.0 as f64);
    let intact_accuracy = intact_level.and_then(acc);
    let points = manifest
        .levels
        .iter()
        .map(|l| {
            let (n, correct) = tallies.get(&l.index).copied().unwrap_or((0, 0));
            let accuracy = acc(l.index);
            let normalized = match (accuracy, intact_accuracy) {
                (Some(a), Some(i)) if i > 0.0 => Some((a / i).min(1.0)),
                _ => None,
            };
            LevelPoint {
                level: l.index,
                fraction: l.fraction,
                n,
                correct,
                accuracy,
                normalized,
            }
        })
        .collect();
    let status = if tallies.values().all(|t| t.0 == 0) {
        CurveStatus::NoData
    } else if intact_accuracy.is_none_or(|a| a == 0.0) {
        CurveStatus::NoIntact
    } else {
        CurveStatus::Ok
    };
    Ok(DecisionCurve {
        status,
        intact_accuracy,
        points,
        timeouts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMethod {
    /// Rank correlation of the normalized curves over levels.
    #[default]
    Spearman,
    /// `1 - mean |human - model|` over shared levels.
    AreaBetween,
}

/// Scores how similarly two observers convert revealed features into
/// decisions. Levels missing from either curve are skipped.
pub fn decision_alignment(
    human: &DecisionCurve,
    model: &DecisionCurve,
    method: AlignmentMethod,
) -> Result<f64, DecisionError> {
    let hm: BTreeMap<usize, f64> = human
        .points
        .iter()
        .filter_map(|p| p.normalized.map(|v| (p.level, v)))
        .collect();
    let mut a = Vec::new();
    let mut b = Vec::new();
    for p in &model.points {
        if let (Some(m), Some(h)) = (p.normalized, hm.get(&p.level)) {
            a.push(*h);
            b.push(m);
        }
    }
    if a.len() < 3 {
        return Err(DecisionError::TooFewLevels(a.len()));
    }
    match method {
        AlignmentMethod::Spearman => metrics::spearman(&a, &b).map_err(DecisionError::Undefined),
        AlignmentMethod::AreaBetween => {
            let d: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
            Ok(1.0 - d / a.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{RevealLevel, StimulusEntry};

    fn manifest(levels: usize, images: usize) -> StimulusManifest {
        let lv = crate::stimuli::reveal_fractions(levels)
            .into_iter()
            .enumerate()
            .map(|(index, fraction)| RevealLevel { index, fraction, k: 1 })
            .collect();
        let mut entries = Vec::new();
        for i in 0..images {
            for l in 0..levels {
                entries.push(StimulusEntry {
                    image_id: format!("img{i}"),
                    level: l,
                    category: if i % 2 == 0 {
                        Category::Animal
                    } else {
                        Category::NonAnimal
                    },
                    seed: 0,
                    path: format!("img{i}_{l}.png"),
                });
            }
        }
        StimulusManifest { levels: lv, entries }
    }

    fn trial(img: usize, level: usize, r: Response) -> TrialResponse {
        TrialResponse {
            participant_id: "p".into(),
            image_id: format!("img{img}"),
            level,
            response: r,
            rt_ms: 400.0,
            fixation_ms: 1200.0,
            timestamp: 0.0,
        }
    }

    fn truth(img: usize) -> Response {
        if img.is_multiple_of(2) {
            Response::Animal
        } else {
            Response::NonAnimal
        }
    }

    #[test]
    fn decisions_follow_argmax() {
        let animals: BTreeSet<usize> = [1, 3].into_iter().collect();
        assert_eq!(
            model_decision(&[0.0, 5.0, 0.0, 0.0], &animals).unwrap(),
            Category::Animal
        );
        assert_eq!(model_decision(&[1.0; 4], &animals).unwrap(), Category::NonAnimal);
        let zero: BTreeSet<usize> = [0].into_iter().collect();
        assert_eq!(model_decision(&[1.0; 4], &zero).unwrap(), Category::Animal);
        let all: BTreeSet<usize> = (0..4).collect();
        assert!(model_decision(&[1.0; 4], &all).is_err());
        assert!(model_decision(&[f64::NAN, 1.0], &zero).is_err());
    }

    #[test]
    fn all_correct_is_flat_one() {
        let m = manifest(4, 6);
        let rs: Vec<_> = (0..6)
            .flat_map(|i| (0..4).map(move |l| trial(i, l, truth(i))))
            .collect();
        let c = decision_curve(&rs, &m).unwrap();
        assert_eq!(c.status, CurveStatus::Ok);
        assert!(c.points.iter().all(|p| p.normalized == Some(1.0)));
    }

    #[test]
    fn normalization_arithmetic_and_timeouts() {
        let m = manifest(2, 10);
        let mut rs = Vec::new();
        // intact: 8 of 10 correct; level 0: 4 of 10 correct
        for i in 0..10 {
            let wrong = if truth(i) == Response::Animal {
                Response::NonAnimal
            } else {
                Response::Animal
            };
            rs.push(trial(i, 1, if i < 8 { truth(i) } else { wrong }));
            rs.push(trial(i, 0, if i < 4 { truth(i) } else { wrong }));
        }
        rs.push(trial(0, 0, Response::Timeout));
        let c = decision_curve(&rs, &m).unwrap();
        assert_eq!(c.intact_accuracy, Some(0.8));
        assert_eq!(c.points[0].n, 10);
        assert!((c.points[0].normalized.unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(c.timeouts, 1);
    }

    #[test]
    fn empty_and_unknown() {
        let m = manifest(3, 2);
        let c = decision_curve(&[], &m).unwrap();
        assert_eq!(c.status, CurveStatus::NoData);
        assert!(c.points.iter().all(|p| p.accuracy.is_none()));
        let bad = trial(9, 0, Response::Animal);
        assert!(matches!(
            decision_curve(&[bad], &m),
            Err(DecisionError::UnknownStimulus { .. })
        ));
    }

    fn curve(vals: &[f64]) -> DecisionCurve {
        DecisionCurve {
            status: CurveStatus::Ok,
            intact_accuracy: Some(1.0),
            timeouts: 0,
            points: vals
                .iter()
                .enumerate()
                .map(|(i, &v)| LevelPoint {
                    level: i,
                    fraction: 0.0,
                    n: 1,
                    correct: 1,
                    accuracy: Some(v),
                    normalized: Some(v),
                })
                .collect(),
        }
    }

    #[test]
    fn alignment_identity_reversal_and_crossing() {
        let h = curve(&[0.1, 0.3, 0.6, 0.9, 1.0]);
        assert_eq!(decision_alignment(&h, &h, AlignmentMethod::Spearman).unwrap(), 1.0);
        let r = curve(&[1.0, 0.9, 0.6, 0.3, 0.1]);
        assert_eq!(decision_alignment(&h, &r, AlignmentMethod::Spearman).unwrap(), -1.0);
        // model ranks [1, 2, 4, 3, 5] against human [1..5]: 1 - 6*2/(5*24) = 0.9
        let x = curve(&[0.2, 0.4, 0.95, 0.7, 1.0]);
        let v = decision_alignment(&h, &x, AlignmentMethod::Spearman).unwrap();
        assert!((v - 0.9).abs() < 1e-12);
        assert_eq!(decision_alignment(&h, &h, AlignmentMethod::AreaBetween).unwrap(), 1.0);
        let flat = curve(&[1.0, 1.0, 1.0]);
        assert!(matches!(
            decision_alignment(&flat, &curve(&[0.1, 0.5, 1.0]), AlignmentMethod::Spearman),
            Err(DecisionError::Undefined(_))
        ));
        assert_eq!(
            decision_alignment(&curve(&[0.1, 0.2]), &curve(&[0.1, 0.2]), AlignmentMethod::Spearman),
            Err(DecisionError::TooFewLevels(2))
        );
    }
}
