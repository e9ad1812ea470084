//! Plate post-processing: associating plate boxes with vehicle tracks,
//! validating recognized text against a plate grammar, per-track identity
//! voting, and character-error-rate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BBox;
use crate::TrackId;

/// Fraction of the plate box that must sit inside a vehicle box for the
/// pair to count as a match. Plates straddling two vehicles fail this.
pub const CONTAINMENT_THRESHOLD: f64 = 0.9;

#[derive(Debug, Error, PartialEq)]
pub enum PlateError {
    #[error("invalid plate text: {0}")]
    Invalid(String),
    #[error("grammar pattern must be non-empty and use only L and D")]
    BadGrammar,
    #[error("character error rate needs a non-empty truth string")]
    EmptyTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionClass {
    Letter,
    Digit,
}

/// Positional plate grammar, e.g. `LLLDDDL` for plates like ABC123A.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlateGrammar {
    classes: Vec<PositionClass>,
}

impl PlateGrammar {
    /// Parses a pattern string of `L` (letter) and `D` (digit) positions.
    pub fn parse(pattern: &str) -> Result<Self, PlateError> {
        if pattern.is_empty() {
            return Err(PlateError::BadGrammar);
        }
        let classes = pattern
            .chars()
            .map(|c| match c.to_ascii_uppercase() {
                'L' => Ok(PositionClass::Letter),
                'D' => Ok(PositionClass::Digit),
                _ => Err(PlateError::BadGrammar),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[PositionClass] {
        &self.classes
    }

    /// True when `text` is already a valid normalized plate.
    pub fn matches(&self, text: &str) -> bool {
        text.len() == self.classes.len()
            && text
                .chars()
                .zip(&self.classes)
                .all(|(c, class)| match class {
                    PositionClass::Letter => c.is_ascii_uppercase(),
                    PositionClass::Digit => c.is_ascii_digit(),
                })
    }
}

impl Default for PlateGrammar {
    fn default() -> Self {
        Self::parse("LLLDDDL").expect("default pattern is valid")
    }
}

/// One recognized plate on one frame, as delivered on the detection stream.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateObservation {
    pub bbox: BBox,
    pub text: String,
    pub text_score: f64,
    pub frame_index: u64,
}

/// Per-track plate identity after voting over observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateIdentity {
    pub text: String,
    /// Winning weight over total valid weight.
    pub confidence: f64,
    /// Observations that voted for the winning text.
    pub votes: usize,
}

/// Matches a plate box to the vehicle that contains it: highest containment
/// wins, ties go to the smaller vehicle box, anything under the containment
/// gate is unmatched.
pub fn match_plate_to_vehicle(plate: &BBox, vehicles: &[(TrackId, BBox)]) -> Option<TrackId> {
    let plate_area = plate.area();
    let mut best: Option<(f64, f64, TrackId)> = None; // (containment, area, id)
    for (id, vbox) in vehicles {
        let containment = plate.intersection_area(vbox) / plate_area;
        if containment < CONTAINMENT_THRESHOLD {
            continue;
        }
        let candidate = (containment, vbox.area(), *id);
        best = match best {
            None => Some(candidate),
            Some(cur) => {
                // more containment first, then smaller vehicle area
                if candidate.0 > cur.0 || (candidate.0 == cur.0 && candidate.1 < cur.1) {
                    Some(candidate)
                } else {
                    Some(cur)
                }
            }
        };
    }
    best.map(|(_, _, id)| id)
}

/// Per-position confusion map applied before validating against the grammar:
/// lookalike letters in digit positions become digits and vice versa.
fn map_char(c: char, class: PositionClass) -> Option<char> {
    match class {
        PositionClass::Digit => match c {
            'O' => Some('0'),
            'I' => Some('1'),
            'Z' => Some('2'),
            'S' => Some('5'),
            'B' => Some('8'),
            d if d.is_ascii_digit() => Some(d),
            _ => None,
        },
        PositionClass::Letter => match c {
            '0' => Some('O'),
            '1' => Some('I'),
            '5' => Some('S'),
            '8' => Some('B'),
            l if l.is_ascii_uppercase() => Some(l),
            _ => None,
        },
    }
}

/// Uppercases, strips separators, applies the positional confusion map and
/// validates the result against the grammar.
pub fn normalize_plate(text: &str, grammar: &PlateGrammar) -> Result<String, PlateError> {
    let cleaned: Vec<char> = text
        .trim()
        .chars()
        .filter(|c| !c.is_whitespace() && *c != '-')
        .map(|c| c.to_ascii_uppercase())
        .collect();
    if cleaned.len() != grammar.len() {
        return Err(PlateError::Invalid(format!(
            "expected {} characters, got {}",
            grammar.len(),
            cleaned.len()
        )));
    }
    let mut out = String::with_capacity(cleaned.len());
    for (i, (&c, &class)) in cleaned.iter().zip(grammar.classes()).enumerate() {
        match map_char(c, class) {
            Some(m) => out.push(m),
            None => {
                return Err(PlateError::Invalid(format!(
                    "character '{c}' at position {i} does not fit the grammar"
                )))
            }
        }
    }
    Ok(out)
}

/// Score-weighted majority vote over the valid normalized observations.
/// `None` when nothing validates.
pub fn aggregate_identity(
    observations: &[PlateObservation],
    grammar: &PlateGrammar,
) -> Option<PlateIdentity> {
    let mut tally: std::collections::BTreeMap<String, (f64, usize)> =
        std::collections::BTreeMap::new();
    let mut total_weight = 0.0;
    for obs in observations {
        if let Ok(normalized) = normalize_plate(&obs.text, grammar) {
            let e = tally.entry(normalized).or_insert((0.0, 0));
            e.0 += obs.text_score;
            e.1 += 1;
            total_weight += obs.text_score;
        }
    }
    if total_weight <= 0.0 {
        return None;
    }
    let (text, (weight, votes)) = tally
        .into_iter()
        .max_by(|a, b| a.1 .0.partial_cmp(&b.1 .0).unwrap())?;
    Some(PlateIdentity {
        text,
        confidence: weight / total_weight,
        votes,
    })
}

/// Unit-cost Levenshtein distance.
pub(crate) fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut curr = vec![0usize; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        curr[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

/// Character error rate: edit distance over truth length.
pub fn cer(predicted: &str, truth: &str) -> Result<f64, PlateError> {
    let truth_len = truth.chars().count();
    if truth_len == 0 {
        return Err(PlateError::EmptyTruth);
    }
    Ok(edit_distance(predicted, truth) as f64 / truth_len as f64)
}
