use std::fmt;

use harmonizer_core::harmonize::HarmonizeError;
use harmonizer_core::metrics::MetricsError;
use harmonizer_core::stimuli::StimulusError;
use harmonizer_core::{DataError, DecisionError, Error};

/// A failed command, split by exit code.
#[derive(Debug)]
pub enum Failure {
    /// Bad parameters: exit 1.
    Validation(String),
    /// Unreadable, missing or inconsistent inputs: exit 2.
    Data(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Data(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Validation(m) | Failure::Data(m) => f.write_str(m),
        }
    }
}

fn is_validation(e: &Error) -> bool {
    matches!(
        e,
        Error::Harmonize(HarmonizeError::Config(_))
            | Error::Metrics(MetricsError::BadScale(_) | MetricsError::BadCeiling(_))
            | Error::Stimulus(
                StimulusError::BadBudget { .. } | StimulusError::BadTemperature(_) | StimulusError::NoLevels,
            )
            | Error::Data(DataError::Spec(_))
            | Error::Decision(DecisionError::BadAnimalSet { .. })
    )
}

impl<E: Into<Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e: Error = e.into();
        if is_validation(&e) {
            Failure::Validation(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}
