use std::fmt;

use serde::Serialize;

use crate::training::{Method, RegimeConfig, TeacherSource};

/// A cost multiple relative to one baseline model, in parameters.
///
/// `parallel` is the number of those units that can be trained or run side
/// by side; the rest is sequential.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Multiplier {
    pub factor: f64,
    pub parallel: usize,
}

impl Multiplier {
    fn sequential(factor: f64) -> Self {
        Multiplier {
            factor,
            parallel: 0,
        }
    }

    fn parallel(k: usize) -> Self {
        Multiplier {
            factor: k as f64,
            parallel: k,
        }
    }
}

fn number(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

impl fmt::Display for Multiplier {
    /// `1x`, `3*x`, `(3* + 1)x`; starred terms can run in parallel.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.parallel as f64;
        match self.parallel {
            0 => write!(f, "{}x", number(self.factor)),
            k if p == self.factor => write!(f, "{k}*x"),
            k => write!(f, "({k}* + {})x", number(self.factor - p)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResourceLedger {
    pub training: Multiplier,
    pub inference: Multiplier,
}

/// Training and inference cost of a regime, counted in parameters relative
/// to one student. `teacher_params` is only read for large-model
/// distillation.
pub fn resource_ledger(
    regime: &RegimeConfig,
    student_params: usize,
    teacher_params: usize,
) -> ResourceLedger {
    let k = regime.members();
    let one = Multiplier::sequential(1.0);
    match regime.method {
        Method::Baseline => ResourceLedger {
            training: one,
            inference: one,
        },
        Method::Ensemble => ResourceLedger {
            training: Multiplier::parallel(k),
            inference: Multiplier::parallel(k),
        },
        Method::DistillSoft | Method::DistillHard => {
            let training = match regime.teacher_source {
                TeacherSource::Ensemble => Multiplier {
                    factor: k as f64 + 1.0,
                    parallel: k,
                },
                TeacherSource::LargeModel => Multiplier::sequential(
                    teacher_params as f64 / student_params as f64 + 1.0,
                ),
            };
            ResourceLedger {
                training,
                inference: one,
            }
        }
        Method::Codistill => ResourceLedger {
            training: Multiplier::parallel(k),
            inference: one,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ledger(method: Method, source: TeacherSource, k: Option<usize>, p: usize) -> (f64, f64) {
        let mut r = RegimeConfig::new(method);
        r.teacher_source = source;
        r.k = k;
        let l = resource_ledger(&r, 1, p);
        (l.training.factor, l.inference.factor)
    }

    #[test]
    fn table_structure() {
        use TeacherSource::*;
        assert_eq!(ledger(Method::Baseline, Ensemble, None, 9), (1.0, 1.0));
        assert_eq!(ledger(Method::Ensemble, Ensemble, Some(3), 9), (3.0, 3.0));
        assert_eq!(ledger(Method::DistillSoft, Ensemble, Some(3), 9), (4.0, 1.0));
        assert_eq!(ledger(Method::DistillHard, Ensemble, Some(3), 9), (4.0, 1.0));
        assert_eq!(ledger(Method::DistillSoft, LargeModel, None, 9), (10.0, 1.0));
        assert_eq!(ledger(Method::Codistill, Ensemble, Some(2), 9), (2.0, 1.0));
        assert_eq!(ledger(Method::Codistill, Ensemble, None, 9), (2.0, 1.0));
    }

    #[test]
    fn rendering() {
        let r = RegimeConfig::new(Method::Ensemble);
        let l = resource_ledger(&r, 1, 1);
        assert_eq!((l.training.to_string(), l.inference.to_string()), ("3*x".into(), "3*x".into()));
        let r = RegimeConfig::new(Method::DistillHard);
        assert_eq!(resource_ledger(&r, 1, 1).training.to_string(), "(3* + 1)x");
        assert_eq!(resource_ledger(&r, 1, 1).inference.to_string(), "1x");
        let mut r = RegimeConfig::new(Method::DistillSoft);
        r.teacher_source = TeacherSource::LargeModel;
        assert_eq!(resource_ledger(&r, 4, 38).training.to_string(), "10.50x");
        let r = RegimeConfig::new(Method::Codistill);
        assert_eq!(resource_ledger(&r, 1, 1).training.to_string(), "2*x");
    }
}
