//! Accuracy and F1 scores for single-label multiclass predictions.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::HarnessError;

fn check<L>(gold: &[L], pred: &[L]) -> Result<(), HarnessError> {
    if gold.len() != pred.len() {
        return Err(HarnessError::LengthMismatch { gold: gold.len(), pred: pred.len() });
    }
    if gold.is_empty() {
        return Err(HarnessError::EmptyInput);
    }
    Ok(())
}

#[derive(Debug, Default, Clone, Copy)]
struct Counts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

impl Counts {
    fn f1(self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

fn confusion<L: Ord + Clone>(gold: &[L], pred: &[L]) -> BTreeMap<L, Counts> {
    let mut m: BTreeMap<L, Counts> = BTreeMap::new();
    for (g, p) in gold.iter().zip(pred) {
        if g == p {
            m.entry(g.clone()).or_default().tp += 1;
        } else {
            m.entry(g.clone()).or_default().fn_ += 1;
            m.entry(p.clone()).or_default().fp += 1;
        }
    }
    m
}

pub fn accuracy<L: PartialEq>(gold: &[L], pred: &[L]) -> Result<f64, HarnessError> {
    check(gold, pred)?;
    let hits = gold.iter().zip(pred).filter(|(g, p)| g == p).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Unweighted mean of per-class F1 over the classes seen in gold or pred.
pub fn macro_f1<L: Ord + Clone>(gold: &[L], pred: &[L]) -> Result<f64, HarnessError> {
    check(gold, pred)?;
    let m = confusion(gold, pred);
    Ok(m.values().map(|c| c.f1()).sum::<f64>() / m.len() as f64)
}

/// F1 of the pooled counts.
pub fn micro_f1<L: Ord + Clone>(gold: &[L], pred: &[L]) -> Result<f64, HarnessError> {
    check(gold, pred)?;
    let pooled = confusion(gold, pred).values().fold(Counts::default(), |a, c| Counts {
        tp: a.tp + c.tp,
        fp: a.fp + c.fp,
        fn_: a.fn_ + c.fn_,
    });
    Ok(pooled.f1())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Gold occurrences.
    pub support: usize,
    pub predicted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub classes: Vec<ClassReport>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn evaluate<L: Ord + Clone + fmt::Display>(gold: &[L], pred: &[L]) -> Result<EvalReport, HarnessError> {
    let classes = confusion(gold, pred)
        .into_iter()
        .map(|(label, c)| ClassReport {
            label: label.to_string(),
            precision: ratio(c.tp, c.tp + c.fp),
            recall: ratio(c.tp, c.tp + c.fn_),
            f1: c.f1(),
            support: c.tp + c.fn_,
            predicted: c.tp + c.fp,
        })
        .collect();
    Ok(EvalReport {
        samples: gold.len(),
        accuracy: accuracy(gold, pred)?,
        macro_f1: macro_f1(gold, pred)?,
        micro_f1: micro_f1(gold, pred)?,
        classes,
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples {}  accuracy {:.4}  macro-F1 {:.4}  micro-F1 {:.4}", self.samples, self.accuracy, self.macro_f1, self.micro_f1)?;
        writeln!(f, "macro-F1 averages over classes present in gold or predictions")?;
        writeln!(f, "{:<32} {:>9} {:>9} {:>9} {:>8} {:>8}", "class", "precision", "recall", "f1", "support", "pred")?;
        for c in &self.classes {
            writeln!(
                f,
                "{:<32} {:>9.4} {:>9.4} {:>9.4} {:>8} {:>8}",
                c.label, c.precision, c.recall, c.f1, c.support, c.predicted
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_example() {
        let gold = ["A", "A", "B", "B"];
        let pred = ["A", "B", "B", "B"];
        assert_eq!(accuracy(&gold, &pred).unwrap(), 0.75);
        // A: tp 1, fn 1 -> 2/3. B: tp 2, fp 1 -> 4/5.
        assert!((macro_f1(&gold, &pred).unwrap() - (2.0 / 3.0 + 0.8) / 2.0).abs() < 1e-12);
        assert_eq!(micro_f1(&gold, &pred).unwrap(), 0.75);
        let r = evaluate(&gold, &pred).unwrap();
        assert_eq!(r.classes[0].support, 2);
        assert_eq!(r.classes[1].predicted, 3);
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(macro_f1(&[1, 1], &[1, 1]).unwrap(), 1.0);
        assert_eq!(micro_f1(&[1, 1], &[1, 1]).unwrap(), 1.0);
        assert!(matches!(accuracy::<u8>(&[], &[]), Err(HarnessError::EmptyInput)));
        assert!(matches!(macro_f1(&[1], &[1, 2]), Err(HarnessError::LengthMismatch { gold: 1, pred: 2 })));
        // Class 3 only appears in predictions and still counts with F1 0.
        assert_eq!(macro_f1(&[1, 2], &[1, 3]).unwrap(), 1.0 / 3.0);
    }
}
