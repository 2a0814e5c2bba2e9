//! Three-annotator adjudication.
//!
//! Each annotator assigns a label set to every segment of a pair. A pair is
//! accepted outright when all three agree everywhere, dropped when some
//! segment has no label at all or the three sets on a segment are pairwise
//! disjoint, and otherwise sent back to the single dissenting annotator for
//! confirmation of the majority labels.
//!
//! The majority set of a segment is the set of labels chosen by at least two
//! annotators. When two annotators chose identical sets this is exactly their
//! set. The dissenter on a segment is the annotator whose set differs from
//! the majority; if several differ, the one farthest from it (symmetric
//! difference). A pair whose dissent cannot be pinned on one annotator is
//! dropped.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ConversationPair, CorpusError};
use crate::taxonomy::{Level1, Level2, SentenceFunction};

/// Per-segment label sets chosen by one annotator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRecord<L> {
    pub annotator: String,
    pub segments: Vec<BTreeSet<L>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AggregationOutcome<L> {
    Accepted(Vec<BTreeSet<L>>),
    Dropped(DropReason),
    NeedsConfirmation {
        majority: Vec<BTreeSet<L>>,
        dissenter: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DropReason {
    /// Some segment received no label from any annotator.
    NoLabel,
    /// On some segment the three label sets share nothing pairwise.
    NoOverlap,
    /// Different annotators dissent on different segments.
    AmbiguousDissent,
    /// The dissenter rejected the majority labels.
    Rejected,
    /// The agreed labels leave a segment without a usable level-2 label.
    Incomplete,
}

impl std::fmt::Display for DropReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DropReason::NoLabel => "no annotated label at all",
            DropReason::NoOverlap => "labels from all annotators have no overlap",
            DropReason::AmbiguousDissent => "no single dissenting annotator",
            DropReason::Rejected => "dissenter disagreed with the majority",
            DropReason::Incomplete => "agreed labels lack a level-2 function",
        })
    }
}

/// Adjudicates exactly three records over the same segment indices.
pub fn aggregate_annotations<L: Ord + Clone>(
    records: &[LabelRecord<L>],
) -> Result<AggregationOutcome<L>, CorpusError> {
    if records.len() != 3 {
        return Err(CorpusError::RecordCountMismatch(records.len()));
    }
    let n = records[0].segments.len();
    if records.iter().any(|r| r.segments.len() != n) {
        return Err(CorpusError::SegmentMismatch);
    }

    for s in 0..n {
        let sets: Vec<&BTreeSet<L>> = records.iter().map(|r| &r.segments[s]).collect();
        if sets.iter().all(|set| set.is_empty()) {
            return Ok(AggregationOutcome::Dropped(DropReason::NoLabel));
        }
        let disjoint = (0..3).all(|i| ((i + 1)..3).all(|j| sets[i].is_disjoint(sets[j])));
        if disjoint {
            return Ok(AggregationOutcome::Dropped(DropReason::NoOverlap));
        }
    }

    if records.iter().all(|r| r.segments == records[0].segments) {
        return Ok(AggregationOutcome::Accepted(records[0].segments.clone()));
    }

    let mut majority = Vec::with_capacity(n);
    let mut dissenter: Option<usize> = None;
    for s in 0..n {
        let sets: Vec<&BTreeSet<L>> = records.iter().map(|r| &r.segments[s]).collect();
        let seg_majority = majority_set(&sets);
        let differing: Vec<usize> = (0..3).filter(|&i| *sets[i] != seg_majority).collect();
        if !differing.is_empty() {
            let who = match farthest(&sets, &seg_majority, &differing) {
                Some(who) => who,
                None => return Ok(AggregationOutcome::Dropped(DropReason::AmbiguousDissent)),
            };
            match dissenter {
                Some(prev) if prev != who => {
                    return Ok(AggregationOutcome::Dropped(DropReason::AmbiguousDissent))
                }
                _ => dissenter = Some(who),
            }
        }
        majority.push(seg_majority);
    }

    // Records differ, so at least one segment produced a dissenter.
    let who = dissenter.expect("non-unanimous records yield a dissenter");
    Ok(AggregationOutcome::NeedsConfirmation {
        majority,
        dissenter: records[who].annotator.clone(),
    })
}

fn majority_set<L: Ord + Clone>(sets: &[&BTreeSet<L>]) -> BTreeSet<L> {
    let mut out = BTreeSet::new();
    for (i, set) in sets.iter().enumerate() {
        for label in set.iter() {
            if sets.iter().enumerate().any(|(j, other)| j != i && other.contains(label)) {
                out.insert(label.clone());
            }
        }
    }
    out
}

fn farthest<L: Ord>(sets: &[&BTreeSet<L>], target: &BTreeSet<L>, candidates: &[usize]) -> Option<usize> {
    let distance = |i: usize| sets[i].symmetric_difference(target).count();
    let best = candidates.iter().map(|&i| distance(i)).max()?;
    let mut at_best = candidates.iter().copied().filter(|&i| distance(i) == best);
    let first = at_best.next()?;
    match at_best.next() {
        Some(_) => None,
        None => Some(first),
    }
}

/// Resolves a pending outcome with the dissenter's answer.
pub fn confirm_annotation<L: Clone>(
    outcome: &AggregationOutcome<L>,
    dissenter_agrees: bool,
) -> Result<AggregationOutcome<L>, CorpusError> {
    match outcome {
        AggregationOutcome::NeedsConfirmation { majority, .. } => Ok(if dissenter_agrees {
            AggregationOutcome::Accepted(majority.clone())
        } else {
            AggregationOutcome::Dropped(DropReason::Rejected)
        }),
        _ => Err(CorpusError::InvalidState),
    }
}

/// A label an annotator can tick for one segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LabelAtom {
    L1(Level1),
    L2(Level2),
}

/// One annotator's choices for one segment: at most one level-1 label and at
/// most two level-2 labels, all sharing that parent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level1: Option<Level1>,
    #[serde(default, with = "level2_list")]
    pub level2: Vec<Level2>,
}

impl SegmentAnnotation {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.level2.len() > 2 {
            return Err(CorpusError::InvalidAnnotation("more than two level-2 labels".into()));
        }
        let parent = self.level1.or_else(|| self.level2.first().map(|l2| l2.level1()));
        if let Some(parent) = parent {
            if let Some(bad) = self.level2.iter().find(|l2| l2.level1() != parent) {
                return Err(CorpusError::InvalidAnnotation(format!(
                    "level-2 label `{}` is not under `{}`",
                    bad, parent
                )));
            }
        }
        Ok(())
    }

    fn atoms(&self) -> BTreeSet<LabelAtom> {
        self.level1
            .map(LabelAtom::L1)
            .into_iter()
            .chain(self.level2.iter().copied().map(LabelAtom::L2))
            .collect()
    }
}

mod level2_list {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::taxonomy::{parse_label, serialize_label, Level2, SentenceFunction};

    pub fn serialize<S: Serializer>(v: &[Level2], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|l2| serialize_label(SentenceFunction::new(*l2))))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Level2>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.iter()
            .map(|s| parse_label(s).map(|sf| sf.level2()).map_err(serde::de::Error::custom))
            .collect()
    }
}

/// One annotator's labels for one conversation pair, as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub pair_index: usize,
    pub annotator: String,
    pub query: Vec<SegmentAnnotation>,
    pub response: Vec<SegmentAnnotation>,
}

impl AnnotationRecord {
    fn to_label_record(&self) -> Result<LabelRecord<LabelAtom>, CorpusError> {
        for seg in self.query.iter().chain(&self.response) {
            seg.validate()?;
        }
        Ok(LabelRecord {
            annotator: self.annotator.clone(),
            segments: self.query.iter().chain(&self.response).map(|s| s.atoms()).collect(),
        })
    }
}

/// Result of adjudicating a real conversation pair.
#[derive(Debug, Clone, PartialEq)]
pub enum PairOutcome {
    Accepted(ConversationPair),
    Dropped(DropReason),
    NeedsConfirmation {
        majority: ConversationPair,
        dissenter: String,
    },
}

/// Adjudicates a pair against three annotation records.
pub fn adjudicate_pair(
    pair: &ConversationPair,
    records: &[AnnotationRecord],
) -> Result<PairOutcome, CorpusError> {
    if records.len() != 3 {
        return Err(CorpusError::RecordCountMismatch(records.len()));
    }
    if records
        .iter()
        .any(|r| r.query.len() != pair.query.len() || r.response.len() != pair.response.len())
    {
        return Err(CorpusError::SegmentMismatch);
    }
    let label_records = records
        .iter()
        .map(AnnotationRecord::to_label_record)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(match aggregate_annotations(&label_records)? {
        AggregationOutcome::Accepted(sets) => match apply_labels(pair, &sets) {
            Some(p) => PairOutcome::Accepted(p),
            None => PairOutcome::Dropped(DropReason::Incomplete),
        },
        AggregationOutcome::Dropped(reason) => PairOutcome::Dropped(reason),
        AggregationOutcome::NeedsConfirmation { majority, dissenter } => {
            match apply_labels(pair, &majority) {
                Some(p) => PairOutcome::NeedsConfirmation { majority: p, dissenter },
                None => PairOutcome::Dropped(DropReason::Incomplete),
            }
        }
    })
}

/// Applies the dissenter's answer to a pending pair outcome.
pub fn confirm_pair(outcome: &PairOutcome, dissenter_agrees: bool) -> Result<PairOutcome, CorpusError> {
    match outcome {
        PairOutcome::NeedsConfirmation { majority, .. } => Ok(if dissenter_agrees {
            PairOutcome::Accepted(majority.clone())
        } else {
            PairOutcome::Dropped(DropReason::Rejected)
        }),
        _ => Err(CorpusError::InvalidState),
    }
}

/// Writes agreed label sets onto a copy of `pair`. Level-2 atoms become
/// sentence functions; a segment left without one makes the pair unusable.
fn apply_labels(pair: &ConversationPair, sets: &[BTreeSet<LabelAtom>]) -> Option<ConversationPair> {
    let mut out = pair.clone();
    let segments = out.query.iter_mut().chain(out.response.iter_mut());
    for (seg, set) in segments.zip(sets) {
        let functions = labels_from_atoms(set)?;
        seg.functions = functions;
        seg.confidence = None;
    }
    Some(out)
}

fn labels_from_atoms(set: &BTreeSet<LabelAtom>) -> Option<Vec<SentenceFunction>> {
    let functions: Vec<SentenceFunction> = set
        .iter()
        .filter_map(|a| match a {
            LabelAtom::L2(l2) => Some(SentenceFunction::new(*l2)),
            LabelAtom::L1(_) => None,
        })
        .collect();
    let parents: BTreeSet<Level1> = functions.iter().map(|sf| sf.level1()).collect();
    let l1: BTreeSet<Level1> = set
        .iter()
        .filter_map(|a| match a {
            LabelAtom::L1(l1) => Some(*l1),
            LabelAtom::L2(_) => None,
        })
        .collect();
    let consistent = parents.len() == 1 && l1.iter().all(|p| parents.contains(p));
    if functions.is_empty() || functions.len() > 2 || !consistent {
        return None;
    }
    Some(functions)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, segs: &[&[char]]) -> LabelRecord<char> {
        LabelRecord {
            annotator: id.to_string(),
            segments: segs.iter().map(|s| s.iter().copied().collect()).collect(),
        }
    }

    #[test]
    fn unanimous_is_accepted() {
        let r = [rec("a", &[&['A']]), rec("b", &[&['A']]), rec("c", &[&['A']])];
        assert_eq!(
            aggregate_annotations(&r).unwrap(),
            AggregationOutcome::Accepted(vec![['A'].into_iter().collect()])
        );
    }

    #[test]
    fn pairwise_disjoint_is_dropped() {
        let r = [rec("a", &[&['A']]), rec("b", &[&['B']]), rec("c", &[&['C']])];
        assert_eq!(
            aggregate_annotations(&r).unwrap(),
            AggregationOutcome::Dropped(DropReason::NoOverlap)
        );
    }

    #[test]
    fn empty_segment_is_dropped() {
        let r = [rec("a", &[&['A'], &[]]), rec("b", &[&['A'], &[]]), rec("c", &[&['A'], &[]])];
        assert_eq!(
            aggregate_annotations(&r).unwrap(),
            AggregationOutcome::Dropped(DropReason::NoLabel)
        );
    }

    #[test]
    fn two_of_three_needs_confirmation() {
        let r = [rec("a", &[&['A']]), rec("b", &[&['A']]), rec("c", &[&['B']])];
        let out = aggregate_annotations(&r).unwrap();
        assert_eq!(
            out,
            AggregationOutcome::NeedsConfirmation {
                majority: vec![['A'].into_iter().collect()],
                dissenter: "c".into()
            }
        );
        assert_eq!(
            confirm_annotation(&out, true).unwrap(),
            AggregationOutcome::Accepted(vec![['A'].into_iter().collect()])
        );
        assert_eq!(
            confirm_annotation(&out, false).unwrap(),
            AggregationOutcome::Dropped(DropReason::Rejected)
        );
    }

    #[test]
    fn partial_overlap_uses_shared_labels() {
        let r = [rec("a", &[&['A', 'B']]), rec("b", &[&['A']]), rec("c", &[&['C']])];
        assert_eq!(
            aggregate_annotations(&r).unwrap(),
            AggregationOutcome::NeedsConfirmation {
                majority: vec![['A'].into_iter().collect()],
                dissenter: "c".into()
            }
        );
    }

    #[test]
    fn dissent_by_two_annotators_is_dropped() {
        let r = [
            rec("a", &[&['A'], &['B']]),
            rec("b", &[&['A'], &['C']]),
            rec("c", &[&['D'], &['C']]),
        ];
        // Segment 0: c dissents. Segment 1: a dissents.
        assert_eq!(
            aggregate_annotations(&r).unwrap(),
            AggregationOutcome::Dropped(DropReason::AmbiguousDissent)
        );
    }

    #[test]
    fn wrong_record_count() {
        let r = [rec("a", &[&['A']]), rec("b", &[&['A']])];
        assert!(matches!(aggregate_annotations(&r), Err(CorpusError::RecordCountMismatch(2))));
        let r = [rec("a", &[&['A']]), rec("b", &[&['A']]), rec("c", &[&['A'], &['B']])];
        assert!(matches!(aggregate_annotations(&r), Err(CorpusError::SegmentMismatch)));
    }

    #[test]
    fn confirming_a_final_outcome_is_invalid() {
        let done: AggregationOutcome<char> = AggregationOutcome::Accepted(vec![]);
        assert!(matches!(confirm_annotation(&done, true), Err(CorpusError::InvalidState)));
    }

    fn ann(l2: &[Level2]) -> SegmentAnnotation {
        SegmentAnnotation { level1: l2.first().map(|l| l.level1()), level2: l2.to_vec() }
    }

    #[test]
    fn real_pair_adjudication() {
        let pair = ConversationPair::from_texts(&["你去吗?"], &["去。"], "test");
        let record = |id: &str, q: Level2, r: Level2| AnnotationRecord {
            pair_index: 0,
            annotator: id.into(),
            query: vec![ann(&[q])],
            response: vec![ann(&[r])],
        };
        let records = vec![
            record("a", Level2::YesNoIn, Level2::PositiveDe),
            record("b", Level2::YesNoIn, Level2::PositiveDe),
            record("c", Level2::YesNoIn, Level2::NegativeDe),
        ];
        let out = adjudicate_pair(&pair, &records).unwrap();
        let PairOutcome::NeedsConfirmation { majority, dissenter } = &out else {
            panic!("expected confirmation, got {out:?}");
        };
        assert_eq!(dissenter, "c");
        assert_eq!(majority.response[0].functions, vec![SentenceFunction::new(Level2::PositiveDe)]);
        let PairOutcome::Accepted(p) = confirm_pair(&out, true).unwrap() else { panic!() };
        assert!(p.all_labeled());
    }

    #[test]
    fn annotation_parent_must_match() {
        let bad = SegmentAnnotation { level1: Some(Level1::Declarative), level2: vec![Level2::YesNoIn] };
        assert!(bad.validate().is_err());
        let mixed = SegmentAnnotation { level1: None, level2: vec![Level2::YesNoIn, Level2::PositiveDe] };
        assert!(mixed.validate().is_err());
    }
}
