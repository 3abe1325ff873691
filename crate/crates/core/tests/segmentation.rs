use std::ops::Range;

use proptest::prelude::*;
use sadkit::segmenter::{
    linearize, load_jsonl, parse_linearized, round_trip_validate, save_jsonl, segment, MarkerPolicy, RawTrajectory,
    SegmentLabel, SegmentationRules,
};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Obs,
    Reason,
    Act,
}

fn word() -> impl Strategy<Value = String> {
    "[a-z]{1,6}"
}

fn line() -> impl Strategy<Value = (Kind, String)> {
    (
        prop_oneof![Just(Kind::Obs), Just(Kind::Reason), Just(Kind::Act)],
        prop::collection::vec(word(), 1..6),
    )
        .prop_map(|(k, ws)| {
            let body = ws.join(" ");
            let text = match k {
                Kind::Obs => format!("Observation: {body}"),
                Kind::Reason => format!("Reasoning: {body}"),
                Kind::Act => format!("Action: {body}"),
            };
            (k, text)
        })
}

fn trajectory() -> impl Strategy<Value = (Vec<Kind>, RawTrajectory)> {
    prop::collection::vec(line(), 1..12)
        .prop_filter("needs a supervised line", |ls| ls.iter().any(|(k, _)| *k != Kind::Obs))
        .prop_map(|ls| {
            let kinds = ls.iter().map(|(k, _)| *k).collect();
            let raw = RawTrajectory {
                env_name: "prop".into(),
                task_id: "t".into(),
                goal: "g".into(),
                lines: ls.into_iter().map(|(_, l)| l).collect(),
                final_success: true,
            };
            (kinds, raw)
        })
}

/// Independent labeling: consecutive same-kind lines form one span covering whole lines.
fn oracle_spans(kinds: &[Kind], lines: &[String]) -> Vec<(SegmentLabel, Range<usize>)> {
    let mut out: Vec<(SegmentLabel, Range<usize>, usize)> = Vec::new();
    let mut off = 0;
    for (i, (k, l)) in kinds.iter().zip(lines).enumerate() {
        let label = match k {
            Kind::Obs => None,
            Kind::Reason => Some(SegmentLabel::Reason),
            Kind::Act => Some(SegmentLabel::Action),
        };
        if let Some(label) = label {
            match out.last_mut() {
                Some((pl, r, last)) if *pl == label && *last + 1 == i => {
                    r.end = off + l.len();
                    *last = i;
                }
                _ => out.push((label, off..off + l.len(), i)),
            }
        }
        off += l.len() + 1;
    }
    out.into_iter().map(|(l, r, _)| (l, r)).collect()
}

proptest! {
    #[test]
    fn segment_matches_prefix_oracle((kinds, raw) in trajectory()) {
        let seg = segment(&raw, &SegmentationRules::default()).unwrap();
        let got: Vec<_> = seg.spans.iter().map(|s| (s.label, s.char_range.clone())).collect();
        prop_assert_eq!(got, oracle_spans(&kinds, &raw.lines));
        for s in &seg.spans {
            prop_assert_eq!(&seg.document[s.char_range.clone()], s.text.as_str());
        }
        prop_assert!(round_trip_validate(&seg).is_empty());
    }

    #[test]
    fn linearize_is_idempotent((_, raw) in trajectory()) {
        let seg = segment(&raw, &SegmentationRules::default()).unwrap();
        let once = linearize(&seg);
        let reparsed = parse_linearized(&once, MarkerPolicy::MarkersInSpan).unwrap();
        prop_assert_eq!(linearize(&reparsed), once.clone());
        prop_assert!(round_trip_validate(&reparsed).is_empty());
        let labels: Vec<_> = seg.spans.iter().map(|s| s.label).collect();
        let relabels: Vec<_> = reparsed.spans.iter().map(|s| s.label).collect();
        prop_assert_eq!(labels, relabels);
    }

    #[test]
    fn unsupervised_markers_exclude_prefixes((_, raw) in trajectory()) {
        let rules = SegmentationRules::default().with_marker_policy(MarkerPolicy::MarkersUnsupervised);
        let seg = segment(&raw, &rules).unwrap();
        for s in &seg.spans {
            prop_assert!(!s.text.starts_with("Reasoning:") && !s.text.starts_with("Action:"));
        }
        prop_assert!(round_trip_validate(&seg).is_empty());
    }

    #[test]
    fn jsonl_round_trip(records in prop::collection::vec(trajectory().prop_map(|(_, r)| r), 1..20)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        save_jsonl(&records, &path).unwrap();
        prop_assert_eq!(load_jsonl(&path).unwrap(), records);
    }
}

#[test]
fn two_phase_rules_label_final_answer() {
    let raw = RawTrajectory {
        env_name: "qa".into(),
        task_id: "q1".into(),
        goal: "who".into(),
        lines: vec![
            "Reasoning: look up the author".into(),
            "Action: search author".into(),
            "Observation: result".into(),
            "Answer: Alice".into(),
        ],
        final_success: true,
    };
    let seg = segment(&raw, &SegmentationRules::two_phase()).unwrap();
    let labels: Vec<_> = seg.spans.iter().map(|s| s.label).collect();
    assert_eq!(labels, vec![SegmentLabel::Reason, SegmentLabel::Action]);
    assert_eq!(seg.spans[0].line_indices, vec![0, 1]);
    assert_eq!(seg.spans[1].text, "Answer: Alice");
}
