use proptest::prelude::*;
use tracebox_core::geometry::BBox;
use tracebox_core::parser::{parse_response, render_response, OptionLetter, ThinkPart};

// Filler text that cannot form a tag, a quadruple or a standalone letter.
fn filler() -> impl Strategy<Value = String> {
    "[a-z ,.]{0,24}".prop_map(|s| format!(" {s} "))
}

fn coord() -> impl Strategy<Value = f64> {
    prop_oneof![
        (0u32..2000).prop_map(f64::from),
        (0u32..200_000).prop_map(|v| f64::from(v) / 100.0),
    ]
}

fn bbox() -> impl Strategy<Value = BBox> {
    (coord(), coord(), 0.5f64..500.0, 0.5f64..500.0)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w.round().max(1.0), y + h.round().max(1.0)).unwrap())
}

fn part() -> impl Strategy<Value = ThinkPart> {
    prop_oneof![filler().prop_map(ThinkPart::Text), bbox().prop_map(ThinkPart::Box)]
}

fn letter() -> impl Strategy<Value = OptionLetter> {
    (0usize..6).prop_map(|i| OptionLetter::from_index(i).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn render_then_parse_recovers_boxes_and_choice(parts in prop::collection::vec(part(), 0..12), ans in letter()) {
        let text = render_response(&parts, &ans.to_string());
        let parsed = parse_response(&text);
        let expected: Vec<BBox> = parts
            .iter()
            .filter_map(|p| match p {
                ThinkPart::Box(b) => Some(*b),
                ThinkPart::Text(_) => None,
            })
            .collect();
        prop_assert!(parsed.format_ok);
        prop_assert_eq!(parsed.boxes, expected);
        prop_assert_eq!(parsed.choice, Some(ans));
        prop_assert_eq!(parsed.skipped_boxes, 0);
    }

    #[test]
    fn parser_never_panics(s in "\\PC{0,200}") {
        let _ = parse_response(&s);
    }

    #[test]
    fn trailing_text_breaks_format(parts in prop::collection::vec(part(), 0..4), junk in "[a-z]{1,8}") {
        let text = format!("{}{junk}", render_response(&parts, "B"));
        prop_assert!(!parse_response(&text).format_ok);
    }
}
