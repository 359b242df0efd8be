use std::path::PathBuf;

use icl_demos::corpus::{parse_dataset, render_prompt, render_zero_shot, DemoRef, PromptTemplate};
use proptest::prelude::*;

fn golden(name: &str) -> String {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/golden")
        .join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

#[test]
fn zero_shot_matches_golden() {
    let t = PromptTemplate::sentiment();
    assert_eq!(
        render_zero_shot(&t, "they 're easy to use"),
        golden("zero_shot.txt")
    );
}

#[test]
fn one_shot_matches_golden() {
    let t = PromptTemplate::sentiment();
    let neg = words(&[" negative"]);
    let pos = words(&[" positive"]);
    let demos = [
        DemoRef {
            text: "norton support is completely pathetic",
            words: &neg,
        },
        DemoRef {
            text: "overall , i am very pleased with it",
            words: &pos,
        },
    ];
    let rendered = render_prompt(&t, &demos, "they 're easy to use");
    assert_eq!(rendered, golden("one_shot.txt"));
    // The transcribed variant keeps a space after each demo label; it differs
    // from the rendering only there.
    assert_eq!(
        golden("one_shot_trailing_space.txt").replace(" \n", "\n"),
        rendered
    );
}

#[test]
fn multi_word_matches_golden() {
    let t = PromptTemplate::sentiment();
    let neg = words(&[" negative", " unhealthy", " unjust"]);
    let pos = words(&[" positive", " good", " favorable"]);
    let demos = [
        DemoRef {
            text: "it does not only have difficulty playing jpegs , it even has trouble ...",
            words: &neg,
        },
        DemoRef {
            text: "about the product the zen micro is a sleek , stylish ...",
            words: &pos,
        },
    ];
    let rendered = render_prompt(&t, &demos, "they 're easy to use");
    assert_eq!(rendered, golden("multi_word.txt"));
    assert!(rendered.contains("Sentiment: negative unhealthy unjust\n"));
}

const LABELS: [&str; 4] = [" positive", " negative", " good", " bad"];

#[derive(Debug, Clone, PartialEq)]
struct Input {
    demos: Vec<(String, Vec<String>)>,
    query: String,
}

fn text() -> impl Strategy<Value = String> {
    "[a-z][a-z ,']{0,24}"
}

fn input() -> impl Strategy<Value = Input> {
    let label = prop::collection::vec(prop::sample::select(LABELS.to_vec()), 1..4)
        .prop_map(|ws| ws.into_iter().map(String::from).collect::<Vec<_>>());
    (prop::collection::vec((text(), label), 0..4), text())
        .prop_map(|(demos, query)| Input { demos, query })
}

fn render(t: &PromptTemplate, input: &Input) -> String {
    let demos: Vec<DemoRef<'_>> = input
        .demos
        .iter()
        .map(|(text, words)| DemoRef { text, words })
        .collect();
    render_prompt(t, &demos, &input.query)
}

proptest! {
    #[test]
    fn label_prefix_occurs_k_plus_one_times(input in input()) {
        let t = PromptTemplate::sentiment();
        let prompt = render(&t, &input);
        prop_assert_eq!(prompt.matches(&t.label_prefix).count(), input.demos.len() + 1);
        prop_assert!(prompt.ends_with(&t.label_prefix));
    }

    #[test]
    fn rendering_is_injective(a in input(), b in input()) {
        let t = PromptTemplate::sentiment();
        prop_assert_eq!(a == b, render(&t, &a) == render(&t, &b));
    }

    #[test]
    fn small_edits_change_the_prompt(a in input(), extra in text()) {
        let t = PromptTemplate::sentiment();
        let mut b = a.clone();
        b.query.push_str(&extra);
        prop_assert_ne!(render(&t, &a), render(&t, &b));
        let mut c = a.clone();
        c.demos.push((extra, vec![LABELS[0].to_string()]));
        prop_assert_ne!(render(&t, &a), render(&t, &c));
    }

    #[test]
    fn dataset_round_trips(records in prop::collection::vec(("\\PC{1,30}", "[a-z]{1,8}"), 1..20)) {
        let mut content = String::new();
        for (text, label) in &records {
            content.push_str(&serde_json::json!({"text": text, "label": label}).to_string());
            content.push('\n');
        }
        let ds = parse_dataset(&content, 0).unwrap();
        prop_assert_eq!(ds.to_jsonl(), content);
        let ids: Vec<usize> = ds.examples().iter().map(|e| e.id).collect();
        prop_assert_eq!(ids, (0..records.len()).collect::<Vec<_>>());
    }
}
