use std::fs;
use std::path::PathBuf;

use serde::Deserialize;
use xmrag_core::joint::{Counters, ParetoEntry};
use xmrag_core::{DenseScore, ParetoResult, Query, SatisfactionVector};

pub const PROMPT_FIXTURES: [&str; 3] = ["single_full_match", "two_images", "four_partial"];

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(rel)
}

#[derive(Deserialize)]
struct PromptFixture {
    raw: String,
    subqueries: Vec<String>,
    entries: Vec<FixtureEntry>,
}

#[derive(Deserialize)]
struct FixtureEntry {
    id: String,
    s: Vec<u8>,
}

pub fn load(name: &str) -> (Query, ParetoResult) {
    let text = fs::read_to_string(fixture(&format!("prompts/{name}.json"))).unwrap();
    let f: PromptFixture = serde_json::from_str(&text).unwrap();
    let query = Query::from_texts(f.raw, &f.subqueries).unwrap();
    let entries = f
        .entries
        .into_iter()
        .enumerate()
        .map(|(record, e)| ParetoEntry {
            record,
            id: e.id,
            satisfaction: SatisfactionVector::from_u8(&e.s),
            dense: DenseScore::from_similarities(vec![0.5; e.s.len()]),
            f: None,
            alpha: None,
        })
        .collect();
    let result = ParetoResult {
        entries,
        beta: None,
        bound: None,
        grid_size: 0,
        counters: Counters::default(),
    };
    (query, result)
}

pub fn golden(name: &str) -> String {
    let text = fs::read_to_string(fixture(&format!("prompts/{name}.golden"))).unwrap();
    text.trim_end_matches('\n').to_string()
}

pub const IN_CONTEXT: [(&str, &[&str]); 6] = [
    (
        "two cars are traveling on the road and waiting at the traffic light.",
        &["cars", "road", "traffic light"],
    ),
    (
        "duplicate images of a girl with a blue tank top and black tennis skirt holding a tennis racquet and swinging at a ball.",
        &["girl", "blue tank top", "black tennis skirt", "tennis racqet", "ball"],
    ),
    (
        "the window showing a traffic signal is covered in droplets of rainwater.",
        &["traffic signal", "droplets of rainwater"],
    ),
    (
        "an overhead shot captures an intersection with a \"go colts\" sign.",
        &["intersection", "\"go colts\" sign"],
    ),
    (
        "a van with a face painted on its hood driving through street in china.",
        &["van", "a face painted on its hood", "street in china"],
    ),
    (
        "two men, one with a black shirt and the other with a white shirt, are kicking each other without making contact.",
        &["men", "black shirt", "white shirt"],
    ),
];
