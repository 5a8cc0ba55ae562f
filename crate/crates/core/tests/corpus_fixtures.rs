use std::io::Cursor;
use std::path::Path;

use proptest::prelude::*;
use refeed_core::corpus::{
    ingest_corpus, load_dataset, write_dataset, CorpusStore, DatasetKind, DialogueExample, Example,
    QaExample,
};

fn fixture(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn ten_docs_of_one_hundred_tokens() {
    let file = std::fs::File::open(fixture("ten_docs.jsonl")).unwrap();
    let (store, stats) = ingest_corpus(std::io::BufReader::new(file), 100).unwrap();
    assert_eq!(stats.num_raw_docs, 10);
    assert_eq!(stats.num_passages, 10);
    assert_eq!(stats.total_tokens, 1000);
    assert_eq!(store.len(), 10);
}

#[test]
fn last_passage_holds_final_chunk() {
    let file = std::fs::File::open(fixture("ten_docs.jsonl")).unwrap();
    let (store, _) = ingest_corpus(std::io::BufReader::new(file), 30).unwrap();
    let raw: serde_json::Value =
        serde_json::from_str(std::fs::read_to_string(fixture("ten_docs.jsonl")).unwrap().lines().last().unwrap())
            .unwrap();
    let words: Vec<&str> = raw["text"].as_str().unwrap().split_whitespace().collect();
    let p = store.get_passage("doc9#3").unwrap();
    assert_eq!(p.text, words[90..].join(" "));
    assert_eq!(p.title, "Doc 9");
    assert!(store.get_passage("doc9#4").is_err());
}

#[test]
fn three_line_dataset_in_order() {
    let ex = load_dataset(&fixture("three_questions.jsonl"), DatasetKind::Qa).unwrap();
    let ids: Vec<&str> = ex.iter().map(|e| e.id()).collect();
    assert_eq!(ids, ["q1", "q2", "q3"]);
    assert!(load_dataset(&fixture("three_questions.jsonl"), DatasetKind::Dialogue).is_err());
}

#[test]
fn store_survives_save_and_open() {
    let file = std::fs::File::open(fixture("ten_docs.jsonl")).unwrap();
    let (store, stats) = ingest_corpus(std::io::BufReader::new(file), 17).unwrap();
    let dir = tempfile::tempdir().unwrap();
    store.save(dir.path()).unwrap();
    let back = CorpusStore::open(dir.path()).unwrap();
    assert_eq!(back.passages(), store.passages());
    assert_eq!(back.stats(), stats);
    assert_eq!(back.chunk_size(), 17);
}

fn docs_strategy() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(prop::collection::vec("[a-zé0-9.,!]{1,6}", 1..60), 1..8)
}

fn to_jsonl(docs: &[Vec<String>], seps: &[&str]) -> String {
    docs.iter()
        .enumerate()
        .map(|(i, words)| {
            let mut text = String::new();
            for (j, w) in words.iter().enumerate() {
                if j > 0 {
                    text.push_str(seps[j % seps.len()]);
                }
                text.push_str(w);
            }
            serde_json::json!({"id": format!("d{i}"), "title": "t", "text": text}).to_string() + "\n"
        })
        .collect()
}

fn qa_strategy() -> impl Strategy<Value = Example> {
    ("[a-z0-9]{1,8}", "[a-zA-Z?][^\n]{0,40}", prop::collection::vec(".{1,12}", 1..4)).prop_map(|(id, question, answers)| {
        Example::Qa(QaExample { id, question, answers })
    })
}

proptest! {
    #[test]
    fn chunking_is_lossless(docs in docs_strategy(), chunk in 1usize..25) {
        let input = to_jsonl(&docs, &[" ", "\t", "  \n "]);
        let (store, stats) = ingest_corpus(Cursor::new(input.as_bytes()), chunk).unwrap();
        prop_assert_eq!(stats.total_tokens, docs.iter().map(Vec::len).sum::<usize>());
        for (i, words) in docs.iter().enumerate() {
            let rebuilt: Vec<String> = store
                .passages()
                .iter()
                .filter(|p| p.source_doc == format!("d{i}"))
                .flat_map(|p| p.text.split(' ').map(str::to_string).collect::<Vec<_>>())
                .collect();
            prop_assert_eq!(&rebuilt, words);
        }
        prop_assert!(store.passages().iter().all(|p| p.text.split(' ').count() <= chunk));
        let again = ingest_corpus(Cursor::new(input.as_bytes()), chunk).unwrap().0;
        prop_assert_eq!(again.passages(), store.passages());
    }

    #[test]
    fn dataset_load_inverts_write(ex in prop::collection::vec(qa_strategy(), 0..6)) {
        let mut seen = std::collections::HashSet::new();
        let ex: Vec<Example> = ex.into_iter().filter(|e| seen.insert(e.id().to_string())).collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(std::fs::File::create(&path).unwrap(), &ex).unwrap();
        prop_assert_eq!(load_dataset(&path, DatasetKind::Qa).unwrap(), ex);
    }

    #[test]
    fn dialogue_load_inverts_write(history in prop::collection::vec(".{1,20}", 1..4), reference in "[a-z][^\n]{0,20}") {
        let ex = vec![Example::Dialogue(DialogueExample { id: "t1".into(), history, reference })];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(std::fs::File::create(&path).unwrap(), &ex).unwrap();
        prop_assert_eq!(load_dataset(&path, DatasetKind::Dialogue).unwrap(), ex);
    }
}
