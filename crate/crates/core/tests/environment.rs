use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pou_core::environment::{kg_search, local_search, web_search, Corpus, CorpusEntry, CorpusSource, ProxyConfig, Triple};

const WORDS: &[&str] = &[
    "glacier", "harbor", "lantern", "meadow", "quarry", "saddle", "tundra", "violet", "walnut", "zephyr", "amber", "basalt",
];

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..6);
    let words: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect();
    format!("{}.", words.join(" "))
}

fn random_corpus(seed: u64, source: CorpusSource) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..50)
        .map(|i| {
            let body: Vec<String> = (0..rng.gen_range(1..6)).map(|_| sentence(&mut rng)).collect();
            CorpusEntry {
                id: format!("d{:02}", (i * 37) % 50),
                title: format!("T{}", rng.gen_range(0..5)),
                url: Some(format!("https://example.org/{i}")),
                body: body.join(" "),
                source,
            }
        })
        .collect();
    Corpus::new(entries, vec![], 2).unwrap()
}

fn terms(s: &str) -> BTreeSet<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(String::from)
        .collect()
}

fn score(q: &BTreeSet<String>, text: &str) -> f64 {
    let d = terms(text);
    q.iter().filter(|t| d.contains(*t)).count() as f64 / q.len() as f64
}

#[test]
fn web_ranking_matches_brute_force() {
    for seed in 0..20 {
        let corpus = random_corpus(seed, CorpusSource::Web);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let query: Vec<&str> = (0..3).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
        let query = query.join(" ");
        let q = terms(&query);
        let cfg = ProxyConfig::with_top_k(7).unwrap();

        let mut all: Vec<(f64, String, String)> = corpus
            .entries()
            .iter()
            .map(|e| (score(&q, &format!("{} {}", e.title, e.body)), e.id.clone(), e.title.clone()))
            .collect();
        // Score everything, then order by score descending and id ascending.
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let want: Vec<&str> = all.iter().take(7).map(|(_, id, _)| id.as_str()).collect();

        let got = web_search(&query, &corpus, &cfg).unwrap();
        let got_ids: Vec<&str> = got
            .items
            .iter()
            .map(|item| {
                let n: usize = item.url.as_ref().unwrap().rsplit('/').next().unwrap().parse().unwrap();
                corpus.entries()[n].id.as_str()
            })
            .collect();
        assert_eq!(got_ids, want, "seed {seed}");
        for item in &got.items {
            let doc = corpus.entries().iter().find(|e| e.url == item.url).unwrap();
            assert!(doc.body.contains(&item.content));
        }
    }
}

#[test]
fn local_ranking_matches_brute_force() {
    for seed in 0..20 {
        let corpus = random_corpus(seed, CorpusSource::Local);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
        let query: Vec<&str> = (0..2).map(|_| *WORDS.choose(&mut rng).unwrap()).collect();
        let query = query.join(" ");
        let q = terms(&query);

        let mut chunks: Vec<(f64, String, usize, String)> = Vec::new();
        for e in corpus.entries() {
            let sentences: Vec<String> = e.body.split_inclusive(". ").map(|s| s.trim().to_owned()).collect();
            for (i, pair) in sentences.chunks(2).enumerate() {
                let text = pair.join(" ");
                chunks.push((score(&q, &text), e.id.clone(), i, text));
            }
        }
        chunks.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let want: Vec<String> = chunks.into_iter().take(5).map(|c| c.3).collect();

        let got: Vec<String> = local_search(&query, &corpus, &ProxyConfig::default())
            .unwrap()
            .items
            .into_iter()
            .map(|i| i.content)
            .collect();
        assert_eq!(got, want, "seed {seed}");
    }
}

#[test]
fn kg_summary_matches_template() {
    let triples = vec![
        Triple::new("Mirell", "capital", "Ostra"),
        Triple::new("Mirell", "founder", "Daven Koll"),
        Triple::new("Ostra", "river", "Sell"),
        Triple::new("Brask", "ally", "Mirell"),
        Triple::new("Brask", "capital", "Tuum"),
    ];
    let corpus = Corpus::new(vec![], triples.clone(), 2).unwrap();
    for entity in ["Mirell", "Ostra", "Brask", "Daven Koll"] {
        let r = kg_search(entity, &corpus, &ProxyConfig::default()).unwrap();
        assert_eq!(r.items.len(), 1, "{entity}");
        let mut hop: Vec<&Triple> = triples.iter().filter(|t| t.subject == entity || t.object == entity).collect();
        hop.sort();
        let facts: Vec<String> = hop.iter().map(|t| format!("The {} of {} is {}.", t.predicate, t.subject, t.object)).collect();
        assert_eq!(r.items[0].content, format!("{entity}: {}", facts.join(" ")));
    }
    let mirell = kg_search("Mirell", &corpus, &ProxyConfig::default()).unwrap();
    let content = &mirell.items[0].content;
    for neighbor in ["Ostra", "Daven Koll", "Brask"] {
        assert!(content.contains(neighbor));
    }
}

#[test]
fn corpus_files_load() {
    let dir = std::env::temp_dir().join(format!("pou-env-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let corpus = dir.join("corpus.jsonl");
    let kg = dir.join("kg.jsonl");
    std::fs::write(
        &corpus,
        "{\"id\":\"a\",\"title\":\"A\",\"url\":\"https://a\",\"body\":\"Alpha beta.\",\"source\":\"web\"}\n\n{\"id\":\"b\",\"title\":\"B\",\"body\":\"Gamma.\",\"source\":\"local\"}\n",
    )
    .unwrap();
    std::fs::write(&kg, "{\"subject\":\"A\",\"predicate\":\"p\",\"object\":\"B\"}\n").unwrap();
    let c = Corpus::load(&corpus, Some(&kg), 2).unwrap();
    assert_eq!(c.entries().len(), 2);
    assert_eq!(c.triples().len(), 1);
    std::fs::write(&kg, "{\"subject\":\"A\"}\n").unwrap();
    let err = Corpus::load(&corpus, Some(&kg), 2).unwrap_err().to_string();
    assert!(err.contains("line 1"), "{err}");
    std::fs::remove_dir_all(&dir).ok();
}
