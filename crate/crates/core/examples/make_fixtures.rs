//! Regenerates the corpora under `fixtures/`:
//!
//! `cargo run -p treesent-core --example make_fixtures -- fixtures`

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use treesent::synth::random_tree;
use treesent::treeio::LabelKind;

const POSITIVE: [&str; 6] = ["good", "great", "lovely", "superb", "charming", "funny"];
const NEGATIVE: [&str; 6] = ["bad", "awful", "dull", "boring", "poor", "clumsy"];
const FILLER: [&str; 16] = [
    "the", "film", "movie", "story", "plot", "cast", "was", "is", "quite", "really", "a", "with", "ending", "script",
    "and", "overall",
];

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words.choose(rng).unwrap()
}

/// One sentiment expression in filler context. `not` flips the polarity.
fn sentence(rng: &mut ChaCha8Rng, positive: bool) -> Vec<String> {
    let mut toks: Vec<String> = (0..rng.gen_range(3..7)).map(|_| pick(rng, &FILLER).to_string()).collect();
    let negate = rng.gen_bool(0.2);
    let word = if positive ^ negate { pick(rng, &POSITIVE) } else { pick(rng, &NEGATIVE) };
    let mut expr = vec![word.to_string()];
    if rng.gen_bool(0.3) {
        expr.insert(0, "very".into());
    }
    if negate {
        expr.insert(0, "not".into());
    }
    let at = rng.gen_range(0..=toks.len());
    toks.splice(at..at, expr);
    toks
}

fn write_lines(path: &Path, lines: &[String]) {
    let mut f = fs::File::create(path).unwrap();
    for l in lines {
        writeln!(f, "{l}").unwrap();
    }
}

fn toy(dir: &Path, rng: &mut ChaCha8Rng) {
    fs::create_dir_all(dir).unwrap();
    for (name, n) in [("train.txt", 40), ("dev.txt", 12), ("test.txt", 12)] {
        let lines: Vec<String> = (0..n)
            .map(|i| {
                let positive = i % 2 == 0;
                let toks = sentence(rng, positive);
                random_tree(rng, &toks, positive as usize, LabelKind::Binary).to_sexpr()
            })
            .collect();
        write_lines(&dir.join(name), &lines);
    }
    let mut dict = vec!["# toy polar dictionary".to_string()];
    dict.extend(POSITIVE[..4].iter().map(|w| format!("{w}\tpos")));
    dict.extend(NEGATIVE[..4].iter().map(|w| format!("{w}\tneg")));
    dict.push("not good\tneg".into());
    dict.push("not bad\tpos".into());
    write_lines(&dir.join("dict.tsv"), &dict);
}

// Fine-grained corpus for the annotation oracle: 100 sentences and a
// 50-entry dictionary. Most multi-word entries are yields of corpus subtrees;
// the rest are random filler pairs.
fn lexicon(dir: &Path, rng: &mut ChaCha8Rng) {
    fs::create_dir_all(dir).unwrap();
    let mut trees = Vec::new();
    for _ in 0..100 {
        let positive = rng.gen_bool(0.5);
        let toks = sentence(rng, positive);
        let label = if positive { rng.gen_range(3..5) } else { rng.gen_range(0..2) };
        trees.push(random_tree(rng, &toks, label, LabelKind::Fine5));
    }
    write_lines(&dir.join("corpus.txt"), &trees.iter().map(|t| t.to_sexpr()).collect::<Vec<_>>());

    let mut phrases = BTreeSet::new();
    for t in &trees {
        for id in 0..t.len() {
            let y = t.yield_tokens(id).unwrap();
            if (2..=3).contains(&y.len()) {
                phrases.insert(y.join(" "));
            }
        }
    }
    let phrases: Vec<String> = phrases.into_iter().collect();
    let mut entries: Vec<(String, bool)> = Vec::new();
    for w in POSITIVE.iter().chain(NEGATIVE.iter()) {
        entries.push((w.to_string(), POSITIVE.contains(w)));
    }
    for w in ["plot", "script", "ending", "cast", "overall"] {
        entries.push((w.to_string(), rng.gen_bool(0.5)));
    }
    let mut seen: BTreeSet<String> = entries.iter().map(|e| e.0.clone()).collect();
    while entries.len() < 38 {
        let p = phrases.choose(rng).unwrap().clone();
        if seen.insert(p.clone()) {
            let pos = p.split(' ').any(|w| POSITIVE.contains(&w));
            entries.push((p, pos));
        }
    }
    while entries.len() < 50 {
        let p = format!("{} {}", pick(rng, &FILLER), pick(rng, &FILLER));
        if seen.insert(p.clone()) {
            entries.push((p, rng.gen_bool(0.5)));
        }
    }
    let lines: Vec<String> =
        entries.iter().map(|(s, pos)| format!("{s}\t{}", if *pos { "pos" } else { "neg" })).collect();
    write_lines(&dir.join("dict.tsv"), &lines);
}

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "fixtures".into());
    let out = Path::new(&out);
    let mut rng = ChaCha8Rng::seed_from_u64(20170801);
    toy(&out.join("toy"), &mut rng);
    lexicon(&out.join("lexicon"), &mut rng);
}
