//! Synthetic news whose titles are a fixed rewrite of the lead sentence,
//! for toy-scale runs where no licensed corpus is available.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::Article;

const COMPANIES: &[&str] = &[
    "southwest airlines",
    "acme corp",
    "general motors",
    "boeing",
    "nordic bank",
    "blue river energy",
    "the city council",
    "pacific rail",
    "union steel",
    "harbor foods",
    "metro transit",
    "silverline telecom",
    "the state university",
    "oakwood pharma",
    "redstone mining",
    "global shipping",
];
const VERBS: &[&str] = &["add", "cut", "close", "open", "sell", "buy", "build", "hire", "retire", "replace"];
const OBJECTS: &[&str] = &[
    "flights",
    "stores",
    "jobs",
    "plants",
    "routes",
    "offices",
    "trucks",
    "branches",
    "schools",
    "stations",
    "ships",
    "mines",
];
const DAYS: &[&str] = &["monday", "tuesday", "wednesday", "thursday", "friday", "yesterday", "today"];
const PLACES: &[&str] = &[
    "chicago", "boston", "denver", "ohio", "texas", "moscow", "london", "the midwest", "new york", "atlanta",
];
const PURPOSES: &[&str] = &[
    "protect a valuable hub",
    "reduce costs",
    "meet rising demand",
    "answer critics",
    "win new customers",
    "satisfy regulators",
];
const FILLER: &[&str] = &[
    "analysts said the move had been expected for several months .",
    "shares rose slightly in early trading after the announcement .",
    "a spokesman declined to give further details about the plan .",
    "the company has faced growing pressure from rivals this year .",
    "officials said more information would be released next week .",
    "the decision follows a long review of its operations .",
];

/// `n` articles drawn deterministically from `seed`.
pub fn synthetic_corpus(n: usize, seed: u64) -> Vec<Article> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synthetic_article(&mut rng)).collect()
}

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items.choose(rng).expect("non-empty list")
}

fn synthetic_article(rng: &mut ChaCha8Rng) -> Article {
    let company = pick(rng, COMPANIES);
    let verb = pick(rng, VERBS);
    let object = pick(rng, OBJECTS);
    let number = rng.random_range(2..=40);
    let title = format!("{company} to {verb} {number} {object}");
    let mut body = format!(
        "{company} said {} that it would {verb} {number} {object} in {} , moving to {} .",
        pick(rng, DAYS),
        pick(rng, PLACES),
        pick(rng, PURPOSES),
    );
    let mut filler: Vec<&str> = FILLER.to_vec();
    for _ in 0..rng.random_range(2..=3) {
        let i = rng.random_range(0..filler.len());
        body.push(' ');
        body.push_str(filler.swap_remove(i));
    }
    Article::new(title, body)
}
