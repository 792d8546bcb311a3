//! Rule-generated stand-in corpus.
//!
//! Each category pairs a verb with the objects it can take. A sensible
//! statement uses an object of the verb's own category; its
//! against-common-sense twin swaps in an object from another category and
//! keeps every other word. The correct reason names the verb and the swapped
//! object; one distractor names the swapped object without the verb, the
//! other uses the same "cannot" phrasing about an unrelated verb and object.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ExplanationExample, ValidationExample};
use crate::error::{Error, Result};

struct Category {
    noun: &'static str,
    base: &'static str,
    third: &'static str,
    objects: &'static [(&'static str, &'static str)],
}

const CATEGORIES: &[Category] = &[
    Category {
        noun: "food",
        base: "eat",
        third: "eats",
        objects: &[
            ("an", "apple"),
            ("some", "bread"),
            ("a", "sandwich"),
            ("a", "banana"),
            ("a", "cake"),
            ("a", "carrot"),
        ],
    },
    Category {
        noun: "drink",
        base: "drink",
        third: "drinks",
        objects: &[
            ("some", "water"),
            ("some", "milk"),
            ("some", "juice"),
            ("some", "tea"),
            ("some", "coffee"),
            ("some", "lemonade"),
        ],
    },
    Category {
        noun: "vehicle",
        base: "drive",
        third: "drives",
        objects: &[
            ("a", "car"),
            ("a", "truck"),
            ("a", "bus"),
            ("a", "tractor"),
            ("a", "van"),
            ("a", "taxi"),
        ],
    },
    Category {
        noun: "text",
        base: "read",
        third: "reads",
        objects: &[
            ("a", "book"),
            ("a", "letter"),
            ("a", "newspaper"),
            ("a", "magazine"),
            ("a", "novel"),
            ("a", "poem"),
        ],
    },
    Category {
        noun: "garment",
        base: "wear",
        third: "wears",
        objects: &[
            ("a", "shirt"),
            ("a", "jacket"),
            ("a", "hat"),
            ("a", "scarf"),
            ("a", "sweater"),
            ("a", "coat"),
        ],
    },
    Category {
        noun: "instrument",
        base: "play",
        third: "plays",
        objects: &[
            ("a", "guitar"),
            ("a", "piano"),
            ("a", "violin"),
            ("a", "drum"),
            ("a", "flute"),
            ("a", "trumpet"),
        ],
    },
];

const AGENTS: &[&str] = &[
    "He",
    "She",
    "My brother",
    "The teacher",
    "Our neighbor",
    "The old man",
    "A little girl",
    "The doctor",
];

const CONTEXTS: &[&str] = &[
    "",
    " every morning",
    " at home",
    " after school",
    " on sunday",
    " with a friend",
    " in the evening",
];

/// Size of the generated world.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SyntheticSpec {
    /// Verb categories in use, 2..=6.
    pub categories: usize,
    /// Objects per category, 1..=6.
    pub objects_per_category: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            categories: CATEGORIES.len(),
            objects_per_category: 6,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if !(2..=CATEGORIES.len()).contains(&self.categories) {
            return Err(Error::Config(format!(
                "synthetic categories must be in 2..={}, got {}",
                CATEGORIES.len(),
                self.categories
            )));
        }
        if !(1..=6).contains(&self.objects_per_category) {
            return Err(Error::Config(format!(
                "synthetic objects_per_category must be in 1..=6, got {}",
                self.objects_per_category
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub validation: Vec<ValidationExample>,
    pub explanation: Vec<ExplanationExample>,
}

/// `n` labels over `classes` values whose counts differ by at most one,
/// in seeded random order.
fn balanced_labels(n: usize, classes: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

fn pick_other(rng: &mut impl Rng, n: usize, not: usize) -> usize {
    let k = rng.gen_range(0..n - 1);
    if k >= not {
        k + 1
    } else {
        k
    }
}

pub fn generate_synthetic(seed: u64, n_examples: usize, spec: SyntheticSpec) -> Result<SyntheticCorpus> {
    if n_examples == 0 {
        return Err(Error::Input("synthetic corpus needs at least one example".into()));
    }
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cats = &CATEGORIES[..spec.categories];
    let n_obj = spec.objects_per_category;

    let labels_a = balanced_labels(n_examples, 2, &mut rng);
    let labels_b = balanced_labels(n_examples, 3, &mut rng);

    let mut validation = Vec::with_capacity(n_examples);
    let mut explanation = Vec::with_capacity(n_examples);
    for i in 0..n_examples {
        let c = rng.gen_range(0..cats.len());
        let wrong_c = pick_other(&mut rng, cats.len(), c);
        let (art, obj) = cats[c].objects[rng.gen_range(0..n_obj)];
        let (wart, wobj) = cats[wrong_c].objects[rng.gen_range(0..n_obj)];
        let agent = AGENTS[rng.gen_range(0..AGENTS.len())];
        let context = CONTEXTS[rng.gen_range(0..CONTEXTS.len())];
        let verb = cats[c].third;

        let sensible = format!("{agent} {verb} {art} {obj}{context}.");
        let nonsense = format!("{agent} {verb} {wart} {wobj}{context}.");
        let id = format!("syn-{i}");

        let label_a = labels_a[i];
        let (sent0, sent1) = if label_a == 0 {
            (nonsense.clone(), sensible)
        } else {
            (sensible, nonsense.clone())
        };
        validation.push(ValidationExample {
            id: id.clone(),
            sent0,
            sent1,
            label: label_a,
        });

        let correct = format!("You cannot {} {wart} {wobj}.", cats[c].base);
        let category_fact = format!("{} {wobj} is a kind of {}.", capitalize(wart), cats[wrong_c].noun);
        let other_c = pick_other(&mut rng, cats.len(), c);
        let (oart, oobj) = cats[rng.gen_range(0..cats.len())].objects[rng.gen_range(0..n_obj)];
        let unrelated = format!("You cannot {} {oart} {oobj}.", cats[other_c].base);
        let distractors = [category_fact, unrelated];

        let label_b = labels_b[i];
        let mut d = distractors.into_iter();
        let options: [String; 3] = std::array::from_fn(|k| {
            if k == label_b {
                correct.clone()
            } else {
                d.next().expect("two distractors")
            }
        });
        explanation.push(ExplanationExample {
            id,
            false_sent: nonsense,
            options,
            label: label_b,
        });
    }
    Ok(SyntheticCorpus {
        validation,
        explanation,
    })
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}
