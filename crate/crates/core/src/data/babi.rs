//! Synthetic stories in the style of the bAbI "supporting facts" tasks.
//!
//! * Task 1: actors move around; "where is <actor> ?".
//! * Task 2: actors also pick up and drop objects; "where is the <object> ?".
//! * Task 3: "where was the <object> before the <place> ?".
//!
//! Every instance is a passage/question pair whose label is an index into
//! [`PLACES`].

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Instance;
use crate::error::{Error, Result};

pub const ACTORS: [&str; 4] = ["mary", "john", "sandra", "daniel"];
pub const PLACES: [&str; 6] = ["bathroom", "hallway", "garden", "office", "bedroom", "kitchen"];
pub const OBJECTS: [&str; 3] = ["football", "apple", "milk"];
const MOVES: [&str; 4] = ["went", "journeyed", "travelled", "moved"];
const TAKES: [&[&str]; 3] = [&["picked", "up"], &["got"], &["grabbed"]];
const DROPS: [&str; 2] = ["dropped", "discarded"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Instance>,
    pub valid: Vec<Instance>,
    pub test: Vec<Instance>,
}

/// Deterministic in `(task, sizes, seed)`. Splits are drawn in the order
/// train, valid, test from one generator.
pub fn generate_babi_like(task: u8, sizes: SplitSizes, seed: u64) -> Result<Splits> {
    if !(1..=3).contains(&task) {
        return Err(Error::Config(format!("task must be 1, 2 or 3, got {task}")));
    }
    if sizes.train == 0 || sizes.valid == 0 || sizes.test == 0 {
        return Err(Error::Config("every split needs at least one instance".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = |n: usize| -> Vec<Instance> { (0..n).map(|_| story(task, &mut rng)).collect() };
    Ok(Splits {
        train: split(sizes.train),
        valid: split(sizes.valid),
        test: split(sizes.test),
    })
}

#[derive(Default)]
struct World {
    actor_at: [Option<usize>; ACTORS.len()],
    holder: [Option<usize>; OBJECTS.len()],
    object_at: [Option<usize>; OBJECTS.len()],
    /// Places each object has been in, without immediate repeats.
    history: [Vec<usize>; OBJECTS.len()],
    tokens: Vec<String>,
}

impl World {
    fn say(&mut self, words: &[&str]) {
        self.tokens.extend(words.iter().map(|w| w.to_string()));
        self.tokens.push(".".into());
    }

    fn place_object(&mut self, o: usize, p: usize) {
        self.object_at[o] = Some(p);
        if self.history[o].last() != Some(&p) {
            self.history[o].push(p);
        }
    }

    fn act(&mut self, rng: &mut ChaCha8Rng, with_objects: bool) {
        let mut takes = Vec::new();
        let mut drops = Vec::new();
        if with_objects {
            for a in 0..ACTORS.len() {
                let Some(here) = self.actor_at[a] else { continue };
                for o in 0..OBJECTS.len() {
                    if self.holder[o] == Some(a) {
                        drops.push((a, o));
                    } else if self.holder[o].is_none() && self.object_at[o].is_none_or(|p| p == here) {
                        takes.push((a, o));
                    }
                }
            }
        }
        let roll: f64 = rng.random();
        if !takes.is_empty() && roll < 0.3 {
            let &(a, o) = takes.choose(rng).expect("non-empty");
            let verb = *TAKES.choose(rng).expect("non-empty");
            let mut words = vec![ACTORS[a]];
            words.extend_from_slice(verb);
            words.extend_from_slice(&["the", OBJECTS[o]]);
            self.say(&words);
            self.holder[o] = Some(a);
            let here = self.actor_at[a].expect("located");
            self.place_object(o, here);
        } else if !drops.is_empty() && roll < 0.45 {
            let &(a, o) = drops.choose(rng).expect("non-empty");
            let verb = *DROPS.choose(rng).expect("non-empty");
            self.say(&[ACTORS[a], verb, "the", OBJECTS[o]]);
            self.holder[o] = None;
        } else {
            let a = rng.random_range(0..ACTORS.len());
            let p = rng.random_range(0..PLACES.len());
            let verb = *MOVES.choose(rng).expect("non-empty");
            self.say(&[ACTORS[a], verb, "to", "the", PLACES[p]]);
            self.actor_at[a] = Some(p);
            for o in 0..OBJECTS.len() {
                if self.holder[o] == Some(a) {
                    self.place_object(o, p);
                }
            }
        }
    }
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

fn story(task: u8, rng: &mut ChaCha8Rng) -> Instance {
    loop {
        let (lo, hi) = match task {
            1 => (2, 6),
            2 => (4, 10),
            _ => (6, 14),
        };
        let n = rng.random_range(lo..=hi);
        let mut w = World::default();
        for _ in 0..n {
            w.act(rng, task > 1);
        }
        let question = match task {
            1 => {
                let moved: Vec<usize> = (0..ACTORS.len()).filter(|&a| w.actor_at[a].is_some()).collect();
                moved
                    .choose(rng)
                    .map(|&a| (words(&["where", "is", ACTORS[a], "?"]), w.actor_at[a].expect("moved")))
            }
            2 => {
                let known: Vec<usize> = (0..OBJECTS.len()).filter(|&o| w.object_at[o].is_some()).collect();
                known
                    .choose(rng)
                    .map(|&o| (words(&["where", "is", "the", OBJECTS[o], "?"]), w.object_at[o].expect("known")))
            }
            _ => {
                let mut options = Vec::new();
                for (o, h) in w.history.iter().enumerate() {
                    for &p in h {
                        let last = h.iter().rposition(|&x| x == p).expect("present");
                        if last >= 1 && !options.contains(&(o, p)) {
                            options.push((o, p));
                        }
                    }
                }
                options.choose(rng).map(|&(o, p)| {
                    let h = &w.history[o];
                    let before = h[h.iter().rposition(|&x| x == p).expect("present") - 1];
                    (
                        words(&["where", "was", "the", OBJECTS[o], "before", "the", PLACES[p], "?"]),
                        before,
                    )
                })
            }
        };
        if let Some((q, label)) = question {
            return Instance {
                tokens: w.tokens,
                query: Some(q),
                label,
            };
        }
    }
}
