//! Small templated corpus in the ShARC record format.
//!
//! Every document lists one to three bulleted eligibility rules. Scenarios state
//! some of the rules, history turns answer others, and the gold move follows from
//! which rules are covered: all satisfied gives yes, a rejected rule gives no, an
//! open rule gives a follow-up question about the first such rule, and a question
//! about a different benefit is irrelevant.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sharc::{HistoryEntry, RawExample};

const BENEFITS: [&str; 10] = [
    "winter fuel payment",
    "carer allowance",
    "housing grant",
    "council tax discount",
    "travel pass",
    "training bursary",
    "energy rebate",
    "childcare credit",
    "heating loan",
    "study grant",
];

const RULES: [&str; 12] = [
    "a uk resident",
    "over 60",
    "a full-time student",
    "in receipt of pension credit",
    "a registered carer",
    "living alone",
    "under 25",
    "a veteran",
    "self-employed",
    "a homeowner",
    "married",
    "disabled",
];

pub fn snippet(benefit: &str, rules: &[&str]) -> String {
    let mut s = format!("You can apply for the {benefit} if you are:");
    for r in rules {
        s.push_str("\n* ");
        s.push_str(r);
    }
    s
}

pub fn question(benefit: &str) -> String {
    format!("Can I apply for the {benefit}?")
}

pub fn inquiry(rule: &str) -> String {
    format!("Are you {rule}?")
}

fn scenario(rules: &[&str]) -> String {
    if rules.is_empty() {
        String::new()
    } else {
        format!("I am {}.", rules.join(" and "))
    }
}

/// `trees` documents with four dialogue turns each, one per decision class.
pub fn generate(trees: usize, seed: u64) -> Vec<RawExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut benefits = BENEFITS.to_vec();
    benefits.shuffle(&mut rng);
    let mut out = Vec::with_capacity(trees * 4);
    for t in 0..trees {
        let benefit = benefits[t % benefits.len()];
        let k = rng.random_range(1..=3);
        let rules: Vec<&str> = RULES.choose_multiple(&mut rng, k).copied().collect();
        let snippet = snippet(benefit, &rules);
        let tree_id = format!("syn-tree-{t}");
        let mut make = |n: usize, q: String, scen: &[&str], hist: Vec<(&str, &str)>, answer: String| {
            out.push(RawExample {
                utterance_id: format!("syn-{t}-{n}"),
                tree_id: tree_id.clone(),
                snippet: snippet.clone(),
                question: q,
                scenario: scenario(scen),
                history: hist
                    .into_iter()
                    .map(|(r, a)| HistoryEntry {
                        follow_up_question: inquiry(r),
                        follow_up_answer: a.to_string(),
                    })
                    .collect(),
                answer,
            });
        };

        // Yes: a prefix of the rules stated in the scenario, the rest confirmed.
        let split = rng.random_range(0..=k);
        let confirmed: Vec<(&str, &str)> = rules[split..].iter().map(|r| (*r, "Yes")).collect();
        make(0, question(benefit), &rules[..split], confirmed, "Yes".into());

        // No: the last asked rule is rejected.
        let reject = rng.random_range(0..k);
        let mut hist: Vec<(&str, &str)> = rules[..reject].iter().map(|r| (*r, "Yes")).collect();
        hist.push((rules[reject], "No"));
        make(1, question(benefit), &[], hist, "No".into());

        // Inquire: the first open rule is asked about.
        let open = rng.random_range(0..k);
        let stated = rng.random_bool(0.5);
        let (scen, hist): (Vec<&str>, Vec<(&str, &str)>) = if stated {
            (rules[..open].to_vec(), vec![])
        } else {
            (vec![], rules[..open].iter().map(|r| (*r, "Yes")).collect())
        };
        make(2, question(benefit), &scen, hist, inquiry(rules[open]));

        // Irrelevant: the question names another benefit.
        let other = *benefits
            .iter()
            .filter(|b| **b != benefit)
            .collect::<Vec<_>>()
            .choose(&mut rng)
            .expect("more than one benefit");
        make(3, question(other), &[], vec![], "Irrelevant".into());
    }
    out
}

/// The bundled 32-example corpus.
pub fn bundled() -> Vec<RawExample> {
    generate(8, 2024)
}
