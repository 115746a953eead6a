//! Deterministic synthetic conversations with planted ground truth.
//!
//! Conversations are drawn from small "worlds": a domain plus six subjects
//! (two groups, two people, two works), each with a role word and a name.
//! Several conversations share a world, so they talk about the same things
//! over different passages, which is what negative sampling needs.
//!
//! Every passage is built so the lexical reader can only find a turn's
//! answer sentence when given exactly the planted entities: for each asked
//! fact an earlier sentence shares the subject and another earlier sentence
//! shares the predicate, and the answer sentences come last.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use super::{AnswerSpan, Conversation, DialogFeature, Passage, Turn};
use crate::error::{Error, Result};
use crate::rng;
use crate::text::content_words;

pub type FeatureMix = BTreeMap<DialogFeature, f64>;

pub fn default_mix() -> FeatureMix {
    BTreeMap::from([
        (DialogFeature::DrillDown, 0.35),
        (DialogFeature::TopicShift, 0.25),
        (DialogFeature::TopicReturn, 0.2),
        (DialogFeature::Clarification, 0.2),
    ])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticOptions {
    /// Number of distinct worlds; defaults to one per ten conversations.
    pub n_worlds: Option<usize>,
    pub min_turns: usize,
    pub max_turns: usize,
}

impl Default for SyntheticOptions {
    fn default() -> Self {
        SyntheticOptions { n_worlds: None, min_turns: 5, max_turns: 8 }
    }
}

struct Kind {
    roles: [&'static str; 4],
    predicates: [&'static str; 6],
    pronoun: &'static str,
}

struct Domain {
    name: &'static str,
    kinds: [Kind; 3],
}

const DOMAINS: [Domain; 3] = [
    Domain {
        name: "music",
        kinds: [
            Kind {
                roles: ["band", "ensemble", "collective", "orchestra"],
                predicates: ["founded", "formed", "signed", "disbanded", "reunited", "managed"],
                pronoun: "they",
            },
            Kind {
                roles: ["singer", "guitarist", "drummer", "bassist"],
                predicates: ["born", "raised", "educated", "married", "discovered", "hired"],
                pronoun: "she",
            },
            Kind {
                roles: ["album", "single", "record", "soundtrack"],
                predicates: ["released", "recorded", "produced", "reissued", "certified", "mastered"],
                pronoun: "it",
            },
        ],
    },
    Domain {
        name: "film",
        kinds: [
            Kind {
                roles: ["studio", "company", "distributor", "network"],
                predicates: ["established", "incorporated", "acquired", "merged", "restructured", "launched"],
                pronoun: "they",
            },
            Kind {
                roles: ["actor", "director", "writer", "producer"],
                predicates: ["born", "raised", "trained", "married", "cast", "nominated"],
                pronoun: "he",
            },
            Kind {
                roles: ["film", "series", "documentary", "sequel"],
                predicates: ["premiered", "filmed", "edited", "screened", "dubbed", "restored"],
                pronoun: "it",
            },
        ],
    },
    Domain {
        name: "sports",
        kinds: [
            Kind {
                roles: ["club", "team", "academy", "league"],
                predicates: ["founded", "relocated", "promoted", "relegated", "renamed", "sponsored"],
                pronoun: "they",
            },
            Kind {
                roles: ["striker", "goalkeeper", "coach", "captain"],
                predicates: ["born", "transferred", "injured", "signed", "capped", "retired"],
                pronoun: "he",
            },
            Kind {
                roles: ["stadium", "trophy", "arena", "kit"],
                predicates: ["opened", "built", "renovated", "unveiled", "redesigned", "demolished"],
                pronoun: "it",
            },
        ],
    },
];

const NAMES: [&str; 40] = [
    "Nova", "Jal", "Orin", "Kaza", "Vela", "Tiro", "Sena", "Maro", "Liwa", "Quen", "Brio", "Doza",
    "Fenn", "Galo", "Hiro", "Isla", "Juno", "Kito", "Lumo", "Mira", "Nilo", "Omar", "Pela", "Rilo",
    "Suna", "Tavi", "Ulla", "Vero", "Wren", "Xavi", "Yara", "Zeno", "Aris", "Bela", "Cato", "Dara",
    "Eron", "Faro", "Gina", "Hale",
];

const CITIES: [&str; 16] = [
    "Lahore", "Wazirabad", "Karachi", "Oslo", "Lima", "Quito", "Hanoi", "Dakar", "Riga", "Tunis",
    "Baku", "Accra", "Minsk", "Sofia", "Perth", "Porto",
];

const CONTENTLESS: [&str; 3] = ["What else?", "Why was that?", "Anything else about that?"];

const SUBJECTS: usize = 6;

struct Subject {
    kind: usize,
    role: &'static str,
    name: &'static str,
}

struct World {
    domain: &'static Domain,
    subjects: Vec<Subject>,
    tag: String,
}

impl World {
    fn build(seed: u64, id: usize) -> World {
        let mut r = rng::stream(seed, "world", id as u64);
        let domain = &DOMAINS[r.gen_range(0..DOMAINS.len())];
        let names: Vec<&str> = NAMES.choose_multiple(&mut r, SUBJECTS).copied().collect();
        let mut subjects = Vec::with_capacity(SUBJECTS);
        for (k, kind) in domain.kinds.iter().enumerate() {
            let roles: Vec<&str> = kind.roles.choose_multiple(&mut r, 2).copied().collect();
            for (j, role) in roles.into_iter().enumerate() {
                subjects.push(Subject { kind: k, role, name: names[k * 2 + j] });
            }
        }
        World { domain, subjects, tag: format!("{}-{id:03}", domain.name) }
    }

    fn kind(&self, s: usize) -> &Kind {
        &self.domain.kinds[self.subjects[s].kind]
    }

    /// The other subject of the same kind.
    fn sibling(&self, s: usize) -> usize {
        s ^ 1
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Value {
    Year(u32),
    City(&'static str),
}

impl Value {
    fn sample(r: &mut ChaCha8Rng) -> Value {
        if r.gen_bool(0.5) {
            Value::Year(r.gen_range(1950..=2020))
        } else {
            Value::City(CITIES[r.gen_range(0..CITIES.len())])
        }
    }

    fn wh(self) -> &'static str {
        match self {
            Value::Year(_) => "When",
            Value::City(_) => "Where",
        }
    }

    fn render(self) -> String {
        match self {
            Value::Year(y) => y.to_string(),
            Value::City(c) => c.to_string(),
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Form {
    Full,
    Pronoun,
    Contentless,
}

#[derive(Clone)]
struct Plan {
    feature: DialogFeature,
    subject: usize,
    predicate: &'static str,
    value: Value,
    form: Form,
}

struct Planner<'w> {
    world: &'w World,
    asked_predicates: BTreeSet<&'static str>,
    discussed: Vec<usize>,
    by_name: HashMap<usize, bool>,
    plans: Vec<Plan>,
}

impl<'w> Planner<'w> {
    /// Unasked predicates of a subject, only when at least two remain so
    /// the passage can still introduce the subject with an unasked fact.
    fn unused(&self, s: usize) -> Vec<&'static str> {
        let left: Vec<_> = self
            .world
            .kind(s)
            .predicates
            .iter()
            .copied()
            .filter(|p| !self.asked_predicates.contains(p))
            .collect();
        if left.len() >= 2 {
            left
        } else {
            Vec::new()
        }
    }

    fn ask(&mut self, r: &mut ChaCha8Rng, feature: DialogFeature, s: usize, form: Form) -> bool {
        let options = self.unused(s);
        let Some(&p) = options.choose(r) else { return false };
        self.asked_predicates.insert(p);
        if !self.discussed.contains(&s) {
            self.discussed.push(s);
        }
        self.by_name.entry(s).or_insert_with(|| r.gen_bool(0.5));
        let value = Value::sample(r);
        self.plans.push(Plan { feature, subject: s, predicate: p, value, form });
        true
    }

    fn shift(&mut self, r: &mut ChaCha8Rng) -> bool {
        let fresh: Vec<usize> = (0..SUBJECTS)
            .filter(|s| !self.discussed.contains(s) && !self.unused(*s).is_empty())
            .collect();
        match fresh.choose(r) {
            Some(&s) => self.ask(r, DialogFeature::TopicShift, s, Form::Full),
            None => false,
        }
    }

    fn step(&mut self, r: &mut ChaCha8Rng, wanted: DialogFeature) -> bool {
        let prev = self.plans.last().expect("first turn planned").clone();
        match wanted {
            DialogFeature::DrillDown if !self.unused(prev.subject).is_empty() => {
                self.ask(r, wanted, prev.subject, Form::Pronoun)
            }
            DialogFeature::Clarification if prev.form == Form::Full => {
                self.plans.push(Plan { feature: wanted, form: Form::Contentless, ..prev });
                true
            }
            DialogFeature::TopicReturn => {
                let back: Vec<usize> = self
                    .discussed
                    .iter()
                    .copied()
                    .filter(|&s| s != prev.subject && !self.unused(s).is_empty())
                    .collect();
                match back.choose(r) {
                    Some(&s) => self.ask(r, wanted, s, Form::Full),
                    None => self.shift(r),
                }
            }
            _ => self.shift(r),
        }
    }

    fn mention(&self, s: usize) -> String {
        let subj = &self.world.subjects[s];
        if self.by_name[&s] {
            subj.name.to_string()
        } else {
            format!("the {}", subj.role)
        }
    }

    fn mention_token(&self, s: usize) -> String {
        let subj = &self.world.subjects[s];
        if self.by_name[&s] {
            subj.name.to_lowercase()
        } else {
            subj.role.to_string()
        }
    }

    fn question(&self, plan: &Plan, r: &mut ChaCha8Rng) -> String {
        match plan.form {
            Form::Full => format!("{} was {} {}?", plan.value.wh(), self.mention(plan.subject), plan.predicate),
            Form::Pronoun => {
                let pron = self.world.kind(plan.subject).pronoun;
                let verb = if pron == "they" { "were" } else { "was" };
                format!("{} {verb} {pron} {}?", plan.value.wh(), plan.predicate)
            }
            Form::Contentless => CONTENTLESS.choose(r).expect("non-empty").to_string(),
        }
    }

    fn planted(&self, plan: &Plan, question: &str) -> Vec<String> {
        match plan.form {
            Form::Full => content_words(question),
            _ => vec![self.mention_token(plan.subject), plan.predicate.to_string()],
        }
    }
}

fn sentence(r: &mut ChaCha8Rng, subj: &Subject, predicate: &str, value: Value) -> String {
    let (role, name, v) = (subj.role, subj.name, value.render());
    match r.gen_range(0..4) {
        0 => format!("In {v}, the {role} {name} was {predicate}."),
        1 => format!("The {role} {name} was {predicate} in {v}."),
        2 => format!("{name}, a {role}, got {predicate} during {v}."),
        _ => format!("It was around {v} that the {role} {name} was {predicate}."),
    }
}

fn validate_mix(mix: &FeatureMix) -> Result<()> {
    let mut sum = 0.0;
    for (f, &p) in mix {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::InvalidInput(format!("feature_mix entry {f} = {p} is negative or non-finite")));
        }
        if *f == DialogFeature::FirstQuestion && p > 0.0 {
            return Err(Error::InvalidInput("first_question cannot be drawn for follow-up turns".into()));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("feature_mix sums to {sum}, expected 1")));
    }
    Ok(())
}

pub fn generate_synthetic(seed: u64, n_conversations: usize, mix: &FeatureMix) -> Result<Vec<Conversation>> {
    generate_synthetic_with(seed, n_conversations, mix, &SyntheticOptions::default())
}

pub fn generate_synthetic_with(
    seed: u64,
    n_conversations: usize,
    mix: &FeatureMix,
    opts: &SyntheticOptions,
) -> Result<Vec<Conversation>> {
    validate_mix(mix)?;
    if opts.min_turns == 0 || opts.min_turns > opts.max_turns {
        return Err(Error::InvalidInput(format!("bad turn range {}..={}", opts.min_turns, opts.max_turns)));
    }
    let n_worlds = opts.n_worlds.unwrap_or(n_conversations.div_ceil(10)).max(1);
    let worlds: Vec<World> = (0..n_worlds.min(n_conversations)).map(|w| World::build(seed, w)).collect();
    let features: Vec<DialogFeature> = mix.keys().copied().collect();
    let sampler = WeightedIndex::new(mix.values().copied())
        .map_err(|e| Error::InvalidInput(format!("feature_mix: {e}")))?;
    Ok((0..n_conversations)
        .map(|i| {
            let mut r = rng::stream(seed, "conversation", i as u64);
            conversation(&mut r, seed, i, &worlds[i % worlds.len()], &features, &sampler, opts)
        })
        .collect())
}

fn conversation(
    r: &mut ChaCha8Rng,
    seed: u64,
    index: usize,
    world: &World,
    features: &[DialogFeature],
    sampler: &WeightedIndex<f64>,
    opts: &SyntheticOptions,
) -> Conversation {
    let n_turns = r.gen_range(opts.min_turns..=opts.max_turns);
    let mut planner = Planner {
        world,
        asked_predicates: BTreeSet::new(),
        discussed: Vec::new(),
        by_name: HashMap::new(),
        plans: Vec::new(),
    };
    planner.ask(r, DialogFeature::FirstQuestion, 0, Form::Full);
    while planner.plans.len() < n_turns {
        let wanted = features[sampler.sample(r)];
        if !planner.step(r, wanted) {
            break;
        }
    }

    let asked: BTreeSet<(usize, &str)> = planner.plans.iter().map(|p| (p.subject, p.predicate)).collect();
    let mut early: BTreeSet<(usize, &str)> = BTreeSet::new();
    for plan in &planner.plans {
        let s = plan.subject;
        early.insert((world.sibling(s), plan.predicate));
        if !early.iter().any(|e| e.0 == s) {
            let intro: Vec<&str> =
                world.kind(s).predicates.iter().copied().filter(|p| !asked.contains(&(s, *p))).collect();
            early.insert((s, intro.choose(r).expect("unasked predicate left")));
        }
    }
    early.retain(|f| !asked.contains(f));
    for s in 0..SUBJECTS {
        if !early.iter().chain(&asked).any(|e| e.0 == s) {
            early.insert((s, world.kind(s).predicates.choose(r).expect("non-empty")));
        }
    }

    let mut early: Vec<_> = early.into_iter().collect();
    early.shuffle(r);
    let mut late: Vec<_> = asked.iter().copied().collect();
    late.shuffle(r);
    let values: HashMap<(usize, &str), Value> =
        planner.plans.iter().map(|p| ((p.subject, p.predicate), p.value)).collect();

    let mut sentences = Vec::new();
    let mut fact_sentence = HashMap::new();
    for fact in early.iter().chain(&late) {
        let value = values.get(fact).copied().unwrap_or_else(|| Value::sample(r));
        fact_sentence.insert(*fact, sentences.len());
        sentences.push(sentence(r, &world.subjects[fact.0], fact.1, value));
    }

    let id = format!("syn-{seed}-{index:05}");
    let lead = &world.subjects[0];
    let passage = Passage::new(id.clone(), format!("{} ({})", lead.name, lead.role), sentences.join(" "));
    let ranges = passage.sentences();
    debug_assert_eq!(ranges.len(), sentences.len());

    let turns = planner
        .plans
        .iter()
        .enumerate()
        .map(|(t, plan)| {
            let question = planner.question(plan, r);
            let (start, end) = ranges[fact_sentence[&(plan.subject, plan.predicate)]];
            let gold: AnswerSpan = passage.span(start, end - 1);
            let planted = planner.planted(plan, &question);
            Turn {
                id: format!("{id}_q{t}"),
                question,
                gold_answers: vec![gold],
                feature: plan.feature,
                planted_required_entities: Some(planted),
                injected_history: Vec::new(),
            }
        })
        .collect();
    Conversation { id, topic: Some(world.tag.clone()), passage, turns }
}
