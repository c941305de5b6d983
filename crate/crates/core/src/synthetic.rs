//! Planted-trigger dialogue corpora in which a seen relation and an unseen
//! partner share trigger words. A shared trigger identifies the pair; the
//! unseen member is reachable only through the relation descriptions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{save_dialogre, verbalize_any, Corpus, Dialogue, RelationInstance, RelationSplit};
use crate::error::{Error, Result};
use crate::text::pre_tokenize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationPair {
    pub seen: String,
    pub unseen: String,
    /// Trigger words used only in dialogues of the seen relation.
    pub seen_lexicon: Vec<String>,
    /// Trigger words planted in dialogues of both relations and named in
    /// both descriptions.
    pub shared_lexicon: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoloRelation {
    pub relation: String,
    pub lexicon: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub pairs: Vec<RelationPair>,
    /// Seen relations without an unseen partner.
    #[serde(default)]
    pub solo: Vec<SoloRelation>,
    pub dialogues_per_relation: usize,
    pub turns_per_dialogue: usize,
    pub speakers: usize,
    pub min_words_per_turn: usize,
    pub max_words_per_turn: usize,
    pub distractors: Vec<String>,
    pub seed: u64,
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|w| w.to_string()).collect()
}

const DISTRACTORS: [&str; 64] = [
    "okay", "yeah", "well", "really", "think", "know", "going", "right", "just", "maybe", "today", "tomorrow",
    "coffee", "pizza", "movie", "weather", "the", "a", "is", "was", "we", "you", "it", "that", "this", "here",
    "there", "now", "later", "again", "fine", "great", "sure", "what", "why", "how", "when", "with", "for",
    "at", "on", "in", "about", "some", "any", "all", "very", "pretty", "totally", "game", "dinner", "lunch",
    "car", "phone", "music", "book", "party", "work", "street", "rain", "sunny", "noon", "night", "morning",
];

impl SynthSpec {
    /// Eight seen and four unseen relations, 50 dialogues each.
    pub fn acceptance(seed: u64) -> Self {
        let pair = |s: &str, u: &str, sl: &[&str], sh: &[&str]| RelationPair {
            seen: s.into(),
            unseen: u.into(),
            seen_lexicon: words(sl),
            shared_lexicon: words(sh),
        };
        let solo = |r: &str, l: &[&str]| SoloRelation {
            relation: r.into(),
            lexicon: words(l),
        };
        Self {
            pairs: vec![
                pair("per:children", "per:parents", &["son", "daughter", "kid", "baby"], &["mom", "dad"]),
                pair(
                    "per:boss",
                    "per:subordinate",
                    &["manager", "supervisor", "foreman", "chief"],
                    &["assistant", "intern"],
                ),
                pair(
                    "per:positive_impression",
                    "per:negative_impression",
                    &["love", "adore", "admire", "cherish"],
                    &["hate", "despise"],
                ),
                pair(
                    "per:visited_place",
                    "gpe:visitors_of_place",
                    &["trip", "vacation", "toured", "journey"],
                    &["tourists", "guests"],
                ),
            ],
            solo: vec![
                solo("per:friends", &["buddy", "pal", "bestie", "chum"]),
                solo("per:roommate", &["flatmate", "housemate", "bunkmate", "lodger"]),
                solo("per:neighbor", &["nextdoor", "downstairs", "upstairs", "neighbour"]),
                solo("per:alumni", &["classmate", "graduated", "reunion", "yearbook"]),
            ],
            dialogues_per_relation: 50,
            turns_per_dialogue: 4,
            speakers: 3,
            min_words_per_turn: 3,
            max_words_per_turn: 6,
            distractors: words(&DISTRACTORS),
            seed,
        }
    }

    pub fn seen_relations(&self) -> Vec<&str> {
        self.pairs
            .iter()
            .map(|p| p.seen.as_str())
            .chain(self.solo.iter().map(|s| s.relation.as_str()))
            .collect()
    }

    pub fn unseen_relations(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.unseen.as_str()).collect()
    }

    /// Relation → (description, trigger words planted in its dialogues).
    fn relations(&self) -> Result<Vec<(String, String, Vec<String>)>> {
        let head = |r: &str| verbalize_any(r).ok_or_else(|| Error::Synth(format!("`{r}` has no name")));
        let mut out = Vec::new();
        for p in &self.pairs {
            let seen_desc = [vec![head(&p.seen)?], p.seen_lexicon.clone(), p.shared_lexicon.clone()].concat();
            let planted = [p.seen_lexicon.clone(), p.shared_lexicon.clone()].concat();
            out.push((p.seen.clone(), seen_desc.join(" "), planted));
            let unseen_desc = [vec![head(&p.unseen)?], p.shared_lexicon.clone()].concat();
            out.push((p.unseen.clone(), unseen_desc.join(" "), p.shared_lexicon.clone()));
        }
        for s in &self.solo {
            let desc = [vec![head(&s.relation)?], s.lexicon.clone()].concat();
            out.push((s.relation.clone(), desc.join(" "), s.lexicon.clone()));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Synth(m));
        if self.dialogues_per_relation == 0 || self.turns_per_dialogue == 0 {
            return err("dialogue and turn counts must be positive".into());
        }
        if self.speakers < 2 {
            return err("at least two speakers are needed".into());
        }
        if self.min_words_per_turn == 0 || self.min_words_per_turn > self.max_words_per_turn {
            return err("invalid words-per-turn range".into());
        }
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        let mut relations = BTreeSet::new();
        for (rel, lex) in self
            .pairs
            .iter()
            .flat_map(|p| [(&p.seen, &p.seen_lexicon), (&p.unseen, &p.shared_lexicon)])
            .chain(self.solo.iter().map(|s| (&s.relation, &s.lexicon)))
        {
            if !relations.insert(rel.as_str()) {
                return err(format!("relation `{rel}` listed twice"));
            }
            if lex.is_empty() {
                return err(format!("relation `{rel}` has an empty trigger lexicon"));
            }
            for w in lex {
                if pre_tokenize(w).len() != 1 || w.to_lowercase() != *w {
                    return err(format!("trigger `{w}` must be one lowercase word"));
                }
                if let Some(other) = owner.insert(w, rel) {
                    return err(format!("trigger `{w}` used by both `{other}` and `{rel}`"));
                }
            }
        }
        let mut reserved: BTreeSet<String> = owner.keys().map(|w| w.to_string()).collect();
        for (_, desc, _) in self.relations()? {
            reserved.extend(desc.split_whitespace().map(str::to_string));
        }
        for d in &self.distractors {
            if reserved.contains(d) {
                return err(format!("distractor `{d}` collides with a trigger or relation word"));
            }
            if d.starts_with('s') && d[1..].chars().all(|c| c.is_ascii_digit()) && d.len() > 1 {
                return err(format!("distractor `{d}` looks like a speaker marker"));
            }
        }
        // trigger matching is by substring, so no trigger may hide inside
        // another word of the dialogue vocabulary
        for w in owner.keys() {
            let host = self
                .distractors
                .iter()
                .map(String::as_str)
                .chain(owner.keys().copied())
                .find(|d| d != w && d.contains(w));
            if let Some(host) = host {
                return err(format!("trigger `{w}` occurs inside `{host}`"));
            }
        }
        if self.distractors.is_empty() {
            return err("distractor vocabulary is empty".into());
        }
        Ok(())
    }

    pub fn split(&self) -> Result<RelationSplit> {
        let mut split = RelationSplit::new(self.seen_relations(), self.unseen_relations())?;
        split.descriptions = self.relations()?.into_iter().map(|(r, d, _)| (r, d)).collect();
        split.validate()?;
        Ok(split)
    }
}

/// Generated corpus and its split.
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub split: RelationSplit,
}

pub fn generate_corpus(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut drafts: Vec<(Vec<String>, String, String, String, String)> = Vec::new();
    for (relation, _, lexicon) in spec.relations()? {
        for _ in 0..spec.dialogues_per_relation {
            let trigger = lexicon.choose(&mut rng).expect("non-empty lexicon").clone();
            let turns = dialogue_turns(spec, &trigger, &mut rng);
            let mut speakers: Vec<usize> = (1..=spec.speakers).collect();
            speakers.shuffle(&mut rng);
            let subject = format!("S{}", speakers[0]);
            let object = format!("S{}", speakers[1]);
            drafts.push((turns, relation.clone(), trigger, subject, object));
        }
    }
    drafts.shuffle(&mut rng);
    let mut corpus = Corpus::default();
    for (i, (turns, relation, trigger, subject, object)) in drafts.into_iter().enumerate() {
        let id = i.to_string();
        corpus.dialogues.push(Dialogue::new(id.clone(), turns)?);
        corpus.instances.push(RelationInstance {
            dialogue_id: id,
            subject,
            object,
            relations: vec![relation],
            triggers: vec![trigger],
        });
    }
    Ok(SynthCorpus {
        corpus,
        split: spec.split()?,
    })
}

fn dialogue_turns<R: Rng>(spec: &SynthSpec, trigger: &str, rng: &mut R) -> Vec<String> {
    let mut turns: Vec<Vec<String>> = (0..spec.turns_per_dialogue)
        .map(|_| {
            let n = rng.random_range(spec.min_words_per_turn..=spec.max_words_per_turn);
            (0..n)
                .map(|_| spec.distractors.choose(rng).expect("non-empty").clone())
                .collect()
        })
        .collect();
    let t = rng.random_range(0..turns.len());
    let pos = rng.random_range(0..=turns[t].len());
    turns[t].insert(pos, trigger.to_string());
    let first = rng.random_range(0..spec.speakers);
    turns
        .into_iter()
        .enumerate()
        .map(|(i, ws)| format!("S{}: {}", (first + i) % spec.speakers + 1, ws.join(" ")))
        .collect()
}

/// Seed for the held-out corpus generated beside the training corpus.
pub fn test_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1)
}

/// Writes `train.json`, `test.json`, `split.json` and `synth_spec.json`.
pub fn write_synthetic(dir: &Path, spec: &SynthSpec) -> Result<SynthCorpus> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let train = generate_corpus(spec)?;
    let test_spec = SynthSpec {
        seed: test_seed(spec.seed),
        ..spec.clone()
    };
    let test = generate_corpus(&test_spec)?;
    save_dialogre(&dir.join("train.json"), &train.corpus)?;
    save_dialogre(&dir.join("test.json"), &test.corpus)?;
    train.split.save(&dir.join("split.json"))?;
    let spec_path = dir.join("synth_spec.json");
    fs::write(&spec_path, serde_json::to_string_pretty(spec)? + "\n").map_err(|e| Error::io(&spec_path, e))?;
    Ok(train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_dialogre, to_dialogre_json};

    #[test]
    fn counts_and_planting() {
        let spec = SynthSpec::acceptance(5);
        let s = generate_corpus(&spec).unwrap();
        // 8 seen + 4 unseen relations × 50 dialogues
        assert_eq!(s.corpus.instances.len(), (8 + 4) * 50);
        assert_eq!(s.split.seen.len(), 8);
        assert_eq!(s.split.unseen.len(), 4);
        let counts = s.corpus.relation_counts();
        assert!(counts.values().all(|&c| c == 50));
        let all_triggers: BTreeSet<String> = spec
            .pairs
            .iter()
            .flat_map(|p| p.seen_lexicon.iter().chain(&p.shared_lexicon))
            .chain(spec.solo.iter().flat_map(|s| &s.lexicon))
            .cloned()
            .collect();
        for inst in &s.corpus.instances {
            let d = s.corpus.dialogue(&inst.dialogue_id).unwrap();
            let toks: Vec<String> = pre_tokenize(&d.flat_text).into_iter().map(|p| p.text).collect();
            let planted: Vec<&String> = toks.iter().filter(|t| all_triggers.contains(*t)).collect();
            assert_eq!(planted, vec![&inst.triggers[0]]);
            assert_ne!(inst.subject, inst.object);
        }
    }

    #[test]
    fn shared_words_identify_the_pair() {
        let spec = SynthSpec::acceptance(5);
        let s = generate_corpus(&spec).unwrap();
        let parents = s
            .corpus
            .instances
            .iter()
            .find(|i| i.relations == ["per:parents"])
            .unwrap();
        assert!(["mom", "dad"].contains(&parents.triggers[0].as_str()));
        assert!(s.split.describe("per:parents").unwrap().contains(&parents.triggers[0]));
        assert!(s.split.describe("per:children").unwrap().contains(&parents.triggers[0]));
        let children: BTreeSet<&str> = s
            .corpus
            .instances
            .iter()
            .filter(|i| i.relations == ["per:children"])
            .map(|i| i.triggers[0].as_str())
            .collect();
        assert!(children.contains("mom") || children.contains("dad"));
        assert!(children.contains("son") || children.contains("kid"));
    }

    #[test]
    fn deterministic_and_round_trips() {
        let spec = SynthSpec::acceptance(11);
        let a = to_dialogre_json(&generate_corpus(&spec).unwrap().corpus).to_string();
        let b = to_dialogre_json(&generate_corpus(&spec).unwrap().corpus).to_string();
        assert_eq!(a, b);
        let back = parse_dialogre(&a, &|_| true).unwrap();
        assert_eq!(back, generate_corpus(&spec).unwrap().corpus);
    }

    #[test]
    fn collisions_are_rejected() {
        let mut spec = SynthSpec::acceptance(1);
        spec.distractors.push("mom".into());
        assert!(matches!(generate_corpus(&spec), Err(Error::Synth(_))));
        let mut spec = SynthSpec::acceptance(1);
        spec.distractors.push("parents".into());
        assert!(spec.validate().is_err());
        let mut spec = SynthSpec::acceptance(1);
        spec.solo[0].lexicon.push("son".into());
        assert!(spec.validate().is_err());
    }
}
