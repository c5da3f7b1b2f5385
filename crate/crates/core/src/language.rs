//! Command grammar, vocabulary and referent resolution.
//!
//! Surface form: `walk to {a|the} [small|big] [color] shape`. Size words are
//! relative: "small" picks the strictly smallest of the objects matching the
//! rest of the description, "big" the strictly largest.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::SplitConstraints;
use crate::gridworld::{Cell, Color, ObjectSpec, Shape, WorldState};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LanguageError {
    #[error("no object matches \"{0}\"")]
    NoReferent(String),
    #[error("\"{phrase}\" matches {count} objects")]
    Ambiguous { phrase: String, count: usize },
    #[error("no command satisfies the split constraints in this world")]
    Unsatisfiable,
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token index {0} outside the vocabulary")]
    UnknownIndex(usize),
    #[error("malformed command: {0}")]
    Malformed(String),
    #[error("vocabulary file does not start with the reserved tokens")]
    BadReserved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verb {
    WalkTo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SizeWord {
    Small,
    Big,
}

impl SizeWord {
    pub fn word(self) -> &'static str {
        match self {
            SizeWord::Small => "small",
            SizeWord::Big => "big",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Article {
    A,
    The,
}

impl Article {
    pub fn word(self) -> &'static str {
        match self {
            Article::A => "a",
            Article::The => "the",
        }
    }
}

/// A parsed command. The article carries no meaning: two commands that differ
/// only in article denote the same referent (compare with [`Command::same_referent`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Command {
    pub verb: Verb,
    pub article: Article,
    pub size_word: Option<SizeWord>,
    pub color_word: Option<Color>,
    pub shape_word: Shape,
}

impl Command {
    pub fn walk_to(
        size_word: Option<SizeWord>,
        color_word: Option<Color>,
        shape_word: Shape,
    ) -> Self {
        Self {
            verb: Verb::WalkTo,
            article: Article::The,
            size_word,
            color_word,
            shape_word,
        }
    }

    pub fn same_referent(&self, other: &Command) -> bool {
        (self.verb, self.size_word, self.color_word, self.shape_word)
            == (
                other.verb,
                other.size_word,
                other.color_word,
                other.shape_word,
            )
    }

    pub fn words(&self) -> Vec<&'static str> {
        let mut w = vec!["walk", "to", self.article.word()];
        if let Some(s) = self.size_word {
            w.push(s.word());
        }
        if let Some(c) = self.color_word {
            w.push(c.word());
        }
        w.push(self.shape_word.word());
        w
    }

    pub fn parse<S: AsRef<str>>(words: &[S]) -> Result<Self, LanguageError> {
        let w: Vec<&str> = words.iter().map(|s| s.as_ref()).collect();
        let bad = || LanguageError::Malformed(w.join(" "));
        if w.len() < 4 || w[0] != "walk" || w[1] != "to" {
            return Err(bad());
        }
        let article = match w[2] {
            "a" => Article::A,
            "the" => Article::The,
            _ => return Err(bad()),
        };
        let mut rest = &w[3..];
        let size_word = match rest.first() {
            Some(&"small") => Some(SizeWord::Small),
            Some(&"big") => Some(SizeWord::Big),
            _ => None,
        };
        if size_word.is_some() {
            rest = &rest[1..];
        }
        let color_word = rest.first().and_then(|t| Color::from_word(t));
        if color_word.is_some() {
            rest = &rest[1..];
        }
        let [shape] = rest else { return Err(bad()) };
        let shape_word = Shape::from_word(shape).ok_or_else(bad)?;
        Ok(Self {
            verb: Verb::WalkTo,
            article,
            size_word,
            color_word,
            shape_word,
        })
    }

    pub fn encode(&self, vocab: &Vocabulary) -> Result<Vec<usize>, LanguageError> {
        self.words().into_iter().map(|w| vocab.index(w)).collect()
    }

    /// Objects matching the shape and (if given) color words.
    pub fn candidates<'w>(&self, world: &'w WorldState) -> Vec<(Cell, &'w ObjectSpec)> {
        world
            .objects()
            .filter(|(_, o)| {
                o.shape == self.shape_word && self.color_word.is_none_or(|c| c == o.color)
            })
            .collect()
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.words().join(" "))
    }
}

pub fn resolve_referent(cmd: &Command, world: &WorldState) -> Result<Cell, LanguageError> {
    let cands = cmd.candidates(world);
    if cands.is_empty() {
        return Err(LanguageError::NoReferent(referent_class(cmd)));
    }
    let picked: Vec<Cell> = match cmd.size_word {
        None => cands.iter().map(|(c, _)| *c).collect(),
        Some(sw) => {
            let sizes = cands.iter().map(|(_, o)| o.size);
            let extreme = match sw {
                SizeWord::Small => sizes.min(),
                SizeWord::Big => sizes.max(),
            }
            .expect("non-empty");
            cands
                .iter()
                .filter(|(_, o)| o.size == extreme)
                .map(|(c, _)| *c)
                .collect()
        }
    };
    match picked.as_slice() {
        [one] => Ok(*one),
        _ => Err(LanguageError::Ambiguous {
            phrase: referent_class(cmd),
            count: picked.len(),
        }),
    }
}

/// Grouping key for per-referent breakdowns, e.g. `"small yellow circle"`.
pub fn referent_class(cmd: &Command) -> String {
    let mut parts = Vec::with_capacity(3);
    if let Some(s) = cmd.size_word {
        parts.push(s.word());
    }
    if let Some(c) = cmd.color_word {
        parts.push(c.word());
    }
    parts.push(cmd.shape_word.word());
    parts.join(" ")
}

/// Every phrasing that uniquely picks out some object in `world` and is
/// admitted by `constraints`, paired with its referent cell.
///
/// Size words are only produced when at least two objects share the rest of
/// the description, so "small"/"big" always contrasts with something present.
pub fn admissible_commands(
    world: &WorldState,
    constraints: &SplitConstraints,
) -> Vec<(Command, Cell)> {
    let mut out = Vec::new();
    for (cell, obj) in world.objects() {
        for size_word in [None, Some(SizeWord::Small), Some(SizeWord::Big)] {
            for color_word in [None, Some(obj.color)] {
                let cmd = Command::walk_to(size_word, color_word, obj.shape);
                if size_word.is_some() && cmd.candidates(world).len() < 2 {
                    continue;
                }
                if resolve_referent(&cmd, world) != Ok(cell) {
                    continue;
                }
                if constraints.admits(&cmd, obj, world) {
                    out.push((cmd, cell));
                }
            }
        }
    }
    out
}

/// Draws uniformly over the admissible (referent, phrasing) pairs; the
/// article is drawn independently.
pub fn sample_command<R: Rng + ?Sized>(
    rng: &mut R,
    world: &WorldState,
    constraints: &SplitConstraints,
) -> Result<(Command, Cell), LanguageError> {
    let options = admissible_commands(world, constraints);
    let &(mut cmd, cell) = options.choose(rng).ok_or(LanguageError::Unsatisfiable)?;
    cmd.article = if rng.gen_bool(0.5) {
        Article::A
    } else {
        Article::The
    };
    Ok((cmd, cell))
}

pub const PAD: &str = "<pad>";
pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
pub const PAD_INDEX: usize = 0;
pub const SOS_INDEX: usize = 1;
pub const EOS_INDEX: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Fixed command vocabulary covering the whole grammar, independent of
    /// any generated data.
    pub fn commands() -> Self {
        let mut words = vec!["walk", "to", "a", "the", "small", "big"];
        words.extend(Color::ALL.iter().map(|c| c.word()));
        words.extend(Shape::ALL.iter().map(|s| s.word()));
        Self::from_words(words.into_iter().map(String::from)).expect("reserved tokens prepended")
    }

    fn from_words(words: impl IntoIterator<Item = String>) -> Result<Self, LanguageError> {
        let tokens: Vec<String> = [PAD, SOS, EOS]
            .into_iter()
            .map(String::from)
            .chain(words)
            .collect();
        Self::from_tokens(tokens)
    }

    /// Reads the persisted form: index = position, reserved tokens first.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, LanguageError> {
        if tokens.len() < 3
            || tokens[PAD_INDEX] != PAD
            || tokens[SOS_INDEX] != SOS
            || tokens[EOS_INDEX] != EOS
        {
            return Err(LanguageError::BadReserved);
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(LanguageError::Malformed(format!(
                    "duplicate vocabulary token {t:?}"
                )));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.tokens).expect("strings serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, LanguageError> {
        let tokens: Vec<String> =
            serde_json::from_str(s).map_err(|e| LanguageError::Malformed(e.to_string()))?;
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index(&self, token: &str) -> Result<usize, LanguageError> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| LanguageError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, index: usize) -> Result<&str, LanguageError> {
        self.tokens
            .get(index)
            .map(String::as_str)
            .ok_or(LanguageError::UnknownIndex(index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Phase, SplitKind};
    use crate::gridworld::{AgentPose, Heading};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn world(objs: &[((usize, usize), Shape, Color, u8)]) -> WorldState {
        let agent = AgentPose {
            row: 3,
            col: 3,
            heading: Heading::North,
        };
        WorldState::with_objects(
            4,
            agent,
            objs.iter().map(|&(c, s, col, z)| {
                (
                    c,
                    ObjectSpec {
                        shape: s,
                        color: col,
                        size: z,
                    },
                )
            }),
        )
        .unwrap()
    }

    #[test]
    fn small_is_relative() {
        let w = world(&[
            ((0, 0), Shape::Circle, Color::Red, 2),
            ((1, 1), Shape::Circle, Color::Blue, 4),
        ]);
        let cmd = Command::walk_to(Some(SizeWord::Small), None, Shape::Circle);
        assert_eq!(resolve_referent(&cmd, &w), Ok((0, 0)));
    }

    #[test]
    fn singleton_color_shape() {
        let w = world(&[
            ((0, 2), Shape::Square, Color::Red, 3),
            ((1, 1), Shape::Square, Color::Blue, 3),
        ]);
        let cmd = Command::walk_to(None, Some(Color::Red), Shape::Square);
        assert_eq!(resolve_referent(&cmd, &w), Ok((0, 2)));
    }

    #[test]
    fn size_tie_is_ambiguous() {
        let w = world(&[
            ((0, 0), Shape::Circle, Color::Red, 2),
            ((1, 1), Shape::Circle, Color::Blue, 2),
        ]);
        let cmd = Command::walk_to(Some(SizeWord::Small), None, Shape::Circle);
        assert_eq!(
            resolve_referent(&cmd, &w),
            Err(LanguageError::Ambiguous {
                phrase: "small circle".into(),
                count: 2
            })
        );
    }

    #[test]
    fn missing_referent() {
        let w = world(&[((0, 0), Shape::Circle, Color::Red, 2)]);
        let cmd = Command::walk_to(None, None, Shape::Square);
        assert!(matches!(
            resolve_referent(&cmd, &w),
            Err(LanguageError::NoReferent(_))
        ));
    }

    #[test]
    fn referent_class_keys() {
        let c = Command::walk_to(Some(SizeWord::Small), Some(Color::Yellow), Shape::Circle);
        assert_eq!(referent_class(&c), "small yellow circle");
        let c = Command::walk_to(Some(SizeWord::Small), None, Shape::Circle);
        assert_eq!(referent_class(&c), "small circle");
        let c = Command::walk_to(None, None, Shape::Square);
        assert_eq!(referent_class(&c), "square");
    }

    #[test]
    fn parse_round_trip() {
        let v = Vocabulary::commands();
        for size in [None, Some(SizeWord::Small), Some(SizeWord::Big)] {
            for color in [None, Some(Color::Green)] {
                for article in [Article::A, Article::The] {
                    let mut c = Command::walk_to(size, color, Shape::Cylinder);
                    c.article = article;
                    let idx = c.encode(&v).unwrap();
                    let words: Vec<&str> = idx.iter().map(|&i| v.token(i).unwrap()).collect();
                    assert_eq!(Command::parse(&words).unwrap(), c);
                }
            }
        }
        assert!(Command::parse(&["walk", "to", "the", "red"]).is_err());
        assert!(Command::parse(&["walk", "to", "the", "circle", "circle"]).is_err());
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let v = Vocabulary::commands();
        assert_eq!(v.index(PAD).unwrap(), PAD_INDEX);
        assert_eq!(v.index(EOS).unwrap(), EOS_INDEX);
        let back = Vocabulary::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert_eq!(
            Vocabulary::from_json(r#"["walk","<sos>","<eos>"]"#),
            Err(LanguageError::BadReserved)
        );
    }

    #[test]
    fn single_object_world_names_its_shape() {
        let w = world(&[((2, 1), Shape::Cylinder, Color::Green, 1)]);
        let cons = SplitConstraints::new(SplitKind::Random, Phase::Train);
        let (cmd, cell) = sample_command(&mut ChaCha8Rng::seed_from_u64(1), &w, &cons).unwrap();
        assert_eq!(cmd.shape_word, Shape::Cylinder);
        assert_eq!(cmd.size_word, None);
        assert_eq!(cell, (2, 1));
    }

    #[test]
    fn yellow_square_never_named_by_color_in_training() {
        let w = world(&[
            ((0, 0), Shape::Square, Color::Yellow, 1),
            ((0, 3), Shape::Square, Color::Yellow, 3),
        ]);
        let cons = SplitConstraints::new(SplitKind::YellowSquares, Phase::Train);
        let opts = admissible_commands(&w, &cons);
        assert!(!opts.is_empty());
        for (cmd, cell) in opts {
            assert_eq!(cmd.color_word, None);
            assert_eq!(w.object_at(cell).unwrap().color, Color::Yellow);
        }
    }

    #[test]
    fn red_square_target_unsatisfiable_without_one() {
        let w = world(&[
            ((0, 0), Shape::Square, Color::Blue, 1),
            ((0, 3), Shape::Circle, Color::Red, 3),
        ]);
        let cons = SplitConstraints::new(SplitKind::RedSquares, Phase::Test);
        let err = sample_command(&mut ChaCha8Rng::seed_from_u64(1), &w, &cons).unwrap_err();
        assert_eq!(err, LanguageError::Unsatisfiable);
    }

    #[test]
    fn dropping_size_word_keeps_singleton_referent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gen = crate::gridworld::GeneratorConfig {
            d: 5,
            num_objects: 6,
        };
        for _ in 0..300 {
            let w = crate::gridworld::sample_world(&mut rng, &gen).unwrap();
            for obj_cell in w.objects().map(|(c, _)| c).collect::<Vec<_>>() {
                let o = *w.object_at(obj_cell).unwrap();
                for color in [None, Some(o.color)] {
                    let plain = Command::walk_to(None, color, o.shape);
                    if resolve_referent(&plain, &w) == Ok(obj_cell) {
                        for sw in [SizeWord::Small, SizeWord::Big] {
                            let sized = Command::walk_to(Some(sw), color, o.shape);
                            assert_eq!(resolve_referent(&sized, &w), Ok(obj_cell));
                        }
                    }
                }
            }
        }
    }
}
