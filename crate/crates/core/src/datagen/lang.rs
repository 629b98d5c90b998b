//! Templated instructions over a closed vocabulary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::worldsim::{Color, Landmark, Shape, World};

/// Closed vocabulary. Index 0 is reserved for unknown words.
pub const VOCAB: &[&str] = &[
    "<unk>", "go", "to", "the", "red", "green", "blue", "yellow", "ball", "box", "while",
    "staying", "close", "wall", "keeping", "away", "from", "passing", "between", "and",
];
/// Longest label the templates can produce.
pub const MAX_LABEL_LEN: usize = 16;

pub fn word_id(w: &str) -> usize {
    VOCAB.iter().position(|v| *v == w).unwrap_or(0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClauseKind {
    Wall,
    KeepAway,
    Between,
}

impl ClauseKind {
    pub const ALL: [ClauseKind; 3] = [ClauseKind::Wall, ClauseKind::KeepAway, ClauseKind::Between];

    pub fn id(self) -> usize {
        match self {
            ClauseKind::Wall => 0,
            ClauseKind::KeepAway => 1,
            ClauseKind::Between => 2,
        }
    }
}

/// Behavior clause with the landmark ids it references.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Clause {
    Wall,
    KeepAway { landmark: usize },
    Between { a: usize, b: usize },
}

impl Clause {
    pub fn kind(&self) -> ClauseKind {
        match self {
            Clause::Wall => ClauseKind::Wall,
            Clause::KeepAway { .. } => ClauseKind::KeepAway,
            Clause::Between { .. } => ClauseKind::Between,
        }
    }

    pub fn landmarks(&self) -> Vec<usize> {
        match *self {
            Clause::Wall => vec![],
            Clause::KeepAway { landmark } => vec![landmark],
            Clause::Between { a, b } => vec![a, b],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LangLabel {
    pub tokens: Vec<String>,
    pub template: usize,
    /// Target first, then any clause landmarks.
    pub landmarks: Vec<usize>,
    pub clause: Option<ClauseKind>,
}

impl LangLabel {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn token_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|t| word_id(t)).collect()
    }

    pub fn target(&self) -> usize {
        self.landmarks[0]
    }
}

fn push_ref(out: &mut Vec<String>, l: &Landmark) {
    out.push("the".into());
    out.push(l.color.word().into());
    out.push(l.shape.word().into());
}

fn find(world: &World, id: usize) -> Result<&Landmark> {
    world
        .landmark(id)
        .ok_or_else(|| Error::Invalid(format!("landmark {id} not in world {}", world.seed)))
}

pub fn make_language_label(
    world: &World,
    target: usize,
    clause: Option<Clause>,
) -> Result<LangLabel> {
    let t = find(world, target)?;
    let mut tokens: Vec<String> = vec!["go".into(), "to".into()];
    push_ref(&mut tokens, t);
    let mut landmarks = vec![target];
    match clause {
        None => {}
        Some(Clause::Wall) => {
            tokens.extend(["while", "staying", "close", "to", "the", "wall"].map(String::from));
        }
        Some(Clause::KeepAway { landmark }) => {
            tokens.extend(["while", "keeping", "away", "from"].map(String::from));
            push_ref(&mut tokens, find(world, landmark)?);
            landmarks.push(landmark);
        }
        Some(Clause::Between { a, b }) => {
            tokens.push("passing".into());
            tokens.push("between".into());
            push_ref(&mut tokens, find(world, a)?);
            tokens.push("and".into());
            push_ref(&mut tokens, find(world, b)?);
            landmarks.extend([a, b]);
        }
    }
    Ok(LangLabel {
        tokens,
        template: 0,
        landmarks,
        clause: clause.map(|c| c.kind()),
    })
}

/// Parsed form of a label: the goal kind plus at most one clause, with
/// landmarks given by their (color, shape).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedLabel {
    pub goal: (Color, Shape),
    pub clause: Option<ParsedClause>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ParsedClause {
    Wall,
    KeepAway((Color, Shape)),
    Between((Color, Shape), (Color, Shape)),
}

fn parse_color(w: &str) -> Option<Color> {
    Color::ALL.into_iter().find(|c| c.word() == w)
}

fn parse_shape(w: &str) -> Option<Shape> {
    Shape::ALL.into_iter().find(|s| s.word() == w)
}

/// Consumes "the <color> <shape>".
fn parse_ref(words: &[&str]) -> Option<(Color, Shape)> {
    match words {
        ["the", c, s] => Some((parse_color(c)?, parse_shape(s)?)),
        _ => None,
    }
}

pub fn parse_label(text: &str) -> Result<ParsedLabel> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let bad = || Error::Invalid(format!("unparseable instruction: {text:?}"));
    if words.len() < 5 || words[..2] != ["go", "to"] {
        return Err(bad());
    }
    let goal = parse_ref(&words[2..5]).ok_or_else(bad)?;
    let rest = &words[5..];
    let clause = match rest {
        [] => None,
        ["while", "staying", "close", "to", "the", "wall"] => Some(ParsedClause::Wall),
        ["while", "keeping", "away", "from", r @ ..] => {
            Some(ParsedClause::KeepAway(parse_ref(r).ok_or_else(bad)?))
        }
        ["passing", "between", a0, a1, a2, "and", b @ ..] => Some(ParsedClause::Between(
            parse_ref(&[a0, a1, a2]).ok_or_else(bad)?,
            parse_ref(b).ok_or_else(bad)?,
        )),
        _ => return Err(bad()),
    };
    Ok(ParsedLabel { goal, clause })
}

/// Resolves a parsed label against a world: target id and clause.
pub fn resolve_label(world: &World, parsed: &ParsedLabel) -> Result<(usize, Option<Clause>)> {
    let id = |k: (Color, Shape)| {
        world.find_landmark(k.0, k.1).map(|l| l.id).ok_or_else(|| {
            Error::Invalid(format!(
                "no {} {} in world {}",
                k.0.word(),
                k.1.word(),
                world.seed
            ))
        })
    };
    let clause = match &parsed.clause {
        None => None,
        Some(ParsedClause::Wall) => Some(Clause::Wall),
        Some(ParsedClause::KeepAway(k)) => Some(Clause::KeepAway { landmark: id(*k)? }),
        Some(ParsedClause::Between(a, b)) => Some(Clause::Between {
            a: id(*a)?,
            b: id(*b)?,
        }),
    };
    Ok((id(parsed.goal)?, clause))
}
