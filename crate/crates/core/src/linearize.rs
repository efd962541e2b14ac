//! Event linearization, target tokenization and length buckets.
//!
//! Attribute order is global and fixed: `length`, `type`, then the
//! event-specific fields.
//!
//! | event      | fields after `type`                                                      |
//! |------------|--------------------------------------------------------------------------|
//! | end result | `home`, `guest`, `score`, `periods`, `resolution`*                       |
//! | goal       | `scorer`, `assists`*, `team`, `side`, `score`, `time`, `period`, `strength`, `flag`* |
//! | penalty    | `player`, `team`, `side`, `time`, `period`, `minutes`                    |
//! | save       | `goalie`, `team`, `side`, `saves`                                        |
//!
//! Starred fields are omitted when empty (regulation result, no assists, no
//! flags). Copyable values (names, numbers, times, scores) are emitted as raw
//! tokens between `<tag>` and `</tag>`; categorical hints are single tokens of
//! the form `<tag>value</tag>`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::game::{Event, GameContext, Resolution, Score, Side};
use crate::Flagged;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthBucket {
    Short,
    Medium,
    Long,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 3] = [LengthBucket::Short, LengthBucket::Medium, LengthBucket::Long];

    pub fn as_str(self) -> &'static str {
        match self {
            LengthBucket::Short => "short",
            LengthBucket::Medium => "medium",
            LengthBucket::Long => "long",
        }
    }
}

impl fmt::Display for LengthBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A token sequence; a plain `Vec<String>` with tag-aware helpers.
pub type TokenSequence = Vec<String>;

fn hint(out: &mut TokenSequence, tag: &str, value: &str) {
    out.push(format!("<{tag}>{value}</{tag}>"));
}

fn field<'a>(out: &mut TokenSequence, tag: &str, values: impl IntoIterator<Item = &'a str>) {
    out.push(format!("<{tag}>"));
    out.extend(values.into_iter().map(str::to_string));
    out.push(format!("</{tag}>"));
}

fn name_tokens(name: &str) -> impl Iterator<Item = &str> {
    name.split_whitespace()
}

fn score_tokens(s: Score) -> [String; 3] {
    [s.home.to_string(), "-".to_string(), s.guest.to_string()]
}

fn side_str(side: Option<Side>) -> &'static str {
    match side {
        Some(Side::Home) => "home",
        Some(Side::Guest) => "guest",
        None => "unknown",
    }
}

/// Serializes one event as a tagged token sequence.
pub fn linearize_event(event: &Event, context: &GameContext, bucket: LengthBucket) -> TokenSequence {
    let mut out = TokenSequence::new();
    hint(&mut out, "length", bucket.as_str());
    match event {
        Event::EndResult { home_team, guest_team, final_score, period_scores, resolution } => {
            hint(&mut out, "type", "result");
            field(&mut out, "home", name_tokens(home_team));
            field(&mut out, "guest", name_tokens(guest_team));
            let score = score_tokens(*final_score);
            field(&mut out, "score", score.iter().map(String::as_str));
            let mut periods = vec!["(".to_string()];
            for (i, p) in period_scores.iter().enumerate() {
                if i > 0 {
                    periods.push(",".into());
                }
                periods.extend(score_tokens(*p));
            }
            periods.push(")".into());
            field(&mut out, "periods", periods.iter().map(String::as_str));
            match resolution {
                Resolution::Regulation => {}
                Resolution::Overtime => hint(&mut out, "resolution", "overtime"),
                Resolution::Shootout => hint(&mut out, "resolution", "shootout"),
            }
        }
        Event::Goal { scorer, assists, team, resulting_score, time, period, strength, derived } => {
            hint(&mut out, "type", "goal");
            field(&mut out, "scorer", name_tokens(scorer));
            if !assists.is_empty() {
                let mut a = Vec::new();
                for (i, name) in assists.iter().enumerate() {
                    if i > 0 {
                        a.push(",");
                    }
                    a.extend(name_tokens(name));
                }
                field(&mut out, "assists", a);
            }
            field(&mut out, "team", name_tokens(team));
            hint(&mut out, "side", side_str(context.side_of(team)));
            let score = score_tokens(*resulting_score);
            field(&mut out, "score", score.iter().map(String::as_str));
            field(&mut out, "time", [time.to_string().as_str()]);
            hint(&mut out, "period", &period.to_string());
            hint(&mut out, "strength", strength.as_str());
            for flag in derived {
                hint(&mut out, "flag", flag.as_str());
            }
        }
        Event::Penalty { player, team, time, penalty_minutes } => {
            hint(&mut out, "type", "penalty");
            field(&mut out, "player", name_tokens(player));
            field(&mut out, "team", name_tokens(team));
            hint(&mut out, "side", side_str(context.side_of(team)));
            field(&mut out, "time", [time.to_string().as_str()]);
            hint(&mut out, "period", &time.period().to_string());
            field(&mut out, "minutes", [penalty_minutes.to_string().as_str()]);
        }
        Event::Save { goalie, team, count } => {
            hint(&mut out, "type", "saves");
            field(&mut out, "goalie", name_tokens(goalie));
            field(&mut out, "team", name_tokens(team));
            hint(&mut out, "side", side_str(context.side_of(team)));
            field(&mut out, "saves", [count.to_string().as_str()]);
        }
    }
    out
}

/// True for tag tokens of either form (`<x>`, `</x>` or `<x>value</x>`).
pub fn is_tag(token: &str) -> bool {
    token.starts_with('<') && token.ends_with('>') && token.len() > 2
}

/// Checks that open/close tags pair up and every token is non-empty.
pub fn is_well_formed(tokens: &[String]) -> bool {
    let mut stack: Vec<&str> = Vec::new();
    for t in tokens {
        if t.is_empty() {
            return false;
        }
        if !is_tag(t) {
            continue;
        }
        let inner = &t[1..t.len() - 1];
        if let Some(close) = inner.strip_prefix('/') {
            if stack.pop() != Some(close) {
                return false;
            }
        } else if let Some((open, rest)) = inner.split_once('>') {
            // Single-token hint: `<tag>value</tag>`.
            if rest.strip_suffix(open).and_then(|r| r.rsplit_once("</")).is_none() {
                return false;
            }
        } else {
            stack.push(inner);
        }
    }
    stack.is_empty()
}

/// Corpus-wide tertile thresholds over target token counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBuckets {
    /// Largest count bucketed as short.
    pub short_max: usize,
    /// Largest count bucketed as medium.
    pub medium_max: usize,
}

impl LengthBuckets {
    /// Boundary values resolve to the lower bucket.
    pub fn bucket(&self, count: usize) -> LengthBucket {
        if count <= self.short_max {
            LengthBucket::Short
        } else if count <= self.medium_max {
            LengthBucket::Medium
        } else {
            LengthBucket::Long
        }
    }
}

/// Chooses thresholds so the sorted counts split into three contiguous groups
/// of sizes `⌊n/3⌋`, `⌊2n/3⌋ − ⌊n/3⌋` and the rest, so that ties aside the
/// groups differ by at most one.
///
/// Fewer than three counts puts everything in `medium`; a single distinct
/// count puts everything in `short`. Both cases are flagged.
pub fn assign_length_buckets(counts: &[usize]) -> Flagged<LengthBuckets> {
    if counts.len() < 3 {
        return Flagged::flagged(
            LengthBuckets { short_max: 0, medium_max: usize::MAX },
            "fewer than 3 targets: every item is medium",
        );
    }
    let mut sorted = counts.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let b = LengthBuckets { short_max: sorted[n / 3 - 1], medium_max: sorted[2 * n / 3 - 1] };
    if sorted[0] == sorted[n - 1] {
        Flagged::flagged(b, "all counts equal: every item is short")
    } else {
        Flagged::ok(b)
    }
}

/// Same as [`assign_length_buckets`] over token sequences.
pub fn assign_length_buckets_for(train_targets: &[TokenSequence]) -> Flagged<LengthBuckets> {
    let counts: Vec<usize> = train_targets.iter().map(Vec::len).collect();
    assign_length_buckets(&counts)
}

const OPENING: &[char] = &['(', '[', '"', '«'];
const CLOSING: &[char] = &['.', ',', ';', ':', '!', '?', ')', ']', '"', '»'];
const DASHES: &[char] = &['-', '–', '—', '−'];

fn is_score_dash_split(word: &str) -> Option<(&str, &str)> {
    let (pos, dash) = word.char_indices().find(|(_, c)| DASHES.contains(c))?;
    let (left, right) = (&word[..pos], &word[pos + dash.len_utf8()..]);
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    (digits(left) && digits(right)).then_some((left, right))
}

fn push_core(out: &mut TokenSequence, core: &str) {
    if core.is_empty() {
        return;
    }
    if let Some((l, r)) = is_score_dash_split(core) {
        out.push(l.to_string());
        out.push("-".to_string());
        out.push(r.to_string());
        return;
    }
    // `HIFK:n` style case suffixes become `HIFK` `:n`.
    if let Some(pos) = core.find(':') {
        let (stem, suffix) = core.split_at(pos);
        if !stem.is_empty() && suffix.len() > 1 && suffix[1..].chars().all(char::is_alphabetic) {
            out.push(stem.to_string());
            out.push(suffix.to_string());
            return;
        }
    }
    out.push(core.to_string());
}

/// Whitespace-and-punctuation tokenization.
///
/// Rules, applied to each whitespace-separated chunk:
/// 1. leading `( [ " «` split off one character at a time;
/// 2. trailing `. , ; : ! ? ) ] " »` split off one character at a time;
/// 3. `digits DASH digits` (hyphen, en dash, em dash or minus) becomes three
///    tokens with an ASCII `-` in the middle;
/// 4. `stem:suffix` with an alphabetic suffix becomes `stem` `:suffix`.
///
/// Periods inside a chunk stay attached, so `1.2.2018` and `39.54` are one
/// token each.
pub fn tokenize_target(text: &str) -> TokenSequence {
    let mut out = TokenSequence::new();
    for chunk in text.split_whitespace() {
        let mut rest = chunk;
        while let Some(c) = rest.chars().next().filter(|c| OPENING.contains(c)) {
            out.push(c.to_string());
            rest = &rest[c.len_utf8()..];
        }
        let mut trailing = Vec::new();
        while let Some(c) = rest.chars().next_back().filter(|c| CLOSING.contains(c)) {
            trailing.push(c.to_string());
            rest = &rest[..rest.len() - c.len_utf8()];
        }
        push_core(&mut out, rest);
        out.extend(trailing.into_iter().rev());
    }
    out
}

fn ends_with_digit(s: &str) -> bool {
    s.chars().next_back().is_some_and(|c| c.is_ascii_digit())
}

fn starts_with_digit(s: &str) -> bool {
    s.chars().next().is_some_and(|c| c.is_ascii_digit())
}

/// Rule-based inverse of [`tokenize_target`]:
/// no space before `, . : ; ! ? ) ]` or a `:suffix` token, no space after
/// `( [`, and `digit - digit` is rejoined as `digit-digit`.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let toks: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let mut out = String::new();
    for (i, tok) in toks.iter().enumerate() {
        if i > 0 {
            let prev = toks[i - 1];
            let joined_dash = |j: usize| {
                toks[j] == "-"
                    && j > 0
                    && j + 1 < toks.len()
                    && ends_with_digit(toks[j - 1])
                    && starts_with_digit(toks[j + 1])
            };
            let no_space = matches!(*tok, "," | "." | ":" | ";" | "!" | "?" | ")" | "]")
                || (tok.starts_with(':') && tok.len() > 1)
                || matches!(prev, "(" | "[")
                || joined_dash(i)
                || joined_dash(i - 1);
            if !no_space {
                out.push(' ');
            }
        }
        out.push_str(tok);
    }
    out
}
