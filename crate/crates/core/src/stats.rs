//! Line-oriented game statistics files and article pairing.
//!
//! One game per file:
//!
//! ```text
//! GAME <id> <YYYY-MM-DD> <home_team> - <guest_team>
//! RESULT <h>-<g> (<p1h>-<p1g>, <p2h>-<p2g>, <p3h>-<p3g>[, <p4h>-<p4g>]) [JA|VL]
//! GOAL <MM.SS> <team> <scorer> [(<assist1>[, <assist2>])] <h>-<g> [YV|AV|RL|TM]
//! PENALTY <MM.SS> <team> <player> <minutes>
//! SAVES <team> <goalie> <count>
//! ```
//!
//! Markers are the Finnish statistics abbreviations: `ja` overtime, `vl`
//! shootout, `yv` power play, `av` short-handed, `rl` penalty shot and `tm`
//! empty net. They are matched case-insensitively. A goal line may also carry
//! `JA`, which marks the game as decided in overtime.

use std::collections::{BTreeSet, HashMap};
use std::sync::LazyLock;

use chrono::{Days, NaiveDate};
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{Event, GameRecord, GameTime, Resolution, Score, Strength};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("line {line}: expected {expected}, found {found:?}")]
    Malformed { line: usize, expected: String, found: String },
    #[error("line {line}: unknown abbreviation {token:?}")]
    UnknownAbbreviation { line: usize, token: String },
    #[error("line {line}: team {team:?} does not match a header team")]
    UnknownTeam { line: usize, team: String },
    #[error("missing {0} line")]
    Missing(&'static str),
}

impl ParseError {
    fn malformed(line: usize, expected: &str, found: &str) -> Self {
        ParseError::Malformed { line, expected: expected.to_string(), found: found.to_string() }
    }
}

#[derive(Debug, Clone)]
pub struct StatsDocument {
    pub raw_text: String,
    pub source_path: String,
}

static GAME_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^GAME\s+(\S+)\s+(\d{4}-\d{2}-\d{2})\s+(.+?)\s+-\s+(.+?)$").unwrap());
static RESULT_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^RESULT\s+(\d+)-(\d+)\s+\(([^)]*)\)(?:\s+(\S+))?$").unwrap()
});
static SCORE_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\d+)-(\d+)$").unwrap());
static GOAL_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^GOAL\s+(\d{1,2}\.\d{2})\s+(.+?)\s+(\d+)-(\d+)((?:\s+[^\s\d]\S*)*)$").unwrap()
});
static PENALTY_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^PENALTY\s+(\d{1,2}\.\d{2})\s+(.+?)\s+(\d+)$").unwrap());
static SAVES_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^SAVES\s+(.+?)\s+(\d+)$").unwrap());
static NAME_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\p{L}[\p{L}\-]*(?: [\p{L}\-]+)*$").unwrap());

enum Marker {
    Strength(Strength),
    Overtime,
    Shootout,
}

fn marker(token: &str) -> Option<Marker> {
    Some(match token.to_lowercase().as_str() {
        "ja" => Marker::Overtime,
        "vl" => Marker::Shootout,
        "yv" => Marker::Strength(Strength::PowerPlay),
        "av" => Marker::Strength(Strength::ShortHanded),
        "rl" => Marker::Strength(Strength::PenaltyShot),
        "tm" => Marker::Strength(Strength::EmptyNet),
        _ => return None,
    })
}

fn strength_marker(s: Strength) -> Option<&'static str> {
    match s {
        Strength::Even => None,
        Strength::PowerPlay => Some("YV"),
        Strength::ShortHanded => Some("AV"),
        Strength::PenaltyShot => Some("RL"),
        Strength::EmptyNet => Some("TM"),
    }
}

fn num(s: &str, line: usize) -> Result<u32, ParseError> {
    s.parse().map_err(|_| ParseError::malformed(line, "a non-negative integer", s))
}

fn time(s: &str, line: usize) -> Result<GameTime, ParseError> {
    s.parse().map_err(|_| ParseError::malformed(line, "a game time MM.SS up to 80.00", s))
}

fn name(s: &str, line: usize, what: &str) -> Result<String, ParseError> {
    let s = s.trim();
    if NAME_RE.is_match(s) {
        Ok(s.to_string())
    } else {
        Err(ParseError::malformed(line, what, s))
    }
}

struct Header {
    id: String,
    date: NaiveDate,
    home: String,
    guest: String,
}

impl Header {
    /// Splits `<team> <rest>` by the longest header team that prefixes it.
    fn split_team<'a>(&self, s: &'a str, line: usize) -> Result<(String, &'a str), ParseError> {
        let mut teams = [&self.home, &self.guest];
        teams.sort_by_key(|t| std::cmp::Reverse(t.len()));
        for team in teams {
            if let Some(rest) = s.strip_prefix(team.as_str()) {
                if rest.starts_with(char::is_whitespace) {
                    return Ok((team.clone(), rest.trim_start()));
                }
            }
        }
        let team = s.split_whitespace().next().unwrap_or("").to_string();
        Err(ParseError::UnknownTeam { line, team })
    }
}

/// Parses a statistics file. Events come back with the end result first,
/// goals and penalties stably ordered by time, then save summaries.
/// Goal flags are left empty; see [`crate::game::derive_features`].
pub fn parse_stats_file(doc: &StatsDocument) -> Result<GameRecord, ParseError> {
    let mut header: Option<Header> = None;
    let mut end_result: Option<(Score, Vec<Score>, Option<Resolution>)> = None;
    let mut timed: Vec<Event> = Vec::new();
    let mut saves: Vec<Event> = Vec::new();
    let mut overtime_goal_marker = false;

    for (idx, raw) in doc.raw_text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let keyword = line.split_whitespace().next().unwrap_or("");
        if keyword != "GAME" && header.is_none() {
            return Err(ParseError::malformed(line_no, "GAME header first", line));
        }
        match keyword {
            "GAME" => {
                if header.is_some() {
                    return Err(ParseError::malformed(line_no, "a single GAME header", line));
                }
                let c = GAME_RE.captures(line).ok_or_else(|| {
                    ParseError::malformed(line_no, "GAME <id> <YYYY-MM-DD> <home> - <guest>", line)
                })?;
                let date = NaiveDate::parse_from_str(&c[2], "%Y-%m-%d")
                    .map_err(|_| ParseError::malformed(line_no, "a calendar date", &c[2]))?;
                header = Some(Header {
                    id: c[1].to_string(),
                    date,
                    home: name(&c[3], line_no, "a team name")?,
                    guest: name(&c[4], line_no, "a team name")?,
                });
            }
            "RESULT" => {
                if end_result.is_some() {
                    return Err(ParseError::malformed(line_no, "a single RESULT line", line));
                }
                let c = RESULT_RE.captures(line).ok_or_else(|| {
                    ParseError::malformed(line_no, "RESULT <h>-<g> (<period scores>) [JA|VL]", line)
                })?;
                let final_score = Score::new(num(&c[1], line_no)?, num(&c[2], line_no)?);
                let mut periods = Vec::new();
                for p in c[3].split(',') {
                    let p = p.trim();
                    let pc = SCORE_RE
                        .captures(p)
                        .ok_or_else(|| ParseError::malformed(line_no, "a period score h-g", p))?;
                    periods.push(Score::new(num(&pc[1], line_no)?, num(&pc[2], line_no)?));
                }
                if !(3..=4).contains(&periods.len()) {
                    return Err(ParseError::malformed(line_no, "3 or 4 period scores", &c[3]));
                }
                let resolution = match c.get(4).map(|m| m.as_str()) {
                    None => None,
                    Some(tok) => match marker(tok) {
                        Some(Marker::Overtime) => Some(Resolution::Overtime),
                        Some(Marker::Shootout) => Some(Resolution::Shootout),
                        Some(Marker::Strength(_)) => {
                            return Err(ParseError::malformed(line_no, "JA or VL", tok))
                        }
                        None => {
                            return Err(ParseError::UnknownAbbreviation {
                                line: line_no,
                                token: tok.to_string(),
                            })
                        }
                    },
                };
                end_result = Some((final_score, periods, resolution));
            }
            "GOAL" => {
                let h = header.as_ref().unwrap();
                let c = GOAL_RE.captures(line).ok_or_else(|| {
                    ParseError::malformed(
                        line_no,
                        "GOAL <MM.SS> <team> <scorer> [(<assists>)] <h>-<g> [marker]",
                        line,
                    )
                })?;
                let t = time(&c[1], line_no)?;
                let (team, rest) = h.split_team(&c[2], line_no)?;
                let (scorer, assists) = match rest.split_once('(') {
                    None => (name(rest, line_no, "a scorer name")?, Vec::new()),
                    Some((s, a)) => {
                        let a = a.strip_suffix(')').ok_or_else(|| {
                            ParseError::malformed(line_no, "closing parenthesis after assists", rest)
                        })?;
                        let assists = a
                            .split(',')
                            .map(|x| name(x, line_no, "an assist name"))
                            .collect::<Result<Vec<_>, _>>()?;
                        if assists.len() > 2 {
                            return Err(ParseError::malformed(line_no, "at most two assists", a));
                        }
                        (name(s, line_no, "a scorer name")?, assists)
                    }
                };
                let score = Score::new(num(&c[3], line_no)?, num(&c[4], line_no)?);
                let mut strength = Strength::Even;
                for tok in c[5].split_whitespace() {
                    match marker(tok) {
                        Some(Marker::Strength(s)) if strength == Strength::Even => strength = s,
                        Some(Marker::Strength(_)) => {
                            return Err(ParseError::malformed(line_no, "one strength marker", tok))
                        }
                        Some(Marker::Overtime) => overtime_goal_marker = true,
                        Some(Marker::Shootout) => {
                            return Err(ParseError::malformed(line_no, "VL only on RESULT", tok))
                        }
                        None => {
                            return Err(ParseError::UnknownAbbreviation {
                                line: line_no,
                                token: tok.to_string(),
                            })
                        }
                    }
                }
                timed.push(Event::Goal {
                    scorer,
                    assists,
                    team,
                    resulting_score: score,
                    time: t,
                    period: t.period(),
                    strength,
                    derived: BTreeSet::new(),
                });
            }
            "PENALTY" => {
                let h = header.as_ref().unwrap();
                let c = PENALTY_RE.captures(line).ok_or_else(|| {
                    ParseError::malformed(line_no, "PENALTY <MM.SS> <team> <player> <minutes>", line)
                })?;
                let t = time(&c[1], line_no)?;
                let (team, rest) = h.split_team(&c[2], line_no)?;
                timed.push(Event::Penalty {
                    player: name(rest, line_no, "a player name")?,
                    team,
                    time: t,
                    penalty_minutes: num(&c[3], line_no)?,
                });
            }
            "SAVES" => {
                let h = header.as_ref().unwrap();
                let c = SAVES_RE.captures(line).ok_or_else(|| {
                    ParseError::malformed(line_no, "SAVES <team> <goalie> <count>", line)
                })?;
                let (team, rest) = h.split_team(&c[1], line_no)?;
                saves.push(Event::Save {
                    goalie: name(rest, line_no, "a goalie name")?,
                    team,
                    count: num(&c[2], line_no)?,
                });
            }
            other => {
                return Err(ParseError::malformed(
                    line_no,
                    "one of GAME, RESULT, GOAL, PENALTY, SAVES",
                    other,
                ))
            }
        }
    }

    let header = header.ok_or(ParseError::Missing("GAME"))?;
    let (final_score, period_scores, marked) = end_result.ok_or(ParseError::Missing("RESULT"))?;
    timed.sort_by_key(|e| e.time());
    let goal_in_overtime = timed
        .iter()
        .any(|e| matches!(e, Event::Goal { time, .. } if time.is_overtime()));
    let resolution = match marked {
        Some(r) => r,
        None if overtime_goal_marker || goal_in_overtime => Resolution::Overtime,
        None => Resolution::Regulation,
    };

    let mut events = Vec::with_capacity(timed.len() + saves.len() + 1);
    events.push(Event::EndResult {
        home_team: header.home,
        guest_team: header.guest,
        final_score,
        period_scores,
        resolution,
    });
    events.extend(timed);
    events.extend(saves);
    Ok(GameRecord { id: header.id, date: header.date, events })
}

/// Renders a game in the statistics grammar; the inverse of
/// [`parse_stats_file`] up to derived flags.
pub fn to_stats_text(game: &GameRecord) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let ctx = game.context();
    let (home, guest) = ctx
        .as_ref()
        .map(|c| (c.home_team.as_str(), c.guest_team.as_str()))
        .unwrap_or(("?", "?"));
    writeln!(out, "GAME {} {} {} - {}", game.id, game.date.format("%Y-%m-%d"), home, guest).unwrap();
    for e in &game.events {
        match e {
            Event::EndResult { final_score, period_scores, resolution, .. } => {
                let periods: Vec<String> = period_scores.iter().map(ToString::to_string).collect();
                write!(out, "RESULT {} ({})", final_score, periods.join(", ")).unwrap();
                match resolution {
                    Resolution::Regulation => {}
                    Resolution::Overtime => out.push_str(" JA"),
                    Resolution::Shootout => out.push_str(" VL"),
                }
                out.push('\n');
            }
            Event::Goal { scorer, assists, team, resulting_score, time, strength, .. } => {
                write!(out, "GOAL {time} {team} {scorer}").unwrap();
                if !assists.is_empty() {
                    write!(out, " ({})", assists.join(", ")).unwrap();
                }
                write!(out, " {resulting_score}").unwrap();
                if let Some(m) = strength_marker(*strength) {
                    write!(out, " {m}").unwrap();
                }
                out.push('\n');
            }
            Event::Penalty { player, team, time, penalty_minutes } => {
                writeln!(out, "PENALTY {time} {team} {player} {penalty_minutes}").unwrap();
            }
            Event::Save { goalie, team, count } => {
                writeln!(out, "SAVES {team} {goalie} {count}").unwrap();
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArticleDocument {
    pub id: String,
    pub raw_text: String,
    pub date: NaiveDate,
    #[serde(default)]
    pub mentioned_teams: BTreeSet<String>,
}

impl ArticleDocument {
    /// Builds an article and extracts which of `known_teams` it mentions.
    pub fn new(id: impl Into<String>, raw_text: impl Into<String>, date: NaiveDate, known_teams: &[String]) -> Self {
        let raw_text = raw_text.into();
        let mentioned_teams = known_teams
            .iter()
            .filter(|t| count_mentions(&raw_text, t) > 0)
            .cloned()
            .collect();
        ArticleDocument { id: id.into(), raw_text, date, mentioned_teams }
    }
}

/// Minimum shared prefix for an inflected word to count as a team mention.
pub const MENTION_PREFIX: usize = 4;

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-' || c == ':'))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

fn word_matches(word: &str, team_word: &str) -> bool {
    let shared = word
        .chars()
        .zip(team_word.chars())
        .take_while(|(a, b)| a == b)
        .count();
    let need = team_word.chars().count().min(MENTION_PREFIX);
    shared >= need
}

/// Counts case-insensitive, inflection-tolerant occurrences of a (possibly
/// multi-word) team name: every name word must share at least
/// [`MENTION_PREFIX`] leading characters (or the whole word, if shorter) with
/// the corresponding text word.
pub fn count_mentions(text: &str, team: &str) -> usize {
    let text_words = words(text);
    let team_words = words(team);
    if team_words.is_empty() || text_words.len() < team_words.len() {
        return 0;
    }
    text_words
        .windows(team_words.len())
        .filter(|w| w.iter().zip(&team_words).all(|(a, b)| word_matches(a, b)))
        .count()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pairing {
    pub pairs: Vec<(String, String)>,
    pub unpaired_games: Vec<String>,
    pub unpaired_articles: Vec<String>,
}

/// True when the article date falls on the game date or the day after.
pub fn date_window(game_date: NaiveDate, article_date: NaiveDate) -> bool {
    article_date == game_date || game_date.checked_add_days(Days::new(1)) == Some(article_date)
}

/// Pairs games with articles by date and team names. Each article goes to the
/// candidate game whose teams it mentions most; ties leave it unpaired.
pub fn pair_articles(games: &[GameRecord], articles: &[ArticleDocument]) -> Pairing {
    let mut out = Pairing::default();
    let mut paired_games: HashMap<&str, usize> = HashMap::new();
    let contexts: Vec<_> = games.iter().map(|g| g.context()).collect();

    for article in articles {
        let mut best: Option<(usize, usize)> = None;
        let mut tie = false;
        for (gi, game) in games.iter().enumerate() {
            let Some(ctx) = &contexts[gi] else { continue };
            if !date_window(game.date, article.date) {
                continue;
            }
            let h = count_mentions(&article.raw_text, &ctx.home_team);
            let g = count_mentions(&article.raw_text, &ctx.guest_team);
            if h == 0 || g == 0 {
                continue;
            }
            let total = h + g;
            match best {
                Some((_, b)) if b > total => {}
                Some((_, b)) if b == total => tie = true,
                _ => {
                    best = Some((gi, total));
                    tie = false;
                }
            }
        }
        match best {
            Some((gi, _)) if !tie => {
                *paired_games.entry(games[gi].id.as_str()).or_default() += 1;
                out.pairs.push((games[gi].id.clone(), article.id.clone()));
            }
            _ => out.unpaired_articles.push(article.id.clone()),
        }
    }
    out.unpaired_games = games
        .iter()
        .filter(|g| !paired_games.contains_key(g.id.as_str()))
        .map(|g| g.id.clone())
        .collect();
    out
}
