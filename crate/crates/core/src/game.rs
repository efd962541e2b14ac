//! Typed games and events, consistency checks and derived goal flags.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Version written to the `"v"` key of every game JSONL line.
pub const GAME_SCHEMA_VERSION: u32 = 1;

/// Longest representable game clock: regulation plus a full overtime period.
pub const MAX_GAME_SECONDS: u32 = 80 * 60;

const PERIOD_SECONDS: u32 = 20 * 60;
const REGULATION_SECONDS: u32 = 3 * PERIOD_SECONDS;

#[derive(Debug, Error)]
pub enum GameError {
    #[error("invalid game time {0:?}")]
    InvalidTime(String),
    #[error("game {id} failed validation: {}", join_violations(.violations))]
    Invalid { id: String, violations: Vec<Violation> },
    #[error("unsupported schema version {0}")]
    SchemaVersion(u32),
    #[error("malformed game json: {0}")]
    Json(#[from] serde_json::Error),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Score {
    pub home: u32,
    pub guest: u32,
}

impl Score {
    pub fn new(home: u32, guest: u32) -> Self {
        Score { home, guest }
    }

    pub fn get(self, side: Side) -> u32 {
        match side {
            Side::Home => self.home,
            Side::Guest => self.guest,
        }
    }

    /// Side that is ahead, or `None` for a tie.
    pub fn leader(self) -> Option<Side> {
        use std::cmp::Ordering::*;
        match self.home.cmp(&self.guest) {
            Greater => Some(Side::Home),
            Less => Some(Side::Guest),
            Equal => None,
        }
    }

    pub fn add(self, side: Side) -> Score {
        match side {
            Side::Home => Score::new(self.home + 1, self.guest),
            Side::Guest => Score::new(self.home, self.guest + 1),
        }
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.home, self.guest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Home,
    Guest,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::Home => Side::Guest,
            Side::Guest => Side::Home,
        }
    }
}

/// Game clock position, rendered as `MM.SS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GameTime {
    minutes: u32,
    seconds: u32,
}

impl GameTime {
    pub fn new(minutes: u32, seconds: u32) -> Result<Self, GameError> {
        if seconds > 59 || minutes * 60 + seconds > MAX_GAME_SECONDS {
            return Err(GameError::InvalidTime(format!("{minutes}.{seconds:02}")));
        }
        Ok(GameTime { minutes, seconds })
    }

    pub fn from_total_seconds(total: u32) -> Result<Self, GameError> {
        GameTime::new(total / 60, total % 60)
    }

    pub fn minutes(self) -> u32 {
        self.minutes
    }

    pub fn seconds(self) -> u32 {
        self.seconds
    }

    pub fn total_seconds(self) -> u32 {
        self.minutes * 60 + self.seconds
    }

    /// Period containing this instant. Boundaries are closed above, so 40.00
    /// still belongs to the second period; 00.00 counts as the first.
    pub fn period(self) -> u8 {
        let t = self.total_seconds();
        if t == 0 {
            1
        } else {
            t.div_ceil(PERIOD_SECONDS) as u8
        }
    }

    pub fn is_overtime(self) -> bool {
        self.total_seconds() > REGULATION_SECONDS
    }
}

impl fmt::Display for GameTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}.{:02}", self.minutes, self.seconds)
    }
}

impl FromStr for GameTime {
    type Err = GameError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GameError::InvalidTime(s.to_string());
        let (m, sec) = s.split_once('.').ok_or_else(bad)?;
        if m.is_empty() || m.len() > 2 || sec.len() != 2 {
            return Err(bad());
        }
        if !m.bytes().chain(sec.bytes()).all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        GameTime::new(m.parse().map_err(|_| bad())?, sec.parse().map_err(|_| bad())?)
    }
}

impl Serialize for GameTime {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GameTime {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    Regulation,
    Overtime,
    Shootout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strength {
    Even,
    PowerPlay,
    ShortHanded,
    PenaltyShot,
    EmptyNet,
}

impl Strength {
    pub const ALL: [Strength; 5] = [
        Strength::Even,
        Strength::PowerPlay,
        Strength::ShortHanded,
        Strength::PenaltyShot,
        Strength::EmptyNet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strength::Even => "even",
            Strength::PowerPlay => "power_play",
            Strength::ShortHanded => "short_handed",
            Strength::PenaltyShot => "penalty_shot",
            Strength::EmptyNet => "empty_net",
        }
    }
}

/// Contextual goal flags computed by [`derive_features`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoalFlag {
    Opening,
    Tying,
    GoAhead,
    Deciding,
    Final,
}

impl GoalFlag {
    pub const ALL: [GoalFlag; 5] = [
        GoalFlag::Opening,
        GoalFlag::Tying,
        GoalFlag::GoAhead,
        GoalFlag::Deciding,
        GoalFlag::Final,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GoalFlag::Opening => "opening",
            GoalFlag::Tying => "tying",
            GoalFlag::GoAhead => "go_ahead",
            GoalFlag::Deciding => "deciding",
            GoalFlag::Final => "final",
        }
    }
}

pub const PENALTY_MINUTES: [u32; 6] = [2, 4, 5, 10, 20, 25];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    EndResult {
        home_team: String,
        guest_team: String,
        final_score: Score,
        period_scores: Vec<Score>,
        resolution: Resolution,
    },
    Goal {
        scorer: String,
        assists: Vec<String>,
        team: String,
        resulting_score: Score,
        time: GameTime,
        period: u8,
        strength: Strength,
        #[serde(default)]
        derived: BTreeSet<GoalFlag>,
    },
    Penalty {
        player: String,
        team: String,
        time: GameTime,
        penalty_minutes: u32,
    },
    Save {
        goalie: String,
        team: String,
        count: u32,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    EndResult,
    Goal,
    Penalty,
    Save,
}

impl EventKind {
    pub const ALL: [EventKind; 4] = [
        EventKind::EndResult,
        EventKind::Goal,
        EventKind::Penalty,
        EventKind::Save,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::EndResult => "end_result",
            EventKind::Goal => "goal",
            EventKind::Penalty => "penalty",
            EventKind::Save => "save",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Event {
    pub fn kind(&self) -> EventKind {
        match self {
            Event::EndResult { .. } => EventKind::EndResult,
            Event::Goal { .. } => EventKind::Goal,
            Event::Penalty { .. } => EventKind::Penalty,
            Event::Save { .. } => EventKind::Save,
        }
    }

    pub fn time(&self) -> Option<GameTime> {
        match self {
            Event::Goal { time, .. } | Event::Penalty { time, .. } => Some(*time),
            _ => None,
        }
    }

    pub fn team(&self) -> Option<&str> {
        match self {
            Event::Goal { team, .. } | Event::Penalty { team, .. } | Event::Save { team, .. } => {
                Some(team)
            }
            Event::EndResult { .. } => None,
        }
    }

    pub fn goal_flags(&self) -> Option<&BTreeSet<GoalFlag>> {
        match self {
            Event::Goal { derived, .. } => Some(derived),
            _ => None,
        }
    }
}

/// Teams and final score of a game; the context an isolated event is
/// verbalized against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameContext {
    pub home_team: String,
    pub guest_team: String,
    pub final_score: Score,
}

impl GameContext {
    pub fn side_of(&self, team: &str) -> Option<Side> {
        if team == self.home_team {
            Some(Side::Home)
        } else if team == self.guest_team {
            Some(Side::Guest)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GameRecord {
    pub id: String,
    pub date: NaiveDate,
    pub events: Vec<Event>,
}

#[derive(Serialize, Deserialize)]
struct GameLine {
    v: u32,
    id: String,
    date: NaiveDate,
    events: Vec<Event>,
}

impl GameRecord {
    pub fn end_result(&self) -> Option<&Event> {
        self.events.iter().find(|e| e.kind() == EventKind::EndResult)
    }

    pub fn context(&self) -> Option<GameContext> {
        match self.end_result()? {
            Event::EndResult { home_team, guest_team, final_score, .. } => Some(GameContext {
                home_team: home_team.clone(),
                guest_team: guest_team.clone(),
                final_score: *final_score,
            }),
            _ => None,
        }
    }

    pub fn to_json_line(&self) -> String {
        let line = GameLine {
            v: GAME_SCHEMA_VERSION,
            id: self.id.clone(),
            date: self.date,
            events: self.events.clone(),
        };
        serde_json::to_string(&line).expect("game records always serialize")
    }

    pub fn from_json_line(line: &str) -> Result<Self, GameError> {
        let parsed: GameLine = serde_json::from_str(line)?;
        if parsed.v != GAME_SCHEMA_VERSION {
            return Err(GameError::SchemaVersion(parsed.v));
        }
        Ok(GameRecord { id: parsed.id, date: parsed.date, events: parsed.events })
    }

    /// Copy of the game with all derived goal flags removed.
    pub fn without_derived(&self) -> GameRecord {
        let mut g = self.clone();
        for e in &mut g.events {
            if let Event::Goal { derived, .. } = e {
                derived.clear();
            }
        }
        g
    }
}

/// One broken rule, located at an event index where applicable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub event_index: Option<usize>,
    pub rule: String,
}

impl Violation {
    fn at(index: usize, rule: impl Into<String>) -> Self {
        Violation { event_index: Some(index), rule: rule.into() }
    }

    fn game(rule: impl Into<String>) -> Self {
        Violation { event_index: None, rule: rule.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.event_index {
            Some(i) => write!(f, "{} at event {}", self.rule, i),
            None => f.write_str(&self.rule),
        }
    }
}

/// Checks every game and event invariant. An empty list means the game is
/// consistent.
pub fn validate_game(game: &GameRecord) -> Vec<Violation> {
    let mut out = Vec::new();

    let result_indices: Vec<usize> = game
        .events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind() == EventKind::EndResult)
        .map(|(i, _)| i)
        .collect();
    match result_indices.as_slice() {
        [] => {
            out.push(Violation::game("missing end result"));
            return out;
        }
        [0] => {}
        [i] => out.push(Violation::at(*i, "end result not first")),
        [_, rest @ ..] => {
            for &i in rest {
                out.push(Violation::at(i, "multiple end results"));
            }
        }
    }
    let first = result_indices[0];
    let Event::EndResult { home_team, guest_team, final_score, period_scores, resolution } =
        &game.events[first]
    else {
        unreachable!()
    };
    let ctx = GameContext {
        home_team: home_team.clone(),
        guest_team: guest_team.clone(),
        final_score: *final_score,
    };

    if home_team.trim().is_empty() || guest_team.trim().is_empty() {
        out.push(Violation::at(first, "empty team name"));
    }
    if home_team == guest_team {
        out.push(Violation::at(first, "home and guest teams identical"));
    }
    let expected_periods = if *resolution == Resolution::Regulation { 3 } else { 4 };
    if period_scores.len() != expected_periods {
        out.push(Violation::at(
            first,
            format!(
                "{} period scores for {:?} game, expected {expected_periods}",
                period_scores.len(),
                resolution
            ),
        ));
    }
    let period_sum = period_scores
        .iter()
        .fold(Score::default(), |a, p| Score::new(a.home + p.home, a.guest + p.guest));
    if period_sum != *final_score {
        out.push(Violation::at(
            first,
            format!("period scores sum to {period_sum}, final score is {final_score}"),
        ));
    }
    if *resolution != Resolution::Regulation && final_score.leader().is_none() {
        out.push(Violation::at(first, "tied final score after overtime or shootout"));
    }

    let mut score = Score::default();
    let mut last_time: Option<GameTime> = None;
    let mut last_goal_time: Option<GameTime> = None;
    for (i, e) in game.events.iter().enumerate() {
        if let Some(t) = e.time() {
            if let Some(prev) = last_time {
                if t < prev {
                    out.push(Violation::at(i, "event out of chronological order"));
                }
            }
            last_time = Some(t);
        }
        if let Some(team) = e.team() {
            if ctx.side_of(team).is_none() {
                out.push(Violation::at(i, format!("unknown team {team:?}")));
            }
        }
        match e {
            Event::EndResult { .. } => {}
            Event::Goal { scorer, assists, team, resulting_score, time, period, .. } => {
                if scorer.trim().is_empty() {
                    out.push(Violation::at(i, "empty scorer"));
                }
                if assists.len() > 2 {
                    out.push(Violation::at(i, "more than two assists"));
                }
                if *period != time.period() {
                    out.push(Violation::at(i, format!("period {period} does not match time {time}")));
                }
                let dh = resulting_score.home as i64 - score.home as i64;
                let dg = resulting_score.guest as i64 - score.guest as i64;
                let scoring_side = match (dh, dg) {
                    (1, 0) => Some(Side::Home),
                    (0, 1) => Some(Side::Guest),
                    _ => None,
                };
                match scoring_side {
                    None => out.push(Violation::at(i, "score increment ≠ 1")),
                    Some(side) => {
                        if let Some(team_side) = ctx.side_of(team) {
                            if team_side != side {
                                out.push(Violation::at(i, "score increment on the wrong team"));
                            }
                        }
                    }
                }
                score = *resulting_score;
                last_goal_time = Some(*time);
            }
            Event::Penalty { player, penalty_minutes, .. } => {
                if player.trim().is_empty() {
                    out.push(Violation::at(i, "empty penalized player"));
                }
                if !PENALTY_MINUTES.contains(penalty_minutes) {
                    out.push(Violation::at(i, format!("invalid penalty minutes {penalty_minutes}")));
                }
            }
            Event::Save { goalie, .. } => {
                if goalie.trim().is_empty() {
                    out.push(Violation::at(i, "empty goalie"));
                }
            }
        }
    }

    match resolution {
        Resolution::Regulation | Resolution::Overtime => {
            if score != *final_score {
                out.push(Violation::game(format!(
                    "goals reach {score}, final score is {final_score}"
                )));
            }
        }
        Resolution::Shootout => match final_score.leader() {
            Some(w) if score.add(w) == *final_score => {}
            _ => out.push(Violation::game(format!(
                "shootout final {final_score} is not last goal score {score} plus one"
            ))),
        },
    }
    match resolution {
        Resolution::Regulation => {
            if last_goal_time.is_some_and(|t| t.is_overtime()) {
                out.push(Violation::game("goal after regulation in a regulation game"));
            }
        }
        Resolution::Overtime => {
            if !last_goal_time.is_some_and(|t| t.is_overtime()) {
                out.push(Violation::game("overtime game without an overtime goal"));
            }
        }
        Resolution::Shootout => {}
    }
    out
}

/// Populates goal flags. Rejects games that fail [`validate_game`].
pub fn derive_features(game: &GameRecord) -> Result<GameRecord, GameError> {
    let violations = validate_game(game);
    if !violations.is_empty() {
        return Err(GameError::Invalid { id: game.id.clone(), violations });
    }
    let ctx = game.context().expect("validated game has an end result");
    let resolution = match game.end_result() {
        Some(Event::EndResult { resolution, .. }) => *resolution,
        _ => unreachable!(),
    };
    // Winner of a game decided on the ice; shootouts and ties have none.
    let decided_winner = match resolution {
        Resolution::Shootout => None,
        _ => ctx.final_score.leader(),
    };

    let goal_indices: Vec<usize> = game
        .events
        .iter()
        .enumerate()
        .filter(|(_, e)| e.kind() == EventKind::Goal)
        .map(|(i, _)| i)
        .collect();

    let mut out = game.clone();
    let mut before = Score::default();
    let mut deciding_found = false;
    for (n, &i) in goal_indices.iter().enumerate() {
        let Event::Goal { team, resulting_score, derived, .. } = &mut out.events[i] else {
            unreachable!()
        };
        let side = ctx.side_of(team).expect("validated team");
        let after = *resulting_score;
        derived.clear();
        if n == 0 {
            derived.insert(GoalFlag::Opening);
        }
        if n + 1 == goal_indices.len() {
            derived.insert(GoalFlag::Final);
        }
        if after.home == after.guest {
            derived.insert(GoalFlag::Tying);
        }
        if before.get(side) <= before.get(side.other()) && after.get(side) > after.get(side.other())
        {
            derived.insert(GoalFlag::GoAhead);
        }
        if let Some(w) = decided_winner {
            if !deciding_found && side == w && after.get(w) > ctx.final_score.get(w.other()) {
                derived.insert(GoalFlag::Deciding);
                deciding_found = true;
            }
        }
        before = after;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn goal(team: &str, h: u32, g: u32, mm: u32, ss: u32) -> Event {
        let time = GameTime::new(mm, ss).unwrap();
        Event::Goal {
            scorer: format!("Scorer{h}{g}"),
            assists: vec![],
            team: team.into(),
            resulting_score: Score::new(h, g),
            time,
            period: time.period(),
            strength: Strength::Even,
            derived: BTreeSet::new(),
        }
    }

    fn result(h: u32, g: u32, periods: &[(u32, u32)], resolution: Resolution) -> Event {
        Event::EndResult {
            home_team: "HIFK".into(),
            guest_team: "Blues".into(),
            final_score: Score::new(h, g),
            period_scores: periods.iter().map(|&(a, b)| Score::new(a, b)).collect(),
            resolution,
        }
    }

    fn game(events: Vec<Event>) -> GameRecord {
        GameRecord { id: "g1".into(), date: NaiveDate::from_ymd_opt(2018, 2, 1).unwrap(), events }
    }

    fn flags(g: &GameRecord, i: usize) -> Vec<GoalFlag> {
        g.events[i].goal_flags().unwrap().iter().copied().collect()
    }

    fn two_one() -> GameRecord {
        game(vec![
            result(2, 1, &[(1, 0), (0, 1), (1, 0)], Resolution::Regulation),
            goal("HIFK", 1, 0, 5, 0),
            goal("Blues", 1, 1, 25, 0),
            goal("HIFK", 2, 1, 45, 0),
        ])
    }

    #[test]
    fn time_rendering_and_periods() {
        let t: GameTime = "39.54".parse().unwrap();
        assert_eq!(t.to_string(), "39.54");
        assert_eq!(t.period(), 2);
        assert_eq!("5.07".parse::<GameTime>().unwrap().to_string(), "05.07");
        assert_eq!("40.00".parse::<GameTime>().unwrap().period(), 2);
        assert_eq!("40.01".parse::<GameTime>().unwrap().period(), 3);
        assert_eq!("00.00".parse::<GameTime>().unwrap().period(), 1);
        assert_eq!("65.12".parse::<GameTime>().unwrap().period(), 4);
        assert!("80.01".parse::<GameTime>().is_err());
        assert!("12.60".parse::<GameTime>().is_err());
        assert!("1234".parse::<GameTime>().is_err());
    }

    #[test]
    fn consistent_game_has_no_violations() {
        assert_eq!(validate_game(&two_one()), vec![]);
    }

    #[test]
    fn score_jump_is_reported_at_its_index() {
        let g = game(vec![
            result(3, 0, &[(1, 0), (2, 0), (0, 0)], Resolution::Regulation),
            goal("HIFK", 1, 0, 5, 0),
            goal("HIFK", 3, 0, 25, 0),
        ]);
        let v = validate_game(&g);
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].to_string(), "score increment ≠ 1 at event 2");
    }

    #[test]
    fn duplicate_end_result_is_reported() {
        let mut g = two_one();
        g.events.push(g.events[0].clone());
        let v = validate_game(&g);
        assert!(v.iter().any(|x| x.rule == "multiple end results"), "{v:?}");
    }

    #[test]
    fn flags_for_two_one_game() {
        let g = derive_features(&two_one()).unwrap();
        use GoalFlag::*;
        assert_eq!(flags(&g, 1), vec![Opening, GoAhead]);
        assert_eq!(flags(&g, 2), vec![Tying]);
        assert_eq!(flags(&g, 3), vec![GoAhead, Deciding, Final]);
    }

    #[test]
    fn single_goal_carries_all_four() {
        let g = game(vec![
            result(1, 0, &[(0, 0), (1, 0), (0, 0)], Resolution::Regulation),
            goal("HIFK", 1, 0, 30, 0),
        ]);
        let g = derive_features(&g).unwrap();
        use GoalFlag::*;
        assert_eq!(flags(&g, 1), vec![Opening, GoAhead, Deciding, Final]);
    }

    #[test]
    fn shutout_first_goal_decides() {
        let g = game(vec![
            result(0, 4, &[(0, 3), (0, 0), (0, 1)], Resolution::Regulation),
            goal("Blues", 0, 1, 3, 0),
            goal("Blues", 0, 2, 9, 0),
            goal("Blues", 0, 3, 15, 0),
            goal("Blues", 0, 4, 55, 0),
        ]);
        let g = derive_features(&g).unwrap();
        assert!(flags(&g, 1).contains(&GoalFlag::Deciding));
        for i in 2..5 {
            assert!(!flags(&g, i).contains(&GoalFlag::Deciding));
        }
    }

    #[test]
    fn shootout_has_no_deciding_goal() {
        let g = game(vec![
            result(2, 1, &[(1, 0), (0, 1), (0, 0), (1, 0)], Resolution::Shootout),
            goal("HIFK", 1, 0, 5, 0),
            goal("Blues", 1, 1, 25, 0),
        ]);
        let g = derive_features(&g).unwrap();
        assert!(g.events.iter().all(|e| !e
            .goal_flags()
            .is_some_and(|f| f.contains(&GoalFlag::Deciding))));
    }

    #[test]
    fn overtime_requires_overtime_goal() {
        let g = game(vec![
            result(2, 1, &[(1, 0), (0, 1), (0, 0), (1, 0)], Resolution::Overtime),
            goal("HIFK", 1, 0, 5, 0),
            goal("Blues", 1, 1, 25, 0),
            goal("HIFK", 2, 1, 59, 0),
        ]);
        assert!(!validate_game(&g).is_empty());
    }

    #[test]
    fn derive_rejects_invalid() {
        let mut g = two_one();
        g.events.remove(0);
        assert!(matches!(derive_features(&g), Err(GameError::Invalid { .. })));
    }

    #[test]
    fn json_line_uses_lowercase_enums_and_version() {
        let g = derive_features(&two_one()).unwrap();
        let line = g.to_json_line();
        assert!(line.starts_with("{\"v\":1,"), "{line}");
        assert!(line.contains("\"type\":\"end_result\""));
        assert!(line.contains("\"resolution\":\"regulation\""));
        assert!(line.contains("\"time\":\"45.00\""));
        assert!(line.contains("\"go_ahead\""));
        assert_eq!(GameRecord::from_json_line(&line).unwrap(), g);
        let bumped = line.replacen("\"v\":1", "\"v\":2", 1);
        assert!(matches!(GameRecord::from_json_line(&bumped), Err(GameError::SchemaVersion(2))));
    }
}
