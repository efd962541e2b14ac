//! Deterministic synthetic corpus: simulated games, template references,
//! gold selections and game-level splits.
//!
//! Every template family has a short, a medium and a long surface variant.
//! Short variants are always 6 tokens, medium ones 12 and long ones at least
//! 19, so the corpus length buckets line up with the variants. The variant
//! of an event is picked by a hash of its fields.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use chrono::{Days, NaiveDate};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{
    derive_features, Event, GameContext, GameRecord, GameTime, GoalFlag, Resolution, Score, Side, Strength,
};
use crate::linearize::{
    assign_length_buckets, linearize_event, tokenize_target, LengthBucket, LengthBuckets, TokenSequence,
};
use crate::select::Label;

pub const LIIGA_TEAMS: [&str; 15] = [
    "HIFK", "HPK", "Ilves", "JYP", "Jukurit", "KalPa", "KooKoo", "Kärpät", "Lukko", "Pelicans", "SaiPa", "Sport",
    "Tappara", "TPS", "Ässät",
];

const NAME_STEMS: [&str; 24] = [
    "Aho", "Hei", "Hyvö", "Kallio", "Kivi", "Koski", "Lahti", "Laine", "Lehto", "Lind", "Mäki", "Niemi", "Nurmi",
    "Oja", "Paju", "Rauta", "Saari", "Salo", "Sirola", "Tikka", "Toivo", "Vaara", "Vilja", "Virta",
];
const NAME_ENDINGS: [&str; 16] = [
    "nen", "la", "mäki", "salo", "koski", "vaara", "lainen", "niemi", "oja", "järvi", "lahti", "puro", "rinne",
    "harju", "kangas", "aho",
];

/// The 384 generated surnames, in a fixed order.
pub fn default_name_pool() -> Vec<String> {
    let mut out = Vec::with_capacity(NAME_STEMS.len() * NAME_ENDINGS.len());
    for stem in NAME_STEMS {
        for ending in NAME_ENDINGS {
            out.push(format!("{stem}{ending}"));
        }
    }
    out
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("simulated game {id} is inconsistent: {message}")]
    Simulation { id: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_games: usize,
    pub seed: u64,
    pub teams: Vec<String>,
    pub player_pool: Vec<String>,
    /// Names reserved for validation and test games.
    pub held_out_names: usize,
    /// Chance that a player slot in a validation or test game is filled
    /// with a held-out name.
    pub held_out_rate: f64,
    pub roster_skaters: usize,
    pub mean_goals: f64,
    pub home_goal_share: f64,
    pub mean_penalties: f64,
    /// Chance that a game tied after regulation is decided in overtime
    /// rather than a shootout.
    pub overtime_goal_prob: f64,
    pub power_play_prob: f64,
    pub short_handed_prob: f64,
    pub empty_net_prob: f64,
    pub penalty_shot_prob: f64,
    pub mean_saves: f64,
    pub first_date: NaiveDate,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_games: 2000,
            seed: 2018,
            teams: LIIGA_TEAMS.iter().map(|s| s.to_string()).collect(),
            player_pool: default_name_pool(),
            held_out_names: 40,
            held_out_rate: 0.25,
            roster_skaters: 20,
            mean_goals: 5.5,
            home_goal_share: 0.52,
            mean_penalties: 7.0,
            overtime_goal_prob: 0.6,
            power_play_prob: 0.18,
            short_handed_prob: 0.03,
            empty_net_prob: 0.04,
            penalty_shot_prob: 0.01,
            mean_saves: 26.0,
            first_date: NaiveDate::from_ymd_opt(2018, 9, 1).unwrap(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n_games == 0 {
            return bad("n_games must be positive".into());
        }
        if self.teams.len() < 2 {
            return bad("need at least two teams".into());
        }
        let mut teams = self.teams.clone();
        teams.sort();
        teams.dedup();
        if teams.len() != self.teams.len() {
            return bad("duplicate team names".into());
        }
        let mut names = self.player_pool.clone();
        names.sort();
        names.dedup();
        if names.len() != self.player_pool.len() {
            return bad("duplicate player names".into());
        }
        if self.player_pool.iter().chain(&self.teams).any(|n| n.trim().is_empty() || n.contains(char::is_whitespace)) {
            return bad("names must be single nonempty words".into());
        }
        let needed = self.held_out_names + self.teams.len() * (self.roster_skaters + 2);
        if self.player_pool.len() < needed || self.held_out_names == 0 || self.roster_skaters < 3 {
            return bad(format!("player pool of {} cannot fill rosters and held-out set ({needed})", self.player_pool.len()));
        }
        let probs = [
            ("held_out_rate", self.held_out_rate),
            ("home_goal_share", self.home_goal_share),
            ("overtime_goal_prob", self.overtime_goal_prob),
            ("power_play_prob", self.power_play_prob),
            ("short_handed_prob", self.short_handed_prob),
            ("empty_net_prob", self.empty_net_prob),
            ("penalty_shot_prob", self.penalty_shot_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        if self.power_play_prob + self.short_handed_prob + self.empty_net_prob + self.penalty_shot_prob > 1.0 {
            return bad("strength probabilities sum above 1".into());
        }
        for (name, m) in [("mean_goals", self.mean_goals), ("mean_penalties", self.mean_penalties), ("mean_saves", self.mean_saves)] {
            if !(m.is_finite() && m > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// Held-out names: the last `held_out_names` entries of the pool.
    pub fn held_out(&self) -> &[String] {
        &self.player_pool[self.player_pool.len() - self.held_out_names..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// Split of every game index: a seeded shuffle cut 80/10/10.
pub fn assign_splits(seed: u64, n_games: usize) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n_games).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    order.shuffle(&mut rng);
    let n_train = n_games * 8 / 10;
    let n_valid = n_games / 10;
    let mut out = vec![Split::Test; n_games];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    out
}

struct Roster {
    skaters: Vec<String>,
    goalies: Vec<String>,
}

fn rosters(config: &SynthConfig) -> Vec<Roster> {
    let available = &config.player_pool[..config.player_pool.len() - config.held_out_names];
    let mut names: Vec<&String> = available.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(u64::MAX - 1);
    names.shuffle(&mut rng);
    let per_team = config.roster_skaters + 2;
    names
        .chunks(per_team)
        .take(config.teams.len())
        .map(|c| Roster {
            skaters: c[..config.roster_skaters].iter().map(|s| s.to_string()).collect(),
            goalies: c[config.roster_skaters..].iter().map(|s| s.to_string()).collect(),
        })
        .collect()
}

struct Simulator<'a> {
    config: &'a SynthConfig,
    rosters: Vec<Roster>,
    splits: Vec<Split>,
}

impl<'a> Simulator<'a> {
    fn new(config: &'a SynthConfig) -> Self {
        Simulator { config, rosters: rosters(config), splits: assign_splits(config.seed, config.n_games) }
    }

    fn simulate(&self, index: usize) -> Result<GameRecord, SynthError> {
        let cfg = self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(index as u64);
        let id = format!("synth-{index:05}");
        let unseen = self.splits.get(index).is_some_and(|&s| s != Split::Train);

        let home = rng.random_range(0..cfg.teams.len());
        let mut guest = rng.random_range(0..cfg.teams.len() - 1);
        if guest >= home {
            guest += 1;
        }
        let team_idx = |side: Side| if side == Side::Home { home } else { guest };
        let team_name = |side: Side| cfg.teams[team_idx(side)].clone();
        let held_out = cfg.held_out();
        let player = |rng: &mut ChaCha8Rng, side: Side, exclude: &[String]| -> String {
            loop {
                let name = if unseen && rng.random_bool(cfg.held_out_rate) {
                    held_out.choose(rng).unwrap().clone()
                } else {
                    self.rosters[team_idx(side)].skaters.choose(rng).unwrap().clone()
                };
                if !exclude.contains(&name) {
                    return name;
                }
            }
        };

        let goals_dist = Poisson::new(cfg.mean_goals).unwrap();
        let n_goals = goals_dist.sample(&mut rng) as usize;
        let mut goal_seconds: Vec<u32> = Vec::with_capacity(n_goals);
        while goal_seconds.len() < n_goals.min(200) {
            let t = rng.random_range(1..3600);
            if !goal_seconds.contains(&t) {
                goal_seconds.push(t);
            }
        }
        goal_seconds.sort_unstable();
        let mut sides: Vec<Side> = goal_seconds
            .iter()
            .map(|_| if rng.random_bool(cfg.home_goal_share) { Side::Home } else { Side::Guest })
            .collect();
        let regulation_score = sides.iter().fold(Score::default(), |s, &side| s.add(side));
        let mut resolution = Resolution::Regulation;
        let mut shootout_winner = None;
        if regulation_score.leader().is_none() {
            let winner = if rng.random_bool(0.5) { Side::Home } else { Side::Guest };
            if rng.random_bool(cfg.overtime_goal_prob) {
                resolution = Resolution::Overtime;
                goal_seconds.push(3600 + rng.random_range(1..=300));
                sides.push(winner);
            } else {
                resolution = Resolution::Shootout;
                shootout_winner = Some(winner);
            }
        }
        let game_end = if resolution == Resolution::Regulation { 3600 } else { *goal_seconds.last().unwrap_or(&3600) };

        let mut timed: Vec<(u32, Event)> = Vec::new();
        let mut score = Score::default();
        let mut periods = vec![Score::default(); if resolution == Resolution::Regulation { 3 } else { 4 }];
        for (&t, &side) in goal_seconds.iter().zip(&sides) {
            score = score.add(side);
            let time = GameTime::from_total_seconds(t).expect("goal time in range");
            let p = time.period();
            periods[p as usize - 1] = periods[p as usize - 1].add(side);
            let u: f64 = rng.random();
            let c = cfg;
            let strength = if u < c.power_play_prob {
                Strength::PowerPlay
            } else if u < c.power_play_prob + c.short_handed_prob {
                Strength::ShortHanded
            } else if u < c.power_play_prob + c.short_handed_prob + c.empty_net_prob {
                Strength::EmptyNet
            } else if u < c.power_play_prob + c.short_handed_prob + c.empty_net_prob + c.penalty_shot_prob {
                Strength::PenaltyShot
            } else {
                Strength::Even
            };
            let scorer = player(&mut rng, side, &[]);
            let n_assists = if strength == Strength::PenaltyShot {
                0
            } else {
                [0, 1, 1, 2, 2, 2, 2].choose(&mut rng).copied().unwrap()
            };
            let mut assists: Vec<String> = Vec::new();
            for _ in 0..n_assists {
                let mut exclude = assists.clone();
                exclude.push(scorer.clone());
                assists.push(player(&mut rng, side, &exclude));
            }
            timed.push((
                t,
                Event::Goal {
                    scorer,
                    assists,
                    team: team_name(side),
                    resulting_score: score,
                    time,
                    period: p,
                    strength,
                    derived: Default::default(),
                },
            ));
        }
        if let Some(w) = shootout_winner {
            periods[3] = periods[3].add(w);
        }

        let n_penalties = Poisson::new(cfg.mean_penalties).unwrap().sample(&mut rng) as usize;
        for _ in 0..n_penalties {
            let side = if rng.random_bool(0.5) { Side::Home } else { Side::Guest };
            let t = rng.random_range(1..game_end.max(2));
            let minutes = *[2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 2, 4, 5, 10, 10, 20, 25]
                .choose(&mut rng)
                .unwrap();
            let who = player(&mut rng, side, &[]);
            timed.push((
                t,
                Event::Penalty {
                    player: who,
                    team: team_name(side),
                    time: GameTime::from_total_seconds(t).expect("penalty time in range"),
                    penalty_minutes: minutes,
                },
            ));
        }
        timed.sort_by_key(|(t, _)| *t);

        let final_score = match shootout_winner {
            Some(w) => score.add(w),
            None => score,
        };
        let mut events = vec![Event::EndResult {
            home_team: team_name(Side::Home),
            guest_team: team_name(Side::Guest),
            final_score,
            period_scores: periods,
            resolution,
        }];
        events.extend(timed.into_iter().map(|(_, e)| e));
        let saves = Normal::new(cfg.mean_saves, 6.0).unwrap();
        for side in [Side::Home, Side::Guest] {
            let goalie = if unseen && rng.random_bool(cfg.held_out_rate) {
                held_out.choose(&mut rng).unwrap().clone()
            } else {
                self.rosters[team_idx(side)].goalies.choose(&mut rng).unwrap().clone()
            };
            let count = saves.sample(&mut rng).round().clamp(5.0, 60.0) as u32;
            events.push(Event::Save { goalie, team: team_name(side), count });
        }

        let date = cfg.first_date.checked_add_days(Days::new(index as u64 / 7)).unwrap_or(cfg.first_date);
        let game = GameRecord { id: id.clone(), date, events };
        derive_features(&game).map_err(|e| SynthError::Simulation { id, message: e.to_string() })
    }
}

/// One simulated game with derived flags. Deterministic in
/// `(config.seed, index)`.
pub fn simulate_game(config: &SynthConfig, index: usize) -> Result<GameRecord, SynthError> {
    config.validate()?;
    Simulator::new(config).simulate(index)
}

/// Selection rule: the end result, every flagged goal, penalties of ten
/// minutes or more and save counts of thirty or more.
pub fn gold_select(game: &GameRecord) -> Vec<Label> {
    game.events
        .iter()
        .map(|e| {
            Label::from_bool(match e {
                Event::EndResult { .. } => true,
                Event::Goal { derived, .. } => !derived.is_empty(),
                Event::Penalty { penalty_minutes, .. } => *penalty_minutes >= 10,
                Event::Save { count, .. } => *count >= 30,
            })
        })
        .collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Variant picked for an event: a hash of its serialized fields, with
/// short and medium at 37% each and long at 26%. Slightly more than a third
/// short and slightly more than two thirds short-or-medium puts the corpus
/// thresholds exactly on the fixed short and medium lengths.
pub fn variant_of(event: &Event) -> LengthBucket {
    let json = serde_json::to_vec(event).expect("events serialize");
    match fnv1a(&json) % 100 {
        0..37 => LengthBucket::Short,
        37..74 => LengthBucket::Medium,
        _ => LengthBucket::Long,
    }
}

/// Token count of every short variant.
pub const SHORT_TOKENS: usize = 6;
/// Token count of every medium variant.
pub const MEDIUM_TOKENS: usize = 12;
/// Lower bound on the token count of long variants.
pub const LONG_MIN_TOKENS: usize = 19;

fn period_phrase(period: u8) -> &'static str {
    match period {
        1 => "avauserässä",
        2 => "keskierässä",
        3 => "päätöserässä",
        _ => "jatkoajalla",
    }
}

fn strength_word(s: Strength) -> &'static str {
    match s {
        Strength::Even => "tasakentin",
        Strength::PowerPlay => "ylivoimalla",
        Strength::ShortHanded => "alivoimalla",
        Strength::EmptyNet => "tyhjään",
        Strength::PenaltyShot => "rangaistuslaukauksesta",
    }
}

fn score_str(a: u32, b: u32) -> String {
    format!("{a}-{b}")
}

/// Template text for one event in the requested variant.
pub fn verbalize_variant(event: &Event, _ctx: &GameContext, variant: LengthBucket) -> String {
    use LengthBucket::*;
    match event {
        Event::EndResult { home_team, guest_team, final_score, period_scores, resolution } => {
            let (winner, loser) = match final_score.leader() {
                Some(Side::Guest) => (Side::Guest, Side::Home),
                _ => (Side::Home, Side::Guest),
            };
            let name = |s: Side| if s == Side::Home { home_team.as_str() } else { guest_team.as_str() };
            let (w, l) = (final_score.get(winner), final_score.get(loser));
            let score = score_str(w, l);
            match variant {
                Short => format!("{} voitti {score}.", name(winner)),
                Medium => {
                    let venue = if winner == Side::Home { "kotikentällään" } else { "vieraskentällä" };
                    let how = match resolution {
                        Resolution::Regulation => "varsinaisella peliajalla",
                        Resolution::Overtime => "jatkoajan jälkeen",
                        Resolution::Shootout => "voittomaalikilpailun jälkeen",
                    };
                    format!("{} kaatoi {}:n {venue} maalein {score} {how}.", name(winner), name(loser))
                }
                Long => {
                    let periods: Vec<String> =
                        period_scores.iter().map(|p| score_str(p.get(winner), p.get(loser))).collect();
                    let extra = match resolution {
                        Resolution::Regulation => "",
                        Resolution::Overtime => " jatkoajalla",
                        Resolution::Shootout => " voittomaalikilpailussa",
                    };
                    format!(
                        "{} vei voiton {}:stä maalein {score} ({}){extra}.",
                        name(winner),
                        name(loser),
                        periods.join(", ")
                    )
                }
            }
        }
        Event::Goal { scorer, assists, team, resulting_score, time, period, strength, derived } => {
            let has = |f| derived.contains(&f);
            let (word, phrase) = if has(GoalFlag::Deciding) {
                ("ratkaisi", "teki voittomaalin")
            } else if has(GoalFlag::Opening) {
                ("avasi", "avasi maalinteon")
            } else if has(GoalFlag::Tying) {
                ("tasoitti", "tasoitti lukemat")
            } else if has(GoalFlag::GoAhead) {
                ("johtoon", "nosti johtoon")
            } else if has(GoalFlag::Final) {
                ("viimeisteli", "viimeisteli lukemat")
            } else {
                ("maali", "teki maalin")
            };
            let score = score_str(resulting_score.home, resulting_score.guest);
            let strength = strength_word(*strength);
            match variant {
                Short => format!("{scorer} {word} {score}."),
                Medium => format!("{scorer} {phrase} {strength} ajassa {time}, tilanne {score}."),
                Long => {
                    let helpers = match assists.as_slice() {
                        [] => "omin päin".to_string(),
                        [a] => format!("syöttäjänä {a}"),
                        [a, b, ..] => format!("syöttäjinä {a} ja {b}"),
                    };
                    format!(
                        "{team}:n {scorer} {phrase} {strength} {} ajassa {time} {helpers}, ja tilanne oli nyt {score}.",
                        period_phrase(*period)
                    )
                }
            }
        }
        Event::Penalty { player, team, time, penalty_minutes } => {
            let period = period_phrase(time.period());
            match variant {
                Short => format!("Jäähy: {player} {penalty_minutes} min."),
                Medium => format!(
                    "{team}:n pelaaja {player} passitettiin {penalty_minutes} minuutiksi jäähylle {period} ajassa {time}."
                ),
                Long => format!(
                    "{team}:n pelaaja {player} passitettiin {penalty_minutes} minuutiksi jäähylle {period} ajassa {time}, mikä heikensi joukkueen peliä selvästi lopussa."
                ),
            }
        }
        Event::Save { goalie, team, count } => match variant {
            Short => format!("{goalie} torjui {count} kiekkoa yhteensä."),
            Medium => format!("{team}:n maalivahti {goalie} torjui ottelun aikana yhteensä {count} vastustajan laukausta."),
            Long => format!(
                "{team}:n maalivahti {goalie} oli jälleen vahvassa vireessä ja torjui ottelun aikana yhteensä {count} vastustajan laukausta maalin edestä."
            ),
        },
    }
}

/// Template text in the variant chosen by [`variant_of`].
pub fn verbalize(event: &Event, ctx: &GameContext) -> (String, LengthBucket) {
    let v = variant_of(event);
    (verbalize_variant(event, ctx, v), v)
}

/// One aligned (event, text) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedExample {
    pub game_id: String,
    pub event_index: usize,
    pub event: Event,
    pub context: GameContext,
    pub text: String,
    pub bucket: LengthBucket,
}

impl AlignedExample {
    pub fn source(&self) -> TokenSequence {
        linearize_event(&self.event, &self.context, self.bucket)
    }

    pub fn source_with(&self, bucket: LengthBucket) -> TokenSequence {
        linearize_event(&self.event, &self.context, bucket)
    }

    pub fn target(&self) -> TokenSequence {
        tokenize_target(&self.text)
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub games: Vec<GameRecord>,
    pub gold: Vec<Vec<Label>>,
    pub splits: Vec<Split>,
    /// Aligned examples of every game, in game then event order.
    pub examples: Vec<AlignedExample>,
    /// Split of each example, parallel to `examples`.
    pub example_splits: Vec<Split>,
    pub buckets: LengthBuckets,
}

impl SynthCorpus {
    pub fn game_indices(&self, split: Split) -> impl Iterator<Item = usize> + '_ {
        self.splits.iter().enumerate().filter(move |(_, &s)| s == split).map(|(i, _)| i)
    }

    pub fn examples_in(&self, split: Split) -> impl Iterator<Item = &AlignedExample> + '_ {
        self.examples.iter().zip(&self.example_splits).filter(move |(_, &s)| s == split).map(|(e, _)| e)
    }

    /// Writes `games.jsonl`, `aligned.jsonl`, `splits.json` and parallel
    /// `{split}.src`/`{split}.tgt` files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        fs::create_dir_all(dir)?;
        let mut games = BufWriter::new(File::create(dir.join("games.jsonl"))?);
        for g in &self.games {
            writeln!(games, "{}", g.to_json_line())?;
        }
        games.flush()?;
        let mut aligned = BufWriter::new(File::create(dir.join("aligned.jsonl"))?);
        for e in &self.examples {
            serde_json::to_writer(&mut aligned, e)?;
            writeln!(aligned)?;
        }
        aligned.flush()?;
        let manifest = SplitManifest::from_corpus(self);
        fs::write(dir.join("splits.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
        for split in Split::ALL {
            let mut src = BufWriter::new(File::create(dir.join(format!("{}.src", split.as_str())))?);
            let mut tgt = BufWriter::new(File::create(dir.join(format!("{}.tgt", split.as_str())))?);
            for e in self.examples_in(split) {
                writeln!(src, "{}", e.source().join(" "))?;
                writeln!(tgt, "{}", e.target().join(" "))?;
            }
            src.flush()?;
            tgt.flush()?;
        }
        Ok(())
    }
}

/// Game ids per split plus the length thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub splits: BTreeMap<Split, Vec<String>>,
    pub buckets: LengthBuckets,
}

impl SplitManifest {
    pub fn from_corpus(corpus: &SynthCorpus) -> Self {
        let mut splits: BTreeMap<Split, Vec<String>> = BTreeMap::new();
        for (g, s) in corpus.games.iter().zip(&corpus.splits) {
            splits.entry(*s).or_default().push(g.id.clone());
        }
        SplitManifest { seed: corpus.config.seed, splits, buckets: corpus.buckets }
    }
}

/// Simulates every game, applies the gold rule, verbalizes each selected
/// event and assigns length buckets from the training split.
pub fn build_corpus(config: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    config.validate()?;
    let sim = Simulator::new(config);
    let games: Vec<GameRecord> = (0..config.n_games).map(|i| sim.simulate(i)).collect::<Result<_, _>>()?;
    let gold: Vec<Vec<Label>> = games.iter().map(gold_select).collect();
    let mut raw = Vec::new();
    for (gi, (game, labels)) in games.iter().zip(&gold).enumerate() {
        let ctx = game.context().expect("simulated games have an end result");
        for (ei, (event, label)) in game.events.iter().zip(labels).enumerate() {
            if *label == Label::Select {
                let (text, _) = verbalize(event, &ctx);
                raw.push((gi, ei, event.clone(), ctx.clone(), text));
            }
        }
    }
    let train_counts: Vec<usize> = raw
        .iter()
        .filter(|r| sim.splits[r.0] == Split::Train)
        .map(|r| tokenize_target(&r.4).len())
        .collect();
    let buckets = assign_length_buckets(&train_counts);
    if let Some(note) = &buckets.flag {
        log::warn!("length buckets: {note}");
    }
    let buckets = buckets.value;
    let example_splits = raw.iter().map(|r| sim.splits[r.0]).collect();
    let examples = raw
        .into_iter()
        .map(|(gi, ei, event, context, text)| AlignedExample {
            game_id: games[gi].id.clone(),
            event_index: ei,
            bucket: buckets.bucket(tokenize_target(&text).len()),
            event,
            context,
            text,
        })
        .collect();
    Ok(SynthCorpus { config: config.clone(), games, gold, splits: sim.splits, examples, example_splits, buckets })
}
