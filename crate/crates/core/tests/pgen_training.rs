use hockeygen::pgen::{
    batch_loss, beam_search, encode, greedy_decode, load_model, load_state, save_model, save_state, train,
    train_resume, Example, PgConfig, PgModel, TrainState, Vocabulary,
};

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn small_config() -> PgConfig {
    PgConfig {
        embedding_dim: 24,
        hidden_dim: 32,
        batch_size: 4,
        dropout: 0.0,
        learning_rate: 5e-3,
        valid_every: 10,
        seed: 7,
        ..Default::default()
    }
}

fn build(config: PgConfig, pairs: &[(&str, &str)], min_freq: usize) -> (PgModel<f64>, Vec<Example>) {
    let src: Vec<Vec<String>> = pairs.iter().map(|p| toks(p.0)).collect();
    let tgt: Vec<Vec<String>> = pairs.iter().map(|p| toks(p.1)).collect();
    let model = PgModel::new(config, Vocabulary::build(&src, min_freq), Vocabulary::build(&tgt, min_freq)).unwrap();
    let ex = src.iter().zip(&tgt).map(|(s, t)| model.example(s, t).unwrap()).collect();
    (model, ex)
}

const RESULT_SRC: &str = "<length>long</length> <type>result</type> <home> Ässät </home> <guest> Blues </guest> \
                       <score> 0 - 4 </score> <periods> ( 0 - 3 , 0 - 0 , 0 - 1 ) </periods>";
const RESULT_TGT: &str = "Blues vei voiton Ässistä maalein 4 - 0 ( 3 - 0 , 0 - 0 , 1 - 0 ) .";

#[test]
fn memorizes_the_result_example() {
    let config = PgConfig { batch_size: 1, max_steps: 500, ..small_config() };
    let (model, ex) = build(config, &[(RESULT_SRC, RESULT_TGT)], 1);
    let out = train(model, &ex, &[], None).unwrap();
    let enc = encode(&out.model, &toks(RESULT_SRC)).unwrap();
    let g = greedy_decode(&out.model, &enc, 60);
    assert_eq!(g.tokens.join(" "), RESULT_TGT);
    assert_eq!(beam_search(&out.model, &enc, 5, 60).tokens, g.tokens);
}

#[test]
fn copies_names_missing_from_the_vocabulary() {
    // Names occur once, so the frequency floor keeps them out of both vocabularies.
    let names = ["Aaltonen", "Berg", "Corvo", "Dahl", "Eklund", "Forss", "Gran", "Haapa", "Ilola", "Juva", "Kari", "Lind"];
    let pairs: Vec<(String, String)> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (format!("<scorer> {n} </scorer> <time> {i} </time>"), format!("{n} teki maalin .")))
        .collect();
    let refs: Vec<(&str, &str)> = pairs.iter().map(|(s, t)| (s.as_str(), t.as_str())).collect();
    // Without coverage so the test isolates copying; at this scale the
    // coverage term can trap attention between the first two positions.
    let config = PgConfig { max_steps: 300, coverage_loss_weight: 0.0, ..small_config() };
    let (model, ex) = build(config, &refs, 2);
    assert!(model.tgt_vocab.get("Lind").is_none());
    let model = train(model, &ex, &[], None).unwrap().model;
    for unseen in ["Mäkelä", "Nurmi"] {
        let enc = encode(&model, &toks(&format!("<scorer> {unseen} </scorer> <time> 3 </time>"))).unwrap();
        assert_eq!(greedy_decode(&model, &enc, 20).tokens, toks(&format!("{unseen} teki maalin .")));
    }
}

#[test]
fn overfitting_one_example_decreases_loss() {
    let config = PgConfig { batch_size: 1, max_steps: 200, valid_every: 20, ..small_config() };
    let (model, ex) = build(config, &[("a b c d", "x y z")], 1);
    let out = train(model, &ex, &[], None).unwrap();
    let losses: Vec<f64> = out.log.iter().map(|e| e.train_loss).collect();
    assert_eq!(losses.len(), 10);
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
    // The coverage term has a floor once attention must revisit positions;
    // the likelihood term does not.
    let nll = batch_loss(&out.model.params, &[&ex[0]], &out.model.config, None, false).unwrap().nll;
    assert!(nll < 0.01 * losses[0], "nll {nll}, {losses:?}");
}

fn mixed_pairs() -> Vec<(&'static str, &'static str)> {
    vec![
        ("<type>goal</type> <scorer> Koivu </scorer>", "Koivu teki maalin ."),
        ("<type>goal</type> <scorer> Selänne </scorer>", "Selänne teki maalin ."),
        ("<type>penalty</type> <player> Koivu </player>", "Koivu sai jäähyn ."),
        ("<type>penalty</type> <player> Selänne </player>", "Selänne sai jäähyn ."),
        ("<type>saves</type> <goalie> Rask </goalie>", "Rask torjui ."),
    ]
}

#[test]
fn identical_seeds_give_identical_parameters() {
    let config = PgConfig { dropout: 0.3, max_steps: 25, ..small_config() };
    let run = || {
        let (model, ex) = build(config.clone(), &mixed_pairs(), 1);
        train(model, &ex, &ex[..2], None).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.state.model.params, b.state.model.params);
    assert_eq!(a.model.params, b.model.params);
    let other = {
        let (model, ex) = build(PgConfig { seed: 8, ..config }, &mixed_pairs(), 1);
        train(model, &ex, &ex[..2], None).unwrap()
    };
    assert_ne!(a.state.model.params, other.state.model.params);
}

#[test]
fn resuming_from_a_checkpoint_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = PgConfig { dropout: 0.3, max_steps: 30, ..small_config() };
    let (model, ex) = build(config, &mixed_pairs(), 1);
    let full = train(model.clone(), &ex, &ex[..2], Some(dir.path())).unwrap();
    let ckpt = dir.path().join("step_000010.pgen");
    assert!(ckpt.exists());
    assert_eq!(full.log[0].checkpoint.as_deref(), Some(ckpt.as_path()));

    let state: TrainState<f64> = load_state(&ckpt).unwrap();
    assert_eq!(state.step, 10);
    let resumed = train_resume(state, &ex, &ex[..2], None, 30).unwrap();
    assert_eq!(resumed.state, full.state);
    assert_eq!(resumed.model.params, full.model.params);
    assert_eq!(resumed.best_step, full.best_step);

    // A state saved in memory round-trips exactly too.
    let part = train_resume(TrainState::new(model), &ex, &ex[..2], None, 17).unwrap();
    let path = dir.path().join("mid.pgen");
    save_state(&part.state, &path).unwrap();
    let again = train_resume(load_state(&path).unwrap(), &ex, &ex[..2], None, 30).unwrap();
    assert_eq!(again.state.model.params, full.state.model.params);
}

#[test]
fn model_files_round_trip_and_convert_precision() {
    let dir = tempfile::tempdir().unwrap();
    let (model, _) = build(small_config(), &mixed_pairs(), 1);
    let path = dir.path().join("m.pgen");
    save_model(&model, &path).unwrap();
    let back: PgModel<f64> = load_model(&path).unwrap();
    assert_eq!(back, model);
    let single: PgModel<f32> = load_model(&path).unwrap();
    assert_eq!(single.params.tensors.len(), model.params.tensors.len());

    std::fs::write(&path, b"not a model").unwrap();
    assert!(load_model::<f64>(&path).is_err());
}

#[test]
fn selects_the_best_validation_checkpoint() {
    // Validation pairs contradict the training pairs, so validation loss
    // rises once the training targets are memorized.
    let train_pairs = [("k1 k2", "t1 t2 ."), ("k3 k4", "t3 t4 ."), ("k5 k6", "t5 t6 .")];
    let valid_pairs = [("k1 k2", "t3 t4 ."), ("k3 k4", "t5 t6 ."), ("k5 k6", "t1 t2 .")];
    let config = PgConfig { batch_size: 3, max_steps: 200, ..small_config() };
    let (model, ex) = build(config, &train_pairs, 1);
    let valid: Vec<Example> = valid_pairs.iter().map(|(s, t)| model.example(&toks(s), &toks(t)).unwrap()).collect();
    let out = train(model, &ex, &valid, None).unwrap();
    let v: Vec<f64> = out.log.iter().map(|e| e.valid_loss.unwrap()).collect();
    let best = v.iter().copied().fold(f64::INFINITY, f64::min);
    assert!(v.last().unwrap() > &best, "{v:?}");
    assert!(out.best_step < out.state.step);
    assert_ne!(out.model.params, out.state.model.params);
    let chosen = batch_loss(&out.model.params, &valid.iter().collect::<Vec<_>>(), &out.model.config, None, false)
        .unwrap()
        .loss;
    assert!((chosen - best).abs() <= 1e-9 * best.max(1.0));
}

#[test]
fn patience_stops_training_early() {
    let train_pairs = [("k1 k2", "t1 t2 ."), ("k3 k4", "t3 t4 .")];
    let valid_pairs = [("k1 k2", "t3 t4 ."), ("k3 k4", "t1 t2 .")];
    let config = PgConfig { batch_size: 2, max_steps: 1000, patience: 3, ..small_config() };
    let (model, ex) = build(config, &train_pairs, 1);
    let valid: Vec<Example> = valid_pairs.iter().map(|(s, t)| model.example(&toks(s), &toks(t)).unwrap()).collect();
    let out = train(model, &ex, &valid, None).unwrap();
    assert!(out.stopped_early);
    assert!(out.state.step < 1000);
    assert_eq!(out.state.step, out.best_step + 30);
}

/// Re-attention mass (Σ_t Σ_i min(a_t, c_t) per target step) under teacher
/// forcing, for models trained with increasing coverage weight. The
/// relationship is empirical, so the measurements are printed and only a
/// gross violation fails.
#[test]
fn coverage_weight_reduces_reattention() {
    let pairs = mixed_pairs();
    let mut masses = Vec::new();
    for weight in [0.0, 0.5, 1.0, 2.0] {
        let config = PgConfig { coverage_loss_weight: weight, max_steps: 150, ..small_config() };
        let (model, ex) = build(config, &pairs, 1);
        let model = train(model, &ex, &[], None).unwrap().model;
        let probe = PgConfig { coverage_loss_weight: 1.0, ..model.config.clone() };
        let refs: Vec<&Example> = ex.iter().collect();
        masses.push(batch_loss(&model.params, &refs, &probe, None, false).unwrap().coverage);
    }
    println!("re-attention mass by coverage weight [0, 0.5, 1, 2]: {masses:?}");
    let monotone = masses.windows(2).all(|w| w[1] <= w[0] + 1e-9);
    println!("weakly decreasing: {monotone}");
    assert!(masses[3] <= masses[0]);
}
