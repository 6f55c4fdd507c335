use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cn3::autodiff::faults;
use cn3::data::{write_classification_tsv, write_conll, LabeledExample, Sentence};
use cn3::synthetic::{case_tagging, keyword_task};
use cn3_cli::{archive, cmd_gradcheck, cmd_train, eval_archive, export, export_traces, EXIT_CONFIG, EXIT_OK};

fn cn3(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cn3")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Keyword classification toy trained to completion in `dir`; returns the
/// config path.
fn trained_classifier(dir: &Path, layers: usize) -> std::path::PathBuf {
    fs::write(dir.join("train.tsv"), write_classification_tsv(&keyword_task(20, 1))).unwrap();
    let cfg = dir.join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# toy run\ntask = classify\nvariant = lstm+char+spell\ntrain = train.tsv\ndev = train.tsv\n\
             word_dim = 16\nhidden_dim = 16\nattn_dim = 16\nlstm_hidden = 8\nchar_dim = 6\nspell_dim = 3\n\
             layers = {layers}\nepochs = 200\npatience = 200\nseed = 1\n"
        ),
    )
    .unwrap();
    assert_eq!(cmd_train(&cfg, None), EXIT_OK);
    cfg
}

#[test]
fn archive_reload_reproduces_outputs_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    trained_classifier(dir.path(), 2);
    let path = dir.path().join("model.cn3");
    let a = archive::load(&path).unwrap();
    let b = archive::load(&path).unwrap();
    assert_eq!(a.config.get("task").map(String::as_str), Some("classify"));
    for ex in keyword_task(8, 9) {
        let (oa, ob) = (a.model.head_outputs(&ex).unwrap(), b.model.head_outputs(&ex).unwrap());
        assert!(oa.data().iter().zip(ob.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        let (ha, ta) = a.model.trace(&ex.sentence).unwrap();
        let (hb, tb) = b.model.trace(&ex.sentence).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(ta, tb);
    }
    let bytes = fs::read(&path).unwrap();
    assert_eq!(archive::to_bytes(&a.model, &a.config).unwrap(), bytes);
}

#[test]
fn eval_scores_trained_toy_and_checks_metric() {
    let dir = tempfile::tempdir().unwrap();
    trained_classifier(dir.path(), 2);
    let archive = dir.path().join("model.cn3");
    let data = dir.path().join("train.tsv");
    let (_, acc) = eval_archive(&archive, &data, None).unwrap();
    assert_eq!(acc, 1.0);

    let (a, p) = (archive.to_str().unwrap(), data.to_str().unwrap());
    let first = cn3(&["eval", "--archive", a, "--data", p]);
    let second = cn3(&["eval", "--archive", a, "--data", p, "--metric", "accuracy"]);
    assert_eq!(first.status.code(), Some(0));
    assert_eq!(stdout(&first), "metric=1\n");
    assert_eq!(stdout(&first), stdout(&second));

    let wrong = cn3(&["eval", "--archive", a, "--data", p, "--metric", "chunk_f1"]);
    assert_eq!(wrong.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("chunk_f1"));
    let missing = cn3(&["eval", "--archive", "nowhere.cn3", "--data", p]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn export_single_token_and_threshold() {
    let dir = tempfile::tempdir().unwrap();
    trained_classifier(dir.path(), 2);
    let archive = dir.path().join("model.cn3");
    let sents = dir.path().join("sents.txt");
    fs::write(&sents, "great\n\nthe film was dull and slow\n").unwrap();

    let traces = export_traces(&archive, &sents).unwrap();
    assert_eq!(traces.len(), 2);
    assert_eq!(traces[0].tokens, vec!["great"]);
    assert_eq!(traces[0].per_layer.len(), 2);
    for a in &traces[0].per_layer {
        assert_eq!(a.data(), &[1.0]);
    }

    let json = dir.path().join("out.json");
    let dot = dir.path().join("out.dot");
    let (a, s) = (archive.to_str().unwrap(), sents.to_str().unwrap());
    let o = cn3(&[
        "export-structure",
        "--archive",
        a,
        "--data",
        s,
        "--out",
        json.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let records = export::from_json(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(records[0].layers, vec![vec![1.0], vec![1.0]]);
    assert_eq!(records[1].layers[1].len(), 36);
    assert!(records.iter().all(|r| r.max_column_error() <= 1e-9));

    let args = [
        "export-structure",
        "--archive",
        a,
        "--data",
        s,
        "--out",
        dot.to_str().unwrap(),
        "--format",
        "dot",
    ];
    let o = cn3(&[&args[..], &["--threshold", "1.1"]].concat());
    assert_eq!(o.status.code(), Some(0));
    let text = fs::read_to_string(&dot).unwrap();
    assert_eq!(text.matches("digraph").count(), 4);
    assert!(!text.contains("->"));
    assert_eq!(cn3(&args).status.code(), Some(0));
    let text = fs::read_to_string(&dot).unwrap();
    assert!(text.contains("n0 -> n0"));
    assert!(text.contains("digraph s1_layer2 {"));

    let bad = cn3(&[
        "export-structure",
        "--archive",
        a,
        "--data",
        s,
        "--out",
        "x",
        "--format",
        "png",
    ]);
    assert_eq!(bad.status.code(), Some(EXIT_CONFIG));
}

#[test]
fn train_reports_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "task = classify\ntrain = absent.tsv\n").unwrap();
    assert_eq!(cmd_train(&cfg, None), EXIT_CONFIG);
    fs::write(&cfg, "task = classify\ntrain = absent.tsv\nbogus = 1\n").unwrap();
    assert_eq!(cmd_train(&cfg, None), EXIT_CONFIG);
    fs::write(dir.path().join("t.tsv"), "pos\tgood film\n").unwrap();
    fs::write(
        &cfg,
        "task = classify\nvariant = lstm\nmetric = chunk_f1\ntrain = t.tsv\n",
    )
    .unwrap();
    assert_eq!(cmd_train(&cfg, None), EXIT_CONFIG);
    fs::write(&cfg, "task = classify\nvariant = lstm^dep\ntrain = t.tsv\n").unwrap();
    assert_eq!(cmd_train(&cfg, None), EXIT_CONFIG);

    let o = cn3(&["train", "--config", dir.path().join("nope.cfg").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert_eq!(cn3(&["frobnicate"]).status.code(), Some(EXIT_CONFIG));
}

#[test]
fn train_writes_history_and_scores_test_split() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("train.conll"), write_conll(&case_tagging(30, 1))).unwrap();
    fs::write(p.join("test.conll"), write_conll(&case_tagging(10, 2))).unwrap();
    let cfg = p.join("tag.cfg");
    fs::write(
        &cfg,
        "task = tag\nvariant = lstm+char+spell\nmetric = chunk_f1\ntrain = train.conll\ndev = train.conll\n\
         test = test.conll\nword_dim = 8\nhidden_dim = 8\nattn_dim = 4\nchar_dim = 4\nspell_dim = 2\n\
         lstm_hidden = 4\nepochs = 3\nbatch_size = 10\nhistory = runs/h.jsonl\narchive = m.cn3\n",
    )
    .unwrap();
    fs::create_dir(p.join("runs")).unwrap();
    let o = cn3(&["train", "--config", cfg.to_str().unwrap(), "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.starts_with("variant lstm+char+spell task tag layers 2 seed 4\n"));
    assert!(out.contains("test chunk_f1="));
    let history = fs::read_to_string(p.join("runs/h.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 3);
    let rows: Vec<serde_json::Value> = history.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows[2]["epoch"], 3);
    let a = archive::load(&p.join("m.cn3")).unwrap();
    assert_eq!(a.model.seed, 4);
    let s = Sentence::new(vec!["Paris".into(), "is".into(), "big".into()]);
    assert_eq!(
        a.model
            .head_outputs(&LabeledExample::tagging(s.tokens.clone(), vec!["U".into(); 3]))
            .unwrap()
            .rows(),
        3
    );
}

#[test]
fn gradcheck_command_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.cfg");
    for task in ["classify", "tag", "match"] {
        fs::write(
            &cfg,
            format!(
                "task = {task}\nvariant = lstm+char+spell\nword_dim = 5\nhidden_dim = 6\nattn_dim = 4\n\
                 char_dim = 3\nspell_dim = 2\nlstm_hidden = 3\nseed = 2\n"
            ),
        )
        .unwrap();
        assert_eq!(cmd_gradcheck(&cfg), EXIT_OK, "{task}");
    }
    faults::set_tanh_backward_scale(1.5);
    let code = cmd_gradcheck(&cfg);
    faults::set_tanh_backward_scale(1.0);
    assert_eq!(code, 1);
    assert_eq!(cmd_gradcheck(&dir.path().join("missing.cfg")), EXIT_CONFIG);
}
