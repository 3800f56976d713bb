mod common;

use std::fs;

use common::{bin, toy, write_config};
use fedsplit::checkpoint::Checkpoint;
use fedsplit::run::{self, CKPT_DIR, FINAL_CKPT, METRICS};
use fedsplit::CliError;
use fedsplit_core::fedcore::{Mode, RoundReport};
use fedsplit_core::model::{assemble, Assembly, Batch, KeepRatio};

fn metric_lines(dir: &std::path::Path) -> usize {
    fs::read_to_string(dir.join(METRICS)).unwrap().lines().count()
}

#[test]
fn metrics_have_one_record_per_round() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = toy(tmp.path());
    c.federation.rounds = 50;
    c.federation.local_steps = 1;
    c.output.checkpoint_every = 10;
    let s = run::train(&c, false, true).unwrap();
    assert_eq!(s.rounds, 50);
    assert_eq!(metric_lines(tmp.path()), 50);
    let reports: Vec<RoundReport> = fedsplit::metrics::read(&tmp.path().join(METRICS)).unwrap();
    assert_eq!(
        reports.iter().map(|r| r.round).collect::<Vec<_>>(),
        (0..50).collect::<Vec<_>>()
    );
    let periodic = fedsplit::checkpoint::periodic(&tmp.path().join(CKPT_DIR)).unwrap();
    assert_eq!(periodic.iter().map(|p| p.0).collect::<Vec<_>>(), vec![30, 40, 50]);
}

#[test]
fn interrupted_run_resumes_to_the_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run::train(&toy(a.path()), false, true).unwrap();
    let cb = toy(b.path());
    run::train(&cb, false, true).unwrap();

    // Drop everything after round 2 as if the process died there.
    let ck = b.path().join(CKPT_DIR);
    fs::remove_file(ck.join(FINAL_CKPT)).unwrap();
    fs::remove_file(fedsplit::checkpoint::round_file(&ck, 4)).unwrap();
    let s = run::train(&cb, false, true).unwrap();
    assert_eq!(s.resumed_from, Some(2));

    for f in [METRICS, run::ADAPEMU, run::ADAPFU] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn finished_run_is_not_retrained() {
    let tmp = tempfile::tempdir().unwrap();
    let c = toy(tmp.path());
    run::train(&c, false, true).unwrap();
    let before = fs::read(tmp.path().join(METRICS)).unwrap();
    let s = run::train(&c, false, true).unwrap();
    assert_eq!(s.resumed_from, Some(4));
    assert_eq!(fs::read(tmp.path().join(METRICS)).unwrap(), before);
}

#[test]
fn corrupt_checkpoint_is_an_integrity_error() {
    let tmp = tempfile::tempdir().unwrap();
    let c = toy(tmp.path());
    run::train(&c, false, true).unwrap();
    let p = tmp.path().join(CKPT_DIR).join(FINAL_CKPT);
    let mut bytes = fs::read(&p).unwrap();
    let last = bytes.len() - 3;
    bytes[last] ^= 0x40;
    fs::write(&p, &bytes).unwrap();

    assert!(matches!(run::train(&c, false, true), Err(CliError::Integrity { .. })));

    let cfg = tmp.path().join("run.toml");
    write_config(&cfg, &c);
    let out = bin(&["--config", cfg.to_str().unwrap(), "train", "--quiet"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("integrity"));

    let p = p.to_str().unwrap();
    let out = bin(&["eval", "--run", tmp.path().to_str().unwrap(), "--checkpoint", p]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn truncated_checkpoint_is_an_integrity_error() {
    let tmp = tempfile::tempdir().unwrap();
    let c = toy(tmp.path());
    run::train(&c, false, true).unwrap();
    let p = tmp.path().join(run::ADAPEMU);
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(
        run::eval(tmp.path(), Assembly::AdapEmu, None, None),
        Err(CliError::Integrity { .. })
    ));
}

#[test]
fn changed_config_needs_fresh() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = toy(tmp.path());
    run::train(&c, false, true).unwrap();
    c.federation.prox_eps = 3.0;
    let cfg = tmp.path().join("run.toml");
    write_config(&cfg, &c);
    let out = bin(&["--config", cfg.to_str().unwrap(), "train", "--quiet"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let out = bin(&["--config", cfg.to_str().unwrap(), "train", "--quiet", "--fresh"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(metric_lines(tmp.path()), 4);
    assert!(tmp.path().join("run.toml").exists());
}

#[test]
fn state_checkpoint_roundtrip_gives_identical_logits() {
    let tmp = tempfile::tempdir().unwrap();
    let c = toy(tmp.path());
    run::train(&c, false, true).unwrap();
    let prep = run::prepare(&c, false).unwrap();
    let first = run::load_state(&prep, &tmp.path().join(CKPT_DIR).join(FINAL_CKPT)).unwrap();
    let copy = tmp.path().join("copy.ckpt");
    run::state_checkpoint(&first, &prep.plan).save(&copy).unwrap();
    let second = run::load_state(&prep, &copy).unwrap();
    assert_eq!(
        fs::read(&copy).unwrap(),
        fs::read(tmp.path().join(CKPT_DIR).join(FINAL_CKPT)).unwrap()
    );

    let s = &prep.data.eval[0];
    let batch = Batch::pack([(&s.tokens[..], &s.gt_mask[..])], c.model.max_seq_len).unwrap();
    for (asm, emu) in [(Assembly::AdapEmu, true), (Assembly::AdapFu, false)] {
        let logits = |st: &fedsplit_core::fedcore::ServerState<f32>| {
            let m = assemble(&prep.plan, &prep.base, &st.adapter, emu.then_some(&st.emulator), asm).unwrap();
            m.logits(&batch).unwrap()
        };
        let (x, y) = (logits(&first), logits(&second));
        assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn artifacts_evaluate_and_missing_ones_are_file_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let c = toy(tmp.path());
    run::train(&c, false, true).unwrap();
    let r = run::eval(tmp.path(), Assembly::AdapFu, None, None).unwrap();
    assert_eq!(r.samples, c.data.eval_size);
    assert!(r.loss.is_finite() && (0.0..=1.0).contains(&r.exact_match));

    let out = bin(&[
        "eval",
        "--run",
        tmp.path().to_str().unwrap(),
        "--split",
        "adapfu",
        "--json",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["samples"], c.data.eval_size);

    fs::remove_file(tmp.path().join(run::ADAPEMU)).unwrap();
    assert!(matches!(
        run::eval(tmp.path(), Assembly::AdapEmu, None, None),
        Err(CliError::Io { .. })
    ));
    let out = bin(&["eval", "--run", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn identity_split_without_training_evaluates_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = toy(tmp.path());
    c.split.keep_ratio = Some(KeepRatio::new(1, 1).unwrap());
    c.align.pre_align_iters = 0;
    c.federation.rounds = 0;
    run::train(&c, false, true).unwrap();
    let emu = run::eval(tmp.path(), Assembly::AdapEmu, None, None).unwrap();
    let full = run::eval(tmp.path(), Assembly::AdapFu, None, None).unwrap();
    assert_eq!(emu, full);
}

#[test]
fn fedot_logs_split_adapter() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    let mut c = toy(tmp.path());
    c.model.n_layers = 8;
    c.split.adapter_size = 4;
    c.federation.mode = Mode::FedOT;
    c.federation.rounds = 1;
    write_config(&cfg, &c);
    let out = bin(&["--config", cfg.to_str().unwrap(), "train", "--quiet"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("adapter=[0,1,6,7]"));
    assert!(fs::read_to_string(tmp.path().join(run::PLAN))
        .unwrap()
        .contains("adapter=[0,1,6,7]"));
}

#[test]
fn plot_writes_columns_and_image() {
    let tmp = tempfile::tempdir().unwrap();
    run::train(&toy(tmp.path()), false, true).unwrap();
    let (tsv, svg) = run::plot(tmp.path()).unwrap();
    let text = fs::read_to_string(tsv).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(fs::read_to_string(svg).unwrap().starts_with("<svg"));
}

#[test]
fn checkpoint_kind_is_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let c = toy(tmp.path());
    run::train(&c, false, true).unwrap();
    let prep = run::prepare(&c, false).unwrap();
    assert!(matches!(
        run::load_state(&prep, &tmp.path().join(run::ADAPFU)),
        Err(CliError::Integrity { .. })
    ));
    let ck = Checkpoint::load(&tmp.path().join(run::BASE)).unwrap();
    assert_eq!(ck.kind, "base");
}

#[test]
fn untrained_model_is_near_chance_on_copy() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = toy(tmp.path());
    c.pretrain.steps = 0;
    c.align.pre_align_iters = 0;
    c.federation.rounds = 0;
    c.federation.clients = 1;
    c.data.client_tasks = vec![fedsplit_core::data::TaskKind::Copy];
    c.data.eval_size = 100;
    run::train(&c, false, true).unwrap();
    let r = run::eval(tmp.path(), Assembly::AdapFu, None, None).unwrap();
    // answers are >= 3 symbols out of 64
    assert!(r.exact_match <= 0.02, "{r:?}");
    assert!(r.loss > 2.0, "{r:?}");
}
