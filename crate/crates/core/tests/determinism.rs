use std::path::PathBuf;

use gfla::io;
use gfla::synth::SceneSpec;
use gfla::train::{self, load_checkpoint, save_checkpoint, RunConfig};

fn config(out: PathBuf) -> RunConfig {
    let mut cfg = RunConfig::for_dataset(SceneSpec { size: 16, ..Default::default() });
    cfg.out_dir = out;
    cfg.batch_size = 2;
    cfg.steps = 6;
    cfg.checkpoint_every = 3;
    cfg.eval_every = 3;
    cfg.eval_samples = 2;
    cfg.deterministic = true;
    cfg
}

#[test]
fn stage_one_loss_log_is_bit_identical_across_runs() {
    let d = tempfile::tempdir().unwrap();
    let a = train::train_flow(&config(d.path().join("a"))).unwrap();
    let b = train::train_flow(&config(d.path().join("b"))).unwrap();
    let read = |p: &PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(&d.path().join("a/loss.csv")), read(&d.path().join("b/loss.csv")));
    assert_eq!(read(&a.checkpoint), read(&b.checkpoint));

    let mut other = config(d.path().join("c"));
    other.seed += 1;
    train::train_flow(&other).unwrap();
    assert_ne!(read(&d.path().join("a/loss.csv")), read(&d.path().join("c/loss.csv")));
}

#[test]
fn stage_two_loss_log_is_bit_identical_across_runs() {
    let d = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let mut cfg = config(d.path().join(name));
        cfg.skip_stage1 = true;
        cfg.steps = 3;
        train::train_full(&cfg, None).unwrap();
        std::fs::read(d.path().join(name).join("loss.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = config(d.path().join("run"));
    cfg.skip_stage1 = true;
    cfg.steps = 2;
    let s = train::train_full(&cfg, None).unwrap();
    let first = std::fs::read(&s.checkpoint).unwrap();
    let r = load_checkpoint(&s.checkpoint, &cfg).unwrap();
    let again = d.path().join("again.gfla");
    save_checkpoint(&again, &r.flow, r.renderer.as_ref(), r.disc.as_ref()).unwrap();
    assert_eq!(first, std::fs::read(&again).unwrap());
}

#[test]
fn flow_file_round_trip_is_bit_exact() {
    let d = tempfile::tempdir().unwrap();
    let s = gfla::synth::gen_scene(3, &SceneSpec { size: 16, ..Default::default() }).unwrap();
    let p = d.path().join("f.gflo");
    io::write_flow(&p, &s.flow).unwrap();
    let back = io::read_flow(&p).unwrap();
    assert!(back.tensor().data().iter().zip(s.flow.tensor().data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    let p2 = d.path().join("g.gflo");
    io::write_flow(&p2, &back).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
}

#[test]
fn generated_data_is_reproducible() {
    let spec = SceneSpec { size: 16, ..Default::default() };
    for seed in 0..4 {
        let (a, b) = (gfla::synth::gen_scene(seed, &spec).unwrap(), gfla::synth::gen_scene(seed, &spec).unwrap());
        assert_eq!(a.source.data(), b.source.data());
        assert_eq!(a.flow.tensor().data(), b.flow.tensor().data());
        assert_eq!(a.guidance_t.data(), b.guidance_t.data());
    }
}
