mod common;

use seqattn_service::repl::{run, ReplOptions};

use common::*;

fn session(
    script: &str,
    max_turns: usize,
) -> (String, seqattn_service::Session, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let opts = ReplOptions {
        max_turns,
        seed: 3,
        out_dir: dir.path().to_path_buf(),
    };
    let mut out = Vec::new();
    let s = run(&engine(20), script.as_bytes(), &mut out, &opts).unwrap();
    (String::from_utf8(out).unwrap(), s, dir)
}

#[test]
fn edits_undo_and_history() {
    let (out, s, dir) = session(
        "make it red\nadd a high heel\n:undo\nmake it grey\n:history\n:quit\nignored\n",
        10,
    );
    assert_eq!(s.turn_index(), 2);
    assert_eq!(s.turns[1].text, "make it grey");
    assert!(out.contains("back to turn 1"));
    assert!(out.contains("  2: make it grey"));
    assert!(!out.contains("ignored"));
    assert!(dir.path().join("chat-0_turn00.png").exists());
    assert!(dir.path().join("chat-0_turn02.png").exists());
    assert!(dir.path().join("chat-0_turn01_attn02_red.png").exists());
}

#[test]
fn errors_are_reported_not_fatal() {
    let (out, s, _dir) = session(
        ":undo\n!!!\n:bogus\n:new color=plaid\nmake it red\nmake it blue\nmake it tan\n",
        2,
    );
    assert!(out.contains("no turn to undo"));
    assert!(out.contains("no tokens"));
    assert!(out.contains("unknown command :bogus"));
    assert!(out.contains("invalid init"));
    assert!(out.contains("session complete"));
    assert!(out.contains("already has 2 turns"));
    assert_eq!(s.turn_index(), 2);
}

#[test]
fn new_sessions_start_fresh() {
    let (_, s, dir) = session("make it red\n:new random\nmake it blue\n", 10);
    assert_eq!(s.id, "chat-1");
    assert_eq!(s.turn_index(), 1);
    assert!(dir.path().join("chat-1_turn01.png").exists());
}
