//! Terminal editing loop over a single session. Images go to an output
//! directory as PNG files.

use std::io::{BufRead, Write};
use std::path::PathBuf;

use seqattn_core::synth::stream_seed;
use seqattn_core::Attributes;

use crate::engine::Engine;
use crate::session::{decode_png, Init, ServiceError, Session};
use crate::store::now_secs;

pub struct ReplOptions {
    pub max_turns: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

const HELP: &str = "commands:
  <text>                   edit the current image
  :new random              start over from a random design
  :new color=red heel=...  start over from an attribute preset
  :new file.png            start over from an image file
  :undo                    drop the last turn
  :history                 list the turns so far
  :help                    this text
  :quit                    leave";

fn parse_init(arg: &str) -> Result<Init, String> {
    let arg = arg.trim();
    if arg.is_empty() || arg == "random" {
        return Ok(Init::Named("random".into()));
    }
    if arg.contains('=') {
        let mut preset = Attributes::new();
        for kv in arg.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got `{kv}`"))?;
            preset.insert(k.to_string(), v.to_string());
        }
        return Ok(Init::Preset { preset });
    }
    let bytes = std::fs::read(arg).map_err(|e| format!("{arg}: {e}"))?;
    use base64::Engine as _;
    Ok(Init::Upload {
        image_b64: base64::engine::general_purpose::STANDARD.encode(bytes),
    })
}

fn new_session(
    engine: &Engine,
    opts: &ReplOptions,
    n: u64,
    init: &Init,
) -> Result<Session, ServiceError> {
    Session::create(
        engine,
        format!("chat-{n}"),
        stream_seed(opts.seed, n),
        init,
        opts.max_turns,
        now_secs(),
    )
}

struct Repl<'a, W: Write> {
    engine: &'a Engine,
    opts: &'a ReplOptions,
    out: &'a mut W,
    session: Session,
    sessions_started: u64,
}

impl<W: Write> Repl<'_, W> {
    fn save(&self, name: &str, b64: &str) -> Result<PathBuf, ServiceError> {
        let path = self.opts.out_dir.join(name);
        decode_png(b64)?.save_png(&path)?;
        Ok(path)
    }

    fn start(&mut self, init: &Init) -> Result<(), ServiceError> {
        self.session = new_session(self.engine, self.opts, self.sessions_started, init)?;
        self.sessions_started += 1;
        self.show_initial()
    }

    fn show_initial(&mut self) -> Result<(), ServiceError> {
        let path = self.save(
            &format!("{}_turn00.png", self.session.id),
            &self.session.initial_png,
        )?;
        writeln!(self.out, "turn 0: {}", path.display()).ok();
        Ok(())
    }

    fn feedback(&mut self, text: &str) -> Result<(), ServiceError> {
        self.session.feedback(self.engine, text, now_secs())?;
        let t = self.session.turn_index();
        let rec = self.session.turns.last().unwrap().clone();
        let path = self.save(
            &format!("{}_turn{t:02}.png", self.session.id),
            &rec.image_png,
        )?;
        writeln!(
            self.out,
            "turn {t}/{}: {}",
            self.session.max_turns,
            path.display()
        )
        .ok();
        for (w, (word, map)) in rec.words.iter().zip(&rec.heatmaps_png).enumerate() {
            self.save(
                &format!("{}_turn{t:02}_attn{w:02}_{word}.png", self.session.id),
                map,
            )?;
        }
        if !rec.heatmaps_png.is_empty() {
            writeln!(self.out, "  attention maps for: {}", rec.words.join(" ")).ok();
        }
        if self.session.done() {
            writeln!(self.out, "session complete; :undo or :new to continue").ok();
        }
        Ok(())
    }

    fn history(&mut self) {
        writeln!(
            self.out,
            "session {} (seed {})",
            self.session.id, self.session.seed
        )
        .ok();
        for (i, r) in self.session.turns.iter().enumerate() {
            writeln!(self.out, "  {}: {}", i + 1, r.text).ok();
        }
    }
}

/// Runs until `:quit` or end of input.
pub fn run(
    engine: &Engine,
    input: impl BufRead,
    out: &mut impl Write,
    opts: &ReplOptions,
) -> Result<Session, ServiceError> {
    std::fs::create_dir_all(&opts.out_dir)
        .map_err(|e| ServiceError::Internal(format!("{}: {e}", opts.out_dir.display())))?;
    let first = new_session(engine, opts, 0, &Init::Named("random".into()))?;
    let mut repl = Repl {
        engine,
        opts,
        out,
        session: first,
        sessions_started: 1,
    };
    repl.show_initial()?;
    writeln!(repl.out, "type :help for commands").ok();
    for line in input.lines() {
        let line = line.map_err(|e| ServiceError::Internal(e.to_string()))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let result = match line.split_once(' ').map_or((line, ""), |(a, b)| (a, b)) {
            (":quit", _) | (":q", _) => break,
            (":help", _) => {
                writeln!(repl.out, "{HELP}").ok();
                Ok(())
            }
            (":undo", _) => repl.session.undo(now_secs()).map(|_| {
                let t = repl.session.turn_index();
                writeln!(repl.out, "back to turn {t}").ok();
            }),
            (":history", _) => {
                repl.history();
                Ok(())
            }
            (":new", arg) => match parse_init(arg) {
                Ok(init) => repl.start(&init),
                Err(e) => Err(ServiceError::BadInit(e)),
            },
            (cmd, _) if cmd.starts_with(':') => {
                Err(ServiceError::BadInit(format!("unknown command {cmd}")))
            }
            _ => repl.feedback(line),
        };
        if let Err(e) = result {
            writeln!(repl.out, "error: {e}").ok();
        }
    }
    Ok(repl.session)
}
