//! Newline-delimited JSON bridge to out-of-process policies.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::str::FromStr;

use crate::policy::{episode_seed, Policy, PolicyError, Teacher};
use crate::protocol::{serialize_observation, Frame, ObsPayload};

/// Where an external policy lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Program and arguments, split on whitespace; one process per episode.
    Stdio(Vec<String>),
    /// `host:port`; one connection per episode.
    Tcp(String),
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(cmd) = s.strip_prefix("stdio:") {
            let argv: Vec<String> = cmd.split_whitespace().map(String::from).collect();
            if argv.is_empty() {
                return Err("stdio endpoint needs a command".into());
            }
            Ok(Endpoint::Stdio(argv))
        } else if let Some(addr) = s.strip_prefix("tcp:") {
            if !addr.contains(':') {
                return Err(format!("tcp endpoint {addr:?} lacks a port"));
            }
            Ok(Endpoint::Tcp(addr.to_string()))
        } else {
            Err(format!("endpoint {s:?} must start with stdio: or tcp:"))
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Stdio(argv) => write!(f, "stdio:{}", argv.join(" ")),
            Endpoint::Tcp(a) => write!(f, "tcp:{a}"),
        }
    }
}

impl Endpoint {
    /// Checks the endpoint can be reached: the program resolves to a file, or
    /// the socket accepts a connection (closed again without frames).
    pub fn probe(&self) -> Result<(), PolicyError> {
        match self {
            Endpoint::Stdio(argv) => {
                let prog = Path::new(&argv[0]);
                let found = if prog.components().count() > 1 {
                    prog.is_file()
                } else {
                    std::env::var_os("PATH")
                        .map(|paths| std::env::split_paths(&paths).any(|d| d.join(prog).is_file()))
                        .unwrap_or(false)
                };
                if found {
                    Ok(())
                } else {
                    Err(PolicyError::Protocol(format!("policy program {:?} not found", argv[0])))
                }
            }
            Endpoint::Tcp(addr) => {
                TcpStream::connect(addr)
                    .map(drop)
                    .map_err(|e| PolicyError::Protocol(format!("cannot reach policy at {addr}: {e}")))
            }
        }
    }
}

/// Client side of the bridge. Replies that are not turn frames are passed on
/// verbatim, so the environment records them as format violations.
pub struct ExternalPolicy {
    reader: Box<dyn BufRead + Send>,
    writer: Option<Box<dyn Write + Send>>,
    child: Option<Child>,
}

impl ExternalPolicy {
    pub fn connect(ep: &Endpoint) -> Result<Self, PolicyError> {
        match ep {
            Endpoint::Stdio(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Ok(Self {
                    reader: Box::new(BufReader::new(stdout)),
                    writer: Some(Box::new(stdin)),
                    child: Some(child),
                })
            }
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr)?;
                stream.set_nodelay(true)?;
                Ok(Self {
                    reader: Box::new(BufReader::new(stream.try_clone()?)),
                    writer: Some(Box::new(stream)),
                    child: None,
                })
            }
        }
    }

    fn send(&mut self, line: &str) -> Result<(), PolicyError> {
        let w = self
            .writer
            .as_mut()
            .ok_or_else(|| PolicyError::Protocol("connection already closed".into()))?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

impl Policy for ExternalPolicy {
    fn act(&mut self, obs: &ObsPayload) -> Result<String, PolicyError> {
        self.send(&serialize_observation(obs))?;
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(PolicyError::Protocol("policy closed the stream mid-episode".into()));
        }
        let line = line.strip_suffix('\n').unwrap_or(&line);
        let line = line.strip_suffix('\r').unwrap_or(line);
        match serde_json::from_str::<Frame>(line) {
            Ok(Frame::Turn { raw }) => Ok(raw),
            _ => Ok(line.to_string()),
        }
    }

    fn finish(&mut self) -> Result<(), PolicyError> {
        self.send(&serde_json::to_string(&Frame::End).expect("end frame serializes"))?;
        self.writer = None;
        if let Some(mut c) = self.child.take() {
            let status = c.wait()?;
            if !status.success() {
                return Err(PolicyError::Protocol(format!("policy process exited with {status}")));
            }
        }
        Ok(())
    }
}

impl Drop for ExternalPolicy {
    fn drop(&mut self) {
        self.writer = None;
        if let Some(mut c) = self.child.take() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

/// Server side: answers observation frames with an observation-only teacher.
/// A frame with `turn_index` 0 or an `end` frame starts a fresh episode;
/// episode `k` on this stream uses `episode_seed(seed, k)`.
pub fn serve<R: BufRead, W: Write>(reader: R, mut writer: W, teacher: Teacher, seed: u64) -> Result<usize, PolicyError> {
    if teacher.is_privileged() {
        return Err(PolicyError::Protocol(format!("{teacher} needs the ground truth and cannot be served")));
    }
    let mut episodes = 0usize;
    let mut policy: Option<Box<dyn Policy + Send>> = None;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Frame>(&line) {
            Ok(Frame::Obs { payload }) => {
                if policy.is_none() || payload.turn_index == 0 {
                    policy = teacher.observer(episode_seed(seed, episodes));
                    episodes += 1;
                }
                let raw = policy.as_mut().expect("policy built").act(&payload)?;
                let frame = serde_json::to_string(&Frame::Turn { raw }).expect("turn frame serializes");
                writer.write_all(frame.as_bytes())?;
                writer.write_all(b"\n")?;
                writer.flush()?;
            }
            Ok(Frame::End) => policy = None,
            Ok(Frame::Turn { .. }) => return Err(PolicyError::Protocol("unexpected turn frame from environment".into())),
            Err(e) => return Err(PolicyError::Protocol(format!("bad frame: {e}"))),
        }
    }
    Ok(episodes)
}

/// Accepts connections forever, one thread per connection. Calls `ready`
/// with the bound address first.
pub fn serve_tcp(addr: &str, teacher: Teacher, seed: u64, ready: impl FnOnce(&str)) -> Result<(), PolicyError> {
    if teacher.is_privileged() {
        return Err(PolicyError::Protocol(format!("{teacher} needs the ground truth and cannot be served")));
    }
    let listener = TcpListener::bind(addr)?;
    ready(&listener.local_addr()?.to_string());
    for (k, conn) in listener.incoming().enumerate() {
        let stream = conn?;
        let s = episode_seed(seed, k);
        std::thread::spawn(move || {
            let reader = match stream.try_clone() {
                Ok(r) => BufReader::new(r),
                Err(_) => return,
            };
            if let Err(e) = serve(reader, stream, teacher, s) {
                eprintln!("connection {k}: {e}");
            }
        });
    }
    Ok(())
}
