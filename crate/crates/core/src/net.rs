//! Line-delimited JSON feedback service over TCP.
//!
//! A session opens with `{"kind":"HELLO","text":"banditmt-proto-1"}`. The
//! server then sends `SRC` frames, keeping at most `window` of them
//! unrewarded, and answers each `TRANS` with a `REWARD` of the same id.
//! `BYE` follows the last `SRC`; the server keeps answering `TRANS` frames
//! after it and closes once every sentence has been rewarded.

use std::collections::{BTreeSet, VecDeque};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::bandit::{write_triples_csv, FeedbackChannel, TripleRecord};
use crate::error::{Error, Result};
use crate::metrics::sentence_reward;

pub const PROTOCOL_TAG: &str = "banditmt-proto-1";
pub const DEFAULT_WINDOW: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FrameKind {
    Hello,
    Src,
    Trans,
    Reward,
    Err,
    Bye,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub kind: FrameKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl Frame {
    fn bare(kind: FrameKind) -> Self {
        Self {
            kind,
            id: None,
            text: None,
            value: None,
            message: None,
        }
    }

    pub fn hello() -> Self {
        Self {
            text: Some(PROTOCOL_TAG.into()),
            ..Self::bare(FrameKind::Hello)
        }
    }

    pub fn src(id: u64, text: impl Into<String>) -> Self {
        Self {
            id: Some(id),
            text: Some(text.into()),
            ..Self::bare(FrameKind::Src)
        }
    }

    pub fn trans(id: u64, text: impl Into<String>) -> Self {
        Self {
            id: Some(id),
            text: Some(text.into()),
            ..Self::bare(FrameKind::Trans)
        }
    }

    pub fn reward(id: u64, value: f64) -> Self {
        Self {
            id: Some(id),
            value: Some(value),
            ..Self::bare(FrameKind::Reward)
        }
    }

    pub fn err(message: impl Into<String>) -> Self {
        Self {
            message: Some(message.into()),
            ..Self::bare(FrameKind::Err)
        }
    }

    pub fn bye() -> Self {
        Self::bare(FrameKind::Bye)
    }

    /// One JSON object, no trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("frames always serialize")
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Frame = serde_json::from_str(line).map_err(|e| Error::Protocol(format!("malformed frame: {e}")))?;
        let need_id = matches!(f.kind, FrameKind::Src | FrameKind::Trans | FrameKind::Reward);
        if need_id && f.id.is_none() {
            return Err(Error::Protocol(format!("{:?} frame without id", f.kind)));
        }
        if matches!(f.kind, FrameKind::Src | FrameKind::Trans) && f.text.is_none() {
            return Err(Error::Protocol(format!("{:?} frame without text", f.kind)));
        }
        if f.kind == FrameKind::Reward && f.value.is_none() {
            return Err(Error::Protocol("REWARD frame without value".into()));
        }
        Ok(f)
    }
}

fn send(w: &mut impl Write, f: &Frame) -> Result<()> {
    w.write_all(f.to_line().as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub type RewardFn = dyn Fn(&[String], &[String]) -> f64 + Send + Sync;

/// Sentences served to every session: source text and hidden reference.
#[derive(Clone, Debug)]
pub struct ServedCorpus {
    pub sources: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl ServedCorpus {
    pub fn new<S: AsRef<str>>(sources: &[S], references: &[S]) -> Result<Self> {
        if sources.is_empty() {
            return Err(crate::error::invalid("served corpus is empty"));
        }
        if sources.len() != references.len() {
            return Err(crate::error::invalid("source and reference counts differ"));
        }
        if let Some(i) = references
            .iter()
            .position(|r| r.as_ref().split_whitespace().next().is_none())
        {
            return Err(crate::error::invalid(format!("reference {i} is empty")));
        }
        Ok(Self {
            sources: sources.iter().map(|s| s.as_ref().to_string()).collect(),
            references: references
                .iter()
                .map(|r| r.as_ref().split_whitespace().map(String::from).collect())
                .collect(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub window: usize,
    /// Directory for per-session frame and triple logs.
    pub log_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            log_dir: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionSummary {
    pub session: usize,
    pub sent: usize,
    pub errors: usize,
    /// Rewarded translations in the order they were rewarded.
    pub triples: Vec<TripleRecord>,
    /// Whether the session reached `BYE`.
    pub completed: bool,
}

#[derive(Serialize)]
struct FrameRecord<'a> {
    seq: usize,
    elapsed_ms: u128,
    direction: &'a str,
    kind: FrameKind,
    id: Option<u64>,
    text: Option<&'a str>,
    value: Option<f64>,
    message: Option<&'a str>,
}

struct SessionLog {
    start: Instant,
    seq: usize,
    frames: Option<csv::Writer<BufWriter<File>>>,
}

impl SessionLog {
    fn open(dir: Option<&Path>, session: usize) -> Result<Self> {
        let frames = match dir {
            Some(d) => {
                fs::create_dir_all(d)?;
                Some(csv::Writer::from_writer(BufWriter::new(File::create(
                    d.join(format!("session-{session:04}.frames.csv")),
                )?)))
            }
            None => None,
        };
        Ok(Self {
            start: Instant::now(),
            seq: 0,
            frames,
        })
    }

    fn record(&mut self, direction: &str, f: &Frame) -> Result<()> {
        if let Some(w) = &mut self.frames {
            w.serialize(FrameRecord {
                seq: self.seq,
                elapsed_ms: self.start.elapsed().as_millis(),
                direction,
                kind: f.kind,
                id: f.id,
                text: f.text.as_deref(),
                value: f.value,
                message: f.message.as_deref(),
            })?;
        }
        self.seq += 1;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.frames {
            w.flush()?;
        }
        Ok(())
    }
}

/// A bound listener serving one corpus.
pub struct BanditServer {
    listener: TcpListener,
    corpus: Arc<ServedCorpus>,
    reward: Arc<RewardFn>,
    config: ServerConfig,
}

impl BanditServer {
    pub fn bind(addr: impl ToSocketAddrs, corpus: ServedCorpus, config: ServerConfig) -> Result<Self> {
        if config.window == 0 {
            return Err(crate::error::invalid("window must be at least 1"));
        }
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            corpus: Arc::new(corpus),
            reward: Arc::new(|h: &[String], r: &[String]| sentence_reward(h, r).unwrap_or(0.0)),
            config,
        })
    }

    /// Replaces the sentence-BLEU reward.
    pub fn with_reward(mut self, f: impl Fn(&[String], &[String]) -> f64 + Send + Sync + 'static) -> Self {
        self.reward = Arc::new(f);
        self
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Accepts `sessions` connections, each on its own thread, and returns
    /// their summaries in session order.
    pub fn serve(&self, sessions: usize) -> Result<Vec<SessionSummary>> {
        let mut handles = Vec::with_capacity(sessions);
        for session in 0..sessions {
            let (stream, peer) = self.listener.accept()?;
            info!("session {session} from {peer}");
            let corpus = Arc::clone(&self.corpus);
            let reward = Arc::clone(&self.reward);
            let config = self.config.clone();
            handles.push(thread::spawn(move || {
                run_session(session, stream, &corpus, &*reward, &config)
            }));
        }
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .map_err(|_| Error::Protocol("session thread panicked".into()))?
            })
            .collect()
    }

    /// Serves sessions until the process ends.
    pub fn serve_forever(&self) -> Result<()> {
        for (session, stream) in self.listener.incoming().enumerate() {
            let stream = stream?;
            let corpus = Arc::clone(&self.corpus);
            let reward = Arc::clone(&self.reward);
            let config = self.config.clone();
            thread::spawn(move || match run_session(session, stream, &corpus, &*reward, &config) {
                Ok(s) => info!("session {session}: {} rewards, {} errors", s.triples.len(), s.errors),
                Err(e) => warn!("session {session} failed: {e}"),
            });
        }
        Ok(())
    }
}

fn run_session(
    session: usize,
    stream: TcpStream,
    corpus: &ServedCorpus,
    reward: &RewardFn,
    config: &ServerConfig,
) -> Result<SessionSummary> {
    let mut log = SessionLog::open(config.log_dir.as_deref(), session)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut summary = SessionSummary {
        session,
        ..SessionSummary::default()
    };
    let mut outstanding: BTreeSet<u64> = BTreeSet::new();
    let mut rewarded: BTreeSet<u64> = BTreeSet::new();
    let n = corpus.sources.len();
    let mut bye_sent = false;

    let emit = |w: &mut BufWriter<TcpStream>, log: &mut SessionLog, f: Frame| -> Result<()> {
        log.record("out", &f)?;
        send(w, &f)
    };
    let mut exchange = || -> Result<()> {
        emit(&mut writer, &mut log, Frame::hello())?;
        let mut line = String::new();
        loop {
            while outstanding.len() < config.window && summary.sent < n {
                let id = summary.sent as u64;
                emit(
                    &mut writer,
                    &mut log,
                    Frame::src(id, corpus.sources[summary.sent].clone()),
                )?;
                outstanding.insert(id);
                summary.sent += 1;
            }
            if summary.sent == n && !bye_sent {
                emit(&mut writer, &mut log, Frame::bye())?;
                bye_sent = true;
            }
            if bye_sent && outstanding.is_empty() {
                summary.completed = true;
                return Ok(());
            }
            line.clear();
            match reader.read_line(&mut line) {
                Ok(0) => return Ok(()),
                Ok(_) => {}
                Err(e) => return Err(Error::from(e)),
            }
            let text = line.trim_end();
            if text.is_empty() {
                continue;
            }
            let frame = match Frame::parse(text) {
                Ok(f) => f,
                Err(e) => {
                    summary.errors += 1;
                    emit(&mut writer, &mut log, Frame::err(e.to_string()))?;
                    continue;
                }
            };
            log.record("in", &frame)?;
            match frame.kind {
                FrameKind::Trans => {
                    let id = frame.id.expect("checked by parse");
                    if rewarded.contains(&id) {
                        summary.errors += 1;
                        emit(&mut writer, &mut log, Frame::err(format!("duplicate id {id}")))?;
                    } else if !outstanding.remove(&id) {
                        summary.errors += 1;
                        emit(&mut writer, &mut log, Frame::err(format!("unknown id {id}")))?;
                    } else {
                        let hyp = frame.text.unwrap_or_default();
                        let words: Vec<String> = hyp.split_whitespace().map(String::from).collect();
                        let value = reward(&words, &corpus.references[id as usize]).clamp(0.0, 1.0);
                        rewarded.insert(id);
                        emit(&mut writer, &mut log, Frame::reward(id, value))?;
                        summary.triples.push(TripleRecord {
                            id,
                            source: corpus.sources[id as usize].clone(),
                            hypothesis: hyp,
                            reward: value,
                        });
                    }
                }
                FrameKind::Bye => return Ok(()),
                other => {
                    summary.errors += 1;
                    emit(&mut writer, &mut log, Frame::err(format!("unexpected {other:?} frame")))?;
                }
            }
        }
    };
    let result = match exchange() {
        Err(Error::Io(e)) if is_disconnect(&e) => {
            warn!("session {session}: client disconnected");
            Ok(())
        }
        r => r,
    };
    log.flush()?;
    if let Some(dir) = &config.log_dir {
        write_triples_csv(
            &summary.triples,
            BufWriter::new(File::create(dir.join(format!("session-{session:04}.triples.csv")))?),
        )?;
    }
    result.map(|_| summary)
}

fn is_disconnect(e: &std::io::Error) -> bool {
    use std::io::ErrorKind::*;
    matches!(
        e.kind(),
        BrokenPipe | ConnectionReset | ConnectionAborted | UnexpectedEof
    )
}

/// Client side of a session, usable as the learner's feedback channel.
pub struct NetChannel {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    sources: VecDeque<(u64, Vec<String>)>,
    rewards: VecDeque<(u64, f64)>,
    closed: bool,
    /// The server announced that no more sources follow.
    exhausted: bool,
    pub errors: Vec<String>,
}

impl NetChannel {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        let mut ch = Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
            sources: VecDeque::new(),
            rewards: VecDeque::new(),
            closed: false,
            exhausted: false,
            errors: Vec::new(),
        };
        match ch.read_frame()? {
            Some(f) if f.kind == FrameKind::Hello && f.text.as_deref() == Some(PROTOCOL_TAG) => Ok(ch),
            other => Err(Error::Protocol(format!("expected HELLO {PROTOCOL_TAG}, got {other:?}"))),
        }
    }

    fn read_frame(&mut self) -> Result<Option<Frame>> {
        let mut line = String::new();
        loop {
            line.clear();
            if self.reader.read_line(&mut line)? == 0 {
                return Ok(None);
            }
            if !line.trim().is_empty() {
                return Frame::parse(line.trim_end()).map(Some);
            }
        }
    }

    /// Reads one frame into the queues; false once the session ended.
    fn pump(&mut self) -> Result<bool> {
        if self.closed {
            return Ok(false);
        }
        match self.read_frame()? {
            None => {
                self.closed = true;
                Ok(false)
            }
            Some(f) => {
                match f.kind {
                    FrameKind::Src => {
                        let words = f
                            .text
                            .unwrap_or_default()
                            .split_whitespace()
                            .map(String::from)
                            .collect();
                        self.sources.push_back((f.id.expect("checked by parse"), words));
                    }
                    FrameKind::Reward => self
                        .rewards
                        .push_back((f.id.expect("checked by parse"), f.value.unwrap_or(0.0))),
                    FrameKind::Err => {
                        let m = f.message.unwrap_or_default();
                        warn!("server error: {m}");
                        self.errors.push(m);
                    }
                    FrameKind::Bye => self.exhausted = true,
                    FrameKind::Hello | FrameKind::Trans => {
                        return Err(Error::Protocol(format!("unexpected {:?} from server", f.kind)));
                    }
                }
                Ok(true)
            }
        }
    }

    pub fn send_frame(&mut self, f: &Frame) -> Result<()> {
        send(&mut self.writer, f)
    }

    /// Ends the session, sending `BYE` if the server has not.
    pub fn finish(mut self) -> Result<()> {
        if !self.closed && !self.exhausted {
            self.send_frame(&Frame::bye())?;
        }
        Ok(())
    }
}

impl FeedbackChannel for NetChannel {
    fn next_source(&mut self) -> Result<Option<(u64, Vec<String>)>> {
        loop {
            if let Some(s) = self.sources.pop_front() {
                return Ok(Some(s));
            }
            if self.exhausted || !self.pump()? {
                return Ok(None);
            }
        }
    }

    fn submit(&mut self, id: u64, translation: &[String]) -> Result<()> {
        self.send_frame(&Frame::trans(id, translation.join(" ")))
    }

    fn next_reward(&mut self) -> Result<Option<(u64, f64)>> {
        loop {
            if let Some(r) = self.rewards.pop_front() {
                return Ok(Some(r));
            }
            if !self.pump()? {
                return Ok(None);
            }
        }
    }
}

/// Translates every served sentence with `translate` and collects rewards.
/// Returns records in id order.
pub fn run_static_client<F>(addr: impl ToSocketAddrs, translate: F) -> Result<Vec<TripleRecord>>
where
    F: FnMut(&[String]) -> Result<Vec<String>>,
{
    let mut out = Vec::new();
    run_static_client_into(addr, translate, &mut out)?;
    Ok(out)
}

/// [`run_static_client`] appending to `out`. On failure `out` still holds
/// every translation rewarded so far, in id order.
pub fn run_static_client_into<F>(addr: impl ToSocketAddrs, mut translate: F, out: &mut Vec<TripleRecord>) -> Result<()>
where
    F: FnMut(&[String]) -> Result<Vec<String>>,
{
    let mut records = Pending::new();
    let result = (|| {
        let mut ch = NetChannel::connect(addr)?;
        let mut pending = 0usize;
        while let Some((id, words)) = ch.next_source()? {
            let hyp = translate(&words)?;
            ch.submit(id, &hyp)?;
            records.insert(id, (words.join(" "), hyp.join(" "), None));
            pending += 1;
            // keep rewards flowing so the window never stalls
            while let Some((rid, r)) = ch.rewards.pop_front() {
                finish_record(&mut records, rid, r)?;
                pending -= 1;
            }
        }
        while pending > 0 {
            let Some((rid, r)) = ch.next_reward()? else {
                return Err(Error::Protocol(format!(
                    "session ended with {pending} translations unrewarded"
                )));
            };
            finish_record(&mut records, rid, r)?;
            pending -= 1;
        }
        Ok(())
    })();
    out.extend(records.into_iter().filter_map(|(id, (source, hypothesis, reward))| {
        reward.map(|reward| TripleRecord {
            id,
            source,
            hypothesis,
            reward,
        })
    }));
    result
}

type Pending = std::collections::BTreeMap<u64, (String, String, Option<f64>)>;

fn finish_record(records: &mut Pending, id: u64, r: f64) -> Result<()> {
    match records.get_mut(&id) {
        Some(e) if e.2.is_none() => {
            e.2 = Some(r);
            Ok(())
        }
        _ => Err(Error::Protocol(format!("unexpected reward for id {id}"))),
    }
}

/// Records every served source sentence, answering each with an empty
/// translation to advance the stream.
pub fn run_source_logger(addr: impl ToSocketAddrs) -> Result<Vec<String>> {
    let mut ch = NetChannel::connect(addr)?;
    let mut out = Vec::new();
    while let Some((id, words)) = ch.next_source()? {
        ch.submit(id, &[])?;
        out.push(words.join(" "));
    }
    for _ in 0..out.len() {
        ch.next_reward()?;
    }
    Ok(out)
}
