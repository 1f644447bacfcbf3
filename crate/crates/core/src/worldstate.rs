//! Incremental task state: vocabulary expansion, freezing and persistence.
//!
//! State file layout (little-endian):
//!
//! ```text
//! "UOWS" | version u32 | body length u64 | body | CRC32 of everything before it, u32
//! body = task_index u32 | dim u32 | count u32
//!        | count x (name length u32 | UTF-8 name | status u8 | dim x f32)
//!        | obj flag u8 [| dim x f32] | unk flag u8 [| dim x f32]
//!        | history count u32 | per task (task_index u32 | name count u32 | names as above)
//! ```

use std::path::Path;

use crate::binio::Reader;
use crate::embedding::{CategoryStatus, Embedding, Vocabulary};
use crate::error::{Error, Result};
use crate::textenc::{encode, ToyTextEncoder};
use crate::train::WILDCARD_TEXT;

pub const STATE_MAGIC: &[u8; 4] = b"UOWS";
pub const STATE_VERSION: u32 = 1;
const WHAT: &str = "task state";
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskState {
    pub task_index: usize,
    pub vocab: Vocabulary,
    /// Names added by each task, oldest first.
    pub history: Vec<(usize, Vec<String>)>,
}

impl TaskState {
    /// Task 1 with every name current-known, embedded by the encoder.
    pub fn initial(names: &[&str], enc: &ToyTextEncoder) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::EmptyVocabulary);
        }
        let mut vocab = Vocabulary::new();
        for name in names {
            vocab.push(name, encode(name, enc)?, CategoryStatus::CurrentKnown)?;
        }
        Ok(TaskState { task_index: 1, vocab, history: vec![(1, names.iter().map(|n| n.to_string()).collect())] })
    }

    pub fn known_names(&self) -> Vec<&str> {
        self.vocab.names()
    }
}

/// Starts the next task: current categories are frozen, `new_names` appended
/// as current-known, and the unknown wildcard reset to `encode("object")`.
pub fn expand(state: &TaskState, new_names: &[&str], enc: &ToyTextEncoder) -> Result<TaskState> {
    if new_names.is_empty() {
        return Err(Error::EmptyVocabulary);
    }
    let mut vocab = Vocabulary::new();
    for e in state.vocab.entries() {
        vocab.push(&e.name, e.embedding.clone(), CategoryStatus::PreviouslyKnown)?;
    }
    for name in new_names {
        vocab.push(name, encode(name, enc)?, CategoryStatus::CurrentKnown)?;
    }
    vocab.wildcard_obj = state.vocab.wildcard_obj.clone();
    vocab.wildcard_unk = Some(encode(WILDCARD_TEXT, enc)?);
    let task_index = state.task_index + 1;
    let mut history = state.history.clone();
    history.push((task_index, new_names.iter().map(|n| n.to_string()).collect()));
    Ok(TaskState { task_index, vocab, history })
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("value fits in u32").to_le_bytes());
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
}

fn put_embedding(out: &mut Vec<u8>, e: &Embedding) {
    for v in e.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn state_bytes(state: &TaskState) -> Vec<u8> {
    let dim = state.vocab.dim().unwrap_or(0);
    let mut body = Vec::new();
    put_u32(&mut body, state.task_index);
    put_u32(&mut body, dim);
    put_u32(&mut body, state.vocab.len());
    for e in state.vocab.entries() {
        put_name(&mut body, &e.name);
        body.push(match e.status {
            CategoryStatus::PreviouslyKnown => 0,
            CategoryStatus::CurrentKnown => 1,
        });
        put_embedding(&mut body, &e.embedding);
    }
    for w in [&state.vocab.wildcard_obj, &state.vocab.wildcard_unk] {
        body.push(w.is_some() as u8);
        if let Some(e) = w {
            put_embedding(&mut body, e);
        }
    }
    put_u32(&mut body, state.history.len());
    for (task, names) in &state.history {
        put_u32(&mut body, *task);
        put_u32(&mut body, names.len());
        for n in names {
            put_name(&mut body, n);
        }
    }

    let mut out = Vec::with_capacity(PREAMBLE + body.len() + 4);
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn malformed(message: impl Into<String>) -> Error {
    Error::Malformed { what: WHAT, line: 0, message: message.into() }
}

fn read_name(r: &mut Reader<'_>) -> Result<String> {
    let len = r.u32()? as usize;
    String::from_utf8(r.take(len)?.to_vec()).map_err(|_| malformed("name is not UTF-8"))
}

fn read_embedding(r: &mut Reader<'_>, dim: usize) -> Result<Embedding> {
    let mut v = Vec::with_capacity(dim);
    for _ in 0..dim {
        v.push(r.f32()?);
    }
    Embedding::from_unit_f32(v)
}

/// Decodes a state; the checksum is verified before any field is interpreted.
pub fn state_from_bytes(bytes: &[u8]) -> Result<TaskState> {
    let mut r = Reader::new(bytes, WHAT);
    if r.take(4)? != STATE_MAGIC {
        return Err(Error::BadMagic { what: WHAT, expected: "UOWS" });
    }
    let version = r.u32()?;
    if version != STATE_VERSION {
        return Err(Error::VersionMismatch { what: WHAT, found: version, expected: STATE_VERSION });
    }
    let body_len = usize::try_from(r.u64()?).map_err(|_| Error::Truncated(WHAT))?;
    let total = PREAMBLE.checked_add(body_len).and_then(|n| n.checked_add(4)).ok_or(Error::Truncated(WHAT))?;
    if bytes.len() < total {
        return Err(Error::Truncated(WHAT));
    }
    if bytes.len() > total {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - total)));
    }
    let stored = u32::from_le_bytes(bytes[total - 4..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..total - 4]);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader::new(&bytes[PREAMBLE..total - 4], WHAT);
    let task_index = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut vocab = Vocabulary::new();
    for _ in 0..count {
        let name = read_name(&mut r)?;
        let status = match r.u8()? {
            0 => CategoryStatus::PreviouslyKnown,
            1 => CategoryStatus::CurrentKnown,
            s => return Err(malformed(format!("invalid status byte {s}"))),
        };
        let e = read_embedding(&mut r, dim)?;
        vocab.push(&name, e, status)?;
    }
    let mut wildcards = [None, None];
    for w in &mut wildcards {
        *w = match r.u8()? {
            0 => None,
            1 => Some(read_embedding(&mut r, dim)?),
            f => return Err(malformed(format!("invalid presence flag {f}"))),
        };
    }
    let [obj, unk] = wildcards;
    vocab.wildcard_obj = obj;
    vocab.wildcard_unk = unk;
    let tasks = r.u32()? as usize;
    let mut history = Vec::with_capacity(tasks.min(1024));
    for _ in 0..tasks {
        let t = r.u32()? as usize;
        let n = r.u32()? as usize;
        let names = (0..n).map(|_| read_name(&mut r)).collect::<Result<Vec<_>>>()?;
        history.push((t, names));
    }
    if !r.is_empty() {
        return Err(malformed("unread bytes after history"));
    }
    Ok(TaskState { task_index, vocab, history })
}

pub fn save(state: &TaskState, path: &Path) -> Result<()> {
    crate::binio::write_atomic(path, &state_bytes(state))
}

pub fn load(path: &Path) -> Result<TaskState> {
    state_from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
