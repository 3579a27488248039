//! Append-only JSON-lines event log with fsync-per-append durability.
//!
//! One event per line. A torn final line (no trailing newline, or not
//! parseable) is the signature of an interrupted append and is truncated on
//! open; corruption anywhere else is an error.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JournalError {
    #[error("journal I/O on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("journal {path} is corrupt at line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// Whether each append is forced to stable storage before returning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Durability {
    #[default]
    Sync,
    /// Flush to the OS only. For throwaway stores in tests and simulations.
    Buffered,
}

pub struct Journal<E> {
    path: PathBuf,
    file: File,
    durability: Durability,
    _event: PhantomData<fn(E)>,
}

impl<E: Serialize + DeserializeOwned> Journal<E> {
    /// Opens (creating if needed) the journal and returns every committed event.
    pub fn open(path: &Path, durability: Durability) -> Result<(Self, Vec<E>), JournalError> {
        let io_err = |source| JournalError::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io_err)?;
        let (events, committed_len) = read_events(path, &file)?;
        let actual_len = file.metadata().map_err(io_err)?.len();
        if committed_len < actual_len {
            tracing::warn!(
                path = %path.display(),
                dropped = actual_len - committed_len,
                "truncating torn journal tail"
            );
            file.set_len(committed_len).map_err(io_err)?;
            file.sync_all().map_err(io_err)?;
        }
        file.seek(SeekFrom::End(0)).map_err(io_err)?;
        Ok((
            Journal {
                path: path.to_path_buf(),
                file,
                durability,
                _event: PhantomData,
            },
            events,
        ))
    }

    pub fn append(&mut self, event: &E) -> Result<(), JournalError> {
        let mut line = serde_json::to_vec(event).expect("journal events serialize");
        line.push(b'\n');
        let io_err = |source| JournalError::Io {
            path: self.path.clone(),
            source,
        };
        self.file.write_all(&line).map_err(io_err)?;
        match self.durability {
            Durability::Sync => self.file.sync_data().map_err(io_err)?,
            Durability::Buffered => self.file.flush().map_err(io_err)?,
        }
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

fn read_events<E: DeserializeOwned>(path: &Path, file: &File) -> Result<(Vec<E>, u64), JournalError> {
    let mut reader = BufReader::new(file);
    reader.seek(SeekFrom::Start(0)).map_err(|source| JournalError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut events = Vec::new();
    let mut committed = 0u64;
    let mut buf = Vec::new();
    let mut line_no = 0usize;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf).map_err(|source| JournalError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.last() == Some(&b'\n');
        match serde_json::from_slice::<E>(&buf) {
            Ok(event) if complete => {
                events.push(event);
                committed += n as u64;
            }
            Ok(_) => break,
            Err(e) => {
                // Only the final line may be torn.
                let mut rest = Vec::new();
                io::Read::read_to_end(&mut reader, &mut rest).map_err(|source| JournalError::Io {
                    path: path.to_path_buf(),
                    source,
                })?;
                if rest.is_empty() {
                    break;
                }
                return Err(JournalError::Corrupt {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: e.to_string(),
                });
            }
        }
    }
    Ok((events, committed))
}
