//! JSONL persistence and the bounded worker pool.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::mpsc;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::HarnessError;

/// Read every record of a JSONL file; a missing file reads as empty.
///
/// A final line that fails to parse is treated as an interrupted write and
/// skipped with a warning. Earlier malformed lines are errors.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, HarnessError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(HarnessError::io(path, e)),
    };
    let lines: Vec<String> = BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| HarnessError::io(path, e))?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(e) if i + 1 == lines.len() => {
                log::warn!("{}: ignoring truncated last line: {e}", path.display());
            }
            Err(e) => {
                return Err(HarnessError::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Replace `path` with the given records, one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), HarnessError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("record serializes");
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

/// Appends records to a JSONL file as they complete, so an interrupted
/// stage keeps its finished work.
pub(crate) struct Appender {
    file: File,
    path: std::path::PathBuf,
}

impl Appender {
    pub fn open(path: &Path) -> Result<Self, HarnessError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| HarnessError::io(path, e))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> Result<(), HarnessError> {
        let mut line = serde_json::to_vec(record).expect("record serializes");
        line.push(b'\n');
        self.file
            .write_all(&line)
            .and_then(|_| self.file.flush())
            .map_err(|e| HarnessError::io(&self.path, e))
    }
}

/// Run `work` over `jobs` on `workers` threads, handing each result to
/// `sink` on the calling thread as soon as it is ready.
pub(crate) fn run_jobs<J, R, E>(
    workers: usize,
    jobs: &[J],
    work: impl Fn(&J) -> R + Sync,
    mut sink: impl FnMut(R) -> Result<(), E>,
) -> Result<(), E>
where
    J: Sync,
    R: Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .expect("worker pool starts");
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        scope.spawn(|| {
            pool.install(|| {
                jobs.par_iter().for_each_with(tx, |tx, job| {
                    let _ = tx.send(work(job));
                })
            })
        });
        // Keep draining after a sink error so the workers can finish.
        let mut first_err = None;
        for r in rx {
            if first_err.is_none() {
                if let Err(e) = sink(r) {
                    first_err = Some(e);
                }
            }
        }
        first_err.map_or(Ok(()), Err)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        // Rewriting a reloaded file must not change a single byte.
        #[test]
        fn floats_survive_a_round_trip(xs in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL, 1..20)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("f.jsonl");
            write_jsonl(&p, &xs).unwrap();
            let back: Vec<f64> = read_jsonl(&p).unwrap();
            prop_assert_eq!(back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn round_trip_and_truncated_tail() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        assert!(read_jsonl::<u32>(&p).unwrap().is_empty());
        write_jsonl(&p, &[1u32, 2, 3]).unwrap();
        assert_eq!(read_jsonl::<u32>(&p).unwrap(), vec![1, 2, 3]);
        let mut a = Appender::open(&p).unwrap();
        a.append(&4u32).unwrap();
        drop(a);
        std::fs::OpenOptions::new().append(true).open(&p).unwrap().write_all(b"{\"trunc").unwrap();
        assert_eq!(read_jsonl::<u32>(&p).unwrap(), vec![1, 2, 3, 4]);
        std::fs::write(&p, "1\nnope\n2\n").unwrap();
        assert!(matches!(read_jsonl::<u32>(&p), Err(HarnessError::Parse { line: 2, .. })));
    }

    #[test]
    fn pool_delivers_every_result() {
        let jobs: Vec<u64> = (0..100).collect();
        let mut got = Vec::new();
        run_jobs(3, &jobs, |j| j * 2, |r| {
            got.push(r);
            Ok::<_, ()>(())
        })
        .unwrap();
        got.sort();
        assert_eq!(got, jobs.iter().map(|j| j * 2).collect::<Vec<_>>());
    }
}
