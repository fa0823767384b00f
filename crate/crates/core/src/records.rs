//! JSONL reading/writing and path helpers shared by the dataset formats.

use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Reads one JSON value per nonblank line; errors name `file:line`.
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::json(format!("{}:{}", path.display(), i + 1), e))
        })
        .collect()
}

/// Serializes records one per line, in order, with a trailing newline.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::json(path.display().to_string(), e))?;
        buf.push(b'\n');
    }
    write_bytes(path, &buf)
}

pub fn write_json_pretty<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut buf = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::json(path.display().to_string(), e))?;
    buf.push(b'\n');
    write_bytes(path, &buf)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Joins `rel` onto the directory holding `file`, leaving absolute paths alone.
pub fn resolve_from(file: &Path, rel: &str) -> PathBuf {
    let rel = Path::new(rel);
    if rel.is_absolute() {
        return rel.to_path_buf();
    }
    file.parent().unwrap_or(Path::new("")).join(rel)
}

fn absolute(path: &Path) -> Result<PathBuf> {
    let abs = if path.is_absolute() {
        path.to_path_buf()
    } else {
        std::env::current_dir()
            .map_err(|e| Error::io(path, e))?
            .join(path)
    };
    // lexical normalization; the targets may not exist yet
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other),
        }
    }
    Ok(out)
}

/// Path of `target` relative to directory `base`, written with `/` separators.
pub fn relative_to(target: &Path, base: &Path) -> Result<String> {
    let t = absolute(target)?;
    let b = absolute(base)?;
    let tc: Vec<_> = t.components().collect();
    let bc: Vec<_> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    let mut parts: Vec<String> = vec!["..".to_string(); bc.len() - common];
    parts.extend(
        tc[common..]
            .iter()
            .map(|c| c.as_os_str().to_string_lossy().into_owned()),
    );
    Ok(parts.join("/"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Row {
        id: u32,
    }

    #[test]
    fn jsonl_round_trip_and_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/rows.jsonl");
        write_jsonl(&p, &[Row { id: 1 }, Row { id: 2 }]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "{\"id\":1}\n{\"id\":2}\n");
        assert_eq!(read_jsonl::<Row>(&p).unwrap(), vec![Row { id: 1 }, Row { id: 2 }]);

        fs::write(&p, "{\"id\":1}\n\n{\"id\":\"x\"}\n").unwrap();
        let err = read_jsonl::<Row>(&p).unwrap_err().to_string();
        assert!(err.contains("rows.jsonl:3"), "{err}");
    }

    #[test]
    fn relative_paths() {
        let r = relative_to(Path::new("/a/gen/images/x.pgm"), Path::new("/a/pairs")).unwrap();
        assert_eq!(r, "../gen/images/x.pgm");
        let r = relative_to(Path::new("/a/b/c.pgm"), Path::new("/a/b")).unwrap();
        assert_eq!(r, "c.pgm");
        assert_eq!(
            resolve_from(Path::new("/a/pairs/p.jsonl"), "../gen/x.pgm"),
            PathBuf::from("/a/pairs/../gen/x.pgm")
        );
    }
}
