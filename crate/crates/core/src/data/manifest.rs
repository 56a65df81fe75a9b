use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.emb";

/// One line of `manifest.jsonl`. `image` is relative to the dataset root and
/// `bbox` is `[x, y, w, h]` in pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub image: String,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[u32; 4]>,
    pub emb_index: usize,
}

/// Parses JSON lines; blank lines are skipped. Errors report the byte offset
/// of the offending line.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut records = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let rec = serde_json::from_str(trimmed).map_err(|e| Error::format(offset, e.to_string()))?;
            records.push(rec);
        }
        offset += line.len() as u64;
    }
    Ok(records)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("records serialize"));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_optional_bbox() {
        let text = "{\"image\":\"a.png\",\"class\":3,\"bbox\":[1,2,3,4],\"emb_index\":0}\n\n{\"image\":\"b.png\",\"class\":1,\"emb_index\":1}\n";
        let r = parse_manifest(text).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].bbox, Some([1, 2, 3, 4]));
        assert_eq!(r[1].bbox, None);
    }

    #[test]
    fn bad_line_reports_its_offset() {
        let good = "{\"image\":\"a.png\",\"class\":0,\"emb_index\":0}\n";
        let text = format!("{good}{{\"image\":\"b.png\"}}\n");
        match parse_manifest(&text) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, good.len() as u64),
            other => panic!("unexpected {other:?}"),
        }
    }
}
