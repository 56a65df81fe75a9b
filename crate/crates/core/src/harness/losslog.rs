use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER: &str = "epoch,minibatch,name,value";

#[derive(Clone, Debug, PartialEq)]
pub struct LossRow {
    pub epoch: usize,
    pub minibatch: usize,
    pub name: String,
    pub value: f64,
}

/// Per-minibatch loss values, written as CSV. Values print in shortest
/// round-trip form so the file parses back to identical rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<LossRow>,
}

impl LossLog {
    pub fn push(&mut self, epoch: usize, minibatch: usize, name: &str, value: f64) {
        self.rows.push(LossRow {
            epoch,
            minibatch,
            name: name.to_string(),
            value,
        });
    }

    pub fn values<'a>(&'a self, name: &'a str) -> impl Iterator<Item = f64> + 'a {
        self.rows.iter().filter(move |r| r.name == name).map(|r| r.value)
    }

    /// Mean of `name` over each epoch that logged it, in epoch order.
    pub fn epoch_means(&self, name: &str) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.name == name) {
            match out.last_mut() {
                Some((e, s, n)) if *e == r.epoch => {
                    *s += r.value;
                    *n += 1;
                }
                _ => out.push((r.epoch, r.value, 1)),
            }
        }
        out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
    }

    /// Drops rows from `epoch` onwards.
    pub fn truncate_to_epoch(&mut self, epoch: usize) {
        self.rows.retain(|r| r.epoch < epoch);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.minibatch, r.name, r.value));
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(Error::format(0, format!("expected header `{HEADER}`")));
        }
        let mut offset = HEADER.len() as u64 + 1;
        let mut log = LossLog::default();
        for line in lines {
            let bad = || Error::format(offset, format!("malformed row `{line}`"));
            let mut f = line.split(',');
            let (Some(e), Some(m), Some(n), Some(v), None) = (f.next(), f.next(), f.next(), f.next(), f.next()) else {
                return Err(bad());
            };
            log.rows.push(LossRow {
                epoch: e.parse().map_err(|_| bad())?,
                minibatch: m.parse().map_err(|_| bad())?,
                name: n.to_string(),
                value: v.parse().map_err(|_| bad())?,
            });
            offset += line.len() as u64 + 1;
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_means_group_rows() {
        let mut log = LossLog::default();
        log.push(0, 0, "total", 4.0);
        log.push(0, 0, "kl", 9.0);
        log.push(0, 1, "total", 2.0);
        log.push(1, 0, "total", 1.0);
        assert_eq!(log.epoch_means("total"), vec![(0, 3.0), (1, 1.0)]);
    }

    #[test]
    fn rejects_bad_rows() {
        assert!(LossLog::parse_csv("epoch,minibatch,name,value\n1,2,x\n").is_err());
        assert!(LossLog::parse_csv("nope\n").is_err());
    }
}
