//! Line-oriented reports: each record is a tag followed by space-separated
//! `key=value` fields, e.g. `verify name=thm2_cmf trials=100 result=pass`.

use std::fmt::{self, Display};

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    tag: String,
    fields: Vec<(String, String)>,
}

impl Record {
    pub fn new(tag: &str) -> Self {
        Record {
            tag: tag.to_string(),
            fields: Vec::new(),
        }
    }

    pub fn field(mut self, key: &str, value: impl Display) -> Self {
        self.fields.push((key.to_string(), value.to_string()));
        self
    }

    /// Shortest exact scientific form.
    pub fn real(self, key: &str, value: f64) -> Self {
        self.field(key, format_args!("{value:e}"))
    }

    pub fn verdict(self, pass: bool) -> Self {
        self.field("result", if pass { "pass" } else { "fail" })
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn parse(line: &str) -> Option<Record> {
        let mut toks = line.split_whitespace();
        let tag = toks.next()?;
        let mut rec = Record::new(tag);
        for t in toks {
            let (k, v) = t.split_once('=')?;
            rec.fields.push((k.to_string(), v.to_string()));
        }
        Some(rec)
    }
}

impl Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag)?;
        for (k, v) in &self.fields {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let r = Record::new("scan").field("level", 2).real("err", 0.5).verdict(true);
        let line = r.to_string();
        assert_eq!(line, "scan level=2 err=5e-1 result=pass");
        assert_eq!(Record::parse(&line), Some(r));
        assert_eq!(Record::parse("x y").map(|r| r.get("y").is_none()), None);
    }
}
