use std::fmt::Display;

/// `key=value` lines in insertion order.
#[derive(Debug, Default)]
pub struct Report {
    lines: Vec<(String, String)>,
}

impl Report {
    pub fn push(&mut self, key: impl Into<String>, value: impl Display) {
        self.lines.push((key.into(), value.to_string()));
    }

    pub fn print(&self) {
        for (k, v) in &self.lines {
            println!("{k}={v}");
        }
    }
}
