//! Report assembly: shared number formatting, check lines, and the
//! text-plus-CSV report emitted by the batch front-end.
//!
//! Every number printed in a text report is formatted through [`fmt_f64`],
//! the same routine used for CSV cells, so the two artifacts always carry
//! identical digits.

use std::fmt::Write as _;

/// Canonical float formatting: shortest representation that round-trips.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

/// One named check with a pass flag and its measured quantity.
#[derive(Debug, Clone)]
pub struct CheckLine {
    pub section: String,
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckLine {
    pub fn new(
        section: &str,
        name: &str,
        pass: bool,
        value: f64,
        threshold: f64,
        detail: impl Into<String>,
    ) -> Self {
        Self {
            section: section.into(),
            name: name.into(),
            pass,
            value,
            threshold,
            detail: detail.into(),
        }
    }
}

/// Collected check lines plus free-form section notes.
#[derive(Debug, Default, Clone)]
pub struct Report {
    pub lines: Vec<CheckLine>,
    pub notes: Vec<(String, String)>,
    pub skipped: Vec<String>,
}

impl Report {
    pub fn push(&mut self, line: CheckLine) {
        self.lines.push(line);
    }

    pub fn note(&mut self, section: &str, text: impl Into<String>) {
        self.notes.push((section.into(), text.into()));
    }

    pub fn skip(&mut self, section: &str) {
        self.skipped.push(section.into());
    }

    pub fn all_pass(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }

    /// Human-readable summary, sectioned, one line per check.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let mut sections: Vec<&str> = Vec::new();
        for l in &self.lines {
            if !sections.contains(&l.section.as_str()) {
                sections.push(&l.section);
            }
        }
        for (s, _) in &self.notes {
            if !sections.contains(&s.as_str()) {
                sections.push(s);
            }
        }
        for section in sections {
            let _ = writeln!(out, "== {section} ==");
            for l in self.lines.iter().filter(|l| l.section == section) {
                let _ = writeln!(
                    out,
                    "[{}] {}: value={} threshold={} {}",
                    if l.pass { "PASS" } else { "FAIL" },
                    l.name,
                    fmt_f64(l.value),
                    fmt_f64(l.threshold),
                    l.detail
                );
            }
            for (_, text) in self.notes.iter().filter(|(s, _)| s == section) {
                let _ = writeln!(out, "note: {text}");
            }
            let _ = writeln!(out);
        }
        for s in &self.skipped {
            let _ = writeln!(out, "== {s} ==\nskipped\n");
        }
        let _ = writeln!(
            out,
            "overall: {}",
            if self.all_pass() { "PASS" } else { "FAIL" }
        );
        out
    }

    /// Machine-readable sibling of the text report.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("section,check,pass,value,threshold,detail\n");
        for l in &self.lines {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                l.section,
                l.name,
                l.pass,
                fmt_f64(l.value),
                fmt_f64(l.threshold),
                l.detail.replace(',', ";")
            );
        }
        out
    }
}
