use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ProtocolError, SessionMetrics};

/// Which accuracy row the AA/PD pair summarises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    All,
    Base,
    Incr,
}

impl Variant {
    fn name(self) -> &'static str {
        match self {
            Variant::All => "all",
            Variant::Base => "base",
            Variant::Incr => "incr",
        }
    }
}

/// Average accuracy and performance drop of one row of per-session
/// accuracies `A_0 … A_{L−1}`.
///
/// `All` and `Base` use every session: `AA = mean(A_l)`, `PD = A_0 − A_{L−1}`.
/// `Incr` skips session 0, which has no incremental classes (pass `None`
/// there): `AA = mean(A_1 … A_{L−1})`, `PD = A_1 − A_{L−1}`.
pub fn aa_pd(row: &[Option<f64>], variant: Variant) -> Result<(f64, f64), ProtocolError> {
    if row.len() < 2 {
        return Err(ProtocolError::TooFewSessions {
            variant: variant.name(),
            needed: 2,
            got: row.len(),
        });
    }
    let used = match variant {
        Variant::All | Variant::Base => row,
        Variant::Incr => &row[1..],
    };
    let values = used
        .iter()
        .enumerate()
        .map(|(i, a)| a.ok_or_else(|| ProtocolError::DegenerateInput(format!("{} row has no accuracy at position {i}", variant.name()))))
        .collect::<Result<Vec<f64>, _>>()?;
    let aa = values.iter().sum::<f64>() / values.len() as f64;
    let pd = values[0] - values[values.len() - 1];
    Ok((aa, pd))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AaPdSummary {
    pub aa: f64,
    pub pd: f64,
}

/// Everything a protocol run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    /// SHA-256 over the serialised effective configuration, hex.
    pub config_digest: String,
    pub sessions: Vec<SessionMetrics>,
    pub all: Option<AaPdSummary>,
    pub base: Option<AaPdSummary>,
    pub incr: Option<AaPdSummary>,
    /// Clustering ratio of base evaluation embeddings after base training.
    pub clustering_ratio: Option<f64>,
    /// Effective configuration, echoed by callers that have one.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl RunReport {
    pub fn from_sessions(
        seed: u64,
        config_digest: String,
        sessions: Vec<SessionMetrics>,
        clustering_ratio: Option<f64>,
    ) -> Self {
        let summary = |variant, row: Vec<Option<f64>>| aa_pd(&row, variant).ok().map(|(aa, pd)| AaPdSummary { aa, pd });
        let all = summary(Variant::All, sessions.iter().map(|s| Some(s.acc_all)).collect());
        let base = summary(Variant::Base, sessions.iter().map(|s| Some(s.acc_base)).collect());
        let incr = summary(Variant::Incr, sessions.iter().map(|s| s.acc_incr).collect());
        Self {
            seed,
            config_digest,
            sessions,
            all,
            base,
            incr,
            clustering_ratio,
            config: serde_json::Value::Null,
        }
    }

    /// Comma-separated table in the paper's layout: one row each for Base,
    /// Incr. and All, one column per session, then AA and PD, in percent.
    pub fn to_csv(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut s = String::from("row");
        for m in &self.sessions {
            write!(s, ",session{}", m.session).unwrap();
        }
        s.push_str(",AA,PD\n");
        let rows: [(&str, Box<dyn Fn(&SessionMetrics) -> Option<f64>>, Option<AaPdSummary>); 3] = [
            ("Base", Box::new(|m| Some(m.acc_base)), self.base),
            ("Incr.", Box::new(|m| m.acc_incr), self.incr),
            ("All", Box::new(|m| Some(m.acc_all)), self.all),
        ];
        for (name, get, summary) in rows {
            s.push_str(name);
            for m in &self.sessions {
                write!(s, ",{}", pct(get(m))).unwrap();
            }
            writeln!(s, ",{},{}", pct(summary.map(|x| x.aa)), pct(summary.map(|x| x.pd))).unwrap();
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// Fixed-width rendering of [`RunReport::to_csv`] for terminals.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for line in self.to_csv().lines() {
            let cells: Vec<&str> = line.split(',').collect();
            write!(out, "{:<6}", cells[0]).unwrap();
            for c in &cells[1..] {
                write!(out, " {:>9}", c.trim_start_matches("session")).unwrap();
            }
            out.push('\n');
        }
        out
    }
}
