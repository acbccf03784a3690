//! Per-session accuracy rows as printed in the paper's NSynth-100 and
//! LS-100 result tables, in percent, with the printed AA and PD.

use crate::protocol::{aa_pd, Variant};

/// Allowed gap between a recomputed and a printed AA (rounding of the cells).
pub const AA_TOLERANCE: f64 = 0.01;
/// Slack for binary representation of two-decimal numbers.
const REPR_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy)]
pub struct PrintedRow {
    pub method: &'static str,
    pub variant: Variant,
    pub sessions: &'static [Option<f64>],
    pub aa: f64,
    pub pd: f64,
}

/// One recomputed AA or PD cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellCheck {
    /// e.g. `nsynth-100/SC/base/AA`
    pub name: String,
    pub printed: f64,
    pub computed: f64,
    pub passed: bool,
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::All => "all",
        Variant::Base => "base",
        Variant::Incr => "incr",
    }
}

/// Recompute AA and PD for every row of `table` and compare with the print.
/// AA must agree within [`AA_TOLERANCE`]; PD rounded to two decimals must
/// equal the printed value.
pub fn check_table(table_name: &str, table: &[PrintedRow]) -> Vec<CellCheck> {
    let mut out = Vec::with_capacity(2 * table.len());
    for row in table {
        let prefix = format!("{table_name}/{}/{}", row.method, variant_name(row.variant));
        let (aa, pd) = aa_pd(row.sessions, row.variant).expect("printed rows have at least two sessions");
        out.push(CellCheck {
            name: format!("{prefix}/AA"),
            printed: row.aa,
            computed: aa,
            passed: (aa - row.aa).abs() <= AA_TOLERANCE + REPR_SLACK,
        });
        let rounded = (pd * 100.0).round() / 100.0;
        out.push(CellCheck {
            name: format!("{prefix}/PD"),
            printed: row.pd,
            computed: pd,
            passed: (rounded - row.pd).abs() <= REPR_SLACK,
        });
    }
    out
}

/// Every cell of both tables.
pub fn check_all_tables() -> Vec<CellCheck> {
    let mut v = check_table("nsynth-100", NSYNTH_100);
    v.extend(check_table("ls-100", LS_100));
    v
}

/// Cells whose printed value disagrees with its own row: the SC base AA on
/// NSynth-100 (row mean 97.543) and our LS-100 all PD (92.97 − 88.78 = 4.19).
pub const PRINTED_ERRATA: &[&str] = &["nsynth-100/SC/base/AA", "ls-100/Ours/all/PD"];

pub const NSYNTH_100: &[PrintedRow] = &[
    PrintedRow { method: "Finetune", variant: Variant::Base, sessions: &[Some(99.96), Some(88.91), Some(85.41), Some(80.36), Some(72.51), Some(45.24), Some(59.31), Some(48.53), Some(50.68), Some(53.28)], aa: 68.42, pd: 46.68 },
    PrintedRow { method: "Finetune", variant: Variant::Incr, sessions: &[None, Some(38.75), Some(30.25), Some(36.96), Some(37.54), Some(28.95), Some(27.24), Some(22.3), Some(20.58), Some(19.0)], aa: 29.06, pd: 19.75 },
    PrintedRow { method: "Finetune", variant: Variant::All, sessions: &[Some(99.96), Some(84.73), Some(76.92), Some(71.06), Some(63.18), Some(40.15), Some(47.99), Some(38.33), Some(38.01), Some(37.86)], aa: 59.82, pd: 62.1 },
    PrintedRow { method: "iCaRL", variant: Variant::Base, sessions: &[Some(99.98), Some(98.42), Some(99.25), Some(98.4), Some(94.56), Some(82.36), Some(85.09), Some(80.59), Some(75.78), Some(74.53)], aa: 88.9, pd: 25.45 },
    PrintedRow { method: "iCaRL", variant: Variant::Incr, sessions: &[None, Some(36.94), Some(31.88), Some(35.03), Some(38.33), Some(35.27), Some(30.76), Some(26.75), Some(25.52), Some(22.27)], aa: 31.42, pd: 14.67 },
    PrintedRow { method: "iCaRL", variant: Variant::All, sessions: &[Some(99.98), Some(93.3), Some(88.88), Some(84.82), Some(79.57), Some(67.65), Some(65.92), Some(59.65), Some(54.62), Some(51.01)], aa: 74.54, pd: 48.97 },
    PrintedRow { method: "DFSL", variant: Variant::Base, sessions: &[Some(99.93), Some(99.11), Some(98.83), Some(95.83), Some(94.84), Some(94.81), Some(94.39), Some(93.76), Some(92.06), Some(91.61)], aa: 95.52, pd: 8.32 },
    PrintedRow { method: "DFSL", variant: Variant::Incr, sessions: &[None, Some(57.01), Some(55.57), Some(59.89), Some(59.35), Some(56.46), Some(52.29), Some(50.94), Some(52.57), Some(52.49)], aa: 55.17, pd: 4.52 },
    PrintedRow { method: "DFSL", variant: Variant::All, sessions: &[Some(99.93), Some(96.0), Some(92.95), Some(89.26), Some(86.47), Some(83.66), Some(80.28), Some(77.68), Some(76.12), Some(75.01)], aa: 85.74, pd: 24.92 },
    PrintedRow { method: "CEC", variant: Variant::Base, sessions: &[Some(99.96), Some(99.87), Some(99.9), Some(99.29), Some(99.24), Some(99.3), Some(99.26), Some(99.24), Some(99.2), Some(99.23)], aa: 99.45, pd: 0.73 },
    PrintedRow { method: "CEC", variant: Variant::Incr, sessions: &[None, Some(71.06), Some(71.61), Some(72.37), Some(69.17), Some(69.2), Some(66.92), Some(64.8), Some(65.28), Some(63.59)], aa: 68.22, pd: 7.47 },
    PrintedRow { method: "CEC", variant: Variant::All, sessions: &[Some(99.96), Some(97.47), Some(95.56), Some(93.52), Some(91.22), Some(89.9), Some(87.85), Some(85.84), Some(84.92), Some(83.19)], aa: 90.94, pd: 16.77 },
    PrintedRow { method: "SC", variant: Variant::Base, sessions: &[Some(99.98), Some(98.08), Some(98.69), Some(97.38), Some(96.44), Some(97.43), Some(96.99), Some(97.53), Some(96.1), Some(96.81)], aa: 97.56, pd: 3.17 },
    PrintedRow { method: "SC", variant: Variant::Incr, sessions: &[None, Some(95.6), Some(94.73), Some(93.45), Some(92.53), Some(85.2), Some(81.53), Some(78.5), Some(79.44), Some(77.86)], aa: 86.53, pd: 17.74 },
    PrintedRow { method: "SC", variant: Variant::All, sessions: &[Some(99.98), Some(97.88), Some(98.08), Some(96.53), Some(95.55), Some(93.61), Some(91.54), Some(90.13), Some(89.09), Some(88.29)], aa: 94.07, pd: 11.69 },
    PrintedRow { method: "Ours", variant: Variant::Base, sessions: &[Some(100.0), Some(99.66), Some(99.84), Some(98.53), Some(98.4), Some(98.7), Some(98.02), Some(97.82), Some(98.13), Some(97.22)], aa: 98.63, pd: 2.78 },
    PrintedRow { method: "Ours", variant: Variant::Incr, sessions: &[None, Some(96.6), Some(93.6), Some(90.93), Some(90.65), Some(88.64), Some(85.17), Some(84.06), Some(85.68), Some(85.02)], aa: 88.93, pd: 11.58 },
    PrintedRow { method: "Ours", variant: Variant::All, sessions: &[Some(100.0), Some(99.4), Some(98.88), Some(96.9), Some(96.33), Some(95.55), Some(93.5), Some(92.47), Some(92.88), Some(91.73)], aa: 95.77, pd: 8.27 },
];

pub const LS_100: &[PrintedRow] = &[
    PrintedRow { method: "FT", variant: Variant::Base, sessions: &[Some(92.02), Some(72.9), Some(37.03), Some(28.12), Some(20.75), Some(14.45), Some(5.7), Some(3.23), Some(0.27)], aa: 30.5, pd: 91.75 },
    PrintedRow { method: "FT", variant: Variant::Incr, sessions: &[None, Some(86.6), Some(31.5), Some(28.87), Some(25.45), Some(24.24), Some(18.17), Some(13.46), Some(11.8)], aa: 30.01, pd: 74.8 },
    PrintedRow { method: "FT", variant: Variant::All, sessions: &[Some(92.02), Some(73.95), Some(36.24), Some(28.27), Some(21.93), Some(17.33), Some(9.86), Some(7.0), Some(4.88)], aa: 32.39, pd: 87.14 },
    PrintedRow { method: "iCaRL", variant: Variant::Base, sessions: &[Some(92.02), Some(80.8), Some(73.18), Some(58.45), Some(26.95), Some(16.93), Some(32.58), Some(29.53), Some(26.38)], aa: 48.54, pd: 65.64 },
    PrintedRow { method: "iCaRL", variant: Variant::Incr, sessions: &[None, Some(58.0), Some(67.1), Some(57.4), Some(20.05), Some(16.48), Some(30.33), Some(26.83), Some(28.95)], aa: 38.14, pd: 29.05 },
    PrintedRow { method: "iCaRL", variant: Variant::All, sessions: &[Some(92.02), Some(79.05), Some(72.31), Some(58.24), Some(25.23), Some(16.8), Some(31.83), Some(28.54), Some(27.41)], aa: 47.94, pd: 64.61 },
    PrintedRow { method: "DFSL", variant: Variant::Base, sessions: &[Some(91.93), Some(91.93), Some(91.88), Some(91.85), Some(91.83), Some(91.86), Some(91.85), Some(91.85), Some(91.84)], aa: 91.87, pd: 0.09 },
    PrintedRow { method: "DFSL", variant: Variant::Incr, sessions: &[None, Some(53.6), Some(61.9), Some(50.67), Some(48.9), Some(51.56), Some(47.97), Some(44.11), Some(45.38)], aa: 50.51, pd: 8.22 },
    PrintedRow { method: "DFSL", variant: Variant::All, sessions: &[Some(91.93), Some(88.97), Some(87.6), Some(83.61), Some(81.11), Some(80.01), Some(77.22), Some(74.26), Some(73.25)], aa: 81.99, pd: 18.68 },
    PrintedRow { method: "CEC", variant: Variant::Base, sessions: &[Some(91.72), Some(91.67), Some(91.25), Some(91.14), Some(91.1), Some(91.07), Some(90.97), Some(90.66), Some(90.72)], aa: 91.14, pd: 1.0 },
    PrintedRow { method: "CEC", variant: Variant::Incr, sessions: &[None, Some(86.3), Some(82.76), Some(69.67), Some(68.25), Some(67.06), Some(66.03), Some(60.35), Some(60.05)], aa: 70.06, pd: 26.25 },
    PrintedRow { method: "CEC", variant: Variant::All, sessions: &[Some(91.72), Some(91.25), Some(90.04), Some(86.84), Some(85.38), Some(84.01), Some(82.65), Some(79.49), Some(78.45)], aa: 85.54, pd: 13.27 },
    PrintedRow { method: "SC", variant: Variant::Base, sessions: &[Some(92.73), Some(92.72), Some(92.62), Some(92.48), Some(92.48), Some(92.47), Some(92.34), Some(90.74), Some(90.67)], aa: 92.14, pd: 2.06 },
    PrintedRow { method: "SC", variant: Variant::Incr, sessions: &[None, Some(86.84), Some(84.26), Some(77.74), Some(74.99), Some(75.79), Some(74.6), Some(72.45), Some(72.64)], aa: 77.41, pd: 14.2 },
    PrintedRow { method: "SC", variant: Variant::All, sessions: &[Some(92.73), Some(92.27), Some(91.42), Some(89.53), Some(88.1), Some(87.56), Some(86.43), Some(84.0), Some(83.45)], aa: 88.39, pd: 9.28 },
    PrintedRow { method: "Ours", variant: Variant::Base, sessions: &[Some(92.97), Some(92.8), Some(92.37), Some(91.5), Some(91.58), Some(91.9), Some(91.7), Some(91.03), Some(90.88)], aa: 91.86, pd: 2.09 },
    PrintedRow { method: "Ours", variant: Variant::Incr, sessions: &[None, Some(99.6), Some(97.0), Some(92.73), Some(91.05), Some(89.64), Some(89.43), Some(86.14), Some(85.63)], aa: 91.4, pd: 13.97 },
    PrintedRow { method: "Ours", variant: Variant::All, sessions: &[Some(92.97), Some(93.32), Some(93.03), Some(91.75), Some(91.46), Some(91.24), Some(90.95), Some(89.23), Some(88.78)], aa: 91.41, pd: 4.18 },
];
