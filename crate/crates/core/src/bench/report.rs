use std::fmt::Write as _;

use super::LatencyRecord;

pub const CSV_HEADER: &str = "phase,context_len,wall_time_s,peak_entries,peak_bytes";

pub fn render_csv(records: &[LatencyRecord]) -> String {
    let mut out = String::new();
    writeln!(out, "{CSV_HEADER}").unwrap();
    for r in records {
        writeln!(
            out,
            "{},{},{:.9},{},{}",
            r.phase, r.context_len, r.wall_time, r.peak_entries, r.peak_bytes
        )
        .unwrap();
    }
    out
}

/// Structured text: a `[summary]` table of named values followed by one
/// `[[record]]` table per row with the CSV fields.
pub fn render_report(summary: &[(&str, String)], records: &[LatencyRecord]) -> String {
    let mut out = String::from("[summary]\n");
    for (k, v) in summary {
        writeln!(out, "{k} = {v}").unwrap();
    }
    for r in records {
        writeln!(
            out,
            "\n[[record]]\nphase = \"{}\"\ncontext_len = {}\nwall_time_s = {:e}\npeak_entries = {}\npeak_bytes = {}",
            r.phase, r.context_len, r.wall_time, r.peak_entries, r.peak_bytes
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::Phase;

    #[test]
    fn csv_has_header_and_one_row_per_record() {
        let r = LatencyRecord {
            phase: Phase::Decode,
            context_len: 4096,
            wall_time: 0.00125,
            peak_entries: 1088,
            peak_bytes: 12,
        };
        let csv = render_csv(&[r.clone(), r]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "decode,4096,0.001250000,1088,12");
    }
}
