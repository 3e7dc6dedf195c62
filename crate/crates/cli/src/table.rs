//! Plain-text tables with aligned columns: headers, a rule, then rows.
//! Cells that parse as numbers are right-aligned, everything else left.

pub fn render(headers: &[&str], rows: &[Vec<String>]) -> String {
    let columns = headers.len();
    let mut widths: Vec<usize> = headers.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(columns) {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }

    let mut out = String::new();
    for (i, h) in headers.iter().enumerate() {
        if i > 0 {
            out.push_str("  ");
        }
        out.push_str(&format!("{h:<width$}", width = widths[i]));
    }
    out.push('\n');
    for (i, w) in widths.iter().enumerate() {
        if i > 0 {
            out.push_str("  ");
        }
        out.push_str(&"-".repeat(*w));
    }
    out.push('\n');
    for row in rows {
        for (i, cell) in row.iter().enumerate().take(columns) {
            if i > 0 {
                out.push_str("  ");
            }
            let numeric = cell.parse::<f64>().is_ok() || cell == "inf";
            if numeric {
                out.push_str(&format!("{cell:>width$}", width = widths[i]));
            } else {
                out.push_str(&format!("{cell:<width$}", width = widths[i]));
            }
        }
        out.push('\n');
    }
    out
}
