//! Metric tables: an aligned text table and a CSV file with the same
//! numbers.

use std::fmt::Write as _;

use shapeprior_core::training::MetricTable;

/// Values are shown ×10³ with three decimals.
pub fn scaled(v: f64) -> String {
    format!("{:.3}", v * 1e3)
}

/// One row per table (resolution): Avg, then each category.
pub fn render(tables: &[MetricTable]) -> String {
    let Some(first) = tables.first() else {
        return String::new();
    };
    let mut header = vec![format!("{} (x10^-3)", first.metric), "Avg".to_string()];
    header.extend(first.categories.iter().map(|(c, _)| c.clone()));
    let mut rows = vec![header];
    for t in tables {
        let mut row = vec![format!("N={}", t.resolution), scaled(t.average)];
        row.extend(t.categories.iter().map(|(_, v)| scaled(*v)));
        rows.push(row);
    }
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(String::len).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, cell)| {
                if i == 0 {
                    format!("{cell:<w$}", w = widths[i])
                } else {
                    format!("{cell:>w$}", w = widths[i])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

/// `category,resolution,variant,value` with the printed values.
pub fn csv(tables: &[MetricTable]) -> String {
    let mut out = String::from("category,resolution,variant,value\n");
    for t in tables {
        let mut rows = vec![("Avg", t.average)];
        rows.extend(t.categories.iter().map(|(c, v)| (c.as_str(), *v)));
        for (c, v) in rows {
            let _ = writeln!(out, "{c},{},{},{}", t.resolution, t.metric, scaled(v));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use shapeprior_core::pointops::ChamferVariant;
    use shapeprior_core::training::Metric;

    fn table(values: &[(&str, f64)]) -> MetricTable {
        MetricTable::new(
            Metric::Chamfer(ChamferVariant::CdT),
            16384,
            values.iter().map(|(c, v)| (c.to_string(), *v)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn prints_scaled_three_decimals() {
        let t = table(&[("plane", 0.008496)]);
        let text = render(&[t]);
        assert!(text.contains("8.496"), "{text}");
        let zero = render(&[table(&[("a", 0.0), ("b", 0.0)])]);
        assert_eq!(zero.matches("0.000").count(), 3);
    }

    #[test]
    fn csv_reparses_to_printed_values() {
        let t = table(&[("a", 0.0012345), ("b", 0.0049), ("a", 0.002)]);
        let text = render(std::slice::from_ref(&t));
        let csv = csv(std::slice::from_ref(&t));
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("category,resolution,variant,value"));
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            assert_eq!(fields.len(), 4);
            let v: f64 = fields[3].parse().unwrap();
            assert!(text.contains(&format!("{v:.3}")), "{line} vs\n{text}");
        }
    }
}
