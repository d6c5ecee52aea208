use vqg_core::metrics::MetricReport;

pub const COLUMNS: [&str; 6] = ["BLEU", "METEOR", "ROUGE-L", "CIDEr", "Gen.Str.", "Inv.%"];

pub fn metric_values(r: &MetricReport) -> [f64; 6] {
    [
        r.bleu,
        r.meteor,
        r.rouge_l,
        r.cider,
        r.generative_strength,
        r.inventiveness_pct,
    ]
}

/// Plain-text table with a label column and one row per report.
pub fn render(rows: &[(String, [f64; 6])]) -> String {
    let label_w = rows
        .iter()
        .map(|(l, _)| l.chars().count())
        .chain(["run".len()])
        .max()
        .unwrap_or(3);
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|(_, v)| v.iter().map(|x| format!("{x:.2}")).collect())
        .collect();
    let widths: Vec<usize> = (0..COLUMNS.len())
        .map(|c| {
            cells
                .iter()
                .map(|r| r[c].len())
                .chain([COLUMNS[c].len()])
                .max()
                .unwrap_or(0)
        })
        .collect();

    let mut out = format!("{:<label_w$}", "run");
    for (name, w) in COLUMNS.iter().zip(&widths) {
        out.push_str(&format!("  {name:>w$}"));
    }
    out.push('\n');
    let rule = label_w + widths.iter().map(|w| w + 2).sum::<usize>();
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for ((label, _), row) in rows.iter().zip(&cells) {
        out.push_str(&format!("{label:<label_w$}"));
        for (cell, w) in row.iter().zip(&widths) {
            out.push_str(&format!("  {cell:>w$}"));
        }
        out.push('\n');
    }
    out
}
