use std::fmt::Write;

use crate::record::AttentionRecord;

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

/// Each word's weight divided by the largest word weight (all zero if the
/// largest is not positive).
fn shades(record: &AttentionRecord) -> Vec<f64> {
    let max = record.word_weights.iter().copied().fold(0.0_f64, f64::max);
    record
        .word_weights
        .iter()
        .map(|&w| if max > 0.0 { (w / max).clamp(0.0, 1.0) } else { 0.0 })
        .collect()
}

/// One `<p>` with every word on a red background whose opacity is its
/// weight relative to the heaviest word.
pub fn render_heatmap_html(record: &AttentionRecord) -> String {
    let mut out = format!("<p class=\"heatmap\" data-id=\"{}\">", escape(&record.id));
    for (i, (word, shade)) in record.words.iter().zip(shades(record)).enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(
            out,
            "<span style=\"background-color: rgba(220, 20, 20, {shade:.3})\" title=\"{:.4}\">{}</span>",
            record.word_weights[i],
            escape(word)
        )
        .expect("write to String");
    }
    out.push_str("</p>");
    out
}

/// Terminal rendering with 24-bit background colours.
pub fn render_heatmap_ansi(record: &AttentionRecord) -> String {
    let mut out = String::new();
    for (i, (word, shade)) in record.words.iter().zip(shades(record)).enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let fade = (255.0 * (1.0 - shade)).round() as u8;
        let fg = if shade > 0.6 { "255;255;255" } else { "0;0;0" };
        write!(out, "\x1b[38;2;{fg}m\x1b[48;2;255;{fade};{fade}m{word}\x1b[0m").expect("write to String");
    }
    out
}

/// Standalone HTML page with one heatmap per record.
pub fn render_report(records: &[AttentionRecord]) -> String {
    let mut out = String::from(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Attention heatmaps</title>\n\
         <style>body{font-family:sans-serif;line-height:1.9}.meta{color:#555;font-size:90%}</style>\n\
         </head>\n<body>\n",
    );
    for r in records {
        writeln!(
            out,
            "<div class=\"record\"><div class=\"meta\">{} &middot; gold {} &middot; predicted {}</div>\n{}</div>",
            escape(&r.id),
            escape(&r.gold),
            escape(&r.predicted),
            render_heatmap_html(r)
        )
        .expect("write to String");
    }
    out.push_str("</body>\n</html>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(words: &[(&str, f64)]) -> AttentionRecord {
        AttentionRecord {
            id: "r<1>".into(),
            gold: "P".into(),
            predicted: "P".into(),
            words: words.iter().map(|(w, _)| w.to_string()).collect(),
            word_weights: words.iter().map(|(_, a)| *a).collect(),
            token_weights: vec![],
            alignment: vec![],
        }
    }

    #[test]
    fn uniform_weights_share_one_shade() {
        let html = render_heatmap_html(&record(&[("a", 0.25), ("b", 0.25), ("c", 0.25), ("d", 0.25)]));
        assert_eq!(html.matches("rgba(220, 20, 20, 1.000)").count(), 4);
    }

    #[test]
    fn single_heavy_word() {
        let html = render_heatmap_html(&record(&[("a", 0.0), ("binds", 1.0), ("b", 0.0)]));
        assert_eq!(html.matches("1.000)").count(), 1);
        assert!(html.contains("1.000)\" title=\"1.0000\">binds</span>"));
        assert_eq!(html.matches("0.000)").count(), 2);
    }

    #[test]
    fn empty_record_gives_empty_fragment() {
        let html = render_heatmap_html(&record(&[]));
        assert_eq!(html, "<p class=\"heatmap\" data-id=\"r&lt;1&gt;\"></p>");
        assert_eq!(render_heatmap_ansi(&record(&[])), "");
    }

    #[test]
    fn output_is_deterministic_and_escaped() {
        let r = record(&[("<b>", 0.5), ("&", 0.5)]);
        let one = std::slice::from_ref(&r);
        assert_eq!(render_report(one), render_report(one));
        assert!(render_heatmap_html(&r).contains("&lt;b&gt;"));
        assert!(render_heatmap_ansi(&r).contains("48;2;255;0;0m<b>"));
    }
}
