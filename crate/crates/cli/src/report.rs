//! Report emission: RFC-4180 CSV files and a dependency-free SVG render
//! of a ROC curve. All numeric formatting is fixed-width, so identical
//! inputs produce byte-identical files.

use std::fs;
use std::path::Path;

use strabscreen_core::error::{io_with_path, Error, Result};
use strabscreen_core::metrics::RocCurve;

/// Quotes a field when it contains a comma, quote, or line break;
/// embedded quotes are doubled.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\r', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes header plus rows with CRLF line endings.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push_str("\r\n");
    for row in rows {
        let escaped: Vec<String> = row.iter().map(|f| csv_field(f)).collect();
        out.push_str(&escaped.join(","));
        out.push_str("\r\n");
    }
    fs::write(path, out).map_err(|e| Error::Io(io_with_path(e, path)))
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 24.0;
const MARGIN_BOTTOM: f64 = 56.0;

/// A 640x480 SVG 1.1 document: axes with 0.25-step ticks, the chance
/// diagonal, and the ROC polyline.
pub fn roc_svg(curve: &RocCurve, auc: f64) -> String {
    let plot_w = SVG_W - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = SVG_H - MARGIN_TOP - MARGIN_BOTTOM;
    let px = |fpr: f64| MARGIN_LEFT + fpr * plot_w;
    let py = |tpr: f64| MARGIN_TOP + plot_h - tpr * plot_h;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" \
         width=\"{SVG_W:.0}\" height=\"{SVG_H:.0}\" viewBox=\"0 0 {SVG_W:.0} {SVG_H:.0}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    // axes
    s.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        px(0.0),
        py(0.0),
        px(1.0),
        py(0.0)
    ));
    s.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        px(0.0),
        py(0.0),
        px(0.0),
        py(1.0)
    ));

    for i in 0..=4 {
        let v = i as f64 * 0.25;
        s.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            px(v),
            py(0.0),
            px(v),
            py(0.0) + 6.0
        ));
        s.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"middle\">{v:.2}</text>\n",
            px(v),
            py(0.0) + 22.0
        ));
        s.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            px(0.0) - 6.0,
            py(v),
            px(0.0),
            py(v)
        ));
        s.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"13\" text-anchor=\"end\">{v:.2}</text>\n",
            px(0.0) - 10.0,
            py(v) + 4.0
        ));
    }

    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"15\" text-anchor=\"middle\">False positive rate</text>\n",
        px(0.5),
        SVG_H - 12.0
    ));
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"15\" text-anchor=\"middle\" \
         transform=\"rotate(-90 {:.2} {:.2})\">True positive rate</text>\n",
        18.0,
        py(0.5),
        18.0,
        py(0.5)
    ));

    // chance diagonal
    s.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" \
         stroke=\"gray\" stroke-dasharray=\"6,5\"/>\n",
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    ));

    let pts: Vec<String> = curve
        .points
        .iter()
        .map(|&(fpr, tpr)| format!("{:.2},{:.2}", px(fpr), py(tpr)))
        .collect();
    s.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"crimson\" stroke-width=\"2\"/>\n",
        pts.join(" ")
    ));
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"15\">AUC = {auc:.4}</text>\n",
        px(0.55),
        py(0.08)
    ));
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_fields_pass_through_and_specials_get_quoted() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
        assert_eq!(csv_field("line\nbreak"), "\"line\nbreak\"");
    }

    #[test]
    fn svg_has_endpoints_and_fixed_size() {
        let curve = RocCurve {
            points: vec![(0.0, 0.0), (0.0, 0.5), (0.5, 1.0), (1.0, 1.0)],
            thresholds: vec![f64::INFINITY, 0.9, 0.5, 0.1],
        };
        let svg = roc_svg(&curve, 0.75);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("width=\"640\" height=\"480\""));
        // (0,0) maps to the plot's lower-left corner, (1,1) to upper-right
        assert!(svg.contains("70.00,424.00"));
        assert!(svg.contains("616.00,24.00"));
        assert!(svg.contains("AUC = 0.7500"));
        assert_eq!(svg, roc_svg(&curve, 0.75));
    }
}
