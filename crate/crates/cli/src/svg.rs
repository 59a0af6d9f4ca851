//! Self-contained SVG charts: rectangles and text only.

use std::fmt::Write;

const CELL_W: f64 = 64.0;
const CELL_H: f64 = 32.0;
const MARGIN_L: f64 = 90.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn num(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (0.01..10000.0).contains(&a) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

/// Linear blue-to-red ramp; `t` in `[0, 1]`.
pub fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (255.0 * t).round() as u8;
    let b = (255.0 * (1.0 - t)).round() as u8;
    format!("#{r:02x}40{b:02x}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Column coordinates.
    pub x: Vec<f64>,
    /// Row coordinates.
    pub y: Vec<f64>,
    /// `values[row][col]`.
    pub values: Vec<Vec<f64>>,
}

impl Heatmap {
    pub fn render(&self) -> String {
        let (nx, ny) = (self.x.len(), self.y.len());
        let width = MARGIN_L + CELL_W * nx as f64 + 20.0;
        let height = MARGIN_T + CELL_H * ny as f64 + MARGIN_B;
        let all = self.values.iter().flatten().copied();
        let lo = all.clone().fold(f64::INFINITY, f64::min);
        let hi = all.fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" font-size="14">{}</text>"#,
            MARGIN_L,
            escape(&self.title)
        );
        // Row 0 is drawn at the bottom so the y axis grows upwards.
        for (i, row) in self.values.iter().enumerate() {
            let y = MARGIN_T + CELL_H * (ny - 1 - i) as f64;
            for (j, v) in row.iter().enumerate() {
                let x = MARGIN_L + CELL_W * j as f64;
                let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
                let _ = writeln!(
                    s,
                    r#"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{}" stroke="white"><title>{}</title></rect>"#,
                    ramp(t),
                    num(*v)
                );
                let _ = writeln!(
                    s,
                    r#"<text x="{}" y="{}" text-anchor="middle" fill="white">{}</text>"#,
                    x + CELL_W / 2.0,
                    y + CELL_H / 2.0 + 4.0,
                    num(*v)
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                MARGIN_L - 6.0,
                y + CELL_H / 2.0 + 4.0,
                num(self.y[i])
            );
        }
        let base = MARGIN_T + CELL_H * ny as f64;
        for (j, x) in self.x.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                MARGIN_L + CELL_W * (j as f64 + 0.5),
                base + 16.0,
                num(*x)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            MARGIN_L + CELL_W * nx as f64 / 2.0,
            base + 40.0,
            escape(&self.x_label)
        );
        let mid = MARGIN_T + CELL_H * ny as f64 / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="14" y="{mid}" text-anchor="middle" transform="rotate(-90 14 {mid})">{}</text>"#,
            escape(&self.y_label)
        );
        s.push_str("</svg>\n");
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub categories: Vec<String>,
    /// `(series name, one value per category)`.
    pub series: Vec<(String, Vec<f64>)>,
}

const PALETTE: [&str; 6] = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860"];

impl BarChart {
    pub fn render(&self) -> String {
        let plot_h = 240.0;
        let bar_w = 18.0;
        let group_w = bar_w * self.series.len().max(1) as f64 + 24.0;
        let width = MARGIN_L + group_w * self.categories.len() as f64 + 140.0;
        let height = MARGIN_T + plot_h + MARGIN_B;
        let hi = self
            .series
            .iter()
            .flat_map(|(_, v)| v.iter().copied())
            .filter(|v| v.is_finite())
            .fold(0.0, f64::max);
        let scale = if hi > 0.0 { plot_h / hi } else { 0.0 };
        let base = MARGIN_T + plot_h;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" font-size="14">{}</text>"#,
            MARGIN_L,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{MARGIN_L}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
            width - 140.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            MARGIN_L - 6.0,
            MARGIN_T + 4.0,
            num(hi)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">0</text>"#,
            MARGIN_L - 6.0,
            base
        );
        for (c, cat) in self.categories.iter().enumerate() {
            let gx = MARGIN_L + 12.0 + group_w * c as f64;
            for (k, (name, vals)) in self.series.iter().enumerate() {
                let v = vals.get(c).copied().unwrap_or(0.0);
                let h = if v.is_finite() { v * scale } else { plot_h };
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="{bar_w}" height="{h}" fill="{}"><title>{} {}: {}</title></rect>"#,
                    gx + bar_w * k as f64,
                    base - h,
                    PALETTE[k % PALETTE.len()],
                    escape(name),
                    escape(cat),
                    num(v)
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                gx + bar_w * self.series.len() as f64 / 2.0,
                base + 16.0,
                escape(cat)
            );
        }
        for (k, (name, _)) in self.series.iter().enumerate() {
            let ly = MARGIN_T + 16.0 * k as f64;
            let lx = width - 130.0;
            let _ = writeln!(
                s,
                r#"<rect x="{lx}" y="{ly}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
                PALETTE[k % PALETTE.len()],
                lx + 14.0,
                ly + 9.0,
                escape(name)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            MARGIN_L + group_w * self.categories.len() as f64 / 2.0,
            base + 40.0,
            escape(&self.x_label)
        );
        let mid = MARGIN_T + plot_h / 2.0;
        let _ = writeln!(
            s,
            r#"<text x="14" y="{mid}" text-anchor="middle" transform="rotate(-90 14 {mid})">{}</text>"#,
            escape(&self.y_label)
        );
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_ends() {
        assert_eq!(ramp(0.0), "#0040ff");
        assert_eq!(ramp(1.0), "#ff4000");
    }

    #[test]
    fn single_cell_heatmap() {
        let h = Heatmap {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            x: vec![1.0],
            y: vec![2.0],
            values: vec![vec![3.5]],
        };
        let svg = h.render();
        assert_eq!(svg.matches("<rect").count(), 1);
        assert!(svg.contains("#0040ff"));
        assert!(!svg.contains("href"));
    }

    #[test]
    fn labels_are_escaped() {
        let b = BarChart {
            title: "a<b".into(),
            x_label: "S".into(),
            y_label: "speedup".into(),
            categories: vec!["8K".into()],
            series: vec![("hp&ro".into(), vec![2.0])],
        };
        let svg = b.render();
        assert!(svg.contains("a&lt;b") && svg.contains("hp&amp;ro"));
    }
}
