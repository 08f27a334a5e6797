//! Dependency-free SVG line charts.
//!
//! Output is a pure function of the chart description — coordinates are
//! written with fixed precision and no timestamps or generator comments —
//! so rendered bytes can be compared across reruns.

pub const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

const MARGIN_LEFT: f64 = 58.0;
const MARGIN_RIGHT: f64 = 14.0;
const MARGIN_TOP: f64 = 34.0;
const MARGIN_BOTTOM: f64 = 46.0;

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub width: f64,
    pub height: f64,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    /// Draw a dashed horizontal rule at y = 0 when it lies inside range.
    pub zero_line: bool,
    pub series: Vec<Series>,
}

impl Chart {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            width: 640.0,
            height: 480.0,
            x_range: (0.0, 1.0),
            y_range: (0.0, 1.0),
            zero_line: false,
            series: Vec::new(),
        }
    }

    /// Sets the data ranges to the series extent plus 5% padding.
    pub fn fit_ranges(&mut self) {
        let mut xs = (f64::INFINITY, f64::NEG_INFINITY);
        let mut ys = (f64::INFINITY, f64::NEG_INFINITY);
        for s in &self.series {
            for &(x, y) in &s.points {
                if x.is_finite() {
                    xs = (xs.0.min(x), xs.1.max(x));
                }
                if y.is_finite() {
                    ys = (ys.0.min(y), ys.1.max(y));
                }
            }
        }
        self.x_range = padded(xs);
        self.y_range = padded(ys);
    }

    /// Data x to pixel x.
    pub fn map_x(&self, x: f64) -> f64 {
        let (lo, hi) = self.x_range;
        MARGIN_LEFT + (x - lo) / (hi - lo) * (self.width - MARGIN_LEFT - MARGIN_RIGHT)
    }

    /// Data y to pixel y (origin at the top).
    pub fn map_y(&self, y: f64) -> f64 {
        let (lo, hi) = self.y_range;
        MARGIN_TOP + (hi - y) / (hi - lo) * (self.height - MARGIN_TOP - MARGIN_BOTTOM)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let (w, h) = (self.width, self.height);
        out.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" \
             viewBox=\"0 0 {w:.0} {h:.0}\">\n"
        ));
        out.push_str(&format!(
            "  <rect x=\"0\" y=\"0\" width=\"{w:.0}\" height=\"{h:.0}\" fill=\"#ffffff\"/>\n"
        ));
        out.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"14\">{}</text>\n",
            w / 2.0,
            escape(&self.title)
        ));

        let (px0, px1) = (self.map_x(self.x_range.0), self.map_x(self.x_range.1));
        let (py0, py1) = (self.map_y(self.y_range.0), self.map_y(self.y_range.1));
        out.push_str(&format!(
            "  <line x1=\"{px0:.2}\" y1=\"{py0:.2}\" x2=\"{px1:.2}\" y2=\"{py0:.2}\" \
             stroke=\"#000000\" stroke-width=\"1\"/>\n"
        ));
        out.push_str(&format!(
            "  <line x1=\"{px0:.2}\" y1=\"{py0:.2}\" x2=\"{px0:.2}\" y2=\"{py1:.2}\" \
             stroke=\"#000000\" stroke-width=\"1\"/>\n"
        ));

        for i in 0..=4 {
            let fx = self.x_range.0 + (self.x_range.1 - self.x_range.0) * i as f64 / 4.0;
            let px = self.map_x(fx);
            out.push_str(&format!(
                "  <line x1=\"{px:.2}\" y1=\"{py0:.2}\" x2=\"{px:.2}\" y2=\"{:.2}\" \
                 stroke=\"#000000\" stroke-width=\"1\"/>\n",
                py0 + 4.0
            ));
            out.push_str(&format!(
                "  <text x=\"{px:.2}\" y=\"{:.2}\" text-anchor=\"middle\" \
                 font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
                py0 + 18.0,
                tick_label(fx, self.x_range)
            ));
            let fy = self.y_range.0 + (self.y_range.1 - self.y_range.0) * i as f64 / 4.0;
            let py = self.map_y(fy);
            out.push_str(&format!(
                "  <line x1=\"{:.2}\" y1=\"{py:.2}\" x2=\"{px0:.2}\" y2=\"{py:.2}\" \
                 stroke=\"#000000\" stroke-width=\"1\"/>\n",
                px0 - 4.0
            ));
            out.push_str(&format!(
                "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" \
                 font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
                px0 - 7.0,
                py + 4.0,
                tick_label(fy, self.y_range)
            ));
        }

        out.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" \
             font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            (px0 + px1) / 2.0,
            h - 8.0,
            escape(&self.x_label)
        ));
        out.push_str(&format!(
            "  <text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"12\" transform=\"rotate(-90 16 {:.2})\">{}</text>\n",
            (py0 + py1) / 2.0,
            (py0 + py1) / 2.0,
            escape(&self.y_label)
        ));

        if self.zero_line && self.y_range.0 < 0.0 && self.y_range.1 > 0.0 {
            let py = self.map_y(0.0);
            out.push_str(&format!(
                "  <line x1=\"{px0:.2}\" y1=\"{py:.2}\" x2=\"{px1:.2}\" y2=\"{py:.2}\" \
                 stroke=\"#888888\" stroke-width=\"1\" stroke-dasharray=\"5,4\"/>\n"
            ));
        }

        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", self.map_x(x), self.map_y(y)))
                .collect();
            out.push_str(&format!(
                "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" \
                 points=\"{}\"/>\n",
                pts.join(" ")
            ));
            let ly = MARGIN_TOP + 14.0 + 16.0 * i as f64;
            let lx = self.width - MARGIN_RIGHT - 132.0;
            out.push_str(&format!(
                "  <line x1=\"{lx:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" \
                 stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
                ly - 4.0,
                lx + 18.0,
                ly - 4.0
            ));
            out.push_str(&format!(
                "  <text x=\"{:.2}\" y=\"{ly:.2}\" font-family=\"sans-serif\" \
                 font-size=\"11\">{}</text>\n",
                lx + 24.0,
                escape(&s.label)
            ));
        }

        out.push_str("</svg>\n");
        out
    }
}

fn padded((lo, hi): (f64, f64)) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    let span = hi - lo;
    let pad = if span > 0.0 {
        0.05 * span
    } else {
        lo.abs().max(1.0) * 0.1
    };
    (lo - pad, hi + pad)
}

fn tick_label(v: f64, (lo, hi): (f64, f64)) -> String {
    if hi - lo >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
