//! Minimal PNG plotting (line series and bar charts) plus CSV emission, so
//! every figure ships with its regenerable data.

use std::path::Path;

use crate::error::{Error, Result};

const MARGIN: u32 = 40;

struct Canvas {
    w: u32,
    h: u32,
    px: Vec<u8>,
}

impl Canvas {
    fn new(w: u32, h: u32) -> Self {
        Canvas {
            w,
            h,
            px: vec![255; (w * h * 3) as usize],
        }
    }

    fn set(&mut self, x: i64, y: i64, color: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.w as i64 || y >= self.h as i64 {
            return;
        }
        let i = ((y as u32 * self.w + x as u32) * 3) as usize;
        self.px[i..i + 3].copy_from_slice(&color);
    }

    fn line(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            self.set(
                (x0 + t * (x1 - x0)).round() as i64,
                (y0 + t * (y1 - y0)).round() as i64,
                color,
            );
        }
    }

    fn rect(&mut self, x0: u32, y0: u32, x1: u32, y1: u32, color: [u8; 3]) {
        for y in y0..y1.min(self.h) {
            for x in x0..x1.min(self.w) {
                self.set(x as i64, y as i64, color);
            }
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        let img = image::RgbImage::from_raw(self.w, self.h, self.px.clone())
            .ok_or_else(|| Error::Dataset("plot buffer mismatch".into()))?;
        img.save(path)?;
        Ok(())
    }
}

pub const SERIES_COLORS: [[u8; 3]; 4] = [
    [214, 69, 65],
    [31, 119, 180],
    [44, 160, 44],
    [148, 103, 189],
];

/// Line plot of one or more named series over a shared x index.
pub fn line_plot(path: &Path, series: &[(&str, &[f64])], _title: &str) -> Result<()> {
    let (w, h) = (640u32, 400u32);
    let mut c = Canvas::new(w, h);
    let all: Vec<f64> = series.iter().flat_map(|(_, s)| s.iter().cloned()).collect();
    if all.is_empty() {
        return Err(Error::Config("nothing to plot".into()));
    }
    let lo = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let n = series.iter().map(|(_, s)| s.len()).max().unwrap_or(1).max(2);
    let plot_w = (w - 2 * MARGIN) as f64;
    let plot_h = (h - 2 * MARGIN) as f64;
    // axes
    c.line(
        MARGIN as f64,
        (h - MARGIN) as f64,
        (w - MARGIN) as f64,
        (h - MARGIN) as f64,
        [0, 0, 0],
    );
    c.line(MARGIN as f64, MARGIN as f64, MARGIN as f64, (h - MARGIN) as f64, [0, 0, 0]);
    for (si, (_, s)) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        for win in s.windows(2).enumerate() {
            let (i, pair) = win;
            let x0 = MARGIN as f64 + i as f64 / (n - 1) as f64 * plot_w;
            let x1 = MARGIN as f64 + (i + 1) as f64 / (n - 1) as f64 * plot_w;
            let y0 = (h - MARGIN) as f64 - (pair[0] - lo) / span * plot_h;
            let y1 = (h - MARGIN) as f64 - (pair[1] - lo) / span * plot_h;
            c.line(x0, y0, x1, y1, color);
        }
    }
    c.save(path)
}

/// Bar chart of labeled values in [0, 1]-ish range.
pub fn bar_chart(path: &Path, bars: &[(&str, f64)]) -> Result<()> {
    let (w, h) = (640u32, 400u32);
    let mut c = Canvas::new(w, h);
    if bars.is_empty() {
        return Err(Error::Config("nothing to plot".into()));
    }
    let hi = bars.iter().map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max).max(1e-12);
    let plot_w = (w - 2 * MARGIN) as f64;
    let plot_h = (h - 2 * MARGIN) as f64;
    c.line(
        MARGIN as f64,
        (h - MARGIN) as f64,
        (w - MARGIN) as f64,
        (h - MARGIN) as f64,
        [0, 0, 0],
    );
    let slot = plot_w / bars.len() as f64;
    for (i, (_, v)) in bars.iter().enumerate() {
        let color = SERIES_COLORS[i % SERIES_COLORS.len()];
        let bh = (v / hi * plot_h).max(0.0);
        let x0 = MARGIN as f64 + i as f64 * slot + 0.15 * slot;
        let x1 = MARGIN as f64 + (i as f64 + 0.85) * slot;
        c.rect(
            x0 as u32,
            ((h - MARGIN) as f64 - bh) as u32,
            x1 as u32,
            h - MARGIN,
            color,
        );
    }
    c.save(path)
}

/// Write rows as CSV with a header.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_and_csv_write_files() {
        let dir = tempfile::tempdir().unwrap();
        let lp = dir.path().join("line.png");
        line_plot(&lp, &[("a", &[1.0, 0.5, 0.25, 0.4]), ("b", &[0.2, 0.3, 0.5])], "t").unwrap();
        assert!(lp.exists());
        let bp = dir.path().join("bar.png");
        bar_chart(&bp, &[("x", 0.5), ("y", 0.8)]).unwrap();
        assert!(bp.exists());
        let cp = dir.path().join("t.csv");
        write_csv(&cp, &["a", "b"], &[vec!["1".into(), "2".into()]]).unwrap();
        assert_eq!(std::fs::read_to_string(&cp).unwrap(), "a,b\n1,2\n");
    }
}
