//! File formats: path CSV, the `FBM1` binary dump, numeric tables, JSON and
//! standalone SVG line charts.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::fbm::{FbmPathSet, Hurst, SamplerTag, TimeGrid};

pub const FBM1_MAGIC: &[u8; 4] = b"FBM1";

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::InvalidParameter(format!("csv: {other:?}")),
    }
}

/// Writes `path_id, t, coord_1..coord_d`, one row per path and grid point.
pub fn write_paths_csv<W: Write>(paths: &FbmPathSet, w: W) -> Result<()> {
    let d = paths.dim();
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["path_id".to_string(), "t".to_string()];
    header.extend((1..=d).map(|k| format!("coord_{k}")));
    wr.write_record(&header).map_err(csv_err)?;
    let ts = paths.grid().points();
    for p in 0..paths.n_paths() {
        let path = paths.path(p);
        for (i, t) in ts.iter().enumerate() {
            let mut row = vec![p.to_string(), t.to_string()];
            row.extend(path[i * d..(i + 1) * d].iter().map(|v| v.to_string()));
            wr.write_record(&row).map_err(csv_err)?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Reads a path CSV back; grid, H and provenance are supplied by the caller.
pub fn read_paths_csv<R: Read>(r: R, grid: TimeGrid, hurst: Hurst) -> Result<FbmPathSet> {
    let mut rd = csv::Reader::from_reader(r);
    let d = rd.headers().map_err(csv_err)?.len().saturating_sub(2);
    let mut values = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        for field in rec.iter().skip(2) {
            values.push(field.trim().parse::<f64>().map_err(|e| Error::InvalidParameter(format!("csv value {field:?}: {e}")))?);
        }
    }
    FbmPathSet::from_raw(grid, d, hurst, values, 0, SamplerTag::Cholesky)
}

/// Binary layout, little-endian: magic `FBM1`, `u32` dim, `u32` steps, `u64` paths,
/// `f64` H, `f64` horizon, `u64` seed, `u8` sampler, then the path values.
pub fn write_fbm1<W: Write>(paths: &FbmPathSet, mut w: W) -> Result<()> {
    w.write_all(FBM1_MAGIC)?;
    w.write_all(&(paths.dim() as u32).to_le_bytes())?;
    w.write_all(&(paths.grid().n_steps() as u32).to_le_bytes())?;
    w.write_all(&(paths.n_paths() as u64).to_le_bytes())?;
    w.write_all(&paths.hurst().value().to_le_bytes())?;
    w.write_all(&paths.grid().horizon().to_le_bytes())?;
    w.write_all(&paths.seed().to_le_bytes())?;
    w.write_all(&[match paths.sampler() {
        SamplerTag::Cholesky => 0u8,
        SamplerTag::Volterra => 1,
    }])?;
    let mut buf = Vec::with_capacity(paths.values().len() * 8);
    for v in paths.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

fn take<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_fbm1<R: Read>(mut r: R) -> Result<FbmPathSet> {
    if &take::<4>(&mut r)? != FBM1_MAGIC {
        return invalid("not an FBM1 file");
    }
    let dim = u32::from_le_bytes(take(&mut r)?) as usize;
    let steps = u32::from_le_bytes(take(&mut r)?) as usize;
    let n_paths = u64::from_le_bytes(take(&mut r)?) as usize;
    let hurst = Hurst::new(f64::from_le_bytes(take(&mut r)?))?;
    let horizon = f64::from_le_bytes(take(&mut r)?);
    let seed = u64::from_le_bytes(take(&mut r)?);
    let sampler = match take::<1>(&mut r)?[0] {
        0 => SamplerTag::Cholesky,
        1 => SamplerTag::Volterra,
        t => return invalid(format!("unknown sampler tag {t}")),
    };
    let count = n_paths
        .checked_mul((steps + 1) * dim)
        .filter(|c| *c <= 1 << 32)
        .ok_or_else(|| Error::InvalidParameter("FBM1 header sizes out of range".into()))?;
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)?;
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    FbmPathSet::from_raw(TimeGrid::new(horizon, steps)?, dim, hurst, values, seed, sampler)
}

/// Square row-major matrix as CSV with `i, j` style row/column labels omitted.
pub fn write_matrix_csv<W: Write>(m: &[f64], n: usize, w: W) -> Result<()> {
    if m.len() != n * n {
        return invalid("matrix is not square");
    }
    let mut wr = csv::Writer::from_writer(w);
    for row in m.chunks_exact(n) {
        wr.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
    }
    wr.flush()?;
    Ok(())
}

/// A named-column numeric table.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Table { columns: columns.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(&self.columns).map_err(csv_err)?;
        for r in &self.rows {
            wr.write_record(r.iter().map(|v| v.to_string())).map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let columns = rd.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
        let mut t = Table { columns, rows: Vec::new() };
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            let row = rec
                .iter()
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::InvalidParameter(format!("csv value {f:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            t.rows.push(row);
        }
        Ok(t)
    }
}

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn tick_label(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Standalone SVG line chart. Non-finite points are skipped.
pub fn svg_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 420.0, 70.0, 150.0, 40.0, 50.0);
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 <= 0.0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 <= 0.0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (w - mr + ml) / 2.0, escape(title));
    let _ = writeln!(s, r#"<rect x="{ml}" y="{mt}" width="{}" height="{}" fill="none" stroke="black"/>"#, w - ml - mr, h - mt - mb);
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, sx(fx), h - mb + 15.0, tick_label(fx));
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, ml - 4.0, sy(fy) + 4.0, tick_label(fy));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (w - mr + ml) / 2.0, h - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (h - mb + mt) / 2.0,
        escape(y_label)
    );
    for (i, se) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = se
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, d.join(" "));
        for p in &d {
            let (cx, cy) = p.split_once(',').unwrap();
            let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="2.5" fill="{color}"/>"#);
        }
        let ly = mt + 14.0 + 16.0 * i as f64;
        let _ = writeln!(s, r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, w - mr + 10.0, w - mr + 30.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, w - mr + 34.0, ly + 4.0, escape(&se.label));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::sample_fbm_cholesky;

    fn paths() -> FbmPathSet {
        sample_fbm_cholesky(TimeGrid::new(1.0, 8).unwrap(), 2, 3, Hurst::new(0.7).unwrap(), 5).unwrap()
    }

    #[test]
    fn fbm1_round_trip() {
        let p = paths();
        let mut buf = Vec::new();
        write_fbm1(&p, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"FBM1");
        assert_eq!(read_fbm1(buf.as_slice()).unwrap(), p);
        buf[0] = b'X';
        assert!(read_fbm1(buf.as_slice()).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let p = paths();
        let mut buf = Vec::new();
        write_paths_csv(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("path_id,t,coord_1,coord_2\n"));
        assert_eq!(text.lines().count(), 1 + 3 * 9);
        let back = read_paths_csv(buf.as_slice(), *p.grid(), p.hurst()).unwrap();
        assert_eq!(back.values(), p.values());
    }

    #[test]
    fn table_round_trip() {
        let mut t = Table::new(["t", "p"]);
        t.push(vec![0.5, 1.25e-7]);
        t.push(vec![1.0, f64::MIN_POSITIVE]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(Table::read_csv(buf.as_slice()).unwrap(), t);
        assert_eq!(t.column("p").unwrap()[0], 1.25e-7);
    }

    #[test]
    fn svg_is_well_formed() {
        let s = svg_line_chart("a < b", "t", "p", &[Series { label: "fit".into(), points: vec![(0.0, 1.0), (1.0, f64::NAN), (2.0, 3.0)] }]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a &lt; b"));
        assert_eq!(s.matches("<circle").count(), 2);
    }
}
