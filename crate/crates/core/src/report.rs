//! Static report: summary image, per-cutoff attribution heatmaps, the
//! selected B-scans and an HTML index that links only files beside it.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use discover_autograd::Tensor;

use crate::error::{Error, Result};
use crate::fusion_train::InferenceDetail;
use crate::octa_store::N_CUTOFFS;

/// Writes an 8-bit RGB PNG with optional `tEXt` annotations.
pub fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[u8], text: &[(&str, String)]) -> Result<()> {
    if rgb.len() != 3 * width * height {
        return Err(Error::Validation(format!(
            "{} bytes for a {width}x{height} RGB image",
            rgb.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Format(format!("{}: {e}", path.display()));
    for (k, v) in text {
        enc.add_text_chunk((*k).to_string(), v.clone()).map_err(png_err)?;
    }
    let mut w = enc.write_header().map_err(png_err)?;
    w.write_image_data(rgb).map_err(png_err)?;
    w.finish().map_err(png_err)
}

/// Reads an 8-bit RGB PNG back as `(width, height, rgb, text chunks)`.
pub fn read_png_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>, Vec<(String, String)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let dec = png::Decoder::new(file);
    let fmt = |e: png::DecodingError| Error::Format(format!("{}: {e}", path.display()));
    let mut reader = dec.read_info().map_err(fmt)?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("{} is not 8-bit RGB", path.display())));
    }
    buf.truncate(info.buffer_size());
    let text = reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .map(|t| (t.keyword.clone(), t.text.clone()))
        .collect();
    Ok((info.width as usize, info.height as usize, buf, text))
}

/// Jet colormap on `[0, 1]`.
pub fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let channel = |offset: f64| {
        let x = 1.5 - (4.0 * v - offset).abs();
        (255.0 * x.clamp(0.0, 1.0)).round() as u8
    };
    [channel(3.0), channel(2.0), channel(1.0)]
}

fn to_u8(v: f64) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}

/// Channel-summed absolute attribution `[3, X, Z]`, scaled by its maximum
/// and colored; rows x, columns z.
pub fn heatmap_rgb(a: &Tensor) -> Vec<u8> {
    let (c, nx, nz) = (a.dim(0), a.dim(1), a.dim(2));
    let mut mag = vec![0.0; nx * nz];
    for ci in 0..c {
        for (m, v) in mag.iter_mut().zip(&a.data()[ci * nx * nz..(ci + 1) * nx * nz]) {
            *m += v.abs();
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    mag.iter().flat_map(|m| jet(m * scale)).collect()
}

/// B-scan `[3, X, Y]` drawn with depth vertical: row y, column x, the
/// three channels as RGB at `round(255 v)`.
pub fn bscan_rgb(slice: &Tensor) -> Vec<u8> {
    let (c, nx, ny) = (slice.dim(0), slice.dim(1), slice.dim(2));
    let d = slice.data();
    let mut out = Vec::with_capacity(3 * nx * ny);
    for y in 0..ny {
        for x in 0..nx {
            for ci in 0..3 {
                out.push(if ci < c { to_u8(d[(ci * nx + x) * ny + y]) } else { 0 });
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportFiles {
    pub index: PathBuf,
    pub summary: PathBuf,
    pub heatmaps: Vec<PathBuf>,
    pub bscans: Vec<PathBuf>,
}

fn fmt_probs(p: Option<&Vec<f64>>, n: usize) -> String {
    p.map_or("&ndash;".into(), |v| format!("{:.4}", v[n]))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn write_report(dir: &Path, detail: &InferenceDetail) -> Result<ReportFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let pred = &detail.prediction;
    let [nx, nz] = detail.summary.dims;

    let summary = dir.join("summary.png");
    write_png_rgb(&summary, nz, nx, &detail.summary.to_rgb8(), &[("id", pred.id.clone())])?;

    let mut heatmaps = Vec::with_capacity(N_CUTOFFS);
    let mut bscans = Vec::with_capacity(N_CUTOFFS);
    for n in 0..N_CUTOFFS {
        let cutoff = (n + 1).to_string();
        let h = dir.join(format!("heatmap_{}.png", n + 1));
        write_png_rgb(&h, nz, nx, &heatmap_rgb(&detail.attribution.a[n]), &[("cutoff", cutoff.clone())])?;
        heatmaps.push(h);

        let slice = &detail.slices.slices[n];
        let b = dir.join(format!("bscan_{}.png", n + 1));
        let text = [("cutoff", cutoff), ("z_index", detail.slices.z_indices[n].to_string())];
        write_png_rgb(&b, slice.dim(1), slice.dim(2), &bscan_rgb(slice), &text)?;
        bscans.push(b);
    }

    let mut html = String::new();
    html.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">");
    html.push_str(&format!("<title>{}</title>", escape(&pred.id)));
    html.push_str("<style>body{font-family:sans-serif}td,th{padding:4px 10px}figure{display:inline-block;margin:6px}img{image-rendering:pixelated;width:192px}</style>");
    html.push_str("</head><body>\n");
    html.push_str(&format!(
        "<h1>{}</h1>\n<p>Predicted grade: {}</p>\n",
        escape(&pred.id),
        pred.grade_hat
    ));
    html.push_str("<table border=\"1\"><tr><th>cutoff</th><th>p1</th><th>p2</th><th>p</th><th>z</th></tr>\n");
    for n in 0..N_CUTOFFS {
        html.push_str(&format!(
            "<tr><td>grade &ge; {}</td><td>{}</td><td>{}</td><td>{:.4}</td><td>{}</td></tr>\n",
            n + 1,
            fmt_probs(Some(&pred.p1), n),
            fmt_probs(pred.p2.as_ref(), n),
            pred.p[n],
            pred.z_indices[n]
        ));
    }
    html.push_str("</table>\n<h2>Summary image</h2>\n");
    html.push_str("<figure><img src=\"summary.png\" alt=\"summary\"><figcaption>rows x, columns z</figcaption></figure>\n");
    html.push_str("<h2>Attribution and selected B-scans</h2>\n");
    for n in 0..N_CUTOFFS {
        html.push_str(&format!(
            "<div><figure><img src=\"heatmap_{k}.png\" alt=\"heatmap {k}\"><figcaption>attribution, grade &ge; {k}</figcaption></figure>\
             <figure><img src=\"bscan_{k}.png\" alt=\"B-scan {k}\"><figcaption>B-scan z = {z}, grade &ge; {k}</figcaption></figure></div>\n",
            k = n + 1,
            z = pred.z_indices[n]
        ));
    }
    html.push_str("</body></html>\n");
    let index = dir.join("index.html");
    fs::write(&index, html).map_err(|e| Error::io(&index, e))?;
    Ok(ReportFiles {
        index,
        summary,
        heatmaps,
        bscans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0, 0, 128]);
        assert_eq!(jet(0.5), [128, 255, 128]);
        assert_eq!(jet(1.0), [128, 0, 0]);
    }

    #[test]
    fn png_roundtrip_keeps_text() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| i as u8 * 10).collect();
        write_png_rgb(&p, 3, 2, &rgb, &[("z_index", "7".into())]).unwrap();
        let (w, h, back, text) = read_png_rgb(&p).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(back, rgb);
        assert_eq!(text, vec![("z_index".to_string(), "7".to_string())]);
    }
}
