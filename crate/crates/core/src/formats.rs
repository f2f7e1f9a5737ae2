//! On-disk formats: PGM images, homography and pose text files, the model
//! file, match TSVs, SVG match plots and the synthetic dataset layout.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::{Path, PathBuf};

use base64::Engine as _;
use image::codecs::pnm::{PnmDecoder, PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageDecoder, ImageEncoder};
use nalgebra::{Matrix3, Vector3};

use crate::backbone::Image;
use crate::error::{Error, Result};
use crate::geometry::{Correspondence, Homography};
use crate::matching::MatchSet;
use crate::model::{Model, RunConfig};
use crate::params::ParamStore;
use crate::synthetic::PlanarScene;
use crate::tensor::Tensor;

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

/// Reads a binary 8-bit PGM (P5, maxval 255) into `[0, 1]` intensities.
pub fn read_pgm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path)?;
    let dec = PnmDecoder::new(Cursor::new(&bytes)).map_err(|e| format_err(path, e))?;
    if dec.subtype() != PnmSubtype::Graymap(SampleEncoding::Binary) {
        return Err(format_err(path, "only binary PGM (P5) is supported"));
    }
    if dec.color_type() != image::ColorType::L8 {
        return Err(format_err(path, "only 8-bit PGM (maxval 255) is supported"));
    }
    let (w, h) = dec.dimensions();
    let mut buf = vec![0u8; dec.total_bytes() as usize];
    dec.read_image(&mut buf).map_err(|e| format_err(path, e))?;
    Image::new(h as usize, w as usize, buf.iter().map(|&b| b as f64 / 255.0).collect())
}

fn quantize(img: &Image) -> Vec<u8> {
    img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Writes intensities in `[0, 1]` as a binary PGM, rounding to 8 bits.
pub fn write_pgm(path: &Path, img: &Image) -> Result<()> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&quantize(img), img.width as u32, img.height as u32, ExtendedColorType::L8)
        .map_err(|e| format_err(path, e))?;
    fs::write(path, out)?;
    Ok(())
}

fn parse_numbers(path: &Path, text: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| format_err(path, format!("not a number: `{t}`"))))
        .collect()
}

/// Three rows of three numbers, printed losslessly.
pub fn write_homography(path: &Path, h: &Homography) -> Result<()> {
    let mut s = String::new();
    for row in h.to_rows() {
        let _ = writeln!(s, "{} {} {}", row[0], row[1], row[2]);
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_homography(path: &Path) -> Result<Homography> {
    let v = parse_numbers(path, &fs::read_to_string(path)?)?;
    if v.len() != 9 {
        return Err(format_err(path, format!("expected 9 numbers, found {}", v.len())));
    }
    Homography::from_slice(&v)
}

/// Rotation and translation of a relative pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Twelve numbers: the rotation row-major, then the translation.
pub fn read_pose(path: &Path) -> Result<Pose> {
    let v = parse_numbers(path, &fs::read_to_string(path)?)?;
    if v.len() != 12 {
        return Err(format_err(path, format!("expected 12 numbers, found {}", v.len())));
    }
    Ok(Pose {
        rotation: Matrix3::from_row_slice(&v[..9]),
        translation: Vector3::new(v[9], v[10], v[11]),
    })
}

pub fn write_pose(path: &Path, pose: &Pose) -> Result<()> {
    let r = &pose.rotation;
    let t = &pose.translation;
    let mut s = String::new();
    for i in 0..3 {
        let _ = writeln!(s, "{} {} {}", r[(i, 0)], r[(i, 1)], r[(i, 2)]);
    }
    let _ = writeln!(s, "{} {} {}", t[0], t[1], t[2]);
    fs::write(path, s)?;
    Ok(())
}

pub const MATCHES_HEADER: &str = "xA\tyA\txB\tyB\tconf";

/// One row per correspondence, fixed point with 4 decimals.
pub fn format_matches(m: &MatchSet) -> String {
    let mut s = String::from(MATCHES_HEADER);
    s.push('\n');
    for ((a, b), c) in m.pairs.iter().zip(&m.confidence) {
        let _ = writeln!(s, "{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}", a[0], a[1], b[0], b[1], c);
    }
    s
}

pub fn parse_matches(text: &str) -> Result<Vec<(Correspondence, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(MATCHES_HEADER) {
        return Err(Error::Format(format!("match file must start with `{MATCHES_HEADER}`")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            let v: Vec<f64> = l
                .split('\t')
                .map(|t| t.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("match row {}: `{l}`", n + 1)))?;
            if v.len() != 5 {
                return Err(Error::Format(format!("match row {} has {} fields", n + 1, v.len())));
            }
            Ok((([v[0], v[1]], [v[2], v[3]]), v[4]))
        })
        .collect()
}

pub fn write_matches(path: &Path, m: &MatchSet) -> Result<()> {
    fs::write(path, format_matches(m))?;
    Ok(())
}

pub fn read_matches(path: &Path) -> Result<Vec<(Correspondence, f64)>> {
    parse_matches(&fs::read_to_string(path)?).map_err(|e| format_err(path, e))
}

fn png_data_uri(img: &Image) -> Result<String> {
    let mut png = Vec::new();
    image::codecs::png::PngEncoder::new(&mut png)
        .write_image(&quantize(img), img.width as u32, img.height as u32, ExtendedColorType::L8)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(png)
    ))
}

/// Side-by-side plot: A on the left, B on the right, one `<line>` per match
/// coloured from red (low confidence) to green (high).
pub fn matches_svg(a: &Image, b: &Image, m: &MatchSet) -> Result<String> {
    let width = a.width + b.width;
    let height = a.height.max(b.height);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        s,
        r#"<image x="0" y="0" width="{}" height="{}" href="{}"/>"#,
        a.width,
        a.height,
        png_data_uri(a)?
    );
    let _ = writeln!(
        s,
        r#"<image x="{}" y="0" width="{}" height="{}" href="{}"/>"#,
        a.width,
        b.width,
        b.height,
        png_data_uri(b)?
    );
    for ((pa, pb), c) in m.pairs.iter().zip(&m.confidence) {
        let c = c.clamp(0.0, 1.0);
        let (r, g) = ((255.0 * (1.0 - c)).round() as u8, (255.0 * c).round() as u8);
        let _ = writeln!(
            s,
            r#"<line x1="{:.4}" y1="{:.4}" x2="{:.4}" y2="{:.4}" stroke="rgb({r},{g},0)" stroke-width="1"/>"#,
            pa[0],
            pa[1],
            pb[0] + a.width as f64,
            pb[1]
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

const MODEL_MAGIC: &str = "slimmatch-model 1";

/// Text model file: magic line, `key=value` config lines, a blank line, then
/// per parameter a `param <name> <d0>x<d1>...` line followed by one line of
/// values.
pub fn write_model(path: &Path, model: &Model) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{MODEL_MAGIC}")?;
    for (k, v) in model.cfg.to_pairs() {
        writeln!(f, "{k}={v}")?;
    }
    writeln!(f)?;
    let store = &model.store;
    for id in store.ids() {
        let t = store.get(id);
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(f, "param {} {}", store.name(id), dims.join("x"))?;
        let vals: Vec<String> = t.data().iter().map(|v| v.to_string()).collect();
        writeln!(f, "{}", vals.join(" "))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<Model> {
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let mut next = || -> Result<Option<String>> { lines.next().transpose().map_err(Error::from) };
    if next()?.as_deref() != Some(MODEL_MAGIC) {
        return Err(format_err(path, "not a model file"));
    }
    let mut cfg = RunConfig::default();
    loop {
        match next()? {
            None => return Err(format_err(path, "missing parameter section")),
            Some(l) if l.is_empty() => break,
            Some(l) => {
                let (k, v) = l
                    .split_once('=')
                    .ok_or_else(|| format_err(path, format!("bad config line `{l}`")))?;
                cfg.set(k, v).map_err(|e| format_err(path, e))?;
            }
        }
    }
    let mut model = Model::init(&cfg).map_err(|e| format_err(path, e))?;
    let mut seen = 0usize;
    while let Some(head) = next()? {
        let parts: Vec<&str> = head.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "param" {
            return Err(format_err(path, format!("bad parameter header `{head}`")));
        }
        let id = model
            .store
            .id(parts[1])
            .ok_or_else(|| format_err(path, format!("unknown parameter `{}`", parts[1])))?;
        let shape: Vec<usize> = parts[2]
            .split('x')
            .map(|d| d.parse().map_err(|_| format_err(path, format!("bad shape `{}`", parts[2]))))
            .collect::<Result<_>>()?;
        if shape != model.store.get(id).shape() {
            return Err(format_err(
                path,
                format!("parameter `{}` has shape {:?}, model expects {:?}", parts[1], shape, model.store.get(id).shape()),
            ));
        }
        let vals = parse_numbers(path, &next()?.unwrap_or_default())?;
        model.store.set(id, Tensor::new(&shape, vals).map_err(|e| format_err(path, e))?);
        seen += 1;
    }
    if seen != model.store.len() {
        return Err(format_err(path, format!("{} of {} parameters present", seen, model.store.len())));
    }
    Ok(model)
}

/// Directory name of pair `index` in a dataset.
pub fn pair_dir_name(index: usize) -> String {
    format!("pair_{index:05}")
}

/// Writes `a.pgm`, `b.pgm` and `h.txt` under `root/pair_XXXXX`.
pub fn write_scene(root: &Path, index: usize, scene: &PlanarScene) -> Result<PathBuf> {
    let dir = root.join(pair_dir_name(index));
    fs::create_dir_all(&dir)?;
    write_pgm(&dir.join("a.pgm"), &scene.image_a)?;
    write_pgm(&dir.join("b.pgm"), &scene.image_b)?;
    write_homography(&dir.join("h.txt"), &scene.h_gt)?;
    Ok(dir)
}

/// Images and homography of one dataset pair directory.
#[derive(Clone, Debug)]
pub struct StoredPair {
    pub name: String,
    pub image_a: Image,
    pub image_b: Image,
    pub h_gt: Homography,
}

pub fn read_pair(dir: &Path) -> Result<StoredPair> {
    Ok(StoredPair {
        name: dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        image_a: read_pgm(&dir.join("a.pgm"))?,
        image_b: read_pgm(&dir.join("b.pgm"))?,
        h_gt: read_homography(&dir.join("h.txt"))?,
    })
}

/// `pair_*` subdirectories of `root`, sorted by name.
pub fn list_pairs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() && entry.file_name().to_string_lossy().starts_with("pair_") {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

/// Parameters of `store` keyed by name, for comparisons in tests and tools.
pub fn param_names(store: &ParamStore) -> Vec<String> {
    store.ids().map(|id| store.name(id).to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::MatchLevel;

    #[test]
    fn pgm_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let img = Image::new(8, 16, (0..128).map(|i| (i * 2) as f64 / 255.0).collect()).unwrap();
        write_pgm(&p, &img).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), img);
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5"));
    }

    #[test]
    fn ascii_pgm_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        fs::write(&p, "P2\n2 1\n255\n0 255\n").unwrap();
        assert!(matches!(read_pgm(&p), Err(Error::Format(_))));
        fs::write(&p, "garbage").unwrap();
        assert!(read_pgm(&p).is_err());
    }

    #[test]
    fn homography_file_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.txt");
        let h = Homography::from_rows([[1.01, 0.1 / 3.0, 2.5], [-0.02, 0.97, -1.0 / 7.0], [1e-4, -3e-5, 1.0]]).unwrap();
        write_homography(&p, &h).unwrap();
        assert_eq!(read_homography(&p).unwrap(), h);
    }

    #[test]
    fn matches_round_trip() {
        let m = MatchSet {
            level: MatchLevel::Fine,
            pairs: vec![([1.0, 2.25], [3.5, 4.125]), ([0.0, 0.0], [10.0, 20.0])],
            confidence: vec![0.75, 1.0],
            indices: vec![],
        };
        let text = format_matches(&m);
        assert!(text.starts_with("xA\tyA\txB\tyB\tconf\n1.0000\t2.2500\t3.5000\t4.1250\t0.7500\n"));
        let back = parse_matches(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0], (m.pairs[0], 0.75));
        let rebuilt = MatchSet {
            pairs: back.iter().map(|r| r.0).collect(),
            confidence: back.iter().map(|r| r.1).collect(),
            ..m
        };
        assert_eq!(format_matches(&rebuilt), text);
        assert!(parse_matches("x\ty\n").is_err());
        assert!(parse_matches(&format!("{MATCHES_HEADER}\n1\t2\t3\n")).is_err());
    }

    #[test]
    fn svg_has_one_line_per_match() {
        let img = Image::zeros(8, 8);
        let m = MatchSet {
            level: MatchLevel::Fine,
            pairs: vec![([1.0, 2.0], [3.0, 4.0]); 3],
            confidence: vec![0.2, 0.5, 0.9],
            indices: vec![],
        };
        let svg = matches_svg(&img, &img, &m).unwrap();
        assert_eq!(svg.matches("<line ").count(), 3);
        assert!(svg.contains("data:image/png;base64,"));
    }

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        let mut model = Model::init(&RunConfig::tiny()).unwrap();
        let id = model.store.ids().next().unwrap();
        model.store.get_mut(id).data_mut()[0] = 0.1 + 0.2;
        write_model(&p, &model).unwrap();
        let back = read_model(&p).unwrap();
        assert_eq!(back.cfg, model.cfg);
        assert_eq!(back.store.tensors(), model.store.tensors());
        assert_eq!(param_names(&back.store), param_names(&model.store));
    }

    #[test]
    fn model_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        fs::write(&p, "hello\n").unwrap();
        assert!(read_model(&p).is_err());
        fs::write(&p, format!("{MODEL_MAGIC}\nbogus=1\n\n")).unwrap();
        assert!(read_model(&p).is_err());
    }
}
