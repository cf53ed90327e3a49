use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{DynamicImage, ImageFormat};

use super::{file_error, DataError, Frame, SceneDataset, Split};
use crate::geometry::{CameraIntrinsics, DepthMap, Pose};
use crate::numerics::Tensor;

fn frame_path(dir: &Path, sub: &str, id: usize, ext: &str) -> std::path::PathBuf {
    dir.join(sub).join(format!("{id:06}.{ext}"))
}

/// Mirror index without repeating the edge sample: −1 → 1, n → n − 2.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

fn padding_for(n: usize) -> (usize, usize) {
    let total = (8 - n % 8) % 8;
    (total / 2, total - total / 2)
}

pub fn write_pgm8(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), DataError> {
    write_pnm(path, "P5", width, height, 255, pixels)
}

/// Binary PNM with a minimal header; 16-bit samples must already be big-endian.
fn write_pnm(path: &Path, magic: &str, width: usize, height: usize, max: u16, body: &[u8]) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(|e| file_error(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "{magic}\n{width} {height}\n{max}\n")
        .and_then(|_| out.write_all(body))
        .and_then(|_| out.flush())
        .map_err(|e| file_error(path, e))
}

fn write_depth(path: &Path, depth: &DepthMap) -> Result<(), DataError> {
    let mut body = Vec::with_capacity(2 * depth.values().len());
    for d in depth.values() {
        let v = (d * 1000.0).round();
        if v > u16::MAX as f64 {
            return Err(file_error(path, format!("depth {d} m does not fit 16-bit millimeters")));
        }
        body.extend_from_slice(&(v as u16).to_be_bytes());
    }
    write_pnm(path, "P5", depth.width(), depth.height(), u16::MAX, &body)
}

fn read_pnm(path: &Path) -> Result<DynamicImage, DataError> {
    let bytes = fs::read(path).map_err(|e| file_error(path, e))?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Pnm).map_err(|e| file_error(path, e))
}

pub fn read_pgm8(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    match read_pnm(path)? {
        DynamicImage::ImageLuma8(img) => Ok((img.width() as usize, img.height() as usize, img.into_raw())),
        _ => Err(file_error(path, "expected an 8-bit P5 graymap")),
    }
}

/// Crops `[C, H, W]` to the rectangle at (`top`, `left`).
fn crop(t: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Tensor {
    let (c, ih, iw) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    debug_assert!(top + h <= ih && left + w <= iw);
    let d = t.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, r, col) = (i / (h * w), i / w % h, i % w);
        d[ch * ih * iw + (r + top) * iw + col + left]
    })
}

/// Writes the dataset in the scene directory layout, undoing any load-time
/// padding first.
pub fn save_scene(dataset: &SceneDataset, dir: &Path) -> Result<(), DataError> {
    let first = dataset.frames.first().ok_or_else(|| DataError::Invalid("cannot save an empty dataset".into()))?;
    if dataset.frames.iter().any(|f| f.intrinsics != first.intrinsics) {
        return Err(DataError::Invalid("all frames must share one set of intrinsics".into()));
    }
    let (top, left) = dataset.padding;
    let (h, w) = dataset.original_size;
    for sub in ["frames", "depth", "poses"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| file_error(&p, e))?;
    }
    first.intrinsics.shifted(-(left as f64), -(top as f64)).write(&dir.join("intrinsics.txt"))?;
    let mut split = String::new();
    for frame in &dataset.frames {
        let image = crop(&frame.image, top, left, h, w);
        let plane = h * w;
        let mut rgb = vec![0u8; 3 * plane];
        for (p, px) in rgb.chunks_mut(3).enumerate() {
            for (c, v) in px.iter_mut().enumerate() {
                *v = (image.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        let path = frame_path(dir, "frames", frame.id, "ppm");
        write_pnm(&path, "P6", w, h, 255, &rgb)?;
        if let Some(depth) = &frame.depth {
            let values = Tensor::new(&[1, depth.height(), depth.width()], depth.values().to_vec())?;
            let cropped = crop(&values, top, left, h, w);
            write_depth(&frame_path(dir, "depth", frame.id, "pgm"), &DepthMap::new(w, h, cropped.into_data())?)?;
        }
        frame.pose.write(&frame_path(dir, "poses", frame.id, "txt"))?;
        let name = match frame.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        split.push_str(&format!("{name} {:06}\n", frame.id));
    }
    let path = dir.join("split.txt");
    fs::write(&path, split).map_err(|e| file_error(&path, e))
}

fn parse_split(dir: &Path) -> Result<Vec<(usize, Split)>, DataError> {
    let path = dir.join("split.txt");
    let text = fs::read_to_string(&path).map_err(|e| file_error(&path, e))?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|line| {
            let bad = || file_error(&path, format!("bad line '{line}'"));
            let (kind, id) = line.split_once(char::is_whitespace).ok_or_else(bad)?;
            let split = match kind {
                "train" => Split::Train,
                "test" => Split::Test,
                _ => return Err(bad()),
            };
            Ok((id.trim().parse().map_err(|_| bad())?, split))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PaddedImage {
    /// `[3, H, W]` in `[0, 1]` with H and W multiples of 8.
    pub image: Tensor,
    /// `(height, width)` as stored.
    pub original_size: (usize, usize),
    /// `(top, left)` rows and columns added.
    pub padding: (usize, usize),
}

/// Reads an 8-bit P6 image and reflect-pads it to multiples of 8.
pub fn load_image(path: &Path) -> Result<PaddedImage, DataError> {
    let rgb = match read_pnm(path)? {
        DynamicImage::ImageRgb8(img) => img,
        _ => return Err(file_error(path, "expected an 8-bit P6 pixmap")),
    };
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let ((top, bottom), (left, right)) = (padding_for(h), padding_for(w));
    let (ph, pw) = (h + top + bottom, w + left + right);
    let raw = rgb.as_raw();
    let image = Tensor::from_fn(&[3, ph, pw], |i| {
        let (c, r, col) = (i / (ph * pw), i / pw % ph, i % pw);
        let (sr, sc) = (reflect(r as isize - top as isize, h), reflect(col as isize - left as isize, w));
        raw[(sr * w + sc) * 3 + c] as f64 / 255.0
    });
    Ok(PaddedImage { image, original_size: (h, w), padding: (top, left) })
}

/// Reads a scene directory. Images are reflect-padded to multiples of 8 (depth
/// is padded with invalid zeros) and the principal point shifted to match.
pub fn load_scene(dir: &Path) -> Result<SceneDataset, DataError> {
    let intrinsics = CameraIntrinsics::read(&dir.join("intrinsics.txt"))?;
    let entries = parse_split(dir)?;
    if entries.is_empty() {
        return Err(file_error(dir.join("split.txt"), "no frames listed"));
    }
    let mut size = None;
    let mut frames = Vec::with_capacity(entries.len());
    for (id, split) in entries {
        let path = frame_path(dir, "frames", id, "ppm");
        let PaddedImage { image, original_size: (h, w), padding: (top, left) } = load_image(&path)?;
        if *size.get_or_insert((h, w)) != (h, w) {
            return Err(file_error(&path, format!("size {w}x{h} differs from the first frame")));
        }
        let (ph, pw) = (image.shape()[1], image.shape()[2]);
        let depth_path = frame_path(dir, "depth", id, "pgm");
        let depth = if depth_path.exists() {
            let img = match read_pnm(&depth_path)? {
                DynamicImage::ImageLuma16(img) => img,
                _ => return Err(file_error(&depth_path, "expected a 16-bit P5 graymap")),
            };
            if (img.width() as usize, img.height() as usize) != (w, h) {
                return Err(file_error(&depth_path, "depth size differs from the color image"));
            }
            let mut values = vec![0.0; ph * pw];
            for (r, row) in img.as_raw().chunks(w).enumerate() {
                for (c, mm) in row.iter().enumerate() {
                    values[(r + top) * pw + c + left] = *mm as f64 / 1000.0;
                }
            }
            Some(DepthMap::new(pw, ph, values)?)
        } else {
            None
        };
        let pose = Pose::read(&frame_path(dir, "poses", id, "txt"))?;
        frames.push(Frame {
            id,
            image,
            depth,
            pose,
            intrinsics: intrinsics.shifted(left as f64, top as f64),
            split,
        });
    }
    let (h, w) = size.expect("at least one frame");
    Ok(SceneDataset { frames, original_size: (h, w), padding: (padding_for(h).0, padding_for(w).0) })
}
