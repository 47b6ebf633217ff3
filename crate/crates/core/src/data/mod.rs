//! Paired LR/HR datasets: generation by bicubic degradation, manifests and
//! aligned patch sampling.

pub mod synth;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::{bicubic_resize, load_png_with_depth, save_png_with_depth, Image};
use crate::model::{MIN_INPUT_SIDE, SUPPORTED_SCALES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An LR image with its exactly `scale`-times larger HR counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    lr: Image,
    hr: Image,
    scale: usize,
    identifier: String,
}

impl ImagePair {
    pub fn new(lr: Image, hr: Image, scale: usize, identifier: impl Into<String>) -> Result<Self> {
        let identifier = identifier.into();
        if hr.height() != scale * lr.height() || hr.width() != scale * lr.width() {
            return Err(Error::Dimension(format!(
                "{identifier}: HR {}x{} is not {scale}x LR {}x{}",
                hr.height(),
                hr.width(),
                lr.height(),
                lr.width()
            )));
        }
        Ok(ImagePair {
            lr,
            hr,
            scale,
            identifier,
        })
    }

    pub fn lr(&self) -> &Image {
        &self.lr
    }

    pub fn hr(&self) -> &Image {
        &self.hr
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn identifier(&self) -> &str {
        &self.identifier
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub identifier: String,
    /// Relative to the manifest's directory.
    pub lr_path: PathBuf,
    pub hr_path: PathBuf,
}

/// An input that generation skipped, kept in the manifest as a comment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedInput {
    pub identifier: String,
    pub reason: String,
}

/// Index of a dataset split.
///
/// On disk it is a text file: a `scale=<int>\tsplit=<train|test>` header,
/// then one `identifier\tlr_relpath\thr_relpath` record per line. Lines
/// starting with `#` are comments; `#skipped\t<id>\t<reason>` records inputs
/// that generation left out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub scale: usize,
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    pub skipped: Vec<SkippedInput>,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("scale={}\tsplit={}\n", self.scale, self.split);
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\n",
                e.identifier,
                e.lr_path.display(),
                e.hr_path.display()
            ));
        }
        for sk in &self.skipped {
            s.push_str(&format!("#skipped\t{}\t{}\n", sk.identifier, sk.reason));
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn identifiers(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.identifier.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")).to_path_buf())
        .map_err(|m| Error::Data(format!("{}: {m}", path.display())))
}

fn parse_manifest(text: &str, root: PathBuf) -> std::result::Result<DatasetManifest, String> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or("empty manifest")?;
    let mut scale = None;
    let mut split = None;
    for field in header.split('\t') {
        match field.split_once('=') {
            Some(("scale", v)) => {
                scale = Some(v.parse::<usize>().map_err(|_| format!("bad scale {v:?}"))?)
            }
            Some(("split", v)) => {
                split = Some(Split::parse(v).ok_or_else(|| format!("bad split {v:?}"))?)
            }
            _ => return Err(format!("unrecognized header field {field:?}")),
        }
    }
    let scale = scale.ok_or("header lacks scale")?;
    let split = split.ok_or("header lacks split")?;
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    let mut seen = HashSet::new();
    for (no, line) in lines {
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some(rec) = rest.strip_prefix("skipped\t") {
                let (id, reason) = rec.split_once('\t').unwrap_or((rec, ""));
                skipped.push(SkippedInput {
                    identifier: id.to_string(),
                    reason: reason.to_string(),
                });
            }
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(format!("line {}: expected 3 tab-separated fields", no + 1));
        }
        if !seen.insert(fields[0]) {
            return Err(format!("line {}: duplicate identifier {}", no + 1, fields[0]));
        }
        entries.push(ManifestEntry {
            identifier: fields[0].to_string(),
            lr_path: PathBuf::from(fields[1]),
            hr_path: PathBuf::from(fields[2]),
        });
    }
    Ok(DatasetManifest {
        root,
        scale,
        split,
        entries,
        skipped,
    })
}

/// Loads each entry in manifest order, validating the size relation.
pub fn iterate_pairs(manifest: &DatasetManifest) -> impl Iterator<Item = Result<ImagePair>> + '_ {
    manifest.entries.iter().map(move |e| {
        let (lr, _) = load_png_with_depth(manifest.root.join(&e.lr_path))?;
        let (hr, _) = load_png_with_depth(manifest.root.join(&e.hr_path))?;
        ImagePair::new(lr, hr, manifest.scale, e.identifier.clone())
    })
}

/// Result of loading a whole manifest with per-item error isolation.
#[derive(Debug, Default)]
pub struct LoadedPairs {
    pub pairs: Vec<ImagePair>,
    /// `(identifier, diagnostic)` for every rejected entry.
    pub rejected: Vec<(String, String)>,
}

pub fn load_pairs(manifest: &DatasetManifest) -> LoadedPairs {
    let mut out = LoadedPairs::default();
    for (entry, item) in manifest.entries.iter().zip(iterate_pairs(manifest)) {
        match item {
            Ok(p) => out.pairs.push(p),
            Err(e) => out.rejected.push((entry.identifier.clone(), e.to_string())),
        }
    }
    out
}

/// Fails when an identifier appears in both manifests.
pub fn check_disjoint(a: &DatasetManifest, b: &DatasetManifest) -> Result<()> {
    let ids: HashSet<&str> = a.identifiers().collect();
    let shared: Vec<&str> = b.identifiers().filter(|i| ids.contains(i)).collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "identifiers present in both {} and {}: {}",
            a.split,
            b.split,
            shared.join(", ")
        )))
    }
}

/// Center crop to the largest size divisible by `scale`.
pub fn crop_to_multiple(img: &Image, scale: usize) -> Result<Image> {
    let (h, w) = img.dims();
    let (ch, cw) = (h - h % scale, w - w % scale);
    img.crop((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Degrades every PNG in `hr_dir` by `1/scale` bicubic downsampling and
/// writes the pairs plus `<out_dir>/<split>.manifest`. Inputs are processed
/// in file-name order; files smaller than `8 * scale` on a side are skipped
/// and recorded.
pub fn generate_bicubic_pairs(
    hr_dir: impl AsRef<Path>,
    scale: usize,
    out_dir: impl AsRef<Path>,
    split: Split,
) -> Result<DatasetManifest> {
    let (hr_dir, out_dir) = (hr_dir.as_ref(), out_dir.as_ref());
    if !SUPPORTED_SCALES.contains(&scale) {
        return Err(Error::Config(format!(
            "scale must be one of {SUPPORTED_SCALES:?}, got {scale}"
        )));
    }
    let mut inputs: Vec<PathBuf> = fs::read_dir(hr_dir)
        .map_err(|e| Error::io(hr_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| x.eq_ignore_ascii_case("png"))
        })
        .collect();
    inputs.sort();
    if inputs.is_empty() {
        return Err(Error::Data(format!(
            "no HR images found in {}",
            hr_dir.display()
        )));
    }

    let rel_lr = PathBuf::from(split.as_str()).join("lr");
    let rel_hr = PathBuf::from(split.as_str()).join("hr");
    for d in [&rel_lr, &rel_hr] {
        let full = out_dir.join(d);
        fs::create_dir_all(&full).map_err(|e| Error::io(&full, e))?;
    }

    let min_side = scale * MIN_INPUT_SIDE;
    let mut manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        scale,
        split,
        entries: Vec::new(),
        skipped: Vec::new(),
    };
    for path in inputs {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        let (hr, depth) = load_png_with_depth(&path)?;
        if hr.height() < min_side || hr.width() < min_side {
            manifest.skipped.push(SkippedInput {
                identifier: id,
                reason: format!(
                    "{}x{} is smaller than {min_side} on a side",
                    hr.height(),
                    hr.width()
                ),
            });
            continue;
        }
        let hr = crop_to_multiple(&hr, scale)?;
        let lr = bicubic_resize(&hr, hr.height() / scale, hr.width() / scale)?;
        let file = format!("{id}.png");
        save_png_with_depth(&hr, out_dir.join(&rel_hr).join(&file), depth)?;
        save_png_with_depth(&lr, out_dir.join(&rel_lr).join(&file), depth)?;
        manifest.entries.push(ManifestEntry {
            identifier: id,
            lr_path: rel_lr.join(&file),
            hr_path: rel_hr.join(&file),
        });
    }
    manifest.write(out_dir.join(format!("{split}.manifest")))?;
    Ok(manifest)
}

/// Cuts an aligned LR/HR patch pair at a uniformly drawn LR position.
pub fn sample_patch_pair(
    pair: &ImagePair,
    lr_patch: usize,
    rng: &mut impl Rng,
) -> Result<(Image, Image)> {
    let (h, w) = pair.lr.dims();
    if lr_patch == 0 || lr_patch > h || lr_patch > w {
        return Err(Error::Dimension(format!(
            "{}: patch {lr_patch} does not fit LR {h}x{w}",
            pair.identifier
        )));
    }
    let top = rng.gen_range(0..=h - lr_patch);
    let left = rng.gen_range(0..=w - lr_patch);
    let s = pair.scale;
    Ok((
        pair.lr.crop(top, left, lr_patch, lr_patch)?,
        pair.hr.crop(top * s, left * s, lr_patch * s, lr_patch * s)?,
    ))
}
