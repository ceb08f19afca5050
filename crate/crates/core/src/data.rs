//! Eye crops, mirroring, training-pair mining, and a procedural eye
//! renderer standing in for recorded gaze sequences.
//!
//! A dataset is a list of sequences. Every frame of a sequence shares the
//! person's appearance, the head tilt and the lighting; only the gaze
//! changes. Training pairs are ordered frame pairs within one sequence.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{AnchorSet, AngleSpec, NUM_ANCHORS};
use crate::error::{shape_err, Error, Result};
use crate::imageio;
use crate::tensor::Tensor;
use crate::warping_net::{CROP_HEIGHT, CROP_WIDTH};

/// Margin of the enlarged target crop used by the registration loss.
pub const TARGET_MARGIN: usize = 3;
/// Crop box height relative to the corner distance; the width equals it.
pub const BOX_ASPECT: f64 = 0.8;
/// Anchor coordinates are rounded to this many steps per pixel so that
/// mirroring is an exact involution in `f32`.
pub const ANCHOR_GRID: f32 = 256.0;
/// Anchor order after a horizontal flip.
pub const MIRROR_ORDER: [usize; NUM_ANCHORS] = [3, 2, 1, 0, 5, 4, 6];

// ---------------------------------------------------------------------------
// crop geometry

/// Axis-aligned box in full-image pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

impl CropBox {
    /// Box of `0.8 R x 1.0 R` centered on the tight anchor box, where `R`
    /// is the distance between the eye corners.
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
    pub fn from_anchors(anchors: &AnchorSet) -> Result<Self> {
        let r = anchors.corner_distance() as f64;
        if !(r > 1e-3) {
            return Err(Error::Sample(format!(
                "degenerate anchors: corner distance {r}"
            )));
        }
        let xs = anchors.points.iter().map(|p| p[0] as f64);
        let ys = anchors.points.iter().map(|p| p[1] as f64);
        let (xmin, xmax) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        let (ymin, ymax) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        let (cx, cy) = ((xmin + xmax) / 2.0, (ymin + ymax) / 2.0);
        let (width, height) = (r, BOX_ASPECT * r);
        Ok(Self {
            x0: cx - width / 2.0,
            y0: cy - height / 2.0,
            width,
            height,
        })
    }

    /// Source coordinate of output column `j` (may be negative or beyond
    /// `out_w` for enlarged crops), half-pixel aligned.
    fn source(&self, j: f64, y: bool, out: usize) -> f64 {
        let (o, len) = if y {
            (self.y0, self.height)
        } else {
            (self.x0, self.width)
        };
        o + (j + 0.5) * len / out as f64 - 0.5
    }

    /// Maps a full-image point into crop pixel coordinates.
    pub fn map_point(&self, p: [f32; 2], out_w: usize, out_h: usize) -> [f32; 2] {
        let x = (p[0] as f64 + 0.5 - self.x0) * out_w as f64 / self.width - 0.5;
        let y = (p[1] as f64 + 0.5 - self.y0) * out_h as f64 / self.height - 0.5;
        [snap(x as f32), snap(y as f32)]
    }
}

fn snap(v: f32) -> f32 {
    (v * ANCHOR_GRID).round() / ANCHOR_GRID
}

/// Bilinearly resamples `bx` to `out_h x out_w`, extended by `margin`
/// pixels on every side; samples outside the image replicate the border.
/// The central `out_h x out_w` region of a margin crop equals the plain
/// crop exactly.
pub fn sample_crop(
    image: &RgbImage,
    bx: &CropBox,
    out_h: usize,
    out_w: usize,
    margin: usize,
) -> Tensor<f32> {
    let (iw, ih) = (image.width() as usize, image.height() as usize);
    let (h, w) = (out_h + 2 * margin, out_w + 2 * margin);
    let raw = image.as_raw();
    let tap = |s: f64, n: usize| -> (usize, usize, f32) {
        let s = s.clamp(0.0, (n - 1) as f64);
        let lo = (s.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        (lo, hi, (s - lo as f64) as f32)
    };
    let xt: Vec<_> = (0..w)
        .map(|j| tap(bx.source(j as f64 - margin as f64, false, out_w), iw))
        .collect();
    let yt: Vec<_> = (0..h)
        .map(|i| tap(bx.source(i as f64 - margin as f64, true, out_h), ih))
        .collect();
    let px = |x: usize, y: usize, c: usize| raw[(y * iw + x) * 3 + c] as f32 / 255.0;
    let mut out = vec![0f32; 3 * h * w];
    for c in 0..3 {
        for (i, &(y0, y1, fy)) in yt.iter().enumerate() {
            for (j, &(x0, x1, fx)) in xt.iter().enumerate() {
                let top = px(x0, y0, c) * (1.0 - fx) + px(x1, y0, c) * fx;
                let bot = px(x0, y1, c) * (1.0 - fx) + px(x1, y1, c) * fx;
                out[(c * h + i) * w + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new([3, h, w], out).expect("sized to extents")
}

/// Cuts the standard `51 x 41` crop around the anchors and maps the anchors
/// into crop coordinates.
pub fn extract_crop(
    image: &RgbImage,
    anchors: &AnchorSet,
) -> Result<(Tensor<f32>, AnchorSet, CropBox)> {
    let bx = CropBox::from_anchors(anchors)?;
    let crop = sample_crop(image, &bx, CROP_HEIGHT, CROP_WIDTH, 0);
    let mut pts = [[0f32; 2]; NUM_ANCHORS];
    for (dst, src) in pts.iter_mut().zip(&anchors.points) {
        *dst = bx.map_point(*src, CROP_WIDTH, CROP_HEIGHT);
    }
    Ok((crop, AnchorSet::new(pts)?, bx))
}

// ---------------------------------------------------------------------------
// samples and pairs

/// One eye crop with its annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct EyeSample {
    /// `[3, 41, 51]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// Crop coordinates.
    pub anchors: AnchorSet,
    pub gaze: AngleSpec,
    pub head_tilt: f32,
    pub sequence_id: usize,
    pub person_id: usize,
}

/// Flips the last axis of an image tensor of any rank.
pub fn flip_horizontal(t: &Tensor<f32>) -> Tensor<f32> {
    let w = *t.shape().last().expect("non-scalar image");
    let mut out = t.values().to_vec();
    for row in out.chunks_mut(w) {
        row.reverse();
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

/// Mirrors anchors for an image of width `width`.
pub fn mirror_anchors(anchors: &AnchorSet, width: usize) -> AnchorSet {
    let w1 = (width - 1) as f32;
    let mut points = [[0f32; 2]; NUM_ANCHORS];
    for (i, &src) in MIRROR_ORDER.iter().enumerate() {
        let p = anchors.points[src];
        points[i] = [w1 - p[0], p[1]];
    }
    AnchorSet { points }
}

fn mirror_angle(a: AngleSpec) -> AngleSpec {
    AngleSpec {
        vertical: a.vertical,
        horizontal: -a.horizontal,
    }
}

/// Horizontal mirror: flipped image, re-ordered anchors, negated horizontal
/// gaze and tilt.
pub fn mirror(sample: &EyeSample) -> EyeSample {
    let width = *sample.image.shape().last().expect("image");
    EyeSample {
        image: flip_horizontal(&sample.image),
        anchors: mirror_anchors(&sample.anchors, width),
        gaze: mirror_angle(sample.gaze),
        head_tilt: -sample.head_tilt,
        sequence_id: sample.sequence_id,
        person_id: sample.person_id,
    }
}

/// Input sample with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub input: EyeSample,
    /// Exact crop of the target frame cut with the input's box.
    pub target: Tensor<f32>,
    /// The same box enlarged by [`TARGET_MARGIN`] on every side.
    pub target_big: Tensor<f32>,
    pub correction: AngleSpec,
}

impl TrainingPair {
    pub fn mirrored(&self) -> Self {
        Self {
            input: mirror(&self.input),
            target: flip_horizontal(&self.target),
            target_big: flip_horizontal(&self.target_big),
            correction: mirror_angle(self.correction),
        }
    }
}

/// A pair by reference into a [`Dataset`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRef {
    pub sequence: usize,
    pub input: usize,
    pub target: usize,
    pub correction: AngleSpec,
    pub tilt: f32,
}

// ---------------------------------------------------------------------------
// dataset

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub image: RgbImage,
    /// Full-image coordinates.
    pub anchors: AnchorSet,
    pub gaze: AngleSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub person: usize,
    pub id: usize,
    pub tilt: f32,
    pub frames: Vec<Frame>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
}

#[derive(Serialize, Deserialize)]
struct FrameMeta {
    frame: usize,
    anchors: AnchorSet,
    gaze: AngleSpec,
    tilt: f32,
}

/// Person-disjoint partition of a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PersonSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Dataset {
    pub fn persons(&self) -> Vec<usize> {
        self.sequences
            .iter()
            .map(|s| s.person)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn num_frames(&self) -> usize {
        self.sequences.iter().map(|s| s.frames.len()).sum()
    }

    /// Crop of one frame with its own box.
    pub fn sample(&self, sequence: usize, frame: usize) -> Result<EyeSample> {
        let seq = self.sequence(sequence)?;
        let f = seq
            .frames
            .get(frame)
            .ok_or_else(|| Error::Sample(format!("sequence {sequence} has no frame {frame}")))?;
        let (image, anchors, _) = extract_crop(&f.image, &f.anchors)?;
        Ok(EyeSample {
            image,
            anchors,
            gaze: f.gaze,
            head_tilt: seq.tilt,
            sequence_id: seq.id,
            person_id: seq.person,
        })
    }

    fn sequence(&self, i: usize) -> Result<&Sequence> {
        self.sequences
            .get(i)
            .ok_or_else(|| Error::Sample(format!("no sequence {i}")))
    }

    /// Crops input and target of a pair with the input's box.
    pub fn materialize(&self, pair: &PairRef) -> Result<TrainingPair> {
        let seq = self.sequence(pair.sequence)?;
        let input = self.sample(pair.sequence, pair.input)?;
        let target_frame = seq.frames.get(pair.target).ok_or_else(|| {
            Error::Sample(format!(
                "sequence {} has no frame {}",
                pair.sequence, pair.target
            ))
        })?;
        let bx = CropBox::from_anchors(&seq.frames[pair.input].anchors)?;
        let target = sample_crop(&target_frame.image, &bx, CROP_HEIGHT, CROP_WIDTH, 0);
        let target_big = sample_crop(
            &target_frame.image,
            &bx,
            CROP_HEIGHT,
            CROP_WIDTH,
            TARGET_MARGIN,
        );
        Ok(TrainingPair {
            input,
            target,
            target_big,
            correction: pair.correction,
        })
    }

    /// Splits persons at random into disjoint train, validation and test sets.
    pub fn split_by_person(&self, val: usize, test: usize, seed: u64) -> Result<PersonSplit> {
        let mut persons = self.persons();
        if persons.len() < val + test + 1 {
            return Err(Error::Config(format!(
                "{} persons cannot supply {val} validation and {test} test persons plus training data",
                persons.len()
            )));
        }
        persons.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut test_p = persons.split_off(persons.len() - test);
        let mut val_p = persons.split_off(persons.len() - val);
        persons.sort_unstable();
        val_p.sort_unstable();
        test_p.sort_unstable();
        Ok(PersonSplit {
            train: persons,
            val: val_p,
            test: test_p,
        })
    }

    /// Pairs whose sequences belong to `persons`.
    pub fn pairs_for(&self, pairs: &[PairRef], persons: &[usize]) -> Vec<PairRef> {
        pairs
            .iter()
            .filter(|p| persons.contains(&self.sequences[p.sequence].person))
            .copied()
            .collect()
    }

    /// Writes `person_PPP/seq_SS/frame_FFF.png` plus one `meta.jsonl` per sequence.
    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        self.sequences.par_iter().try_for_each(|seq| -> Result<()> {
            let dir = sequence_dir(root, seq.person, seq.id);
            fs::create_dir_all(&dir)?;
            let mut meta = BufWriter::new(fs::File::create(dir.join("meta.jsonl"))?);
            for f in &seq.frames {
                imageio::save_rgb(&f.image, dir.join(format!("frame_{:03}.png", f.index)))?;
                let line = FrameMeta {
                    frame: f.index,
                    anchors: f.anchors,
                    gaze: f.gaze,
                    tilt: seq.tilt,
                };
                serde_json::to_writer(&mut meta, &line)?;
                meta.write_all(b"\n")?;
            }
            meta.flush()?;
            Ok(())
        })
    }

    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let mut dirs = Vec::new();
        for p in sorted_entries(root, "person_")? {
            let person = parse_suffix(&p, "person_")?;
            for s in sorted_entries(&p, "seq_")? {
                dirs.push((person, parse_suffix(&s, "seq_")?, s));
            }
        }
        if dirs.is_empty() {
            return Err(Error::Sample(format!(
                "no person_*/seq_* directories under {}",
                root.display()
            )));
        }
        let sequences = dirs
            .par_iter()
            .map(|(person, id, dir)| -> Result<Sequence> {
                let file = fs::File::open(dir.join("meta.jsonl"))?;
                let mut frames = Vec::new();
                let mut tilt = 0.0;
                for line in BufReader::new(file).lines() {
                    let line = line?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let m: FrameMeta = serde_json::from_str(&line)?;
                    let image = imageio::load_rgb(dir.join(format!("frame_{:03}.png", m.frame)))?;
                    tilt = m.tilt;
                    frames.push(Frame {
                        index: m.frame,
                        image,
                        anchors: AnchorSet::new(m.anchors.points)?,
                        gaze: m.gaze,
                    });
                }
                Ok(Sequence {
                    person: *person,
                    id: *id,
                    tilt,
                    frames,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { sequences })
    }
}

fn sequence_dir(root: &Path, person: usize, id: usize) -> PathBuf {
    root.join(format!("person_{person:03}"))
        .join(format!("seq_{id:02}"))
}

fn sorted_entries(dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with(prefix))
        })
        .collect();
    out.sort();
    Ok(out)
}

fn parse_suffix(p: &Path, prefix: &str) -> Result<usize> {
    let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    name[prefix.len()..]
        .parse()
        .map_err(|_| Error::Sample(format!("bad directory name {name:?}")))
}

/// All ordered within-sequence frame pairs with every correction component
/// at most `max_angle` degrees. Frames are never paired with themselves.
pub fn mine_pairs(dataset: &Dataset, max_angle: f32) -> Vec<PairRef> {
    let mut out = Vec::new();
    for (si, seq) in dataset.sequences.iter().enumerate() {
        for (i, a) in seq.frames.iter().enumerate() {
            for (j, b) in seq.frames.iter().enumerate() {
                if i == j {
                    continue;
                }
                let correction = b.gaze - a.gaze;
                if correction.vertical.abs() <= max_angle
                    && correction.horizontal.abs() <= max_angle
                {
                    out.push(PairRef {
                        sequence: si,
                        input: i,
                        target: j,
                        correction,
                        tilt: seq.tilt,
                    });
                }
            }
        }
    }
    out
}

/// Stacks pairs into batch tensors: inputs, exact targets, enlarged targets.
pub fn stack_pairs(pairs: &[TrainingPair]) -> Result<(Tensor<f32>, Tensor<f32>, Tensor<f32>)> {
    if pairs.is_empty() {
        return shape_err("empty batch");
    }
    let inputs: Vec<_> = pairs.iter().map(|p| p.input.image.clone()).collect();
    let targets: Vec<_> = pairs.iter().map(|p| p.target.clone()).collect();
    let bigs: Vec<_> = pairs.iter().map(|p| p.target_big.clone()).collect();
    Ok((
        Tensor::stack(&inputs)?,
        Tensor::stack(&targets)?,
        Tensor::stack(&bigs)?,
    ))
}

// ---------------------------------------------------------------------------
// procedural renderer

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub persons: usize,
    pub sequences_per_person: usize,
    pub frames_per_sequence: usize,
    pub canvas_width: usize,
    pub canvas_height: usize,
    /// Frames span `[-r, r]` degrees of vertical gaze.
    pub vertical_range: f32,
    pub horizontal_range: f32,
    /// Spacing of the gaze targets in degrees; frames are distributed evenly
    /// over the targets. 0 spreads gaze continuously with jitter instead.
    pub gaze_step: f32,
    /// Head tilt is drawn uniformly from `[-max_tilt, max_tilt]` degrees.
    pub max_tilt: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            persons: 12,
            sequences_per_person: 4,
            frames_per_sequence: 40,
            canvas_width: 96,
            canvas_height: 80,
            vertical_range: 15.0,
            horizontal_range: 0.0,
            gaze_step: 3.0,
            max_tilt: 14.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.persons == 0 || self.sequences_per_person == 0 || self.frames_per_sequence < 2 {
            return Err(Error::Config(
                "synthetic dataset needs persons, sequences and at least two frames".into(),
            ));
        }
        if self.canvas_width < 64 || self.canvas_height < 56 {
            return Err(Error::Config(
                "canvas must be at least 64 x 56 pixels".into(),
            ));
        }
        if !(self.gaze_step >= 0.0 && self.vertical_range >= 0.0 && self.horizontal_range >= 0.0) {
            return Err(Error::Config(
                "gaze ranges and step must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Appearance shared by all sequences of one person.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonParams {
    /// Half the corner-to-corner eye width, pixels.
    pub half_width: f32,
    /// Eye opening relative to the half width.
    pub aspect: f32,
    pub iris_ratio: f32,
    pub skin: [f32; 3],
    pub sclera: [f32; 3],
    pub iris: [f32; 3],
    pub pupil: [f32; 3],
    pub iris_phase: f32,
    pub iris_spokes: f32,
    /// Highlight position relative to the iris at straight gaze, in iris radii.
    pub light: [f32; 2],
}

/// Nuisance parameters fixed within a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceParams {
    pub tilt: f32,
    pub gain: f32,
    pub center: [f32; 2],
}

impl PersonParams {
    // 6.28 is a tuned hue/phase span, not a stand-in for tau
    #[allow(clippy::approx_constant)]
    pub fn sample(rng: &mut impl Rng) -> Self {
        let jitter = |rng: &mut dyn rand::RngCore, base: [f32; 3], amp: f32| -> [f32; 3] {
            let s: f32 = rng.gen_range(-amp..amp);
            base.map(|c| (c + s + rng.gen_range(-amp..amp) * 0.3).clamp(0.0, 1.0))
        };
        let skin = jitter(rng, [0.78, 0.58, 0.48], 0.15);
        let sclera = jitter(rng, [0.9, 0.88, 0.86], 0.05);
        let hue: f32 = rng.gen_range(0.0..1.0);
        let dark: f32 = rng.gen_range(0.25..0.55);
        let iris = [
            dark * (0.6 + 0.5 * (hue * 6.28).cos().abs()),
            dark * (0.6 + 0.4 * (hue * 4.0).sin().abs()),
            dark * (0.5 + 0.6 * hue),
        ]
        .map(|c| c.clamp(0.05, 0.8));
        Self {
            half_width: rng.gen_range(22.0..27.0),
            aspect: rng.gen_range(0.36..0.46),
            iris_ratio: rng.gen_range(0.38..0.46),
            skin,
            sclera,
            iris,
            pupil: [0.05, 0.04, 0.05],
            iris_phase: rng.gen_range(0.0..6.28),
            iris_spokes: rng.gen_range(6.0f32..11.0).round(),
            light: [rng.gen_range(-0.45..-0.15), rng.gen_range(-0.5..-0.25)],
        }
    }
}

impl SequenceParams {
    pub fn sample(config: &SynthConfig, rng: &mut impl Rng) -> Self {
        let tilt = if config.max_tilt > 0.0 {
            rng.gen_range(-config.max_tilt..=config.max_tilt)
        } else {
            0.0
        };
        Self {
            tilt,
            gain: rng.gen_range(0.8..1.1),
            center: [
                config.canvas_width as f32 / 2.0 + rng.gen_range(-2.0..2.0),
                config.canvas_height as f32 / 2.0 + rng.gen_range(-2.0..2.0),
            ],
        }
    }
}

/// Eye geometry in the eye-aligned frame (`u` along the corner axis, `w`
/// pointing down), for one gaze.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EyeGeometry {
    pub half_width: f32,
    pub upper: f32,
    pub lower: f32,
    pub iris: [f32; 2],
    pub iris_radius: f32,
    pub pupil_radius: f32,
    pub highlight: [f32; 2],
}

/// Iris displacement per unit of `sin(gaze)`, relative to the half width.
pub const IRIS_TRAVEL: f32 = 0.8;
/// Fraction of the iris motion followed by the specular highlight.
pub const HIGHLIGHT_FOLLOW: f32 = 0.35;

pub fn eye_geometry(person: &PersonParams, gaze: AngleSpec) -> EyeGeometry {
    let a = person.half_width;
    let sv = gaze.vertical.to_radians().sin();
    let sh = gaze.horizontal.to_radians().sin();
    let open = a * person.aspect;
    // looking up lifts the upper lid and slightly lifts the lower one
    let upper = open * (0.95 + 0.8 * sv).max(0.1);
    let lower = open * (0.7 - 0.3 * sv).max(0.1);
    let iris = [IRIS_TRAVEL * a * sh, -IRIS_TRAVEL * a * sv];
    let r = person.iris_ratio * a;
    let highlight = [
        person.light[0] * r + HIGHLIGHT_FOLLOW * iris[0],
        person.light[1] * r + HIGHLIGHT_FOLLOW * iris[1],
    ];
    EyeGeometry {
        half_width: a,
        upper,
        lower,
        iris,
        iris_radius: r,
        pupil_radius: 0.42 * r,
        highlight,
    }
}

impl EyeGeometry {
    fn upper_lid(&self, u: f32) -> f32 {
        -self.upper * (1.0 - (u / self.half_width).powi(2)).max(0.0)
    }

    fn lower_lid(&self, u: f32) -> f32 {
        self.lower * (1.0 - (u / self.half_width).powi(2)).max(0.0)
    }

    /// Anchors in the eye frame, canonical order.
    pub fn anchors_local(&self) -> [[f32; 2]; NUM_ANCHORS] {
        let a = self.half_width;
        [
            [-a, 0.0],
            [-a / 2.0, self.upper_lid(-a / 2.0)],
            [a / 2.0, self.upper_lid(a / 2.0)],
            [a, 0.0],
            [a / 2.0, self.lower_lid(a / 2.0)],
            [-a / 2.0, self.lower_lid(-a / 2.0)],
            self.iris,
        ]
    }
}

fn coverage(d: f32) -> f32 {
    (d + 0.5).clamp(0.0, 1.0)
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

/// Renders one frame on the canvas; returns the image and the anchors in
/// canvas coordinates.
pub fn render_frame(
    config: &SynthConfig,
    person: &PersonParams,
    seq: &SequenceParams,
    gaze: AngleSpec,
) -> (RgbImage, AnchorSet) {
    let g = eye_geometry(person, gaze);
    let (sin_t, cos_t) = seq.tilt.to_radians().sin_cos();
    let to_canvas = |p: [f32; 2]| {
        [
            seq.center[0] + cos_t * p[0] - sin_t * p[1],
            seq.center[1] + sin_t * p[0] + cos_t * p[1],
        ]
    };
    let a = g.half_width;
    let img = RgbImage::from_fn(
        config.canvas_width as u32,
        config.canvas_height as u32,
        |x, y| {
            let (dx, dy) = (x as f32 - seq.center[0], y as f32 - seq.center[1]);
            let u = cos_t * dx + sin_t * dy;
            let w = -sin_t * dx + cos_t * dy;
            let up = g.upper_lid(u);
            let lo = g.lower_lid(u);
            let inside = coverage(w - up) * coverage(lo - w) * coverage(a - u.abs());

            // skin darkens towards the eye, with a crease above the upper lid
            let ell = ((u / (a * 1.35)).powi(2) + (w / (a * 0.8)).powi(2)).sqrt();
            let shade = 0.78 + 0.22 * ell.min(1.0);
            let crease =
                (-((w - (up - 0.35 * a * (1.0 - (u / a).powi(2)).max(0.0))) / 1.8).powi(2)).exp();
            let mut col = person.skin.map(|c| c * shade * (1.0 - 0.15 * crease));

            let du = u - g.iris[0];
            let dw = w - g.iris[1];
            let rr = (du * du + dw * dw).sqrt();
            let edge = (u / a).powi(2);
            let sclera = person.sclera.map(|c| c * (1.0 - 0.18 * edge));
            let angle = dw.atan2(du);
            let tex = 0.8
                + 0.2
                    * (person.iris_spokes * angle + person.iris_phase).sin()
                    * (rr / g.iris_radius).min(1.0);
            let ring = 1.0 - 0.35 * coverage(rr - 0.85 * g.iris_radius);
            let iris = person.iris.map(|c| c * tex * ring);
            let mut eye = mix(sclera, iris, coverage(g.iris_radius - rr));
            eye = mix(eye, person.pupil, coverage(g.pupil_radius - rr));
            let (hu, hw) = (
                u - (g.iris[0] + g.highlight[0]),
                w - (g.iris[1] + g.highlight[1]),
            );
            let spec = 0.9
                * (-(hu * hu + hw * hw) / (2.0 * 1.4 * 1.4)).exp()
                * coverage(g.iris_radius - rr);
            eye = mix(eye, [1.0; 3], spec);

            col = mix(col, eye, inside);
            // lash line along the upper lid
            let lash = coverage(1.3 - (w - up).abs()) * coverage(a - u.abs());
            col = col.map(|c| c * (1.0 - 0.65 * lash));
            Rgb(col.map(|c| imageio::quantize((c * seq.gain) as f64)))
        },
    );
    let local = g.anchors_local();
    let anchors = AnchorSet {
        points: local.map(to_canvas),
    };
    (img, anchors)
}

fn person_rng(seed: u64, person: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(person as u64 * 2 + 1);
    rng
}

fn sequence_rng(seed: u64, person: usize, seq: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((person as u64) << 20 | seq as u64) * 2 + 2);
    rng
}

/// Gaze of frame `i` of `n`. On a target grid, consecutive frames fixate
/// the same target and the targets sweep the range in order; without a grid
/// the range is spread evenly with jitter.
fn frame_gaze(config: &SynthConfig, i: usize, n: usize, rng: &mut impl Rng) -> AngleSpec {
    let spread = |r: f32, rng: &mut dyn rand::RngCore| -> f32 {
        if r == 0.0 {
            return 0.0;
        }
        if config.gaze_step > 0.0 {
            let targets = (2.0 * r / config.gaze_step).floor() as usize + 1;
            let t = i * targets / n;
            return -r + config.gaze_step * t as f32;
        }
        let t = (i as f32 + rng.gen_range(0.0..1.0)) / n as f32;
        ((-r + 2.0 * r * t) * 4.0).round() / 4.0
    };
    let v = spread(config.vertical_range, rng);
    let h = spread(config.horizontal_range, rng);
    AngleSpec {
        vertical: v,
        horizontal: h,
    }
}

/// Deterministic procedural dataset.
pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let persons: Vec<PersonParams> = (0..config.persons)
        .map(|p| PersonParams::sample(&mut person_rng(seed, p)))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..config.persons)
        .flat_map(|p| (0..config.sequences_per_person).map(move |s| (p, s)))
        .collect();
    let sequences = jobs
        .par_iter()
        .map(|&(p, s)| {
            let mut rng = sequence_rng(seed, p, s);
            let sp = SequenceParams::sample(config, &mut rng);
            let n = config.frames_per_sequence;
            let frames = (0..n)
                .map(|i| {
                    let gaze = frame_gaze(config, i, n, &mut rng);
                    let (image, anchors) = render_frame(config, &persons[p], &sp, gaze);
                    Frame {
                        index: i,
                        image,
                        anchors,
                        gaze,
                    }
                })
                .collect();
            Sequence {
                person: p,
                id: s,
                tilt: sp.tilt,
                frames,
            }
        })
        .collect();
    Ok(Dataset { sequences })
}

/// Reference flow from the generator's own geometry. Each column of the
/// eye frame is remapped piecewise-linearly so that the target lids read
/// from the input lids; visible target iris reads from the input iris
/// displaced by the known iris motion wherever that source is itself
/// visible. Pixels more than a few pixels from both lids keep zero flow.
pub fn analytic_flow(
    person: &PersonParams,
    seq: &SequenceParams,
    from: AngleSpec,
    to: AngleSpec,
    bx: &CropBox,
) -> Tensor<f32> {
    const BAND: f32 = 6.0;
    let (h, w) = (CROP_HEIGHT, CROP_WIDTH);
    let gi = eye_geometry(person, from);
    let go = eye_geometry(person, to);
    let (sin_t, cos_t) = seq.tilt.to_radians().sin_cos();
    let (sx, sy) = (w as f64 / bx.width, h as f64 / bx.height);
    let d = [go.iris[0] - gi.iris[0], go.iris[1] - gi.iris[1]];
    let plane = h * w;
    let mut flow = vec![0f32; 2 * plane];
    for y in 0..h {
        for x in 0..w {
            let cx = bx.x0 + (x as f64 + 0.5) / sx - 0.5;
            let cy = bx.y0 + (y as f64 + 0.5) / sy - 0.5;
            let (dx, dy) = (cx as f32 - seq.center[0], cy as f32 - seq.center[1]);
            let u = cos_t * dx + sin_t * dy;
            let v = -sin_t * dx + cos_t * dy;
            let (uo, lo) = (go.upper_lid(u), go.lower_lid(u));
            let (ui, li) = (gi.upper_lid(u), gi.lower_lid(u));
            let top = uo.min(ui) - BAND;
            let bottom = lo.max(li) + BAND;
            let lerp =
                |v: f32, a0: f32, a1: f32, b0: f32, b1: f32| b0 + (v - a0) * (b1 - b0) / (a1 - a0);
            let mut src = [u, v];
            if v > top && v < bottom {
                src[1] = if v <= uo {
                    lerp(v, top, uo, top, ui)
                } else if v <= lo {
                    lerp(v, uo, lo, ui, li)
                } else {
                    lerp(v, lo, bottom, li, bottom)
                };
            }
            let visible_o = v > uo && v < lo && u.abs() < go.half_width;
            let r = ((u - go.iris[0]).powi(2) + (v - go.iris[1]).powi(2)).sqrt();
            if visible_o && r <= go.iris_radius + 0.5 {
                let s = [u - d[0], v - d[1]];
                if s[1] > gi.upper_lid(s[0]) && s[1] < gi.lower_lid(s[0]) {
                    src = s;
                }
            }
            let (du, dv) = (src[0] - u, src[1] - v);
            flow[y * w + x] = ((cos_t * du - sin_t * dv) as f64 * sx) as f32;
            flow[plane + y * w + x] = ((sin_t * du + cos_t * dv) as f64 * sy) as f32;
        }
    }
    Tensor::new([1, 2, h, w], flow).expect("sized")
}
