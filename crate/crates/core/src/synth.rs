//! Deterministic synthetic class-incremental segmentation benchmarks.
//!
//! Each class is a (shape family, hue band) pair. Images are painted from
//! a ChaCha stream keyed by `(seed, task, index)`, so any image can be
//! regenerated in isolation and generation order does not matter.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use cogcas_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed::{self, domain};

pub const MIN_GRID: usize = 16;
pub const MAX_SHAPES: usize = 8;
pub const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeFamily {
    Rectangle,
    Circle,
    Triangle,
    Cross,
    Ring,
    Stripes,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 6] = [
        ShapeFamily::Rectangle,
        ShapeFamily::Circle,
        ShapeFamily::Triangle,
        ShapeFamily::Cross,
        ShapeFamily::Ring,
        ShapeFamily::Stripes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Rectangle => "rectangle",
            ShapeFamily::Circle => "circle",
            ShapeFamily::Triangle => "triangle",
            ShapeFamily::Cross => "cross",
            ShapeFamily::Ring => "ring",
            ShapeFamily::Stripes => "stripes",
        }
    }

    /// Membership test in shape-local coordinates scaled to [-1, 1].
    fn contains(self, dx: f64, dy: f64, aspect: f64) -> bool {
        match self {
            ShapeFamily::Rectangle => dx.abs() <= 1.0 && dy.abs() <= aspect,
            ShapeFamily::Circle => dx * dx + dy * dy <= 1.0,
            ShapeFamily::Triangle => (-1.0..=1.0).contains(&dy) && dx.abs() <= (dy + 1.0) / 2.0,
            ShapeFamily::Cross => {
                let arm = 0.35;
                (dx.abs() <= arm && dy.abs() <= 1.0) || (dy.abs() <= arm && dx.abs() <= 1.0)
            }
            ShapeFamily::Ring => {
                let r2 = dx * dx + dy * dy;
                (0.3..=1.0).contains(&r2)
            }
            ShapeFamily::Stripes => {
                dx.abs() <= 1.0 && dy.abs() <= 1.0 && ((dy + 1.0) * 2.5).floor() as i64 % 2 == 0
            }
        }
    }
}

/// Visual identity of a class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassStyle {
    pub class: u16,
    pub family: ShapeFamily,
    /// Hue band centre in degrees.
    pub hue: f64,
}

/// Class `k` (1-based) uses family `(k-1) mod 6`. Hue bands are spread
/// around the colour wheel with a stride coprime to the class count so
/// that consecutive classes, which usually share a task, are far apart.
pub fn class_style(class: u16, num_classes: usize) -> ClassStyle {
    let k = class as usize - 1;
    let n = num_classes.max(1);
    let stride = (1..n).rev().find(|s| gcd(*s, n) == 1 && *s * 2 <= n + 1).unwrap_or(1);
    ClassStyle {
        class,
        family: ShapeFamily::ALL[k % ShapeFamily::ALL.len()],
        hue: ((k * stride) % n) as f64 * 360.0 / n as f64,
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Classes in the first task (M).
    pub first_task: usize,
    /// Classes in each later task (N).
    pub task_step: usize,
    pub images_per_task: usize,
    pub train_fraction: f64,
    pub max_shapes: usize,
    /// Chance that an extra shape comes from a class outside the task.
    pub distractor_prob: f64,
    /// Place every extra shape so that it overlaps the first one.
    pub force_overlap: bool,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 32,
            width: 32,
            num_classes: 10,
            first_task: 2,
            task_step: 2,
            images_per_task: 250,
            train_fraction: 0.8,
            max_shapes: 3,
            distractor_prob: 0.3,
            force_overlap: false,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_GRID || self.width < MIN_GRID || self.max_shapes == 0 || self.max_shapes > MAX_SHAPES {
            return Err(Error::GridTooSmall {
                height: self.height,
                width: self.width,
                shapes: self.max_shapes,
                min: MIN_GRID,
                max_shapes: MAX_SHAPES,
            });
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::Benchmark(format!("distractor probability {}", self.distractor_prob)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Benchmark(format!("train fraction {}", self.train_fraction)));
        }
        if self.images_per_task < 2 {
            return Err(Error::Benchmark("need at least two images per task".into()));
        }
        if self.num_classes >= u16::MAX as usize {
            return Err(Error::Benchmark("too many classes".into()));
        }
        split_classes(self.num_classes, self.first_task, self.task_step).map(|_| ())
    }

    pub fn train_count(&self) -> usize {
        ((self.images_per_task as f64 * self.train_fraction).round() as usize).clamp(1, self.images_per_task - 1)
    }
}

/// Partition classes `1..=total` into an M-N task sequence.
pub fn split_classes(total: usize, first: usize, step: usize) -> Result<Vec<Vec<u16>>> {
    if first == 0 || step == 0 || first > total || (total - first) % step != 0 {
        return Err(Error::Benchmark(format!(
            "{first}-{step} split does not tile {total} classes"
        )));
    }
    let mut tasks = vec![(1..=first as u16).collect::<Vec<_>>()];
    let mut next = first as u16 + 1;
    while (next as usize) <= total {
        tasks.push((next..next + step as u16).collect());
        next += step as u16;
    }
    Ok(tasks)
}

/// `[3, h, w]` image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![CHANNELS, self.height, self.width], self.data.clone()).expect("image layout")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u16>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn background(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
        }
    }

    pub fn count(&self, class: u16) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    pub fn contains(&self, class: u16) -> bool {
        self.labels.contains(&class)
    }

    /// Nonzero labels present.
    pub fn classes(&self) -> BTreeSet<u16> {
        self.labels.iter().copied().filter(|&l| l != 0).collect()
    }

    /// Binary indicator of `class` as floats.
    pub fn indicator(&self, class: u16) -> Vec<f64> {
        self.labels.iter().map(|&l| f64::from(u8::from(l == class))).collect()
    }
}

/// Keep labels in `classes`, send everything else to background.
pub fn apply_background_shift(map: &LabelMap, classes: &[u16]) -> LabelMap {
    LabelMap {
        height: map.height,
        width: map.width,
        labels: map
            .labels
            .iter()
            .map(|l| if classes.contains(l) { *l } else { 0 })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub image: Image,
    /// Annotation visible to the learner of this split.
    pub label: LabelMap,
    /// Complete annotation over every class.
    pub truth: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    /// 1-based position in the stream.
    pub index: usize,
    pub classes: Vec<u16>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub spec: BenchmarkSpec,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, t: usize) -> &Task {
        &self.tasks[t - 1]
    }

    /// Classes introduced in tasks `1..=t`.
    pub fn classes_up_to(&self, t: usize) -> Vec<u16> {
        self.tasks[..t].iter().flat_map(|task| task.classes.iter().copied()).collect()
    }

    pub fn task_of(&self, class: u16) -> Option<usize> {
        self.tasks.iter().find(|t| t.classes.contains(&class)).map(|t| t.index)
    }

    /// Validation samples of every task, in task order.
    pub fn all_val(&self) -> Vec<&Sample> {
        self.tasks.iter().flat_map(|t| t.val.iter()).collect()
    }

    pub fn all_train(&self) -> Vec<&Sample> {
        self.tasks.iter().flat_map(|t| t.train.iter()).collect()
    }

    /// Plain-text description sufficient to regenerate the stream.
    pub fn describe(&self) -> String {
        let s = &self.spec;
        let mut out = String::new();
        let _ = writeln!(out, "seed: {}", s.seed);
        let _ = writeln!(out, "grid: {}x{}x{}", s.height, s.width, CHANNELS);
        let _ = writeln!(out, "classes: {}", s.num_classes);
        let _ = writeln!(out, "split: {}-{}", s.first_task, s.task_step);
        let _ = writeln!(out, "tasks: {}", self.tasks.len());
        let _ = writeln!(out, "images_per_task: {}", s.images_per_task);
        let _ = writeln!(out, "train_per_task: {}", s.train_count());
        let _ = writeln!(out, "max_shapes: {}", s.max_shapes);
        let _ = writeln!(out, "distractor_prob: {}", s.distractor_prob);
        let _ = writeln!(out, "force_overlap: {}", s.force_overlap);
        for task in &self.tasks {
            let ids: Vec<String> = task.classes.iter().map(|c| c.to_string()).collect();
            let _ = writeln!(out, "task {}: classes {}", task.index, ids.join(","));
        }
        for c in 1..=s.num_classes as u16 {
            let style = class_style(c, s.num_classes);
            let _ = writeln!(out, "class {c}: family {} hue {:.1}", style.family.name(), style.hue);
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
struct Placement {
    class: u16,
    cy: f64,
    cx: f64,
    radius: f64,
    aspect: f64,
    rgb: [f64; 3],
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Render one image and its full ground truth.
fn render(spec: &BenchmarkSpec, task_classes: &[u16], task: usize, index: usize) -> (Image, LabelMap) {
    let mut rng = seed::rng(&[spec.seed, domain::IMAGE, task as u64, index as u64]);
    let (h, w) = (spec.height, spec.width);
    let others: Vec<u16> = (1..=spec.num_classes as u16)
        .filter(|c| !task_classes.contains(c))
        .collect();

    let slot = index % (task_classes.len() + 1);
    let n_shapes = rng.gen_range(1..=spec.max_shapes);
    let mut classes = Vec::with_capacity(n_shapes);
    if slot < task_classes.len() {
        classes.push(task_classes[slot]);
    }
    for k in 0..n_shapes {
        if k == 0 && slot < task_classes.len() {
            continue;
        }
        let distract = !others.is_empty() && rng.gen_bool(spec.distractor_prob);
        if distract {
            classes.push(*others.choose(&mut rng).expect("nonempty"));
        } else if slot < task_classes.len() {
            classes.push(*task_classes.choose(&mut rng).expect("nonempty"));
        }
    }

    let min_side = h.min(w) as f64;
    let (r_lo, r_hi) = (min_side / 8.0, min_side / 4.5);
    let mut placements: Vec<Placement> = Vec::with_capacity(classes.len());
    for (k, &class) in classes.iter().enumerate() {
        let style = class_style(class, spec.num_classes);
        let radius = rng.gen_range(r_lo..r_hi);
        let (cy, cx) = if spec.force_overlap && k > 0 {
            let anchor = placements[0];
            let reach = anchor.radius.min(radius);
            (
                (anchor.cy + rng.gen_range(-reach..reach)).clamp(radius, h as f64 - radius),
                (anchor.cx + rng.gen_range(-reach..reach)).clamp(radius, w as f64 - radius),
            )
        } else {
            (rng.gen_range(radius..h as f64 - radius), rng.gen_range(radius..w as f64 - radius))
        };
        let hue = style.hue + rng.gen_range(-8.0..8.0);
        let sat = rng.gen_range(0.7..1.0);
        let val = rng.gen_range(0.65..1.0);
        placements.push(Placement {
            class,
            cy,
            cx,
            radius,
            aspect: rng.gen_range(0.6..1.0),
            rgb: hsv_to_rgb(hue, sat, val),
        });
    }
    // Higher class ids are painted last and so end up on top.
    placements.sort_by_key(|p| p.class);

    let grey = rng.gen_range(0.25..0.6);
    let tint = hsv_to_rgb(rng.gen_range(0.0..360.0), rng.gen_range(0.0..0.12), grey);
    let mut data = vec![0.0; CHANNELS * h * w];
    let mut labels = vec![0u16; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let mut color = tint;
            let mut noise = 0.05;
            for pl in &placements {
                let family = class_style(pl.class, spec.num_classes).family;
                let dx = (x as f64 + 0.5 - pl.cx) / pl.radius;
                let dy = (y as f64 + 0.5 - pl.cy) / pl.radius;
                if family.contains(dx, dy, pl.aspect) {
                    color = pl.rgb;
                    noise = 0.03;
                    labels[p] = pl.class;
                }
            }
            for (ch, &base) in color.iter().enumerate() {
                data[ch * h * w + p] = (base + noise * gaussian(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    (
        Image {
            height: h,
            width: w,
            data,
        },
        LabelMap {
            height: h,
            width: w,
            labels,
        },
    )
}

/// Generate the full stream. Images are rendered in parallel; the result
/// is identical to sequential rendering because each image owns its RNG.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<TaskStream> {
    spec.validate()?;
    let splits = split_classes(spec.num_classes, spec.first_task, spec.task_step)?;
    let n_train = spec.train_count();
    let tasks = splits
        .into_iter()
        .enumerate()
        .map(|(i, classes)| {
            let index = i + 1;
            let samples: Vec<Sample> = (0..spec.images_per_task)
                .into_par_iter()
                .map(|k| {
                    let (image, truth) = render(spec, &classes, index, k);
                    let train = k < n_train;
                    Sample {
                        id: (i * spec.images_per_task + k) as u64,
                        label: if train {
                            apply_background_shift(&truth, &classes)
                        } else {
                            truth.clone()
                        },
                        image,
                        truth,
                    }
                })
                .collect();
            let mut samples = samples;
            let val = samples.split_off(n_train);
            Task {
                index,
                classes,
                train: samples,
                val,
            }
        })
        .collect();
    Ok(TaskStream {
        spec: spec.clone(),
        tasks,
    })
}

/// A training image guaranteed free of `class`, paired with an
/// all-background target for that class's segmenter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NearOodPair {
    /// Index into the sample slice the pair was drawn from.
    pub sample: usize,
    pub class: u16,
}

/// Draw `ratio × positives` class-free images from `samples`, without
/// replacement, in an order fixed by `seed_parts`.
pub fn build_near_ood(samples: &[&Sample], class: u16, ratio: f64, seed_parts: &[u64]) -> Result<Vec<NearOodPair>> {
    let positives = samples.iter().filter(|s| s.truth.contains(class)).count();
    if positives == 0 {
        return Err(Error::NoPositives(class));
    }
    let mut free: Vec<usize> = (0..samples.len())
        .filter(|&i| !samples[i].truth.contains(class))
        .collect();
    let needed = (ratio * positives as f64).round() as usize;
    if free.len() < needed {
        return Err(Error::NearOodShortfall {
            class,
            needed,
            available: free.len(),
        });
    }
    let mut parts = vec![domain::NEAR_OOD, u64::from(class)];
    parts.extend_from_slice(seed_parts);
    free.shuffle(&mut seed::rng(&parts));
    free.truncate(needed);
    free.sort_unstable();
    Ok(free.into_iter().map(|sample| NearOodPair { sample, class }).collect())
}

impl Task {
    /// Near-OOD pairs for `class` drawn from this task's training split.
    pub fn near_ood(&self, class: u16, ratio: f64, seed: u64) -> Result<Vec<NearOodPair>> {
        if !self.classes.contains(&class) {
            return Err(Error::UnknownClass(class));
        }
        let refs: Vec<&Sample> = self.train.iter().collect();
        build_near_ood(&refs, class, ratio, &[seed, self.index as u64])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BenchmarkSpec {
        BenchmarkSpec {
            num_classes: 4,
            first_task: 2,
            task_step: 1,
            images_per_task: 20,
            ..BenchmarkSpec::default()
        }
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(split_classes(4, 2, 1).unwrap(), vec![vec![1, 2], vec![3], vec![4]]);
        assert_eq!(split_classes(10, 2, 2).unwrap().len(), 5);
        assert!(split_classes(5, 2, 2).is_err());
        assert!(split_classes(4, 0, 1).is_err());
    }

    #[test]
    fn background_shift_definition() {
        let map = LabelMap::new(1, 3, vec![1, 2, 3]).unwrap();
        assert_eq!(apply_background_shift(&map, &[2]).labels, vec![0, 2, 0]);
        assert_eq!(apply_background_shift(&map, &[]).labels, vec![0, 0, 0]);
        assert_eq!(apply_background_shift(&map, &[1, 2, 3]), map);
    }

    #[test]
    fn rejects_tiny_grid() {
        let spec = BenchmarkSpec {
            height: 8,
            ..small()
        };
        assert!(matches!(generate_benchmark(&spec), Err(Error::GridTooSmall { .. })));
    }

    #[test]
    fn class_styles_are_distinct() {
        let styles: Vec<_> = (1..=10).map(|c| class_style(c, 10)).collect();
        for a in 0..10 {
            for b in a + 1..10 {
                assert!(styles[a].hue != styles[b].hue);
            }
        }
        assert_eq!(styles[0].family, ShapeFamily::Rectangle);
        assert_eq!(styles[6].family, ShapeFamily::Rectangle);
    }

    #[test]
    fn pixels_in_unit_range() {
        let stream = generate_benchmark(&small()).unwrap();
        for s in stream.all_train() {
            assert!(s.image.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_to_rgb(240.0, 1.0, 1.0), [0.0, 0.0, 1.0]);
    }
}
