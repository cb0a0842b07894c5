//! Frozen backbone, per-class routers and segmenters, and the monolithic
//! softmax baseline. Forward passes are written against a flat parameter
//! slice so trainers can run them on working copies of the store.

use cogcas_autodiff::kernels::{self, ConvGeometry};
use cogcas_autodiff::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::{self, domain};
use crate::store::{Owner, ParameterStore};
use crate::synth::{Image, CHANNELS};

pub const STEM: &str = "backbone.stem";
pub const TAIL: &str = "backbone.tail";

/// Layer widths shared by every head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arch {
    pub stem_channels: usize,
    pub feature_channels: usize,
    /// Width of the 1×1 reduction and the two dilated layers inside each
    /// segmenter.
    pub hidden: usize,
    /// Width of the two dilated layers inside the monolithic baseline.
    pub baseline_hidden: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            stem_channels: 12,
            feature_channels: 16,
            hidden: 2,
            baseline_hidden: 8,
        }
    }
}

/// Input pixels per feature-map pixel along each axis.
pub const STRIDE: usize = 2;
/// Negative slope of the segmenter activations; keeps two-channel
/// layers from dying.
pub const LEAK: f64 = 0.1;

impl Arch {
    pub fn stem_len(&self) -> usize {
        self.stem_channels * CHANNELS * 9 + self.stem_channels
    }

    pub fn tail_len(&self) -> usize {
        self.feature_channels * self.stem_channels * 9 + self.feature_channels
    }

    pub fn router_len(&self) -> usize {
        self.feature_channels + 1
    }

    pub fn segmenter_len(&self) -> usize {
        let (f, h) = (self.feature_channels, self.hidden);
        (h * f + h) + 2 * (h * h * 9 + h) + (2 * 3 * h + 2)
    }

    pub fn baseline_trunk_len(&self) -> usize {
        let (f, h) = (self.feature_channels, self.baseline_hidden);
        (h * f * 9 + h) + (h * h * 9 + h)
    }

    pub fn baseline_row_len(&self) -> usize {
        self.baseline_hidden + 1
    }
}

fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// He-style uniform weights followed by a constant bias.
fn conv_init(rng: &mut impl Rng, out: usize, fan_in: usize, bias: f64) -> Vec<f64> {
    let mut v = uniform(rng, out * fan_in, (6.0 / fan_in as f64).sqrt());
    v.extend(std::iter::repeat(bias).take(out));
    v
}

pub(crate) fn leaf(tape: &mut Tape, params: &[f64], offset: usize, shape: &[usize]) -> Var {
    let n: usize = shape.iter().product();
    tape.param(
        Tensor::new(shape.to_vec(), params[offset..offset + n].to_vec()).expect("leaf shape"),
        offset,
    )
}

/// Conv layer whose weights and bias sit back to back at `offset`.
/// Returns the output and the offset just past the layer.
pub(crate) fn conv_layer(
    tape: &mut Tape,
    params: &[f64],
    offset: usize,
    input: Var,
    out: usize,
    inp: usize,
    kernel: usize,
    dilation: usize,
) -> Result<(Var, usize)> {
    let wn = out * inp * kernel * kernel;
    let w = leaf(tape, params, offset, &[out, inp, kernel, kernel]);
    let b = leaf(tape, params, offset + wn, &[out]);
    Ok((tape.conv2d(input, w, b, dilation)?, offset + wn + out))
}

/// Backbone parameters; always created frozen.
pub fn init_backbone(arch: &Arch, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = seed::rng(&[seed, domain::BACKBONE]);
    let stem = conv_init(&mut rng, arch.stem_channels, CHANNELS * 9, 0.0);
    let tail = conv_init(&mut rng, arch.feature_channels, arch.stem_channels * 9, 0.0);
    (stem, tail)
}

/// `relu(conv(image))` pooled by two: the input to the tail layer.
pub fn stem_forward(arch: &Arch, stem: &[f64], image: &Image) -> Result<Tensor> {
    if image.data.len() != CHANNELS * image.height * image.width || image.height % 2 != 0 || image.width % 2 != 0 {
        return Err(Error::Shape(format!(
            "image {}x{} with {} values",
            image.height,
            image.width,
            image.data.len()
        )));
    }
    let g = ConvGeometry {
        in_channels: CHANNELS,
        out_channels: arch.stem_channels,
        height: image.height,
        width: image.width,
        kernel: 3,
        dilation: 1,
    };
    let wn = arch.stem_channels * CHANNELS * 9;
    let mut h = kernels::conv2d(&image.data, &stem[..wn], &stem[wn..], g);
    h.iter_mut().for_each(|v| *v = v.max(0.0));
    let pooled = kernels::avg_pool2(&h, arch.stem_channels, image.height, image.width);
    Ok(Tensor::new(
        vec![arch.stem_channels, image.height / 2, image.width / 2],
        pooled,
    )?)
}

pub fn tail_forward(arch: &Arch, tail: &[f64], stem_out: &Tensor) -> Tensor {
    let s = stem_out.shape();
    let g = ConvGeometry {
        in_channels: arch.stem_channels,
        out_channels: arch.feature_channels,
        height: s[1],
        width: s[2],
        kernel: 3,
        dilation: 1,
    };
    let wn = arch.feature_channels * arch.stem_channels * 9;
    let mut f = kernels::conv2d(stem_out.data(), &tail[..wn], &tail[wn..], g);
    f.iter_mut().for_each(|v| *v = v.max(0.0));
    Tensor::new(vec![arch.feature_channels, s[1], s[2]], f).expect("feature layout")
}

/// Stem on the tape: 3×3 conv, ReLU, 2×2 average pool.
pub fn stem_on_tape(tape: &mut Tape, arch: &Arch, params: &[f64], offset: usize, image: Var) -> Result<Var> {
    let (h, _) = conv_layer(tape, params, offset, image, arch.stem_channels, CHANNELS, 3, 1)?;
    let h = tape.relu(h)?;
    Ok(tape.avg_pool2(h)?)
}

/// Tail layer on the tape, for runs where it is trainable.
pub fn tail_on_tape(tape: &mut Tape, arch: &Arch, params: &[f64], tail_offset: usize, stem_out: Var) -> Result<Var> {
    let (h, _) = conv_layer(
        tape,
        params,
        tail_offset,
        stem_out,
        arch.feature_channels,
        arch.stem_channels,
        3,
        1,
    )?;
    Ok(tape.relu(h)?)
}

/// Existence logit of one class from pooled features `[F]`.
pub fn router_logit(tape: &mut Tape, arch: &Arch, params: &[f64], offset: usize, pooled: Var) -> Result<Var> {
    let f = arch.feature_channels;
    let w = leaf(tape, params, offset, &[1, f]);
    let b = leaf(tape, params, offset + f, &[1, 1]);
    let col = tape.reshape(pooled, &[f, 1])?;
    let z = tape.matmul(w, col)?;
    let z = tape.add(z, b)?;
    Ok(tape.reshape(z, &[1])?)
}

/// Two-channel `(bg, fg)` logits at input resolution: a 1×1 reduction
/// feeding two parallel 3×3 branches (dilation 1 and 2), all three
/// concatenated into a 1×1 projection.
pub fn segmenter_logits(tape: &mut Tape, arch: &Arch, params: &[f64], offset: usize, features: Var) -> Result<Var> {
    let (f, h) = (arch.feature_channels, arch.hidden);
    let (reduced, o) = conv_layer(tape, params, offset, features, h, f, 1, 1)?;
    let reduced = tape.leaky_relu(reduced, LEAK)?;
    let (near, o) = conv_layer(tape, params, o, reduced, h, h, 3, 1)?;
    let near = tape.leaky_relu(near, LEAK)?;
    let (far, o) = conv_layer(tape, params, o, reduced, h, h, 3, 2)?;
    let far = tape.leaky_relu(far, LEAK)?;
    let x = tape.concat(&[reduced, near, far])?;
    let (x, _) = conv_layer(tape, params, o, x, 2, 3 * h, 1, 1)?;
    Ok(tape.upsample_bilinear(x, STRIDE)?)
}

/// Softmax of [`segmenter_logits`].
pub fn segmenter_probs(tape: &mut Tape, arch: &Arch, params: &[f64], offset: usize, features: Var) -> Result<Var> {
    let x = segmenter_logits(tape, arch, params, offset, features)?;
    Ok(tape.softmax(x)?)
}

/// Offsets of one class's router and segmenter blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassHeads {
    pub class: u16,
    pub task: usize,
    pub router: usize,
    pub segmenter: usize,
}

pub fn router_block(class: u16) -> String {
    format!("cls.c{class}")
}

pub fn segmenter_block(class: u16) -> String {
    format!("seg.c{class}")
}

/// Frozen backbone plus one router and one segmenter per learned class.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeModel {
    pub arch: Arch,
    pub store: ParameterStore,
    pub seed: u64,
    heads: Vec<ClassHeads>,
}

impl CascadeModel {
    pub fn new(arch: Arch, stem: Vec<f64>, tail: Vec<f64>, seed: u64) -> Result<Self> {
        if stem.len() != arch.stem_len() || tail.len() != arch.tail_len() {
            return Err(Error::Layout("backbone parameter count".into()));
        }
        let mut store = ParameterStore::new();
        store.push_block(STEM, stem, Owner::Shared)?;
        store.push_block(TAIL, tail, Owner::Shared)?;
        store.freeze_all();
        Ok(Self {
            arch,
            store,
            seed,
            heads: Vec::new(),
        })
    }

    pub(crate) fn from_parts(arch: Arch, store: ParameterStore, seed: u64) -> Result<Self> {
        let mut heads = Vec::new();
        for b in store.blocks() {
            if let (Some(c), Owner::Task(task)) = (b.name.strip_prefix("cls.c"), b.owner) {
                let class: u16 = c.parse().map_err(|_| Error::Format(format!("block {:?}", b.name)))?;
                heads.push(ClassHeads {
                    class,
                    task,
                    router: b.offset,
                    segmenter: store.block(&segmenter_block(class))?.offset,
                });
            }
        }
        Ok(Self {
            arch,
            store,
            seed,
            heads,
        })
    }

    pub fn heads(&self) -> &[ClassHeads] {
        &self.heads
    }

    pub fn classes(&self) -> Vec<u16> {
        self.heads.iter().map(|h| h.class).collect()
    }

    pub fn head(&self, class: u16) -> Result<ClassHeads> {
        self.heads
            .iter()
            .find(|h| h.class == class)
            .copied()
            .ok_or(Error::UnknownClass(class))
    }

    pub fn stem(&self) -> &[f64] {
        self.store.block_values(STEM).expect("stem block")
    }

    pub fn tail(&self) -> &[f64] {
        self.store.block_values(TAIL).expect("tail block")
    }

    pub fn tail_offset(&self) -> usize {
        self.store.block(TAIL).expect("tail block").offset
    }

    /// Freeze everything that exists, then append a router and a
    /// segmenter block for each new class. Returns the new block names.
    pub fn instantiate_task(&mut self, task: usize, classes: &[u16]) -> Result<Vec<String>> {
        for (i, &c) in classes.iter().enumerate() {
            if self.heads.iter().any(|h| h.class == c) || classes[..i].contains(&c) {
                return Err(Error::DuplicateClass(c));
            }
        }
        self.store.freeze_all();
        let mut names = Vec::new();
        for &c in classes {
            let mut rng = seed::rng(&[self.seed, domain::INIT, task as u64, u64::from(c)]);
            let f = self.arch.feature_channels;
            let mut router = uniform(&mut rng, f, (3.0 / f as f64).sqrt());
            router.push(0.0);
            let h = self.arch.hidden;
            let mut seg = conv_init(&mut rng, h, f, 0.1);
            seg.extend(conv_init(&mut rng, h, h * 9, 0.1));
            seg.extend(conv_init(&mut rng, h, h * 9, 0.1));
            seg.extend(uniform(&mut rng, 2 * 3 * h, (1.0 / h as f64).sqrt()));
            seg.extend([0.0, 0.0]);
            let router_offset = self.store.push_block(router_block(c), router, Owner::Task(task))?;
            let seg_offset = self.store.push_block(segmenter_block(c), seg, Owner::Task(task))?;
            names.push(router_block(c));
            names.push(segmenter_block(c));
            self.heads.push(ClassHeads {
                class: c,
                task,
                router: router_offset,
                segmenter: seg_offset,
            });
        }
        Ok(names)
    }

    /// Feature map of one image through the stored backbone.
    pub fn extract_features(&self, image: &Image) -> Result<Tensor> {
        let stem = stem_forward(&self.arch, self.stem(), image)?;
        Ok(tail_forward(&self.arch, self.tail(), &stem))
    }

    /// Existence probabilities for every learned class, in head order.
    pub fn route(&self, features: &Tensor) -> Result<Vec<f64>> {
        route_with(&self.arch, self.store.params(), &self.heads, features)
    }

    /// `(bg, fg)` probability planes of one class's segmenter.
    pub fn segment(&self, features: &Tensor, class: u16) -> Result<(Vec<f64>, Vec<f64>)> {
        let head = self.head(class)?;
        segment_with(&self.arch, self.store.params(), head.segmenter, features)
    }
}

pub fn route_with(arch: &Arch, params: &[f64], heads: &[ClassHeads], features: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let f = tape.input(features.clone());
    let pooled = tape.mean_spatial(f)?;
    heads
        .iter()
        .map(|h| {
            let z = router_logit(&mut tape, arch, params, h.router, pooled)?;
            let p = tape.sigmoid(z)?;
            Ok(tape.value(p).item())
        })
        .collect()
}

pub fn segment_with(arch: &Arch, params: &[f64], offset: usize, features: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut tape = Tape::new();
    let f = tape.input(features.clone());
    let p = segmenter_probs(&mut tape, arch, params, offset, f)?;
    let data = tape.value(p).data();
    let plane = data.len() / 2;
    Ok((data[..plane].to_vec(), data[plane..].to_vec()))
}

pub fn baseline_row_block(class: u16) -> String {
    format!("base.row.c{class}")
}

pub const BASELINE_TRUNK: &str = "base.trunk";

/// Single softmax head over background plus every learned class. Grows
/// one projection row per new class; every row competes in one softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct MonolithicModel {
    pub arch: Arch,
    pub store: ParameterStore,
    pub seed: u64,
    /// Background first, then classes in learning order.
    rows: Vec<(u16, usize)>,
}

impl MonolithicModel {
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(&[seed, domain::INIT, 0, u64::MAX]);
        let (f, h) = (arch.feature_channels, arch.baseline_hidden);
        let mut trunk = conv_init(&mut rng, h, f * 9, 0.1);
        trunk.extend(conv_init(&mut rng, h, h * 9, 0.1));
        let mut store = ParameterStore::new();
        store.push_block(BASELINE_TRUNK, trunk, Owner::Shared)?;
        let mut model = Self {
            arch,
            store,
            seed,
            rows: Vec::new(),
        };
        model.push_row(0, Owner::Shared)?;
        Ok(model)
    }

    pub(crate) fn from_parts(arch: Arch, store: ParameterStore, seed: u64) -> Result<Self> {
        let mut rows = Vec::new();
        for b in store.blocks() {
            if let Some(c) = b.name.strip_prefix("base.row.c") {
                let class: u16 = c.parse().map_err(|_| Error::Format(format!("block {:?}", b.name)))?;
                rows.push((class, b.offset));
            }
        }
        Ok(Self {
            arch,
            store,
            seed,
            rows,
        })
    }

    fn push_row(&mut self, class: u16, owner: Owner) -> Result<()> {
        let h = self.arch.baseline_hidden;
        let mut rng = seed::rng(&[self.seed, domain::INIT, 1, u64::from(class)]);
        let mut row = uniform(&mut rng, h, (3.0 / h as f64).sqrt());
        row.push(0.0);
        let offset = self.store.push_block(baseline_row_block(class), row, owner)?;
        self.rows.push((class, offset));
        Ok(())
    }

    /// Output channel order: background, then learned classes.
    pub fn channel_classes(&self) -> Vec<u16> {
        self.rows.iter().map(|r| r.0).collect()
    }

    pub fn num_channels(&self) -> usize {
        self.rows.len()
    }

    pub fn add_classes(&mut self, task: usize, classes: &[u16]) -> Result<()> {
        for &c in classes {
            if c == 0 || self.rows.iter().any(|r| r.0 == c) {
                return Err(Error::DuplicateClass(c));
            }
            self.push_row(c, Owner::Task(task))?;
        }
        Ok(())
    }

    /// Per-pixel logits `[K+1, H, W]` at input resolution.
    pub fn logits_on_tape(&self, tape: &mut Tape, params: &[f64], features: Var) -> Result<Var> {
        let (f, h) = (self.arch.feature_channels, self.arch.baseline_hidden);
        let trunk = self.store.block(BASELINE_TRUNK)?.offset;
        let (x, o) = conv_layer(tape, params, trunk, features, h, f, 3, 1)?;
        let x = tape.relu(x)?;
        let (x, _) = conv_layer(tape, params, o, x, h, h, 3, 2)?;
        let x = tape.relu(x)?;
        let mut ws = Vec::with_capacity(self.rows.len());
        let mut bs = Vec::with_capacity(self.rows.len());
        for &(_, off) in &self.rows {
            ws.push(leaf(tape, params, off, &[1, h, 1, 1]));
            bs.push(leaf(tape, params, off + h, &[1]));
        }
        let w = tape.concat(&ws)?;
        let b = tape.concat(&bs)?;
        let z = tape.conv2d(x, w, b, 1)?;
        Ok(tape.upsample_bilinear(z, STRIDE)?)
    }

    pub fn probs_on_tape(&self, tape: &mut Tape, params: &[f64], features: Var) -> Result<Var> {
        let z = self.logits_on_tape(tape, params, features)?;
        Ok(tape.softmax(z)?)
    }

    /// Softmax probabilities `[K+1, H, W]` with the stored parameters.
    pub fn forward(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = tape.input(features.clone());
        let p = self.probs_on_tape(&mut tape, self.store.params(), f)?;
        Ok(tape.value(p).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> CascadeModel {
        let arch = Arch::default();
        let (stem, tail) = init_backbone(&arch, 1);
        CascadeModel::new(arch, stem, tail, 3).unwrap()
    }

    fn image() -> Image {
        Image {
            height: 8,
            width: 8,
            data: (0..3 * 64).map(|i| ((i * 37) % 101) as f64 / 100.0).collect(),
        }
    }

    #[test]
    fn block_counts() {
        let mut m = model();
        let names = m.instantiate_task(1, &[1, 2]).unwrap();
        assert_eq!(names.len(), 4);
        assert!(m.store.blocks()[2..].iter().all(|b| !b.frozen));
        m.instantiate_task(2, &[3]).unwrap();
        for name in ["cls.c1", "seg.c1", "cls.c2", "seg.c2"] {
            assert!(m.store.block(name).unwrap().frozen);
        }
        assert!(matches!(m.instantiate_task(3, &[2]), Err(Error::DuplicateClass(2))));
        let a = m.arch;
        assert_eq!(m.store.len(), a.stem_len() + a.tail_len() + 3 * (a.router_len() + a.segmenter_len()));
    }

    #[test]
    fn feature_stride() {
        let m = model();
        let f = m.extract_features(&image()).unwrap();
        assert_eq!(f.shape(), &[16, 4, 4]);
        assert_eq!(f, m.extract_features(&image()).unwrap());
    }

    #[test]
    fn zero_router_is_half() {
        let mut m = model();
        m.instantiate_task(1, &[1, 2]).unwrap();
        let zeros = vec![0.0; m.arch.router_len()];
        m.store.write_block("cls.c1", &zeros).unwrap();
        m.store.write_block("cls.c2", &zeros).unwrap();
        let f = m.extract_features(&image()).unwrap();
        assert_eq!(m.route(&f).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn segmenter_planes_sum_to_one() {
        let mut m = model();
        m.instantiate_task(1, &[4]).unwrap();
        let f = m.extract_features(&image()).unwrap();
        let (bg, fg) = m.segment(&f, 4).unwrap();
        assert_eq!(bg.len(), 64);
        for (b, g) in bg.iter().zip(&fg) {
            assert!((b + g - 1.0).abs() <= 1e-12);
        }
        assert!(matches!(m.segment(&f, 9), Err(Error::UnknownClass(9))));
    }

    #[test]
    fn baseline_grows_channels() {
        let mut b = MonolithicModel::new(Arch::default(), 0).unwrap();
        b.add_classes(1, &[1, 2]).unwrap();
        let m = model();
        let f = m.extract_features(&image()).unwrap();
        let p = b.forward(&f).unwrap();
        assert_eq!(p.shape(), &[3, 8, 8]);
        b.add_classes(2, &[3]).unwrap();
        assert_eq!(b.forward(&f).unwrap().shape()[0], 4);
        assert_eq!(b.channel_classes(), vec![0, 1, 2, 3]);
    }
}
