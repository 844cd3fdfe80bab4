//! Synthetic paired sketch/photo data with category structure.
//!
//! Each category is a fixed composition rule over two to four shape
//! primitives placed on a coarse 3x3 layout grid. An instance jitters the
//! positions, sizes and multiplicities of its category's primitives. The
//! photo is the filled rendering of the instance; each sketch is the outline
//! of the same rendering with pixel dropout and a one-pixel translation, so
//! every sketch has exactly one ground-truth photo.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, LabRng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Photo,
    Sketch,
}

impl Modality {
    pub fn code(self) -> u8 {
        match self {
            Modality::Photo => 0,
            Modality::Sketch => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Modality> {
        match c {
            0 => Some(Modality::Photo),
            1 => Some(Modality::Sketch),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: u32,
    pub category: u32,
    pub instance: u32,
    pub modality: Modality,
    pub image: Tensor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_categories: usize,
    pub instances_per_category: usize,
    pub sketches_per_instance: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_categories: 8,
            instances_per_category: 16,
            sketches_per_instance: 2,
            image_size: 32,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories == 0
            || self.instances_per_category == 0
            || self.sketches_per_instance == 0
            || self.image_size == 0
        {
            return Err(Error::Config("dataset counts and image size must be positive".into()));
        }
        if self.image_size < 12 {
            return Err(Error::Config(format!("image size {} too small to draw primitives", self.image_size)));
        }
        if self.num_categories > NUM_RULES {
            return Err(Error::Config(format!(
                "{} categories requested but only {} distinct composition rules exist",
                self.num_categories, NUM_RULES
            )));
        }
        Ok(())
    }

    pub fn item_count(&self) -> usize {
        self.num_categories * self.instances_per_category * (1 + self.sketches_per_instance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Primitive {
    Rect,
    Ellipse,
    Cross,
    Bar,
}

impl Primitive {
    const ALL: [Primitive; 4] = [Primitive::Rect, Primitive::Ellipse, Primitive::Cross, Primitive::Bar];

    fn intensity(self) -> f64 {
        match self {
            Primitive::Rect => 0.9,
            Primitive::Ellipse => 0.65,
            Primitive::Cross => 0.8,
            Primitive::Bar => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct RulePart {
    pub kind: Primitive,
    /// Layout cell (column, row) on the 3x3 grid.
    pub cell: (u8, u8),
    pub vertical: bool,
}

/// Number of distinct category rules available.
pub const NUM_RULES: usize = 24;

/// The fixed table of category rules. Independent of any seed so category
/// `c` always means the same composition.
pub fn rule_table() -> Vec<Vec<RulePart>> {
    let mut rng = seed::rng(0x5255_4c45, &[]);
    let mut rules: Vec<Vec<RulePart>> = Vec::with_capacity(NUM_RULES);
    while rules.len() < NUM_RULES {
        let count = rng.random_range(2..=4);
        let cells = sample(&mut rng, 9, count);
        let mut rule: Vec<RulePart> = cells
            .iter()
            .map(|c| RulePart {
                kind: Primitive::ALL[rng.random_range(0..4)],
                cell: ((c % 3) as u8, (c / 3) as u8),
                vertical: rng.random_bool(0.5),
            })
            .collect();
        rule.sort();
        let kinds = rule.iter().map(|p| p.kind).collect::<Vec<_>>();
        let distinct_kinds = Primitive::ALL.iter().filter(|k| kinds.contains(k)).count();
        if distinct_kinds < 2 || rules.contains(&rule) {
            continue;
        }
        rules.push(rule);
    }
    rules
}

/// One placed primitive, in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub kind: Primitive,
    pub cx: f64,
    pub cy: f64,
    /// Half extents along x and y.
    pub hx: f64,
    pub hy: f64,
    /// Arm half-thickness for crosses.
    pub thickness: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            Primitive::Rect | Primitive::Bar => dx.abs() <= self.hx && dy.abs() <= self.hy,
            Primitive::Ellipse => (dx / self.hx) * (dx / self.hx) + (dy / self.hy) * (dy / self.hy) <= 1.0,
            Primitive::Cross => {
                (dx.abs() <= self.thickness && dy.abs() <= self.hy) || (dy.abs() <= self.thickness && dx.abs() <= self.hx)
            }
        }
    }
}

/// The generator's record of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceLayout {
    pub category: u32,
    pub instance: u32,
    pub shapes: Vec<Shape>,
}

pub fn instance_layout(spec: &DatasetSpec, rules: &[Vec<RulePart>], category: u32, instance: u32) -> InstanceLayout {
    let mut rng = seed::rng(spec.seed, &[0x4c41_594f, category as u64, instance as u64]);
    let size = spec.image_size as f64;
    let cell = size / 3.0;
    let mut shapes = Vec::new();
    for part in &rules[category as usize] {
        let copies = if rng.random_bool(0.25) { 2 } else { 1 };
        for c in 0..copies {
            let jitter = cell / 4.0;
            let mut cx = (part.cell.0 as f64 + 0.5) * cell + rng.random_range(-jitter..=jitter);
            let mut cy = (part.cell.1 as f64 + 0.5) * cell + rng.random_range(-jitter..=jitter);
            if c == 1 {
                cx += rng.random_range(-cell / 2.0..=cell / 2.0);
                cy += rng.random_range(-cell / 2.0..=cell / 2.0);
            }
            let base = size / 9.0;
            let (mut hx, mut hy) = (base * rng.random_range(0.7..1.3), base * rng.random_range(0.7..1.3));
            let thickness = (size / 32.0).max(1.0) * rng.random_range(0.8..1.2);
            if part.kind == Primitive::Bar {
                hx = size / 5.0 * rng.random_range(0.8..1.2);
                hy = (size / 28.0).max(1.0);
                if part.vertical {
                    core::mem::swap(&mut hx, &mut hy);
                }
            }
            shapes.push(Shape { kind: part.kind, cx, cy, hx, hy, thickness });
        }
    }
    InstanceLayout { category, instance, shapes }
}

/// Per-pixel index (1-based) of the topmost shape, 0 for background.
pub fn label_map(layout: &InstanceLayout, size: usize) -> Vec<u16> {
    let mut labels = vec![0u16; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for (i, s) in layout.shapes.iter().enumerate() {
                if s.contains(px, py) {
                    labels[y * size + x] = i as u16 + 1;
                }
            }
        }
    }
    labels
}

pub fn render_photo(layout: &InstanceLayout, size: usize) -> Tensor {
    let data = label_map(layout, size)
        .iter()
        .map(|&l| if l == 0 { 0.0 } else { layout.shapes[l as usize - 1].kind.intensity() })
        .collect();
    Tensor::new(vec![size, size], data).expect("finite intensities")
}

/// Clean outline: foreground pixels with a 4-neighbour of a different label
/// (the image border counts as background).
pub fn render_outline(layout: &InstanceLayout, size: usize) -> Vec<bool> {
    let labels = label_map(layout, size);
    let at = |x: isize, y: isize| -> u16 {
        if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
            0
        } else {
            labels[y as usize * size + x as usize]
        }
    };
    let mut out = vec![false; size * size];
    for y in 0..size as isize {
        for x in 0..size as isize {
            let l = at(x, y);
            let n = [at(x - 1, y), at(x + 1, y), at(x, y - 1), at(x, y + 1)];
            if l == 0 {
                continue;
            }
            out[y as usize * size + x as usize] = n.iter().any(|&v| v != l);
        }
    }
    out
}

/// Sketch with stroke dropout (p = 0.1 per outline pixel) and a uniform
/// translation in {-1, 0, 1}^2.
pub fn render_sketch(layout: &InstanceLayout, size: usize, rng: &mut LabRng) -> Tensor {
    let outline = render_outline(layout, size);
    let kept: Vec<bool> = outline.iter().map(|&o| o && !rng.random_bool(0.1)).collect();
    let dx = rng.random_range(-1i32..=1) as isize;
    let dy = rng.random_range(-1i32..=1) as isize;
    let mut data = vec![0.0; size * size];
    for y in 0..size as isize {
        for x in 0..size as isize {
            let (sx, sy) = (x - dx, y - dy);
            if sx >= 0 && sy >= 0 && sx < size as isize && sy < size as isize && kept[sy as usize * size + sx as usize] {
                data[y as usize * size + x as usize] = 1.0;
            }
        }
    }
    Tensor::new(vec![size, size], data).expect("binary image")
}

/// Pixels of a grayscale image with a 4-neighbour of different value.
pub fn edge_map(image: &Tensor) -> Vec<bool> {
    let size = image.shape()[0];
    let d = image.data();
    let mut out = vec![false; d.len()];
    for y in 0..size {
        for x in 0..size {
            let v = d[y * size + x];
            let mut edge = false;
            if x > 0 && d[y * size + x - 1] != v {
                edge = true;
            }
            if x + 1 < size && d[y * size + x + 1] != v {
                edge = true;
            }
            if y > 0 && d[(y - 1) * size + x] != v {
                edge = true;
            }
            if y + 1 < size && d[(y + 1) * size + x] != v {
                edge = true;
            }
            out[y * size + x] = edge;
        }
    }
    out
}

/// An immutable collection of items with index lookups.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    spec: DatasetSpec,
    items: Vec<Item>,
    photos: BTreeMap<(u32, u32), usize>,
    sketches: BTreeMap<(u32, u32), Vec<usize>>,
    by_category: BTreeMap<u32, Vec<u32>>,
}

impl Dataset {
    /// Index a list of items, checking the one-photo-per-instance and
    /// at-least-one-sketch associations.
    pub fn from_items(spec: DatasetSpec, items: Vec<Item>) -> Result<Dataset> {
        let mut photos = BTreeMap::new();
        let mut sketches: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
        for (i, it) in items.iter().enumerate() {
            if it.id as usize != i {
                return Err(Error::Config(format!("item at position {} has id {}", i, it.id)));
            }
            if it.image.shape() != [spec.image_size, spec.image_size] {
                return Err(Error::shape(&[spec.image_size, spec.image_size], it.image.shape()));
            }
            let key = (it.category, it.instance);
            match it.modality {
                Modality::Photo => {
                    if photos.insert(key, i).is_some() {
                        return Err(Error::Config(format!("two photos for instance {:?}", key)));
                    }
                }
                Modality::Sketch => sketches.entry(key).or_default().push(i),
            }
        }
        for key in photos.keys() {
            if !sketches.contains_key(key) {
                return Err(Error::Config(format!("instance {:?} has no sketch", key)));
            }
        }
        for key in sketches.keys() {
            if !photos.contains_key(key) {
                return Err(Error::Config(format!("instance {:?} has sketches but no photo", key)));
            }
        }
        let mut by_category: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for &(c, i) in photos.keys() {
            by_category.entry(c).or_default().push(i);
        }
        Ok(Dataset { spec, items, photos, sketches, by_category })
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, id: u32) -> Option<&Item> {
        self.items.get(id as usize)
    }

    pub fn categories(&self) -> Vec<u32> {
        self.by_category.keys().copied().collect()
    }

    pub fn instances(&self, category: u32) -> &[u32] {
        self.by_category.get(&category).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn photo(&self, category: u32, instance: u32) -> Option<&Item> {
        self.photos.get(&(category, instance)).map(|&i| &self.items[i])
    }

    pub fn sketches(&self, category: u32, instance: u32) -> Vec<&Item> {
        self.sketches
            .get(&(category, instance))
            .map(|v| v.iter().map(|&i| &self.items[i]).collect())
            .unwrap_or_default()
    }

    pub fn photos_in(&self, category: u32) -> Vec<&Item> {
        self.instances(category).iter().filter_map(|&i| self.photo(category, i)).collect()
    }

    pub fn sketches_in(&self, category: u32) -> Vec<&Item> {
        self.instances(category).iter().flat_map(|&i| self.sketches(category, i)).collect()
    }

    pub fn count(&self, modality: Modality) -> usize {
        self.items.iter().filter(|i| i.modality == modality).count()
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let rules = rule_table();
    let size = spec.image_size;
    let mut items = Vec::with_capacity(spec.item_count());
    for c in 0..spec.num_categories as u32 {
        for i in 0..spec.instances_per_category as u32 {
            let layout = instance_layout(spec, &rules, c, i);
            let id = items.len() as u32;
            items.push(Item { id, category: c, instance: i, modality: Modality::Photo, image: render_photo(&layout, size) });
            for s in 0..spec.sketches_per_instance as u64 {
                let mut rng = seed::rng(spec.seed, &[0x534b_4554, c as u64, i as u64, s]);
                let id = items.len() as u32;
                let image = render_sketch(&layout, size, &mut rng);
                items.push(Item { id, category: c, instance: i, modality: Modality::Sketch, image });
            }
        }
    }
    Dataset::from_items(spec.clone(), items)
}

/// Disjoint seen/unseen category partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    pub seen: Vec<u32>,
    pub unseen: Vec<u32>,
    pub seed: u64,
}

impl SplitDescriptor {
    pub fn is_seen(&self, category: u32) -> bool {
        self.seen.binary_search(&category).is_ok()
    }

    pub fn is_unseen(&self, category: u32) -> bool {
        self.unseen.binary_search(&category).is_ok()
    }
}

/// Draw `unseen_count` categories uniformly without replacement.
pub fn split_zero_shot(categories: &[u32], unseen_count: usize, seed_: u64) -> Result<SplitDescriptor> {
    if unseen_count == 0 || unseen_count >= categories.len() {
        return Err(Error::Config(format!(
            "unseen_count {} must lie in 1..{}",
            unseen_count,
            categories.len()
        )));
    }
    let mut all = categories.to_vec();
    all.sort_unstable();
    all.dedup();
    if all.len() != categories.len() {
        return Err(Error::Config("duplicate category ids".into()));
    }
    let mut rng = seed::rng(seed_, &[0x5350_4c54]);
    let picked = sample(&mut rng, all.len(), unseen_count);
    let mut unseen: Vec<u32> = picked.iter().map(|i| all[i]).collect();
    unseen.sort_unstable();
    let seen = all.into_iter().filter(|c| !unseen.contains(c)).collect();
    Ok(SplitDescriptor { seen, unseen, seed: seed_ })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec { num_categories: 4, instances_per_category: 3, sketches_per_instance: 2, image_size: 16, seed: 5 }
    }

    #[test]
    fn rules_are_distinct() {
        let r = rule_table();
        assert_eq!(r.len(), NUM_RULES);
        for i in 0..r.len() {
            assert!((2..=4).contains(&r[i].len()));
            for j in 0..i {
                assert_ne!(r[i], r[j]);
            }
        }
        assert_eq!(r, rule_table());
    }

    #[test]
    fn generation_shape_and_determinism() {
        let d = generate_dataset(&small()).unwrap();
        assert_eq!(d.items().len(), small().item_count());
        assert_eq!(d.count(Modality::Photo), 12);
        assert_eq!(d.count(Modality::Sketch), 24);
        assert_eq!(d, generate_dataset(&small()).unwrap());
        for it in d.items() {
            assert!(it.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let other = generate_dataset(&DatasetSpec { seed: 6, ..small() }).unwrap();
        assert_ne!(d, other);
    }

    #[test]
    fn too_many_categories() {
        let spec = DatasetSpec { num_categories: NUM_RULES + 1, ..small() };
        assert!(matches!(generate_dataset(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn split_contract() {
        let cats: Vec<u32> = (0..8).collect();
        let s = split_zero_shot(&cats, 7, 3).unwrap();
        assert_eq!(s.seen.len(), 1);
        let s = split_zero_shot(&cats, 2, 3).unwrap();
        assert_eq!(s, split_zero_shot(&cats, 2, 3).unwrap());
        let mut union: Vec<u32> = s.seen.iter().chain(&s.unseen).copied().collect();
        union.sort();
        assert_eq!(union, cats);
        assert!(s.seen.iter().all(|c| !s.unseen.contains(c)));
        assert!(split_zero_shot(&cats, 0, 1).is_err());
        assert!(split_zero_shot(&cats, 8, 1).is_err());
    }

    #[test]
    fn from_items_checks_association() {
        let d = generate_dataset(&small()).unwrap();
        let mut items = d.items().to_vec();
        items.retain(|i| !(i.category == 0 && i.instance == 0 && i.modality == Modality::Sketch));
        for (k, it) in items.iter_mut().enumerate() {
            it.id = k as u32;
        }
        assert!(Dataset::from_items(small(), items).is_err());
    }
}
