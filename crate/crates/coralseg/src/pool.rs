//! Dynamic feature pool: per-labeled-instance anchor slots filtered by
//! dual-branch correct prediction, refreshed by momentum fusion, plus the two
//! sampling strategies (anchor draws from the pool, confidence-ranked
//! selection of unlabeled features).
//!
//! Slots are grouped by (instance, class). Each instance holds `N` slots
//! split evenly across classes; a class group's oldest-updated slot is fused
//! first once the group is full. The pool owns its RNG so that anchor
//! sampling is reproducible from a snapshot.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coral::FeatureMatrix;
use crate::losses::argmax_row;
use crate::numerics::Matrix;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"DFP1";

/// One filled anchor slot.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolSlot {
    pub class_id: usize,
    pub embedding: Vec<f64>,
    pub confidence: f64,
    pub updates: u64,
    /// Event counter at the last fill/fuse; smallest value is fused first.
    pub last_update: u64,
}

#[derive(Debug, Clone)]
pub struct FeaturePool {
    labeled_count: usize,
    slots_per_instance: usize,
    classes: usize,
    dim: usize,
    alpha: f64,
    per_class_cap: usize,
    /// Indexed `[instance][class][k]`, flattened.
    slots: Vec<Option<PoolSlot>>,
    rng: ChaCha8Rng,
    clock: u64,
}

/// Allocates an empty pool: `labeled_count` instances with `n_slots` slots
/// each, split evenly across `classes`.
pub fn init_pool(
    labeled_count: usize,
    n_slots: usize,
    classes: usize,
    dim: usize,
    alpha: f64,
    seed: u64,
) -> Result<FeaturePool> {
    if labeled_count == 0 || n_slots == 0 || classes == 0 || dim == 0 {
        return Err(Error::InvalidArg("pool counts must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArg(format!(
            "fusion alpha must be in [0, 1], got {alpha}"
        )));
    }
    let per_class_cap = (n_slots / classes).max(1);
    Ok(FeaturePool {
        labeled_count,
        slots_per_instance: n_slots,
        classes,
        dim,
        alpha,
        per_class_cap,
        slots: vec![None; labeled_count * classes * per_class_cap],
        rng: ChaCha8Rng::seed_from_u64(seed),
        clock: 0,
    })
}

impl FeaturePool {
    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn filled(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_filled(&self, class: usize) -> usize {
        self.class_slot_indices(class)
            .filter(|&i| self.slots[i].is_some())
            .count()
    }

    /// True when every class has at least one filled slot, i.e. anchor
    /// sampling can serve all classes.
    pub fn ready(&self) -> bool {
        (0..self.classes).all(|c| self.class_filled(c) > 0)
    }

    pub fn slot(&self, idx: usize) -> Option<&PoolSlot> {
        self.slots[idx].as_ref()
    }

    fn group_start(&self, instance: usize, class: usize) -> usize {
        (instance * self.classes + class) * self.per_class_cap
    }

    fn class_slot_indices(&self, class: usize) -> impl Iterator<Item = usize> + '_ {
        let cap = self.per_class_cap;
        (0..self.labeled_count)
            .flat_map(move |inst| (0..cap).map(move |k| (inst * self.classes + class) * cap + k))
    }

    /// Absorbs correctly predicted labeled pixels into one instance's slots.
    ///
    /// Eligible pixels have `pred1 == pred2 == truth`; each contributes the
    /// elementwise mean of the two branch projections. Per class, the
    /// top-confidence candidates (ties to the lower pixel index) fill empty
    /// slots first, then fuse into the oldest-updated slot with
    /// `alpha * old + (1 - alpha) * new`.
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &mut self,
        instance: usize,
        zm_lab: &Matrix,
        za_lab: &Matrix,
        pred1: &[usize],
        pred2: &[usize],
        truth: &[usize],
        conf: &[f64],
    ) -> Result<()> {
        if instance >= self.labeled_count {
            return Err(Error::InvalidArg(format!(
                "instance {instance} out of range 0..{}",
                self.labeled_count
            )));
        }
        let s = pred1.len();
        if pred2.len() != s
            || truth.len() != s
            || conf.len() != s
            || zm_lab.rows() != s
            || za_lab.rows() != s
        {
            return Err(Error::ShapeMismatch(
                "per-pixel arrays must share one length".into(),
            ));
        }
        if zm_lab.cols() != self.dim || za_lab.cols() != self.dim {
            return Err(Error::DimMismatch(format!(
                "projection dim {} expected {}",
                zm_lab.cols(),
                self.dim
            )));
        }

        for class in 0..self.classes {
            let mut candidates: Vec<(f64, usize)> = (0..s)
                .filter(|&i| {
                    truth[i] == class && pred1[i] == class && pred2[i] == class
                })
                .map(|i| (conf[i], i))
                .collect();
            candidates.sort_by(|a, b| {
                b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1))
            });
            candidates.truncate(self.per_class_cap);

            for (c, pixel) in candidates {
                let embedding: Vec<f64> = (0..self.dim)
                    .map(|d| 0.5 * (zm_lab.get(pixel, d) + za_lab.get(pixel, d)))
                    .collect();
                self.clock += 1;
                let start = self.group_start(instance, class);
                let group = &mut self.slots[start..start + self.per_class_cap];
                if let Some(empty) = group.iter_mut().find(|slot| slot.is_none()) {
                    *empty = Some(PoolSlot {
                        class_id: class,
                        embedding,
                        confidence: c,
                        updates: 1,
                        last_update: self.clock,
                    });
                } else {
                    let oldest = group
                        .iter_mut()
                        .map(|slot| slot.as_mut().expect("group is full"))
                        .min_by_key(|slot| slot.last_update)
                        .expect("group is nonempty");
                    for (old, new) in oldest.embedding.iter_mut().zip(&embedding) {
                        *old = self.alpha * *old + (1.0 - self.alpha) * new;
                    }
                    oldest.confidence = c;
                    oldest.updates += 1;
                    oldest.last_update = self.clock;
                }
            }
        }
        Ok(())
    }

    /// Draws `j` anchors per class: `ceil((1 - low_conf_fraction) * j)`
    /// uniformly from all filled slots of the class and the remainder from
    /// the below-median-confidence subset (all slots when that subset is
    /// empty). Draws are without replacement when the source suffices, with
    /// replacement otherwise.
    pub fn sample_anchors(
        &mut self,
        j: usize,
        low_conf_fraction: f64,
    ) -> Result<(FeatureMatrix, Vec<usize>)> {
        if j == 0 {
            return Err(Error::InvalidArg("j must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&low_conf_fraction) {
            return Err(Error::InvalidArg(
                "low_conf_fraction must be in [0, 1]".into(),
            ));
        }
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(j * self.classes);
        let mut labels = Vec::with_capacity(j * self.classes);
        for class in 0..self.classes {
            let filled: Vec<usize> = self
                .class_slot_indices(class)
                .filter(|&i| self.slots[i].is_some())
                .collect();
            if filled.is_empty() {
                return Err(Error::PoolUnderfilled(class));
            }
            let n_high = ((1.0 - low_conf_fraction) * j as f64).ceil() as usize;
            let n_low = j - n_high.min(j);

            let mut chosen = self.draw(&filled, n_high.min(j));
            if n_low > 0 {
                let mut confs: Vec<f64> = filled
                    .iter()
                    .map(|&i| self.slots[i].as_ref().unwrap().confidence)
                    .collect();
                confs.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let median = confs[(confs.len() - 1) / 2];
                let low: Vec<usize> = filled
                    .iter()
                    .copied()
                    .filter(|&i| self.slots[i].as_ref().unwrap().confidence < median)
                    .collect();
                let source = if low.is_empty() { &filled } else { &low };
                chosen.extend(self.draw(source, n_low));
            }
            for idx in chosen {
                let slot = self.slots[idx].as_ref().unwrap();
                rows.push(slot.embedding.clone());
                labels.push(class);
            }
        }
        Ok((FeatureMatrix::from_rows(&rows)?, labels))
    }

    /// `count` indices from `source`: a partial shuffle when the source is
    /// large enough, independent uniform draws otherwise.
    fn draw(&mut self, source: &[usize], count: usize) -> Vec<usize> {
        if count == 0 {
            return Vec::new();
        }
        if source.len() >= count {
            let mut pool: Vec<usize> = source.to_vec();
            for i in 0..count {
                let k = self.rng.gen_range(i..pool.len());
                pool.swap(i, k);
            }
            pool.truncate(count);
            pool
        } else {
            (0..count)
                .map(|_| source[self.rng.gen_range(0..source.len())])
                .collect()
        }
    }

    /// Writes a versioned binary snapshot (magic "DFP1", counts, RNG state,
    /// then fixed-size little-endian slot records).
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        let mut out = BufWriter::new(file);
        out.write_all(MAGIC)?;
        for v in [
            self.labeled_count as u64,
            self.slots_per_instance as u64,
            self.classes as u64,
            self.dim as u64,
        ] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&self.alpha.to_le_bytes())?;
        out.write_all(&self.clock.to_le_bytes())?;
        out.write_all(&self.rng.get_seed())?;
        out.write_all(&self.rng.get_word_pos().to_le_bytes())?;
        for slot in &self.slots {
            match slot {
                Some(s) => {
                    out.write_all(&[1u8])?;
                    out.write_all(&s.confidence.to_le_bytes())?;
                    out.write_all(&s.updates.to_le_bytes())?;
                    out.write_all(&s.last_update.to_le_bytes())?;
                    for v in &s.embedding {
                        out.write_all(&v.to_le_bytes())?;
                    }
                }
                None => {
                    out.write_all(&[0u8])?;
                    let zeros = vec![0u8; 8 * (3 + self.dim)];
                    out.write_all(&zeros)?;
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut raw = Vec::new();
        fs::File::open(path)?.read_to_end(&mut raw)?;
        let mut cursor = 0usize;
        let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
            if *cursor + n > raw.len() {
                return Err(Error::BadFormat("truncated pool snapshot".into()));
            }
            let out = &raw[*cursor..*cursor + n];
            *cursor += n;
            Ok(out)
        };
        if take(&mut cursor, 4)? != MAGIC {
            return Err(Error::BadFormat("bad pool magic".into()));
        }
        let read_u64 = |cursor: &mut usize| -> Result<u64> {
            Ok(u64::from_le_bytes(take(cursor, 8)?.try_into().unwrap()))
        };
        let labeled_count = read_u64(&mut cursor)? as usize;
        let slots_per_instance = read_u64(&mut cursor)? as usize;
        let classes = read_u64(&mut cursor)? as usize;
        let dim = read_u64(&mut cursor)? as usize;
        let alpha = f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
        let clock = read_u64(&mut cursor)?;
        let seed: [u8; 32] = take(&mut cursor, 32)?.try_into().unwrap();
        let word_pos = u128::from_le_bytes(take(&mut cursor, 16)?.try_into().unwrap());
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(word_pos);

        let per_class_cap = (slots_per_instance / classes).max(1);
        let total = labeled_count * classes * per_class_cap;
        let mut slots = Vec::with_capacity(total);
        for i in 0..total {
            let filled = take(&mut cursor, 1)?[0] == 1;
            let confidence = f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
            let updates = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
            let last_update = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
            let mut embedding = Vec::with_capacity(dim);
            for _ in 0..dim {
                embedding.push(f64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()));
            }
            slots.push(filled.then(|| PoolSlot {
                class_id: (i / per_class_cap) % classes,
                embedding,
                confidence,
                updates,
                last_update,
            }));
        }
        Ok(FeaturePool {
            labeled_count,
            slots_per_instance,
            classes,
            dim,
            alpha,
            per_class_cap,
            slots,
            rng,
            clock,
        })
    }
}

/// Features of one unlabeled batch selected for the consistency term. Rows of
/// `zm` and `za` refer to the same pixel positions in the same order.
#[derive(Debug, Clone)]
pub struct UnlabeledSelection {
    pub positions: Vec<usize>,
    pub classes: Vec<usize>,
    pub zm: Vec<Vec<f64>>,
    pub za: Vec<Vec<f64>>,
}

impl UnlabeledSelection {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn count(&self) -> usize {
        self.positions.len()
    }
}

/// Selects up to `top_i` agreeing pixels per class from an unlabeled batch.
///
/// A pixel agrees when both branches argmax to the same class; its confidence
/// is the smaller of the two branch max-probabilities. Ranking is descending
/// confidence with ties broken by pixel index. Zero agreeing pixels yield an
/// empty selection (the caller skips the consistency term).
pub fn sample_unlabeled(
    p1: &Matrix,
    p2: &Matrix,
    zm: &Matrix,
    za: &Matrix,
    top_i: usize,
) -> Result<UnlabeledSelection> {
    let s = p1.rows();
    if p2.rows() != s || zm.rows() != s || za.rows() != s {
        return Err(Error::ShapeMismatch(
            "per-pixel arrays must share one length".into(),
        ));
    }
    if top_i == 0 {
        return Err(Error::InvalidArg("top_i must be >= 1".into()));
    }
    let classes = p1.cols();
    // (confidence, pixel) per agreed class.
    let mut per_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); classes];
    for i in 0..s {
        let c1 = argmax_row(p1.row(i));
        let c2 = argmax_row(p2.row(i));
        if c1 != c2 {
            continue;
        }
        let conf = p1.get(i, c1).min(p2.get(i, c2));
        per_class[c1].push((conf, i));
    }
    let mut positions = Vec::new();
    let mut class_tags = Vec::new();
    for (class, mut items) in per_class.into_iter().enumerate() {
        items.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        items.truncate(top_i);
        for (_, pixel) in items {
            positions.push(pixel);
            class_tags.push(class);
        }
    }
    let gather = |m: &Matrix| -> Vec<Vec<f64>> {
        positions.iter().map(|&i| m.row(i).to_vec()).collect()
    };
    Ok(UnlabeledSelection {
        zm: gather(zm),
        za: gather(za),
        positions,
        classes: class_tags,
    })
}
