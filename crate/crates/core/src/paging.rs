//! Per-class prompt storage with an LRU residency buffer. Paged-out classes
//! live as raw bytes (prompts and optimizer moments together) and come back
//! bit-identical.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::optim::Moments;
use crate::proxy::class_prompt_name;
use crate::tensor::Tensor;

/// Prompts of one class (one `m × D` tensor per layer) and their moments.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassEntry {
    pub prompts: Vec<Tensor<f32>>,
    pub moments: Vec<Moments>,
}

impl ClassEntry {
    pub fn bytes(&self) -> usize {
        self.prompts.iter().map(|p| p.len() * 4).sum::<usize>()
            + self.moments.iter().map(Moments::bytes).sum::<usize>()
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.bytes() + self.prompts.len());
        for (p, m) in self.prompts.iter().zip(&self.moments) {
            out.extend_from_slice(&m.t.to_le_bytes());
            out.push(!m.m.is_empty() as u8);
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for v in m.m.iter().chain(&m.v) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    fn from_bytes(bytes: &[u8], layers: usize, m: usize, dim: usize) -> Result<Self> {
        let n = m * dim;
        let mut pos = 0;
        let mut take = |len: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + len)
                .ok_or_else(|| Error::Paging(format!("backing record truncated at {pos}")))?;
            pos += len;
            Ok(s)
        };
        let floats = |b: &[u8]| -> Vec<f32> {
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let mut prompts = Vec::with_capacity(layers);
        let mut moments = Vec::with_capacity(layers);
        for _ in 0..layers {
            let t = u64::from_le_bytes(take(8)?.try_into().unwrap());
            let has = take(1)?[0] == 1;
            prompts.push(Tensor::new(&[m, dim], floats(take(n * 4)?))?);
            let (mm, vv) = if has {
                (floats(take(n * 4)?), floats(take(n * 4)?))
            } else {
                (Vec::new(), Vec::new())
            };
            moments.push(Moments { m: mm, v: vv, t });
        }
        Ok(ClassEntry { prompts, moments })
    }
}

#[derive(Clone, Debug)]
enum Slot {
    Resident(ClassEntry),
    PagedOut(Vec<u8>),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PagingCounters {
    pub page_ins: u64,
    pub page_outs: u64,
    pub resident_bytes: usize,
    pub peak_resident_bytes: usize,
}

/// Class prompts for every class, with at most `capacity` classes resident.
#[derive(Clone, Debug)]
pub struct ClassPromptStore {
    layers: usize,
    m: usize,
    dim: usize,
    capacity: Option<usize>,
    slots: Vec<Slot>,
    last_used: Vec<u64>,
    tick: u64,
    counters: PagingCounters,
}

impl ClassPromptStore {
    /// Draws every class's prompts uniformly in `[-range, range]` (class by
    /// class, layer by layer), then pages in the first `capacity` classes.
    /// `capacity` of `None` or 0 keeps everything resident; `m = 0` stores
    /// no layers.
    pub fn new(
        classes: usize,
        layers: usize,
        m: usize,
        dim: usize,
        range: f64,
        capacity: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let capacity = capacity.filter(|&c| c > 0);
        let layers = if m == 0 { 0 } else { layers };
        let dist = Uniform::new_inclusive(-range as f32, range as f32);
        let mut slots = Vec::with_capacity(classes);
        for _ in 0..classes {
            let mut prompts = Vec::with_capacity(layers);
            for _ in 0..layers {
                let data = (0..m * dim).map(|_| dist.sample(rng)).collect();
                prompts.push(Tensor::new(&[m, dim], data)?);
            }
            slots.push(Slot::Resident(ClassEntry {
                moments: vec![Moments::default(); layers],
                prompts,
            }));
        }
        let mut store = ClassPromptStore {
            layers,
            m,
            dim,
            capacity,
            slots,
            last_used: vec![0; classes],
            tick: 0,
            counters: PagingCounters::default(),
        };
        if let Some(cap) = capacity {
            for c in cap.min(classes)..classes {
                store.page_out(c);
            }
            store.counters.page_outs = 0;
            store.counters.page_ins = cap.min(classes) as u64;
        }
        store.refresh_bytes();
        Ok(store)
    }

    pub fn classes(&self) -> usize {
        self.slots.len()
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn prompts_per_layer(&self) -> usize {
        self.m
    }

    pub fn capacity(&self) -> Option<usize> {
        self.capacity
    }

    pub fn counters(&self) -> PagingCounters {
        self.counters
    }

    /// Prompt elements across all classes.
    pub fn elements(&self) -> usize {
        self.classes() * self.layers * self.m * self.dim
    }

    /// Largest footprint of one class: prompts plus two moment buffers.
    pub fn bytes_per_class(&self) -> usize {
        self.layers * (self.m * self.dim * 12 + 8)
    }

    pub fn is_resident(&self, class: usize) -> bool {
        matches!(self.slots.get(class), Some(Slot::Resident(_)))
    }

    pub fn resident_classes(&self) -> Vec<usize> {
        (0..self.classes())
            .filter(|&c| self.is_resident(c))
            .collect()
    }

    pub fn get(&self, class: usize) -> Result<&ClassEntry> {
        match self.slots.get(class) {
            Some(Slot::Resident(e)) => Ok(e),
            Some(Slot::PagedOut(_)) => Err(Error::Paging(format!("class {class} is not resident"))),
            None => Err(Error::Paging(format!("class {class} out of range"))),
        }
    }

    pub fn get_mut(&mut self, class: usize) -> Result<&mut ClassEntry> {
        match self.slots.get_mut(class) {
            Some(Slot::Resident(e)) => Ok(e),
            Some(Slot::PagedOut(_)) => Err(Error::Paging(format!("class {class} is not resident"))),
            None => Err(Error::Paging(format!("class {class} out of range"))),
        }
    }

    fn page_out(&mut self, class: usize) {
        if let Slot::Resident(e) = &self.slots[class] {
            self.slots[class] = Slot::PagedOut(e.to_bytes());
            self.counters.page_outs += 1;
        }
    }

    fn load(&mut self, class: usize) -> Result<()> {
        if let Slot::PagedOut(bytes) = &self.slots[class] {
            let e = ClassEntry::from_bytes(bytes, self.layers, self.m, self.dim)?;
            self.slots[class] = Slot::Resident(e);
            self.counters.page_ins += 1;
        }
        Ok(())
    }

    /// Makes `classes` resident, evicting the least recently used others.
    pub fn page_in(&mut self, classes: &[usize]) -> Result<()> {
        self.tick += 1;
        if let Some(&bad) = classes.iter().find(|&&c| c >= self.classes()) {
            return Err(Error::Paging(format!("class {bad} out of range")));
        }
        if let Some(cap) = self.capacity {
            let mut wanted = classes.to_vec();
            wanted.sort_unstable();
            wanted.dedup();
            if wanted.len() > cap {
                return Err(Error::Paging(format!(
                    "{} classes requested with capacity {cap}",
                    wanted.len()
                )));
            }
            for &c in &wanted {
                if self.is_resident(c) {
                    continue;
                }
                if self.resident_classes().len() >= cap {
                    let victim = self
                        .resident_classes()
                        .into_iter()
                        .filter(|v| !wanted.contains(v))
                        .min_by_key(|&v| (self.last_used[v], v))
                        .ok_or_else(|| Error::Paging("no evictable class".into()))?;
                    self.page_out(victim);
                }
                self.load(c)?;
            }
        }
        for &c in classes {
            self.last_used[c] = self.tick;
        }
        self.refresh_bytes();
        Ok(())
    }

    fn refresh_bytes(&mut self) {
        let b = self
            .slots
            .iter()
            .map(|s| match s {
                Slot::Resident(e) => e.bytes(),
                Slot::PagedOut(_) => 0,
            })
            .sum();
        self.counters.resident_bytes = b;
        self.counters.peak_resident_bytes = self.counters.peak_resident_bytes.max(b);
    }

    fn entry_copy(&self, class: usize) -> Result<ClassEntry> {
        match &self.slots[class] {
            Slot::Resident(e) => Ok(e.clone()),
            Slot::PagedOut(b) => ClassEntry::from_bytes(b, self.layers, self.m, self.dim),
        }
    }

    /// Every class's prompts under their registry names.
    pub fn export_prompts(&self) -> Result<Vec<(String, Tensor<f32>)>> {
        let mut out = Vec::new();
        for c in 0..self.classes() {
            let e = self.entry_copy(c)?;
            for (l, p) in e.prompts.into_iter().enumerate() {
                out.push((class_prompt_name(c, l), p));
            }
        }
        Ok(out)
    }

    /// Every class's moments as (registry name, moments).
    pub fn export_moments(&self) -> Result<Vec<(String, Moments)>> {
        let mut out = Vec::new();
        for c in 0..self.classes() {
            let e = self.entry_copy(c)?;
            for (l, m) in e.moments.into_iter().enumerate() {
                out.push((class_prompt_name(c, l), m));
            }
        }
        Ok(out)
    }

    /// Overwrites one class's prompts and moments, resident or not.
    pub fn replace(&mut self, class: usize, entry: ClassEntry) -> Result<()> {
        if entry.prompts.len() != self.layers
            || entry
                .prompts
                .iter()
                .any(|p| p.shape() != [self.m, self.dim])
        {
            return Err(Error::Paging(format!(
                "class {class}: prompt geometry mismatch"
            )));
        }
        let resident = self.is_resident(class);
        self.slots[class] = if resident {
            Slot::Resident(entry)
        } else {
            Slot::PagedOut(entry.to_bytes())
        };
        self.refresh_bytes();
        Ok(())
    }

    pub fn entry(&self, class: usize) -> Result<ClassEntry> {
        self.entry_copy(class)
    }
}
